#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "coserve/autodiff.hpp"
#include "coserve/block_builder.hpp"
#include "coserve/peft.hpp"
#include "coserve/pruning.hpp"
#include "coserve/rng.hpp"

#include "support/graph_eval.hpp"

using namespace coserve;
using testsupport::Env;

namespace {

// frozen linear + low-rank bypass on the same input: y = xW + xAB
Pcg lora_linear_graph() {
  Pcg g;
  g.add_tensor({"x", {{4, nonpar()}, {8, nonpar()}}, "", ElemKind::Activation});
  g.add_tensor({"w", {{8, nonpar()}, {8, nonpar()}}, "", ElemKind::Weight});
  g.add_tensor({"la", {{8, nonpar()}, {2, nonpar()}}, "", ElemKind::Weight});
  g.add_tensor({"lb", {{2, nonpar()}, {8, nonpar()}}, "", ElemKind::Weight});
  g.add_tensor({"h", {{4, nonpar()}, {8, nonpar()}}, "mm_w", ElemKind::Activation});
  g.add_tensor({"u", {{4, nonpar()}, {2, nonpar()}}, "mm_a", ElemKind::Activation});
  g.add_tensor({"v", {{4, nonpar()}, {8, nonpar()}}, "mm_b", ElemKind::Activation});
  g.add_tensor({"y", {{4, nonpar()}, {8, nonpar()}}, "join", ElemKind::Activation});
  g.add_op({"mm_w", OpKind::MatMul, {"x", "w"}, {"h"}, false});
  g.add_op({"mm_a", OpKind::MatMul, {"x", "la"}, {"u"}, true});
  g.add_op({"mm_b", OpKind::MatMul, {"u", "lb"}, {"v"}, true});
  g.add_op({"join", OpKind::Add, {"h", "v"}, {"y"}, false});
  g.loss_tensor = "y";
  return g;
}

// Random frozen backbone chains with a trainable low-rank bypass somewhere.
Pcg random_peft_graph(Rng& rng, int max_ops) {
  Pcg g;
  const long m = 3;
  long width = 2 + rng.uniform_int(0, 3);
  g.add_tensor({"x0", {{m, nonpar()}, {width, nonpar()}}, "", ElemKind::Activation});
  std::vector<std::pair<std::string, long>> frontier{{"x0", width}};
  int next_id = 0;
  auto fresh = [&](const std::string& base) { return base + std::to_string(next_id++); };

  int n_ops = 2 + static_cast<int>(rng.uniform_int(0, max_ops - 2));
  bool bypass_added = false;
  std::string cur = "x0";
  long cur_w = width;
  for (int i = 0; i < n_ops; ++i) {
    double pick = rng.uniform();
    if (!bypass_added && (pick < 0.25 || i == n_ops - 1)) {
      // trainable low-rank bypass: cur + cur*A*B
      long r = 1 + rng.uniform_int(0, 1);
      std::string a = fresh("la"), b = fresh("lb"), u = fresh("u"), v = fresh("v"),
                  s = fresh("s");
      g.add_tensor({a, {{cur_w, nonpar()}, {r, nonpar()}}, "", ElemKind::Weight});
      g.add_tensor({b, {{r, nonpar()}, {cur_w, nonpar()}}, "", ElemKind::Weight});
      g.add_tensor({u, {{m, nonpar()}, {r, nonpar()}}, "mm" + u, ElemKind::Activation});
      g.add_tensor({v, {{m, nonpar()}, {cur_w, nonpar()}}, "mm" + v, ElemKind::Activation});
      g.add_tensor({s, {{m, nonpar()}, {cur_w, nonpar()}}, "add" + s, ElemKind::Activation});
      g.add_op({"mm" + u, OpKind::MatMul, {cur, a}, {u}, true});
      g.add_op({"mm" + v, OpKind::MatMul, {u, b}, {v}, true});
      g.add_op({"add" + s, OpKind::Add, {cur, v}, {s}, false});
      cur = s;
      bypass_added = true;
    } else if (pick < 0.5) {
      long w2 = 2 + rng.uniform_int(0, 3);
      std::string w = fresh("w"), o = fresh("h");
      g.add_tensor({w, {{cur_w, nonpar()}, {w2, nonpar()}}, "", ElemKind::Weight});
      g.add_tensor({o, {{m, nonpar()}, {w2, nonpar()}}, "mm" + o, ElemKind::Activation});
      g.add_op({"mm" + o, OpKind::MatMul, {cur, w}, {o}, false});
      cur = o;
      cur_w = w2;
    } else if (pick < 0.65) {
      std::string o = fresh("rl");
      g.add_tensor({o, {{m, nonpar()}, {cur_w, nonpar()}}, "relu" + o, ElemKind::Activation});
      g.add_op({"relu" + o, OpKind::Relu, {cur}, {o}, false});
      cur = o;
    } else if (pick < 0.8) {
      std::string o = fresh("sm");
      g.add_tensor({o, {{m, nonpar()}, {cur_w, nonpar()}}, "soft" + o, ElemKind::Activation});
      g.add_op({"soft" + o, OpKind::Softmax, {cur}, {o}, false});
      cur = o;
    } else if (pick < 0.9) {
      std::string wv = fresh("sv"), o = fresh("em");
      g.add_tensor({wv, {{cur_w, nonpar()}}, "", ElemKind::Weight});
      g.add_tensor({o, {{m, nonpar()}, {cur_w, nonpar()}}, "emul" + o, ElemKind::Activation});
      bool trainable = rng.uniform() < 0.5;
      g.add_op({"emul" + o, OpKind::ElemMul, {cur, wv}, {o}, trainable});
      cur = o;
    } else {
      // residual with an earlier same-width tensor, if any
      std::string other;
      for (const auto& t : g.tensors)
        if (t.kind == ElemKind::Activation && t.dims.size() == 2 &&
            t.dims[1].extent == cur_w && t.id != cur)
          other = t.id;
      if (other.empty()) continue;
      std::string o = fresh("rs");
      g.add_tensor({o, {{m, nonpar()}, {cur_w, nonpar()}}, "res" + o, ElemKind::Activation});
      g.add_op({"res" + o, OpKind::Add, {cur, other}, {o}, false});
      cur = o;
    }
  }
  (void)frontier;
  g.loss_tensor = cur;
  return g;
}

std::set<std::string> as_set(const std::vector<std::string>& v) {
  return std::set<std::string>(v.begin(), v.end());
}

}  // namespace

TEST_CASE("reverse_autodiff: frozen matmul produces dX and dW with textbook needs") {
  Pcg g;
  g.add_tensor({"x", {{4, nonpar()}, {8, nonpar()}}, "", ElemKind::Activation});
  g.add_tensor({"w", {{8, nonpar()}, {8, nonpar()}}, "", ElemKind::Weight});
  g.add_tensor({"y", {{4, nonpar()}, {8, nonpar()}}, "mm", ElemKind::Activation});
  g.add_op({"mm", OpKind::MatMul, {"x", "w"}, {"y"}, false});
  g.loss_tensor = "y";
  BackwardGraph bg = reverse_autodiff(g);
  REQUIRE(bg.nodes.size() == 1);
  const BackwardNode& n = bg.nodes[0];
  REQUIRE(n.outputs.size() == 2);
  const BackwardOutput& dx = n.outputs[0];
  CHECK(dx.wrt == "x");
  REQUIRE(dx.fwd_needs.size() == 1);
  CHECK(dx.fwd_needs[0].tensor == "w");
  CHECK(dx.grad_needs == std::vector<std::string>{"d:y"});
  const BackwardOutput& dw = n.outputs[1];
  CHECK(dw.wrt == "w");
  CHECK(dw.weight_grad);
  CHECK_FALSE(dw.trainable);
  REQUIRE(dw.fwd_needs.size() == 1);
  CHECK(dw.fwd_needs[0].tensor == "x");
}

TEST_CASE("reverse_autodiff: relu backward needs only the sign pattern") {
  Pcg g;
  g.add_tensor({"x", {{4, nonpar()}, {8, nonpar()}}, "", ElemKind::Activation});
  g.add_tensor({"y", {{4, nonpar()}, {8, nonpar()}}, "r", ElemKind::Activation});
  g.add_op({"r", OpKind::Relu, {"x"}, {"y"}, false});
  g.loss_tensor = "y";
  BackwardGraph bg = reverse_autodiff(g);
  REQUIRE(bg.nodes.size() == 1);
  REQUIRE(bg.nodes[0].outputs.size() == 1);
  REQUIRE(bg.nodes[0].outputs[0].fwd_needs.size() == 1);
  CHECK(bg.nodes[0].outputs[0].fwd_needs[0].tensor == "x");
  CHECK(bg.nodes[0].outputs[0].fwd_needs[0].sign_only);
}

TEST_CASE("reverse_autodiff: add passes gradients through without saved tensors") {
  Pcg g;
  g.add_tensor({"a", {{4, nonpar()}}, "", ElemKind::Activation});
  g.add_tensor({"b", {{4, nonpar()}}, "", ElemKind::Activation});
  g.add_tensor({"y", {{4, nonpar()}}, "s", ElemKind::Activation});
  g.add_op({"s", OpKind::Add, {"a", "b"}, {"y"}, false});
  g.loss_tensor = "y";
  BackwardGraph bg = reverse_autodiff(g);
  REQUIRE(bg.nodes.size() == 1);
  REQUIRE(bg.nodes[0].outputs.size() == 2);
  for (const auto& o : bg.nodes[0].outputs) CHECK(o.fwd_needs.empty());
}

TEST_CASE("reverse_autodiff: unsupported graphs raise") {
  Pcg g;
  g.add_tensor({"x", {{4, nonpar()}}, "", ElemKind::Activation});
  CHECK_THROWS_AS(reverse_autodiff(g), std::invalid_argument);  // no loss designated
}

TEST_CASE("prune: fully frozen mlp keeps no activations") {
  Pcg g;
  g.add_tensor({"x", {{4, nonpar()}, {8, nonpar()}}, "", ElemKind::Activation});
  g.add_tensor({"w1", {{8, nonpar()}, {8, nonpar()}}, "", ElemKind::Weight});
  g.add_tensor({"w2", {{8, nonpar()}, {8, nonpar()}}, "", ElemKind::Weight});
  g.add_tensor({"h1", {{4, nonpar()}, {8, nonpar()}}, "mm1", ElemKind::Activation});
  g.add_tensor({"r1", {{4, nonpar()}, {8, nonpar()}}, "rl", ElemKind::Activation});
  g.add_tensor({"h2", {{4, nonpar()}, {8, nonpar()}}, "mm2", ElemKind::Activation});
  g.add_op({"mm1", OpKind::MatMul, {"x", "w1"}, {"h1"}, false});
  g.add_op({"rl", OpKind::Relu, {"h1"}, {"r1"}, false});
  g.add_op({"mm2", OpKind::MatMul, {"r1", "w2"}, {"h2"}, false});
  g.loss_tensor = "h2";
  auto res = prune(g, reverse_autodiff(g));
  CHECK(res.plan.memorize.empty());
  CHECK(res.plan.rematerialize.empty());
  CHECK(res.plan.compress.empty());
  CHECK(res.pruned.nodes.empty());
}

TEST_CASE("prune: lora beside a frozen linear keeps x and the low-rank mid tensor") {
  Pcg g = lora_linear_graph();
  PruneOptions opts;
  opts.remat = false;
  auto res = prune(g, reverse_autodiff(g), opts);
  auto a = as_set(res.plan.memorize);
  CHECK(a.count("u"));       // needed for d(lb)
  CHECK_FALSE(a.count("h")); // the frozen path's activation is pruned
  CHECK_FALSE(a.count("v"));
  // x is a graph input: available without memorization, so not in A
  CHECK_FALSE(a.count("x"));
  // but the surviving backward still consumes it for d(la)
  bool x_needed = false;
  for (const auto& n : res.pruned.nodes)
    for (const auto& o : n.outputs)
      for (const auto& f : o.fwd_needs)
        if (f.tensor == "x") x_needed = true;
  CHECK(x_needed);
  // with remat on, u is recomputed from x instead of memorized
  auto res2 = prune(g, reverse_autodiff(g),
                    {true, true, default_remat_threshold(4, 8)});
  CHECK(as_set(res2.plan.rematerialize).count("u"));
  CHECK_FALSE(as_set(res2.plan.memorize).count("u"));
}

TEST_CASE("prune: frozen layer downstream of the bypass needs no saved input") {
  // x -> lora-ish trainable matmul -> mid -> frozen linear2 -> y
  Pcg g;
  g.add_tensor({"x", {{4, nonpar()}, {8, nonpar()}}, "", ElemKind::Activation});
  g.add_tensor({"la", {{8, nonpar()}, {8, nonpar()}}, "", ElemKind::Weight});
  g.add_tensor({"w2", {{8, nonpar()}, {8, nonpar()}}, "", ElemKind::Weight});
  g.add_tensor({"mid", {{4, nonpar()}, {8, nonpar()}}, "mm_a", ElemKind::Activation});
  g.add_tensor({"y", {{4, nonpar()}, {8, nonpar()}}, "mm2", ElemKind::Activation});
  g.add_op({"mm_a", OpKind::MatMul, {"x", "la"}, {"mid"}, true});
  g.add_op({"mm2", OpKind::MatMul, {"mid", "w2"}, {"y"}, false});
  g.loss_tensor = "y";
  auto res = prune(g, reverse_autodiff(g), {false, true, 0.0});
  auto a = as_set(res.plan.memorize);
  // d(mid) through linear2 needs only w2; mid itself is never memorized
  CHECK_FALSE(a.count("mid"));
  CHECK(a.empty());  // d(la) needs x (graph input) and d(mid) only
}

TEST_CASE("prune: sufficiency and minimality oracles over random graphs") {
  int checked = 0;
  for (int seed = 0; seed < 200; ++seed) {
    Rng rng(1000 + seed);
    Pcg g = random_peft_graph(rng, 9);  // <= 12 nodes including bypass expansion
    REQUIRE(validate_pcg(g).empty());
    BackwardGraph bg = reverse_autodiff(g);
    auto res = prune(g, bg, {true, true, 64.0});

    Env env = testsupport::random_env(g, rng);
    testsupport::eval_forward(g, env);
    auto oracle = testsupport::eval_backward_full(g, env);
    if (oracle.weight_grads.empty()) continue;
    ++checked;

    auto a = as_set(res.plan.memorize);
    auto r = as_set(res.plan.rematerialize);
    auto c = as_set(res.plan.compress);

    // sufficiency: gradients from the restricted set match the oracle
    auto restricted = testsupport::eval_backward_restricted(g, env, a, r, c);
    REQUIRE(restricted.has_value());
    for (const auto& [w, ref] : oracle.weight_grads) {
      REQUIRE(restricted->count(w));
      INFO("seed " << seed << " weight " << w);
      CHECK(max_rel_err(restricted->at(w), ref) < 1e-12);
    }

    // minimality: dropping any memorized tensor breaks the dependency closure
    for (const auto& t : res.plan.memorize) {
      auto a_minus = a;
      a_minus.erase(t);
      auto broken = testsupport::eval_backward_restricted(g, env, a_minus, r, c);
      INFO("seed " << seed << " tensor " << t << " should be necessary");
      CHECK_FALSE(broken.has_value());
    }
  }
  CHECK(checked > 100);
}

TEST_CASE("prune never removes a backward node feeding a trainable gradient") {
  for (int seed = 0; seed < 50; ++seed) {
    Rng rng(7000 + seed);
    Pcg g = random_peft_graph(rng, 9);
    auto res = prune(g, reverse_autodiff(g));
    // every trainable weight of the forward graph still has its gradient node
    for (const auto& t : g.tensors) {
      if (t.kind != ElemKind::Weight) continue;
      bool trainable = false;
      for (const auto* cop : g.consumers_of(t.id))
        if (cop->trainable && t.role != "const") trainable = true;
      if (!trainable) continue;
      bool found = false;
      for (const auto& n : res.pruned.nodes)
        for (const auto& o : n.outputs)
          if (o.wrt == t.id && o.trainable) found = true;
      INFO("seed " << seed << " trainable weight " << t.id);
      CHECK(found);
    }
  }
}

TEST_CASE("prune is idempotent") {
  for (int seed = 0; seed < 30; ++seed) {
    Rng rng(9000 + seed);
    Pcg g = random_peft_graph(rng, 9);
    auto res = prune(g, reverse_autodiff(g));
    BackwardGraph again = res.pruned;
    CHECK_FALSE(coserve::detail::prune_to_fixpoint(again));
  }
}

TEST_CASE("account_memory: retain-all baseline is the sum of produced forward tensors") {
  Pcg g = lora_linear_graph();
  auto res = prune(g, reverse_autodiff(g));
  long expect = 0;
  for (const auto& t : g.tensors)
    if (t.kind != ElemKind::Weight && !t.producer.empty()) expect += t.elem_count();
  CHECK(res.plan.total_elems_before == expect);
}

TEST_CASE("account_memory: relu bitmask shrinks fp16 activations 16x") {
  // [1024, 4096] relu input at fp16: 8 MiB raw, 0.5 MiB as a bitmask.
  // A trainable matmul upstream keeps the gradient flowing through the relu,
  // so only the sign pattern of its input must be kept.
  Pcg g;
  g.add_tensor({"x", {{1024, nonpar()}, {64, nonpar()}}, "", ElemKind::Activation});
  g.add_tensor({"la", {{64, nonpar()}, {64, nonpar()}}, "", ElemKind::Weight});
  g.add_tensor({"w", {{64, nonpar()}, {4096, nonpar()}}, "", ElemKind::Weight});
  g.add_tensor({"t1", {{1024, nonpar()}, {64, nonpar()}}, "mm_t", ElemKind::Activation});
  g.add_tensor({"pre", {{1024, nonpar()}, {4096, nonpar()}}, "mm", ElemKind::Activation});
  g.add_tensor({"post", {{1024, nonpar()}, {4096, nonpar()}}, "rl", ElemKind::Activation});
  g.add_op({"mm_t", OpKind::MatMul, {"x", "la"}, {"t1"}, true});
  g.add_op({"mm", OpKind::MatMul, {"t1", "w"}, {"pre"}, false});
  g.add_op({"rl", OpKind::Relu, {"pre"}, {"post"}, false});
  g.loss_tensor = "post";

  auto res = prune(g, reverse_autodiff(g), {false, true, 0.0});
  REQUIRE(as_set(res.plan.compress).count("pre"));

  auto rep = account_memory(g, res, 1024, 1, 2.0);
  double raw = 1024.0 * 4096.0 * 2.0;
  CHECK(rep.find("activation_bitmasks") == Catch::Approx(raw / 16.0));
  CHECK(raw == Catch::Approx(8.0 * 1024 * 1024));
  CHECK(rep.find("activation_bitmasks") == Catch::Approx(0.5 * 1024 * 1024));
}

TEST_CASE("account_memory: adam optimizer state is two moments per trainable param") {
  Pcg g = lora_linear_graph();
  auto res = prune(g, reverse_autodiff(g));
  auto rep = account_memory(g, res, 4, 1, 2.0);
  double peft_w = (8.0 * 2 + 2.0 * 8) * 2.0;
  CHECK(rep.find("peft_weights") == Catch::Approx(peft_w));
  CHECK(rep.find("optimizer_state") == Catch::Approx(2.0 * peft_w));
  CHECK(rep.find("backbone_weights") == Catch::Approx(8.0 * 8 * 2.0));
}
