#pragma once

#include <stdexcept>
#include <string>

#include "coserve/peft_types.hpp"

namespace coserve {

// Low-rank bypass: out = (X A) B with A: [in_dim, rank], B: [rank, out_dim],
// both trainable. Attaches additively at `target`. `rows` is the leading
// (token) extent of the bypass activations; callers attaching to a concrete
// backbone tensor pass its row extent.
inline BypassNetwork build_lora_block(long in_dim, int rank, const std::string& target,
                                      long out_dim = 0, long rows = 1,
                                      const std::string& prefix = "lora") {
  if (out_dim == 0) out_dim = in_dim;
  if (rank < 1) throw std::invalid_argument("lora: rank must be >= 1");
  if (rank > in_dim || rank > out_dim)
    throw std::invalid_argument("lora: rank exceeds projection width");

  BypassNetwork b;
  b.kind = BypassKind::Lora;
  b.attach_in = target;
  b.attach_out = target;

  Pcg& g = b.graph;
  g.add_tensor({prefix + ".a", {{in_dim, nonpar()}, {rank, nonpar()}}, "", ElemKind::Weight});
  g.add_tensor({prefix + ".b", {{rank, nonpar()}, {out_dim, nonpar()}}, "", ElemKind::Weight});
  g.add_tensor({prefix + ".u", {{rows, nonpar()}, {rank, nonpar()}}, prefix + ".mm_a",
                ElemKind::Activation});
  g.add_tensor({prefix + ".v", {{rows, nonpar()}, {out_dim, nonpar()}}, prefix + ".mm_b",
                ElemKind::Activation});
  g.add_op({prefix + ".mm_a", OpKind::MatMul, {target, prefix + ".a"}, {prefix + ".u"}, true});
  g.add_op({prefix + ".mm_b",
            OpKind::MatMul,
            {prefix + ".u", prefix + ".b"},
            {prefix + ".v"},
            true});
  b.output = prefix + ".v";
  return b;
}

// Rewrites an elementwise scaling node Y = X (.) W into the additive form
// Y = X + X (.) (W - 1): the backbone path becomes an identity and the
// returned bypass carries the trainable part. The ones-shift is kept as a
// frozen constant so the bypass trainable count equals W's.
inline BypassNetwork rewrite_ia3(Pcg& g, const std::string& elem_mul_op) {
  OperatorNode* op = g.find_op(elem_mul_op);
  if (!op || op->kind != OpKind::ElemMul)
    throw std::invalid_argument("ia3 rewrite: node is not an elementwise multiplication");
  // identify the weight operand
  std::string x_id, w_id;
  for (const auto& in : op->inputs) {
    const auto* t = g.find_tensor(in);
    if (t && t->kind == ElemKind::Weight)
      w_id = in;
    else
      x_id = in;
  }
  if (w_id.empty() || x_id.empty())
    throw std::invalid_argument("ia3 rewrite: node lacks a weight operand");
  const ParallelTensor w = *g.find_tensor(w_id);

  std::string prefix = elem_mul_op + ".ia3";
  BypassNetwork b;
  b.kind = BypassKind::Ia3;
  b.attach_in = x_id;
  b.attach_out = op->outputs[0];

  Pcg& bg = b.graph;
  ParallelTensor wt = w;
  wt.id = prefix + ".w";
  wt.producer.clear();
  bg.add_tensor(wt);
  ParallelTensor neg_ones = w;
  neg_ones.id = prefix + ".neg_ones";
  neg_ones.producer.clear();
  neg_ones.role = "const";  // frozen -1 entries; never receives gradients
  bg.add_tensor(neg_ones);
  ParallelTensor shifted = w;
  shifted.id = prefix + ".w_shift";
  shifted.kind = ElemKind::Activation;
  shifted.producer = prefix + ".shift";
  bg.add_tensor(shifted);
  const ParallelTensor* x = g.find_tensor(x_id);
  ParallelTensor out;
  out.id = prefix + ".out";
  out.dims = x ? x->dims : w.dims;
  out.producer = prefix + ".scale";
  bg.add_tensor(out);
  bg.add_op({prefix + ".shift",
             OpKind::Add,
             {prefix + ".w", prefix + ".neg_ones"},
             {prefix + ".w_shift"},
             true});
  bg.add_op({prefix + ".scale", OpKind::ElemMul, {x_id, prefix + ".w_shift"}, {out.id}, false});
  b.output = out.id;

  // backbone path becomes an identity add
  op->kind = OpKind::Identity;
  op->inputs = {x_id};
  op->trainable = false;
  return b;
}

// Non-destructive attachment: record the bypass on the model and size its
// activations from the attach-in tensor. The backbone op and edge sets are
// untouched.
inline void attach_bypass(PeftModel& m, BypassNetwork b) {
  const ParallelTensor* in = m.backbone.find_tensor(b.attach_in);
  const ParallelTensor* out = m.backbone.find_tensor(b.attach_out);
  if (!in || !out)
    throw std::invalid_argument("attach_bypass: unknown attachment tensor");
  if (!in->dims.empty())
    for (auto& t : b.graph.tensors)
      if (t.kind == ElemKind::Activation && !t.dims.empty() && t.dims[0].extent == 1)
        t.dims[0].extent = in->dims[0].extent;
  m.bypasses.push_back(std::move(b));
}

// Materializes the Y = f_B(X) + f_A(X) formulation as a single graph for
// autodiff: bypass ops are copied in and an explicit add joins the bypass
// output with the backbone tensor; downstream consumers read the joined
// tensor. The input PeftModel keeps its backbone intact.
inline Pcg fuse_peft(const PeftModel& m) {
  Pcg g = m.backbone;
  int idx = 0;
  for (const auto& b : m.bypasses) {
    std::string tag = "bypass" + std::to_string(idx++);
    const ParallelTensor* base = g.find_tensor(b.attach_out);
    if (!base) throw std::invalid_argument("fuse_peft: unknown attach_out");
    ParallelTensor joined = *base;
    joined.id = b.attach_out + "." + tag + ".sum";
    joined.producer = tag + ".add";

    // Downstream consumers read the joined value. The bypass itself reads the
    // pre-join tensor (attach_in may equal attach_out), so rewire before
    // copying the bypass ops in.
    for (auto& o : g.ops)
      for (auto& in : o.inputs)
        if (in == b.attach_out) in = joined.id;

    for (const auto& t : b.graph.tensors) g.add_tensor(t);
    for (const auto& o : b.graph.ops) g.add_op(o);
    g.add_tensor(joined);
    g.add_op({tag + ".add", OpKind::Add, {b.attach_out, b.output}, {joined.id}, false});
    if (g.loss_tensor == b.attach_out) g.loss_tensor = joined.id;
  }
  return g;
}

}  // namespace coserve
