#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "coserve/autodiff.hpp"

namespace coserve {

struct PruneOptions {
  bool remat = true;
  bool bitmask = true;
  double remat_threshold_flops = 0.0;  // 0: derived via default_remat_threshold by callers
};

// Recompute anything cheaper than one [seqlen, hidden] x [hidden, hidden]
// matmul; never recompute the big projections themselves.
inline double default_remat_threshold(long seqlen, long hidden) {
  return 2.0 * static_cast<double>(seqlen) * hidden * hidden;
}

struct PruningPlan {
  std::vector<std::string> memorize;       // A
  std::vector<std::string> rematerialize;  // R
  std::vector<std::string> compress;       // C, kept as sign bitmasks
  std::map<std::string, long> elem_count;  // per referenced tensor
  long total_elems_before = 0;             // retain-all activation elements
  long total_elems_after = 0;              // memorized elements after pruning
};

struct PruneResult {
  PruningPlan plan;
  BackwardGraph pruned;  // surviving backward graph
};

namespace detail {

inline double recompute_flops(const OperatorNode& op, const Pcg& g) {
  auto elems = [&](const std::string& id) -> double {
    const ParallelTensor* t = g.find_tensor(id);
    return t ? static_cast<double>(t->elem_count()) : 0.0;
  };
  if (op.kind == OpKind::MatMul) {
    const ParallelTensor* a = g.find_tensor(op.inputs[0]);
    const ParallelTensor* b = g.find_tensor(op.inputs[1]);
    if (a && b && a->dims.size() == 2 && b->dims.size() == 2)
      return 2.0 * a->dims[0].extent * a->dims[1].extent * b->dims[1].extent;
  }
  return op.outputs.empty() ? 0.0 : elems(op.outputs[0]);
}

// Drops backward outputs with no remaining consumer until fixpoint. Trainable
// weight gradients are optimizer outputs and always kept. Returns true if
// anything was removed.
inline bool prune_to_fixpoint(BackwardGraph& bg) {
  bool removed_any = false;
  bool changed = true;
  while (changed) {
    changed = false;
    // live consumer set over gradient tensors
    std::set<std::string> consumed;
    for (const auto& n : bg.nodes)
      for (const auto& o : n.outputs)
        for (const auto& gneed : o.grad_needs) consumed.insert(gneed);
    for (auto& n : bg.nodes) {
      for (auto it = n.outputs.begin(); it != n.outputs.end();) {
        if (!it->trainable && !consumed.count(it->id)) {
          it = n.outputs.erase(it);  // UpdateInput: I(n) shrinks with the output
          changed = true;
          removed_any = true;
        } else {
          ++it;
        }
      }
    }
    bg.nodes.erase(std::remove_if(bg.nodes.begin(), bg.nodes.end(),
                                  [](const BackwardNode& n) { return n.outputs.empty(); }),
                   bg.nodes.end());
  }
  return removed_any;
}

}  // namespace detail

inline PruneResult prune(const Pcg& g, const BackwardGraph& g_bar,
                         const PruneOptions& opts = {}) {
  PruneResult res;
  res.pruned = g_bar;

  // Step 1: drop frozen-weight gradients, then everything unconsumed.
  for (auto& n : res.pruned.nodes) {
    n.outputs.erase(std::remove_if(n.outputs.begin(), n.outputs.end(),
                                   [](const BackwardOutput& o) {
                                     return o.weight_grad && !o.trainable;
                                   }),
                    n.outputs.end());
  }
  detail::prune_to_fixpoint(res.pruned);

  // Surviving forward needs. Only produced activations are candidates for A;
  // weights and graph inputs are available without memorization.
  std::set<std::string> value_need, sign_need;
  for (const auto& n : res.pruned.nodes)
    for (const auto& o : n.outputs)
      for (const auto& f : o.fwd_needs) {
        const ParallelTensor* t = g.find_tensor(f.tensor);
        if (!t || t->kind == ElemKind::Weight || t->producer.empty()) continue;
        (f.sign_only ? sign_need : value_need).insert(f.tensor);
      }

  std::set<std::string> a_set = value_need;
  std::set<std::string> c_set;
  if (opts.bitmask)
    for (const auto& t : sign_need)
      if (!value_need.count(t)) c_set.insert(t);  // sign is the only surviving use
  else
    for (const auto& t : sign_need)
      if (!value_need.count(t)) a_set.insert(t);

  // Step 2: rematerialize t when its producer's inputs are all available and
  // recomputation is cheap. Available: memorized, weights, or graph inputs.
  std::set<std::string> r_set;
  if (opts.remat) {
    double threshold = opts.remat_threshold_flops;
    std::vector<std::string> snapshot(a_set.begin(), a_set.end());
    for (const auto& t : snapshot) {
      const OperatorNode* prod = g.producer_of(t);
      if (!prod) continue;
      bool inputs_available = true;
      for (const auto& in : prod->inputs) {
        const ParallelTensor* it = g.find_tensor(in);
        bool available = a_set.count(in) || !it || it->kind == ElemKind::Weight ||
                         it->producer.empty();
        if (!available) {
          inputs_available = false;
          break;
        }
      }
      if (inputs_available && detail::recompute_flops(*prod, g) < threshold) {
        a_set.erase(t);
        r_set.insert(t);
      }
    }
  }

  PruningPlan& plan = res.plan;
  plan.memorize.assign(a_set.begin(), a_set.end());
  plan.rematerialize.assign(r_set.begin(), r_set.end());
  plan.compress.assign(c_set.begin(), c_set.end());
  for (const auto& t : g.tensors) {
    if (t.kind == ElemKind::Weight || t.producer.empty()) continue;
    if (t.kind == ElemKind::Activation || t.kind == ElemKind::Loss)
      plan.total_elems_before += t.elem_count();
  }
  auto count = [&](const std::vector<std::string>& ids) {
    long n = 0;
    for (const auto& id : ids) {
      const ParallelTensor* t = g.find_tensor(id);
      long e = t ? t->elem_count() : 0;
      plan.elem_count[id] = e;
      n += e;
    }
    return n;
  };
  plan.total_elems_after = count(plan.memorize);
  count(plan.rematerialize);
  count(plan.compress);
  return res;
}

// ---------------------------------------------------------------------------
// Memory accounting (component-wise breakdown report)
// ---------------------------------------------------------------------------

struct MemoryReport {
  struct Row {
    std::string category;
    double bytes = 0.0;
    double percent = 0.0;
  };
  std::vector<Row> rows;
  double total_bytes = 0.0;
  // activation overhead = memorized + bitmask + remat workspace + gradient
  // workspace; the reduction ratio compares against retaining everything.
  double activation_overhead_bytes = 0.0;
  double retain_all_activation_bytes = 0.0;
  double reduction_ratio = 0.0;

  double find(const std::string& category) const {
    for (const auto& r : rows)
      if (r.category == category) return r.bytes;
    return 0.0;
  }
};

namespace detail {

// Peak live gradient bytes while executing the backward graph in order.
// Gradients of sequence-length tensors shrink with the token window, except
// accumulated kv gradients which span the full sequence.
inline double peak_gradient_workspace(const Pcg& g, const BackwardGraph& bg, long seqlen,
                                      long token_window, double dtype_bytes) {
  if (token_window <= 0 || token_window > seqlen) token_window = seqlen;
  double window_scale = static_cast<double>(token_window) / static_cast<double>(seqlen);

  auto grad_bytes = [&](const std::string& grad, const std::string& wrt) -> double {
    const ParallelTensor* t = g.find_tensor(wrt);
    if (!t) return 0.0;
    double bytes = static_cast<double>(t->elem_count()) * dtype_bytes;
    bool seq_scaled = !t->dims.empty() && t->dims[0].extent == seqlen && t->role != "kv";
    (void)grad;
    return seq_scaled ? bytes * window_scale : bytes;
  };

  // last consumer index per gradient tensor
  std::map<std::string, std::size_t> last_use;
  std::map<std::string, std::string> wrt_of;
  for (std::size_t i = 0; i < bg.nodes.size(); ++i)
    for (const auto& o : bg.nodes[i].outputs) {
      wrt_of[o.id] = o.wrt;
      for (const auto& gneed : o.grad_needs) last_use[gneed] = i;
    }

  const ParallelTensor* loss_t = nullptr;
  std::string seed_wrt;
  if (!bg.seed.empty() && bg.seed.rfind("d:", 0) == 0) seed_wrt = bg.seed.substr(2);
  loss_t = g.find_tensor(seed_wrt);

  double live = 0.0, peak = 0.0;
  std::map<std::string, double> live_bytes;
  if (loss_t && last_use.count(bg.seed)) {
    live_bytes[bg.seed] = grad_bytes(bg.seed, seed_wrt);
    live += live_bytes[bg.seed];
  }
  peak = live;
  for (std::size_t i = 0; i < bg.nodes.size(); ++i) {
    for (const auto& o : bg.nodes[i].outputs) {
      if (o.trainable) continue;  // optimizer-owned, accounted as peft gradients
      double b = grad_bytes(o.id, o.wrt);
      live_bytes[o.id] = b;
      live += b;
    }
    peak = std::max(peak, live);
    for (auto it = live_bytes.begin(); it != live_bytes.end();) {
      auto lu = last_use.find(it->first);
      if (lu == last_use.end() || lu->second <= i) {
        live -= it->second;
        it = live_bytes.erase(it);
      } else {
        ++it;
      }
    }
  }
  return peak;
}

}  // namespace detail

// Appendix-style component breakdown for a pruned model. `token_window` of 0
// means sequence-level backward; smaller windows shrink transient gradient
// buffers. Optimizer state follows Adam: two moments per trainable parameter.
inline MemoryReport account_memory(const Pcg& g, const PruneResult& pruned, long seqlen,
                                   long batch, double dtype_bytes, long token_window = 0) {
  MemoryReport rep;
  double scale = static_cast<double>(batch);

  double frozen_w = 0.0, train_w = 0.0;
  for (const auto& t : g.tensors) {
    if (t.kind != ElemKind::Weight) continue;
    bool trainable = false;
    for (const auto* c : g.consumers_of(t.id))
      if (c->trainable && t.role != "const") trainable = true;
    (trainable ? train_w : frozen_w) += t.elem_count() * dtype_bytes;
  }

  auto sum_ids = [&](const std::vector<std::string>& ids) {
    double bytes = 0.0;
    for (const auto& id : ids) {
      const ParallelTensor* t = g.find_tensor(id);
      if (t) bytes += t->elem_count() * dtype_bytes;
    }
    return bytes;
  };
  double memorized = scale * sum_ids(pruned.plan.memorize);
  double bitmask = 0.0;
  for (const auto& id : pruned.plan.compress) {
    const ParallelTensor* t = g.find_tensor(id);
    if (t) bitmask += scale * t->elem_count() / 8.0;  // 1 bit per element
  }
  double remat_ws = 0.0;
  for (const auto& id : pruned.plan.rematerialize) {
    const ParallelTensor* t = g.find_tensor(id);
    if (t) remat_ws = std::max(remat_ws, scale * t->elem_count() * dtype_bytes);
  }
  double grad_ws = scale * detail::peak_gradient_workspace(g, pruned.pruned, seqlen,
                                                           token_window, dtype_bytes);

  rep.rows.push_back({"backbone_weights", frozen_w, 0.0});
  rep.rows.push_back({"peft_weights", train_w, 0.0});
  rep.rows.push_back({"peft_gradients", train_w, 0.0});
  rep.rows.push_back({"optimizer_state", 2.0 * train_w, 0.0});
  rep.rows.push_back({"memorized_activations", memorized, 0.0});
  rep.rows.push_back({"activation_bitmasks", bitmask, 0.0});
  rep.rows.push_back({"remat_workspace", remat_ws, 0.0});
  rep.rows.push_back({"gradient_workspace", grad_ws, 0.0});

  for (const auto& r : rep.rows) rep.total_bytes += r.bytes;
  for (auto& r : rep.rows) r.percent = rep.total_bytes > 0 ? 100.0 * r.bytes / rep.total_bytes : 0.0;

  rep.activation_overhead_bytes = memorized + bitmask + remat_ws + grad_ws;
  rep.retain_all_activation_bytes = scale * pruned.plan.total_elems_before * dtype_bytes;
  return rep;
}

// Reduction of activation overhead relative to retaining every forward tensor
// with full-length sequence-level backward buffers.
inline double activation_reduction(const Pcg& g, const BackwardGraph& unpruned,
                                   const MemoryReport& rep, long seqlen, long batch,
                                   double dtype_bytes) {
  double baseline = batch * (static_cast<double>([&] {
                      long n = 0;
                      for (const auto& t : g.tensors)
                        if (t.kind != ElemKind::Weight && !t.producer.empty()) n += t.elem_count();
                      return n;
                    }()) *
                    dtype_bytes) +
                    batch * detail::peak_gradient_workspace(g, unpruned, seqlen, 0, dtype_bytes);
  if (baseline <= 0) return 0.0;
  return 1.0 - rep.activation_overhead_bytes / baseline;
}

}  // namespace coserve
