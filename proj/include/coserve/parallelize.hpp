#pragma once

#include <algorithm>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "coserve/peft_types.hpp"

namespace coserve {

// Boundary layout a bypass must match: the backbone states of the tensors it
// reads from and adds into.
struct BoundaryStates {
  std::vector<TensorDim> attach_in;
  std::vector<TensorDim> attach_out;
};

struct InsertedOp {
  std::string site;  // tensor the op was inserted after
  OpKind kind = OpKind::Identity;
  int dim = 0;

  bool operator==(const InsertedOp&) const = default;
};

struct CandidatePcg {
  Pcg graph;  // bypass ops + inserted parallelization ops, concrete layouts
  std::vector<InsertedOp> inserted;
  std::string in_tensor;   // graph input (attach-in) id
  std::string out_tensor;  // final output id after trailing insertions
  int comm_ops = 0;
  double cost_ms = 0.0;
  std::string signature;  // canonical inserted-op encoding, defines ordering
};

// Analytic stand-in for a profiled cost model: per-op compute time plus
// communication volume over a configured link.
struct ParallelCostModel {
  double device_flops_per_ms = 1e9;   // sustained flops per device per ms
  double link_bytes_per_ms = 1e7;     // interconnect bandwidth
  double dtype_bytes = 2.0;

  double op_cost_ms(const OperatorNode& op, const Pcg& g) const {
    auto elems = [&](const std::string& id) -> double {
      const ParallelTensor* t = g.find_tensor(id);
      return t ? static_cast<double>(t->elem_count()) : 0.0;
    };
    if (is_parallel_op(op.kind)) {
      double bytes = elems(op.inputs[0]) * dtype_bytes;
      double factor = op.kind == OpKind::Reduce ? 2.0 : 1.0;  // allreduce moves twice
      return factor * bytes / link_bytes_per_ms;
    }
    double flops = 0.0;
    if (op.kind == OpKind::MatMul) {
      const ParallelTensor* a = g.find_tensor(op.inputs[0]);
      const ParallelTensor* b = g.find_tensor(op.inputs[1]);
      if (a && b && a->dims.size() == 2 && b->dims.size() == 2)
        flops = 2.0 * a->dims[0].extent * a->dims[1].extent * b->dims[1].extent;
    } else {
      flops = elems(op.outputs.empty() ? op.inputs[0] : op.outputs[0]);
    }
    // sharded compute splits across devices
    int shard = 1;
    for (const auto& in : op.inputs) {
      const ParallelTensor* t = g.find_tensor(in);
      if (!t) continue;
      for (const auto& d : t->dims)
        if (d.state.kind == DimKind::Partitioned) shard = std::max(shard, d.state.degree);
    }
    return flops / shard / device_flops_per_ms;
  }

  double graph_cost_ms(const Pcg& g) const {
    double total = 0.0;
    for (const auto& op : g.ops) total += op_cost_ms(op, g);
    return total;
  }
};

// Layout inference for one operator; throws on illegal transitions.
inline std::vector<TensorDim> infer_states(const OperatorNode& op,
                                           const std::vector<std::vector<TensorDim>>& inputs) {
  auto out = infer_op_dims(op, inputs);
  if (!out)
    throw std::runtime_error(std::string("state inference failed for ") + op_kind_name(op.kind));
  return *out;
}

namespace detail {

// One insertion option at a site. Encoded order defines the lexicographic
// candidate ordering: none < partition(dim 0..) < combine < replicate < reduce.
struct SiteChoice {
  enum What { None, Partition, Combine, Replicate, Reduce } what = None;
  int dim = 0;

  int code() const {
    switch (what) {
      case None: return 0;
      case Partition: return 1 + dim;
      case Combine: return 100;
      case Replicate: return 101;
      case Reduce: return 102;
    }
    return 0;
  }
};

inline std::optional<std::vector<TensorDim>> apply_choice(const SiteChoice& c,
                                                          const std::vector<TensorDim>& dims,
                                                          int degree) {
  if (c.what == SiteChoice::None) return dims;
  OperatorNode op;
  op.dim = c.dim;
  op.degree = degree;
  switch (c.what) {
    case SiteChoice::Partition: op.kind = OpKind::Partition; break;
    case SiteChoice::Combine: op.kind = OpKind::Combine; break;
    case SiteChoice::Replicate: op.kind = OpKind::Replicate; break;
    case SiteChoice::Reduce: op.kind = OpKind::Reduce; break;
    default: return dims;
  }
  return infer_op_dims(op, {dims});
}

inline OpKind choice_op_kind(const SiteChoice& c) {
  switch (c.what) {
    case SiteChoice::Partition: return OpKind::Partition;
    case SiteChoice::Combine: return OpKind::Combine;
    case SiteChoice::Replicate: return OpKind::Replicate;
    case SiteChoice::Reduce: return OpKind::Reduce;
    default: return OpKind::Identity;
  }
}

inline std::string choice_name(const SiteChoice& c) {
  switch (c.what) {
    case SiteChoice::None: return "-";
    case SiteChoice::Partition: return "partition" + std::to_string(c.dim);
    case SiteChoice::Combine: return "combine";
    case SiteChoice::Replicate: return "replicate";
    case SiteChoice::Reduce: return "reduce";
  }
  return "-";
}

}  // namespace detail

// Enumerates parallelization candidates for a bypass given fixed backbone
// boundary layouts. Insertion sites are the bypass activation edges (the
// attach-in tensor, each internal activation, and the output); each site
// takes at most `budget` inserted parallelization ops, applied before the
// tensor's consumers. Weight layouts are inferred, never enumerated: the
// contracted dimension follows the activation, remaining dims stay
// non-parallel (replicated weights when the activation is replicated).
// Returned candidates validate and are ordered lexicographically by the
// inserted-op sequence.
inline std::vector<CandidatePcg> enumerate_candidates(const BypassNetwork& bypass,
                                                      const BoundaryStates& boundary,
                                                      int degree, int budget = 1) {
  using detail::SiteChoice;
  if (degree < 1) throw std::invalid_argument("enumerate_candidates: degree must be >= 1");
  if (budget < 1 || budget > 2)
    throw std::invalid_argument("enumerate_candidates: budget must be 1 or 2");

  auto order = bypass.graph.topo_order();
  if (!order) throw std::invalid_argument("enumerate_candidates: bypass graph is cyclic");

  // Site list: attach-in first, then each op output in topo order.
  std::vector<std::string> sites{bypass.attach_in};
  for (std::size_t idx : *order)
    for (const auto& out : bypass.graph.ops[idx].outputs) sites.push_back(out);

  // Per-site options; a site's option is a sequence of <= budget steps.
  std::vector<SiteChoice> base_options;
  base_options.push_back({SiteChoice::None, 0});
  std::size_t max_rank = 0;
  for (const auto& t : bypass.graph.tensors) max_rank = std::max(max_rank, t.dims.size());
  max_rank = std::max(max_rank, boundary.attach_in.size());
  if (degree > 1) {
    for (std::size_t d = 0; d < max_rank; ++d)
      base_options.push_back({SiteChoice::Partition, static_cast<int>(d)});
    base_options.push_back({SiteChoice::Combine, 0});
    base_options.push_back({SiteChoice::Replicate, 0});
    base_options.push_back({SiteChoice::Reduce, 0});
  }
  std::vector<std::vector<SiteChoice>> site_options;
  for (const auto& first : base_options) {
    site_options.push_back({first});
    if (budget == 2 && first.what != SiteChoice::None)
      for (const auto& second : base_options)
        if (second.what != SiteChoice::None) site_options.push_back({first, second});
  }

  // Combine ops need the partitioned dim; fix it up during application.
  auto apply_steps = [&](std::vector<SiteChoice> steps, const std::vector<TensorDim>& dims)
      -> std::optional<std::pair<std::vector<TensorDim>, std::vector<SiteChoice>>> {
    std::vector<TensorDim> cur = dims;
    for (auto& s : steps) {
      if (s.what == SiteChoice::Combine || s.what == SiteChoice::Reduce) {
        int found = -1;
        for (std::size_t d = 0; d < cur.size(); ++d)
          if ((s.what == SiteChoice::Combine && cur[d].state.kind == DimKind::Partitioned) ||
              (s.what == SiteChoice::Reduce && cur[d].state.kind == DimKind::PreReduce))
            found = static_cast<int>(d);
        if (found < 0) return std::nullopt;
        s.dim = found;
      }
      auto next = detail::apply_choice(s, cur, degree);
      if (!next) return std::nullopt;
      cur = *next;
    }
    return std::make_pair(cur, steps);
  };

  std::vector<CandidatePcg> result;
  std::vector<std::size_t> pick(sites.size(), 0);

  auto build_candidate = [&]() {
    // Simulate layouts through the bypass in topo order.
    std::map<std::string, std::vector<TensorDim>> layout;      // post-insertion layouts
    std::map<std::string, std::string> alias;                  // raw id -> consumed id
    std::map<std::string, std::vector<SiteChoice>> site_steps; // resolved steps per site

    auto site_index = [&](const std::string& id) -> int {
      for (std::size_t i = 0; i < sites.size(); ++i)
        if (sites[i] == id) return static_cast<int>(i);
      return -1;
    };

    // attach-in
    {
      auto applied = apply_steps(site_options[pick[0]], boundary.attach_in);
      if (!applied) return;
      layout[bypass.attach_in] = applied->first;
      site_steps[bypass.attach_in] = applied->second;
    }

    for (std::size_t idx : *order) {
      const OperatorNode& op = bypass.graph.ops[idx];
      std::vector<std::vector<TensorDim>> ins;
      std::vector<bool> is_weight;
      for (const auto& in : op.inputs) {
        const ParallelTensor* t = bypass.graph.find_tensor(in);
        bool weight = t && t->kind == ElemKind::Weight;
        is_weight.push_back(weight);
        if (weight) {
          ins.push_back(t->dims);  // filled in below from the activation layout
        } else {
          auto it = layout.find(in);
          if (it == layout.end()) return;  // unexpected dangling input
          ins.push_back(it->second);
        }
      }
      // infer weight layouts from the activation operand
      if (op.kind == OpKind::MatMul && ins.size() == 2) {
        if (is_weight[1] && !is_weight[0]) {
          for (auto& d : ins[1]) d.state = nonpar();
          const DimState& k = ins[0][1].state;
          if (k.kind == DimKind::Partitioned) ins[1][0].state = k;
          if (ins[0][0].state.kind == DimKind::Replicated ||
              ins[0][1].state.kind == DimKind::Replicated)
            ins[1][0].state = replicated(degree);
        } else if (is_weight[0] && !is_weight[1]) {
          for (auto& d : ins[0]) d.state = nonpar();
          const DimState& k = ins[1][0].state;
          if (k.kind == DimKind::Partitioned) ins[0][1].state = k;
          if (ins[1][0].state.kind == DimKind::Replicated ||
              ins[1][1].state.kind == DimKind::Replicated)
            ins[0][1].state = replicated(degree);
        }
      } else if ((op.kind == OpKind::ElemMul || op.kind == OpKind::Add) && ins.size() == 2) {
        for (std::size_t i = 0; i < 2; ++i)
          if (is_weight[i] && !is_weight[1 - i] && ins[i].size() == ins[1 - i].size())
            for (std::size_t d = 0; d < ins[i].size(); ++d) ins[i][d].state = ins[1 - i][d].state;
      }
      auto out = infer_op_dims(op, ins);
      if (!out) return;
      // remember resolved weight layouts
      for (std::size_t i = 0; i < op.inputs.size(); ++i)
        if (is_weight[i]) layout[op.inputs[i]] = ins[i];

      const std::string& out_id = op.outputs[0];
      int si = site_index(out_id);
      auto applied = apply_steps(site_options[pick[si]], *out);
      if (!applied) return;
      layout[out_id + ".raw_marker"] = *out;  // pre-insertion layout
      layout[out_id] = applied->first;
      site_steps[out_id] = applied->second;
    }

    // boundary check at attach-out
    if (!(layout[bypass.output] == boundary.attach_out)) return;

    // Materialize the candidate graph.
    CandidatePcg cand;
    cand.in_tensor = bypass.attach_in;
    Pcg& g = cand.graph;

    auto add_activation = [&](const std::string& id, const std::vector<TensorDim>& dims,
                              const std::string& producer) {
      ParallelTensor t;
      t.id = id;
      t.dims = dims;
      t.producer = producer;
      g.add_tensor(t);
    };

    // insertion chain after tensor `raw`; returns the id consumers should read
    int inserted_counter = 0;
    auto materialize_site = [&](const std::string& raw, const std::vector<TensorDim>& raw_dims) {
      std::string cur = raw;
      std::vector<TensorDim> cur_dims = raw_dims;
      for (const auto& step : site_steps[raw]) {
        if (step.what == SiteChoice::None) continue;
        OperatorNode op;
        op.id = raw + ".ins" + std::to_string(inserted_counter++);
        op.kind = detail::choice_op_kind(step);
        op.dim = step.dim;
        op.degree = degree;
        op.inputs = {cur};
        std::string out_id = op.id + ".out";
        op.outputs = {out_id};
        auto next = detail::apply_choice(step, cur_dims, degree);
        g.add_op(op);
        add_activation(out_id, *next, op.id);
        cand.inserted.push_back({raw, op.kind, step.dim});
        cur = out_id;
        cur_dims = *next;
      }
      alias[raw] = cur;
    };

    add_activation(bypass.attach_in, boundary.attach_in, "");
    materialize_site(bypass.attach_in, boundary.attach_in);

    for (std::size_t idx : *order) {
      OperatorNode op = bypass.graph.ops[idx];
      for (auto& in : op.inputs) {
        auto it = alias.find(in);
        if (it != alias.end()) in = it->second;
      }
      // weights with resolved layouts
      for (const auto& in_raw : bypass.graph.ops[idx].inputs) {
        const ParallelTensor* t = bypass.graph.find_tensor(in_raw);
        if (t && t->kind == ElemKind::Weight && !g.find_tensor(in_raw)) {
          ParallelTensor w = *t;
          w.dims = layout[in_raw];
          g.add_tensor(w);
        }
      }
      const std::string& out_id = op.outputs[0];
      g.add_op(op);
      add_activation(out_id, layout[out_id + ".raw_marker"], op.id);
      materialize_site(out_id, layout[out_id + ".raw_marker"]);
    }
    cand.out_tensor = alias[bypass.output];

    for (const auto& op : g.ops)
      if (is_parallel_op(op.kind)) ++cand.comm_ops;

    // canonical signature: per-site resolved step codes
    std::string sig;
    for (const auto& s : sites) {
      sig += s + "=";
      const auto& steps = site_steps[s];
      bool any = false;
      for (const auto& st : steps)
        if (st.what != SiteChoice::None) {
          sig += detail::choice_name(st) + ",";
          any = true;
        }
      if (!any) sig += "-";
      sig += ";";
    }
    cand.signature = sig;
    result.push_back(std::move(cand));
  };

  // cartesian product over sites, lexicographic in option order
  std::size_t total = 1;
  for (std::size_t i = 0; i < sites.size(); ++i) total *= site_options.size();
  for (std::size_t combo = 0; combo < total; ++combo) {
    std::size_t rest = combo;
    for (std::size_t i = 0; i < sites.size(); ++i) {
      pick[sites.size() - 1 - i] = rest % site_options.size();
      rest /= site_options.size();
    }
    build_candidate();
  }

  // dedup identical signatures (budget-2 sequences can collide), keep first
  std::vector<CandidatePcg> unique;
  for (auto& c : result) {
    bool seen = false;
    for (const auto& u : unique)
      if (u.signature == c.signature) {
        seen = true;
        break;
      }
    if (!seen) unique.push_back(std::move(c));
  }

  std::stable_sort(unique.begin(), unique.end(),
                   [](const CandidatePcg& a, const CandidatePcg& b) {
                     return a.signature < b.signature;
                   });
  return unique;
}

// Lowest estimated cost; ties broken by fewest inserted communication ops,
// then enumeration order.
inline const CandidatePcg& select_best(std::vector<CandidatePcg>& candidates,
                                       const ParallelCostModel& cost_model) {
  if (candidates.empty())
    throw std::runtime_error("select_best: no parallelization strategy found");
  for (auto& c : candidates) c.cost_ms = cost_model.graph_cost_ms(c.graph);
  std::size_t best = 0;
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const auto& a = candidates[i];
    const auto& b = candidates[best];
    if (a.cost_ms < b.cost_ms ||
        (a.cost_ms == b.cost_ms && a.comm_ops < b.comm_ops))
      best = i;
  }
  return candidates[best];
}

}  // namespace coserve
