#pragma once

#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "coserve/pcg.hpp"

namespace coserve {

// Reverse-mode AD over a PCG. One backward node per differentiable forward
// node; each backward output (a gradient of one forward-op input) records the
// exact tensors it needs, which is what UpdateInput reduces to when outputs
// are dropped.

inline std::string grad_id(const std::string& t) { return "d:" + t; }

struct GradNeed {
  std::string tensor;     // forward tensor id
  bool sign_only = false; // only the sign pattern is needed (relu)

  bool operator==(const GradNeed&) const = default;
};

struct BackwardOutput {
  std::string id;                       // gradient tensor produced
  std::string wrt;                      // forward tensor this is the gradient of
  bool weight_grad = false;             // gradient of a weight tensor
  bool trainable = false;               // weight gradient the optimizer consumes
  std::vector<std::string> grad_needs;  // gradient tensors required
  std::vector<GradNeed> fwd_needs;      // forward tensors required
};

struct BackwardNode {
  std::string id;
  std::string fwd_op;  // empty for gradient-accumulation nodes
  std::vector<BackwardOutput> outputs;

  std::vector<std::string> input_tensors() const {  // I(n): union over outputs
    std::vector<std::string> in;
    auto push = [&](const std::string& t) {
      for (const auto& x : in)
        if (x == t) return;
      in.push_back(t);
    };
    for (const auto& o : outputs) {
      for (const auto& gneed : o.grad_needs) push(gneed);
      for (const auto& f : o.fwd_needs) push(f.tensor);
    }
    return in;
  }
};

struct BackwardGraph {
  std::vector<BackwardNode> nodes;
  std::string seed;  // gradient tensor of the designated loss; given, not produced

  const BackwardNode* producer_of(const std::string& grad) const {
    for (const auto& n : nodes)
      for (const auto& o : n.outputs)
        if (o.id == grad) return &n;
    return nullptr;
  }
};

namespace detail {

// Gradient contributions per input slot of a forward op. Returns, for each
// input slot, whether it is differentiable and which tensors its gradient
// needs besides the output gradient.
struct SlotRule {
  bool differentiable = true;
  std::vector<GradNeed> fwd_needs;
};

inline std::vector<SlotRule> ad_slot_rules(const OperatorNode& op) {
  switch (op.kind) {
    case OpKind::MatMul:
      // dA = dY B^T needs B; dB = A^T dY needs A
      return {{true, {{op.inputs[1], false}}}, {true, {{op.inputs[0], false}}}};
    case OpKind::Add:
      return {{true, {}}, {true, {}}};
    case OpKind::ElemMul:
      return {{true, {{op.inputs[1], false}}}, {true, {{op.inputs[0], false}}}};
    case OpKind::Relu:
      return {{true, {{op.inputs[0], true}}}};
    case OpKind::Softmax:
      return {{true, {{op.outputs[0], false}}}};
    case OpKind::Identity:
    case OpKind::Transpose:
      return {{true, {}}};
    case OpKind::Embedding:
      // token ids carry no gradient; the table gradient is a scatter of dY
      return {{false, {}}, {true, {{op.inputs[0], false}}}};
    case OpKind::Partition:
    case OpKind::Combine:
    case OpKind::Replicate:
    case OpKind::Reduce:
      return {{true, {}}};
  }
  throw std::runtime_error(std::string("autodiff unsupported for operator kind ") +
                           op_kind_name(op.kind));
}

}  // namespace detail

inline BackwardGraph reverse_autodiff(const Pcg& g) {
  if (g.loss_tensor.empty())
    throw std::invalid_argument("reverse_autodiff: no loss tensor designated");
  if (!g.find_tensor(g.loss_tensor))
    throw std::invalid_argument("reverse_autodiff: unknown loss tensor");

  // Count gradient contributions per forward tensor: one per consuming slot.
  std::map<std::string, int> contrib_total;
  for (const auto& op : g.ops) {
    auto rules = detail::ad_slot_rules(op);
    for (std::size_t i = 0; i < op.inputs.size() && i < rules.size(); ++i)
      if (rules[i].differentiable) ++contrib_total[op.inputs[i]];
  }

  BackwardGraph bg;
  bg.seed = grad_id(g.loss_tensor);

  std::map<std::string, int> contrib_seen;
  auto contribution_id = [&](const std::string& t) {
    if (contrib_total[t] <= 1) return grad_id(t);
    int k = contrib_seen[t]++;
    return grad_id(t) + "#" + std::to_string(k);
  };

  auto order = g.topo_order();
  if (!order) throw std::invalid_argument("reverse_autodiff: graph is cyclic");

  // Backward nodes in reverse topological order.
  for (auto it = order->rbegin(); it != order->rend(); ++it) {
    const OperatorNode& op = g.ops[*it];
    auto rules = detail::ad_slot_rules(op);
    BackwardNode bn;
    bn.id = "bwd:" + op.id;
    bn.fwd_op = op.id;
    for (std::size_t i = 0; i < op.inputs.size() && i < rules.size(); ++i) {
      if (!rules[i].differentiable) continue;
      const ParallelTensor* in_t = g.find_tensor(op.inputs[i]);
      BackwardOutput out;
      out.id = contribution_id(op.inputs[i]);
      out.wrt = op.inputs[i];
      out.weight_grad = in_t && in_t->kind == ElemKind::Weight;
      out.trainable = out.weight_grad && op.trainable && (!in_t || in_t->role != "const");
      for (const auto& y : op.outputs) out.grad_needs.push_back(grad_id(y));
      out.fwd_needs = rules[i].fwd_needs;
      bn.outputs.push_back(std::move(out));
    }
    if (!bn.outputs.empty()) bg.nodes.push_back(std::move(bn));
  }

  // Accumulation nodes joining multiple contributions into d:t.
  for (const auto& [t, total] : contrib_total) {
    if (total <= 1) continue;
    BackwardNode acc;
    acc.id = "acc:" + t;
    const ParallelTensor* ft = g.find_tensor(t);
    BackwardOutput out;
    out.id = grad_id(t);
    out.wrt = t;
    out.weight_grad = ft && ft->kind == ElemKind::Weight;
    if (out.weight_grad) {
      for (const auto* c : g.consumers_of(t))
        if (c->trainable && (!ft || ft->role != "const")) out.trainable = true;
    }
    for (int k = 0; k < total; ++k) out.grad_needs.push_back(grad_id(t) + "#" + std::to_string(k));
    acc.outputs.push_back(std::move(out));
    bg.nodes.push_back(std::move(acc));
  }

  return bg;
}

}  // namespace coserve
