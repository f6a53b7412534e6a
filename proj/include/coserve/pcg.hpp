#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace coserve {

// ---------------------------------------------------------------------------
// Parallel computation graph: operators over tensors whose dimensions carry a
// parallel layout state. The four states and their transitions:
//
//   non-parallel (-)  --partition-->  partitioned (|)
//   partitioned  (|)  --combine---->  non-parallel (-)
//   non-parallel (-)  --replicate-->  replicated (=)
//   pre-reduce   (+)  --reduce----->  non-parallel (-)
//
// A pre-reduce tensor holds per-device partial sums and must be consumed by a
// reduce before any compute operator sees it.
// ---------------------------------------------------------------------------

enum class DimKind { NonParallel, Partitioned, Replicated, PreReduce };

struct DimState {
  DimKind kind = DimKind::NonParallel;
  int degree = 1;  // number of devices; 1 only for NonParallel

  bool operator==(const DimState&) const = default;
};

inline DimState nonpar() { return {DimKind::NonParallel, 1}; }
inline DimState partitioned(int d) { return {DimKind::Partitioned, d}; }
inline DimState replicated(int d) { return {DimKind::Replicated, d}; }
inline DimState prereduce(int d) { return {DimKind::PreReduce, d}; }

inline char state_symbol(DimKind k) {
  switch (k) {
    case DimKind::NonParallel: return '-';
    case DimKind::Partitioned: return '|';
    case DimKind::Replicated: return '=';
    case DimKind::PreReduce: return '+';
  }
  return '?';
}

inline std::optional<DimKind> state_from_symbol(const std::string& s) {
  if (s == "-") return DimKind::NonParallel;
  if (s == "|") return DimKind::Partitioned;
  if (s == "=") return DimKind::Replicated;
  if (s == "+") return DimKind::PreReduce;
  return std::nullopt;
}

struct TensorDim {
  long extent = 1;  // logical extent; states describe layout, not size
  DimState state;

  bool operator==(const TensorDim&) const = default;
};

enum class ElemKind { Activation, Weight, Gradient, Loss };

struct ParallelTensor {
  std::string id;
  std::vector<TensorDim> dims;
  std::string producer;  // operator id; empty for graph inputs
  ElemKind kind = ElemKind::Activation;
  std::string role;  // optional tag used by memory accounting (e.g. "kv")

  long elem_count() const {
    long n = 1;
    for (const auto& d : dims) n *= d.extent;
    return n;
  }
  bool operator==(const ParallelTensor&) const = default;
};

enum class OpKind {
  MatMul,
  Add,
  ElemMul,
  Relu,
  Softmax,
  Embedding,
  Identity,
  Transpose,
  Partition,
  Combine,
  Replicate,
  Reduce,
};

inline bool is_parallel_op(OpKind k) {
  return k == OpKind::Partition || k == OpKind::Combine || k == OpKind::Replicate ||
         k == OpKind::Reduce;
}

inline const char* op_kind_name(OpKind k) {
  switch (k) {
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::ElemMul: return "elem_mul";
    case OpKind::Relu: return "relu";
    case OpKind::Softmax: return "softmax";
    case OpKind::Embedding: return "embedding";
    case OpKind::Identity: return "identity";
    case OpKind::Transpose: return "transpose";
    case OpKind::Partition: return "partition";
    case OpKind::Combine: return "combine";
    case OpKind::Replicate: return "replicate";
    case OpKind::Reduce: return "reduce";
  }
  return "?";
}

inline std::optional<OpKind> op_kind_from_name(const std::string& s) {
  static const std::map<std::string, OpKind> table = {
      {"matmul", OpKind::MatMul},       {"add", OpKind::Add},
      {"elem_mul", OpKind::ElemMul},    {"relu", OpKind::Relu},
      {"softmax", OpKind::Softmax},     {"embedding", OpKind::Embedding},
      {"identity", OpKind::Identity},   {"transpose", OpKind::Transpose},
      {"partition", OpKind::Partition},
      {"combine", OpKind::Combine},     {"replicate", OpKind::Replicate},
      {"reduce", OpKind::Reduce},
  };
  auto it = table.find(s);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

struct OperatorNode {
  std::string id;
  OpKind kind = OpKind::Identity;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  bool trainable = false;  // for weight-bearing ops: whether the weight gets gradients
  int dim = 0;             // axis for partition/combine/replicate
  int degree = 1;          // device count for partition/replicate

  bool operator==(const OperatorNode&) const = default;
};

struct Pcg {
  std::vector<OperatorNode> ops;
  std::vector<ParallelTensor> tensors;
  std::string loss_tensor;  // designated loss for autodiff; may be empty

  const ParallelTensor* find_tensor(const std::string& id) const {
    for (const auto& t : tensors)
      if (t.id == id) return &t;
    return nullptr;
  }
  ParallelTensor* find_tensor(const std::string& id) {
    for (auto& t : tensors)
      if (t.id == id) return &t;
    return nullptr;
  }
  const OperatorNode* find_op(const std::string& id) const {
    for (const auto& o : ops)
      if (o.id == id) return &o;
    return nullptr;
  }
  OperatorNode* find_op(const std::string& id) {
    for (auto& o : ops)
      if (o.id == id) return &o;
    return nullptr;
  }

  const OperatorNode* producer_of(const std::string& tensor_id) const {
    for (const auto& o : ops)
      for (const auto& out : o.outputs)
        if (out == tensor_id) return &o;
    return nullptr;
  }

  std::vector<const OperatorNode*> consumers_of(const std::string& tensor_id) const {
    std::vector<const OperatorNode*> out;
    for (const auto& o : ops)
      for (const auto& in : o.inputs)
        if (in == tensor_id) {
          out.push_back(&o);
          break;
        }
    return out;
  }

  ParallelTensor& add_tensor(ParallelTensor t) {
    tensors.push_back(std::move(t));
    return tensors.back();
  }
  OperatorNode& add_op(OperatorNode o) {
    ops.push_back(std::move(o));
    return ops.back();
  }

  // Operator indices in topological order, or nullopt if the graph is cyclic.
  std::optional<std::vector<std::size_t>> topo_order() const {
    std::map<std::string, std::size_t> producer;
    for (std::size_t i = 0; i < ops.size(); ++i)
      for (const auto& out : ops[i].outputs) producer[out] = i;
    std::vector<int> indegree(ops.size(), 0);
    std::vector<std::vector<std::size_t>> succ(ops.size());
    for (std::size_t i = 0; i < ops.size(); ++i)
      for (const auto& in : ops[i].inputs) {
        auto it = producer.find(in);
        if (it != producer.end()) {
          succ[it->second].push_back(i);
          ++indegree[i];
        }
      }
    std::vector<std::size_t> order;
    std::vector<std::size_t> ready;
    for (std::size_t i = 0; i < ops.size(); ++i)
      if (indegree[i] == 0) ready.push_back(i);
    while (!ready.empty()) {
      std::size_t n = ready.front();
      ready.erase(ready.begin());
      order.push_back(n);
      for (std::size_t m : succ[n])
        if (--indegree[m] == 0) ready.push_back(m);
    }
    if (order.size() != ops.size()) return std::nullopt;
    return order;
  }

  bool operator==(const Pcg&) const = default;
};

// ---------------------------------------------------------------------------
// Per-operator layout inference. Returns the output dims for the given input
// dims, or nullopt when the combination is not a legal transition.
// ---------------------------------------------------------------------------

namespace detail {

inline int parallel_dim_count(const std::vector<TensorDim>& dims) {
  int n = 0;
  for (const auto& d : dims)
    if (d.state.kind != DimKind::NonParallel) ++n;
  return n;
}

inline bool has_prereduce(const std::vector<TensorDim>& dims) {
  for (const auto& d : dims)
    if (d.state.kind == DimKind::PreReduce) return true;
  return false;
}

}  // namespace detail

inline std::optional<std::vector<TensorDim>> infer_op_dims(
    const OperatorNode& op, const std::vector<std::vector<TensorDim>>& ins) {
  using detail::has_prereduce;
  using detail::parallel_dim_count;

  switch (op.kind) {
    case OpKind::MatMul: {
      if (ins.size() != 2) return std::nullopt;
      const auto& a = ins[0];
      const auto& b = ins[1];
      if (a.size() != 2 || b.size() != 2) return std::nullopt;
      if (a[1].extent != b[0].extent) return std::nullopt;
      if (has_prereduce(a) || has_prereduce(b)) return std::nullopt;
      const DimState& ka = a[1].state;
      const DimState& kb = b[0].state;
      // Replicated operands: both fully replicated or none.
      bool arep = a[0].state.kind == DimKind::Replicated || a[1].state.kind == DimKind::Replicated;
      bool brep = b[0].state.kind == DimKind::Replicated || b[1].state.kind == DimKind::Replicated;
      if (arep != brep) return std::nullopt;
      if (arep) {
        if (a[0].state.kind == DimKind::Partitioned || a[1].state.kind == DimKind::Partitioned ||
            b[0].state.kind == DimKind::Partitioned || b[1].state.kind == DimKind::Partitioned)
          return std::nullopt;
        int d = a[0].state.kind == DimKind::Replicated ? a[0].state.degree : a[1].state.degree;
        return std::vector<TensorDim>{{a[0].extent, replicated(d)}, {b[1].extent, nonpar()}};
      }
      if (ka != kb) return std::nullopt;  // contracted dim layouts must agree
      std::vector<TensorDim> out{{a[0].extent, a[0].state}, {b[1].extent, b[1].state}};
      if (ka.kind == DimKind::Partitioned) {
        // split-K: the output holds per-device partial sums
        for (auto& d : out)
          if (d.state.kind == DimKind::PreReduce) return std::nullopt;
        for (auto& d : out) {
          if (d.state.kind == DimKind::NonParallel) {
            d.state = prereduce(ka.degree);
            if (parallel_dim_count(out) > 1) return std::nullopt;
            return out;
          }
        }
        return std::nullopt;
      }
      if (parallel_dim_count(out) > 1) return std::nullopt;
      return out;
    }
    case OpKind::Add:
    case OpKind::ElemMul: {
      if (ins.size() != 2) return std::nullopt;
      const auto& a = ins[0];
      const auto& b = ins[1];
      if (has_prereduce(a) || has_prereduce(b)) return std::nullopt;
      if (b.size() == 1 && a.size() == 2) {  // row-broadcast vector operand
        if (b[0].extent != a[1].extent) return std::nullopt;
        if (b[0].state.kind != a[1].state.kind &&
            !(b[0].state.kind == DimKind::NonParallel && a[1].state.kind == DimKind::NonParallel))
          return std::nullopt;
        return a;
      }
      if (a.size() != b.size()) return std::nullopt;
      for (std::size_t i = 0; i < a.size(); ++i)
        if (!(a[i] == b[i])) return std::nullopt;
      return a;
    }
    case OpKind::Relu:
    case OpKind::Softmax:
    case OpKind::Identity: {
      if (ins.size() != 1 || has_prereduce(ins[0])) return std::nullopt;
      return ins[0];
    }
    case OpKind::Transpose: {
      if (ins.size() != 1 || ins[0].size() != 2 || has_prereduce(ins[0])) return std::nullopt;
      return std::vector<TensorDim>{ins[0][1], ins[0][0]};
    }
    case OpKind::Embedding: {
      if (ins.size() != 2) return std::nullopt;
      const auto& ids = ins[0];
      const auto& table = ins[1];
      if (table.size() != 2) return std::nullopt;
      for (const auto& d : ids)
        if (d.state.kind != DimKind::NonParallel) return std::nullopt;
      for (const auto& d : table)
        if (d.state.kind != DimKind::NonParallel) return std::nullopt;
      std::vector<TensorDim> out = ids;
      out.push_back({table[1].extent, nonpar()});
      return out;
    }
    case OpKind::Partition: {
      if (ins.size() != 1) return std::nullopt;
      auto dims = ins[0];
      if (op.dim < 0 || static_cast<std::size_t>(op.dim) >= dims.size()) return std::nullopt;
      if (dims[op.dim].state.kind != DimKind::NonParallel) return std::nullopt;
      if (parallel_dim_count(dims) > 0) return std::nullopt;  // single parallel axis
      if (op.degree < 2) return std::nullopt;
      dims[op.dim].state = partitioned(op.degree);
      return dims;
    }
    case OpKind::Combine: {
      if (ins.size() != 1 || has_prereduce(ins[0])) return std::nullopt;
      auto dims = ins[0];
      if (op.dim < 0 || static_cast<std::size_t>(op.dim) >= dims.size()) return std::nullopt;
      if (dims[op.dim].state.kind != DimKind::Partitioned) return std::nullopt;
      dims[op.dim].state = nonpar();
      return dims;
    }
    case OpKind::Replicate: {
      if (ins.size() != 1) return std::nullopt;
      auto dims = ins[0];
      if (parallel_dim_count(dims) > 0) return std::nullopt;
      if (op.dim < 0 || static_cast<std::size_t>(op.dim) >= dims.size()) return std::nullopt;
      if (op.degree < 2) return std::nullopt;
      dims[op.dim].state = replicated(op.degree);
      return dims;
    }
    case OpKind::Reduce: {
      if (ins.size() != 1) return std::nullopt;
      auto dims = ins[0];
      for (auto& d : dims)
        if (d.state.kind == DimKind::PreReduce) {
          d.state = nonpar();
          return dims;
        }
      return std::nullopt;
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Validation. Violations are data, not errors.
// ---------------------------------------------------------------------------

inline std::vector<std::string> validate_pcg(const Pcg& g) {
  std::vector<std::string> v;

  for (const auto& t : g.tensors) {
    int prereduce_dims = 0;
    int parallel_dims = 0;
    for (const auto& d : t.dims) {
      if (d.extent < 1) v.push_back("tensor " + t.id + ": non-positive extent");
      if (d.state.degree < 1) v.push_back("tensor " + t.id + ": degree < 1");
      if (d.state.kind == DimKind::NonParallel && d.state.degree != 1)
        v.push_back("tensor " + t.id + ": non-parallel dim with degree > 1");
      if (d.state.kind != DimKind::NonParallel && d.state.degree < 2)
        v.push_back("tensor " + t.id + ": parallel dim with degree < 2");
      if (d.state.kind == DimKind::PreReduce) ++prereduce_dims;
      if (d.state.kind != DimKind::NonParallel) ++parallel_dims;
    }
    if (prereduce_dims > 1) v.push_back("tensor " + t.id + ": more than one pre-reduce dim");
    if (parallel_dims > 1) v.push_back("tensor " + t.id + ": more than one parallel dim");
  }

  // Structural consistency: ids resolve, producers unique and recorded.
  std::map<std::string, int> producer_count;
  for (const auto& o : g.ops) {
    for (const auto& in : o.inputs)
      if (!g.find_tensor(in)) v.push_back("op " + o.id + ": unknown input tensor " + in);
    for (const auto& out : o.outputs) {
      if (!g.find_tensor(out)) v.push_back("op " + o.id + ": unknown output tensor " + out);
      ++producer_count[out];
    }
  }
  for (const auto& [tid, n] : producer_count)
    if (n > 1) v.push_back("tensor " + tid + ": multiple producers");
  for (const auto& t : g.tensors) {
    const OperatorNode* p = g.producer_of(t.id);
    if (p && t.producer != p->id)
      v.push_back("tensor " + t.id + ": producer field does not match graph");
    if (!p && !t.producer.empty())
      v.push_back("tensor " + t.id + ": producer field names missing op");
  }

  if (!g.topo_order()) v.push_back("graph contains a cycle");

  // Pre-reduce tensors are consumed only by reduce.
  for (const auto& t : g.tensors) {
    if (!detail::has_prereduce(t.dims)) continue;
    for (const auto* c : g.consumers_of(t.id))
      if (c->kind != OpKind::Reduce)
        v.push_back("op " + c->id + ": consumes pre-reduce tensor " + t.id +
                    " without a reduce");
  }

  // Per-op layout/shape legality against the declared output dims.
  for (const auto& o : g.ops) {
    std::vector<std::vector<TensorDim>> ins;
    bool resolved = true;
    for (const auto& in : o.inputs) {
      const auto* t = g.find_tensor(in);
      if (!t) {
        resolved = false;
        break;
      }
      ins.push_back(t->dims);
    }
    if (!resolved || o.outputs.size() != 1) {
      if (o.outputs.size() != 1) v.push_back("op " + o.id + ": must have exactly one output");
      continue;
    }
    const auto* out = g.find_tensor(o.outputs[0]);
    if (!out) continue;
    auto inferred = infer_op_dims(o, ins);
    if (!inferred) {
      v.push_back("op " + o.id + ": illegal input layout or shape");
    } else if (!(*inferred == out->dims)) {
      v.push_back("op " + o.id + ": declared output layout does not match inferred");
    }
  }

  return v;
}

// FNV-1a over a canonical rendering; used to deduplicate graphs in the hub.
inline std::uint64_t content_hash_bytes(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace coserve
