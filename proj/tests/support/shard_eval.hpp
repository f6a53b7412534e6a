#pragma once

// Shard-level numeric execution of a parallelization candidate: every tensor
// is represented by the per-device buffers its layout implies, compute ops
// run shard-wise, and parallelization ops move data between layouts. Used to
// check candidates against the degree-1 evaluation.

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "coserve/matrix.hpp"
#include "coserve/parallelize.hpp"

#include "graph_eval.hpp"

namespace coserve::testsupport {

struct Sharded {
  // NonParallel: one buffer; Partitioned/Replicated/PreReduce: degree buffers.
  std::vector<Matrix> shards;
  std::vector<TensorDim> dims;
};

inline int partition_axis(const std::vector<TensorDim>& dims, DimKind kind) {
  for (std::size_t i = 0; i < dims.size(); ++i)
    if (dims[i].state.kind == kind) return static_cast<int>(i);
  return -1;
}

inline std::vector<Matrix> split(const Matrix& full, int axis, int degree) {
  std::vector<Matrix> out;
  if (axis == 0) {
    std::size_t chunk = full.rows() / degree;
    for (int d = 0; d < degree; ++d) {
      Matrix m(chunk, full.cols());
      for (std::size_t i = 0; i < chunk; ++i)
        for (std::size_t j = 0; j < full.cols(); ++j) m(i, j) = full(d * chunk + i, j);
      out.push_back(std::move(m));
    }
  } else {
    std::size_t chunk = full.cols() / degree;
    for (int d = 0; d < degree; ++d) {
      Matrix m(full.rows(), chunk);
      for (std::size_t i = 0; i < full.rows(); ++i)
        for (std::size_t j = 0; j < chunk; ++j) m(i, j) = full(i, d * chunk + j);
      out.push_back(std::move(m));
    }
  }
  return out;
}

inline Matrix concat(const std::vector<Matrix>& shards, int axis) {
  if (axis == 0) {
    std::size_t rows = 0;
    for (const auto& s : shards) rows += s.rows();
    Matrix out(rows, shards[0].cols());
    std::size_t r = 0;
    for (const auto& s : shards) {
      for (std::size_t i = 0; i < s.rows(); ++i)
        for (std::size_t j = 0; j < s.cols(); ++j) out(r + i, j) = s(i, j);
      r += s.rows();
    }
    return out;
  }
  std::size_t cols = 0;
  for (const auto& s : shards) cols += s.cols();
  Matrix out(shards[0].rows(), cols);
  std::size_t c = 0;
  for (const auto& s : shards) {
    for (std::size_t i = 0; i < s.rows(); ++i)
      for (std::size_t j = 0; j < s.cols(); ++j) out(i, c + j) = s(i, j);
    c += s.cols();
  }
  return out;
}

// Lays out a full-value matrix according to dim states.
inline Sharded shard_value(const Matrix& full, const std::vector<TensorDim>& dims, int degree) {
  Sharded s;
  s.dims = dims;
  int part = partition_axis(dims, DimKind::Partitioned);
  int rep = partition_axis(dims, DimKind::Replicated);
  if (part >= 0) {
    s.shards = split(full, part, dims[part].state.degree);
  } else if (rep >= 0) {
    for (int d = 0; d < dims[rep].state.degree; ++d) s.shards.push_back(full);
  } else {
    s.shards = {full};
  }
  (void)degree;
  return s;
}

// Recovers the full logical value of a sharded tensor.
inline Matrix unshard(const Sharded& s) {
  int part = partition_axis(s.dims, DimKind::Partitioned);
  int pre = partition_axis(s.dims, DimKind::PreReduce);
  if (part >= 0) return concat(s.shards, part);
  if (pre >= 0) {
    Matrix out = s.shards[0];
    for (std::size_t d = 1; d < s.shards.size(); ++d) out += s.shards[d];
    return out;
  }
  return s.shards[0];
}

// Executes a candidate graph on per-device shards; the attach-in value is
// given as a full matrix and laid out per the candidate's boundary layout.
inline Matrix eval_candidate(const CandidatePcg& cand, const Matrix& attach_in_value,
                             const Env& weights, int degree) {
  std::map<std::string, Sharded> env;
  const Pcg& g = cand.graph;

  const ParallelTensor* in_t = g.find_tensor(cand.in_tensor);
  if (!in_t) throw std::runtime_error("shard_eval: missing attach-in tensor");
  env[cand.in_tensor] = shard_value(attach_in_value, in_t->dims, degree);

  for (const auto& t : g.tensors) {
    if (t.kind != ElemKind::Weight) continue;
    auto wit = weights.find(t.id);
    if (wit == weights.end()) throw std::runtime_error("shard_eval: missing weight " + t.id);
    env[t.id] = shard_value(wit->second, t.dims, degree);
  }

  auto order = g.topo_order();
  if (!order) throw std::runtime_error("shard_eval: cyclic candidate");
  for (std::size_t idx : *order) {
    const OperatorNode& op = g.ops[idx];
    const ParallelTensor* out_t = g.find_tensor(op.outputs[0]);
    Sharded out;
    out.dims = out_t->dims;
    switch (op.kind) {
      case OpKind::MatMul: {
        const Sharded& a = env.at(op.inputs[0]);
        const Sharded& b = env.at(op.inputs[1]);
        std::size_t n = std::max(a.shards.size(), b.shards.size());
        for (std::size_t d = 0; d < n; ++d)
          out.shards.push_back(matmul(a.shards[d % a.shards.size()],
                                      b.shards[d % b.shards.size()]));
        break;
      }
      case OpKind::Partition: {
        const Sharded& x = env.at(op.inputs[0]);
        out.shards = split(x.shards[0], op.dim, op.degree);
        break;
      }
      case OpKind::Combine: {
        const Sharded& x = env.at(op.inputs[0]);
        out.shards = {concat(x.shards, op.dim)};
        break;
      }
      case OpKind::Replicate: {
        const Sharded& x = env.at(op.inputs[0]);
        for (int d = 0; d < op.degree; ++d) out.shards.push_back(x.shards[0]);
        break;
      }
      case OpKind::Reduce: {
        const Sharded& x = env.at(op.inputs[0]);
        Matrix sum = x.shards[0];
        for (std::size_t d = 1; d < x.shards.size(); ++d) sum += x.shards[d];
        out.shards = {sum};
        break;
      }
      case OpKind::Add:
      case OpKind::ElemMul: {
        const Sharded& a = env.at(op.inputs[0]);
        const Sharded& b = env.at(op.inputs[1]);
        std::size_t n = std::max(a.shards.size(), b.shards.size());
        for (std::size_t d = 0; d < n; ++d) {
          const Matrix& ma = a.shards[d % a.shards.size()];
          const Matrix& mb = b.shards[d % b.shards.size()];
          out.shards.push_back(op.kind == OpKind::Add ? add(ma, mb) : hadamard(ma, mb));
        }
        break;
      }
      default: {
        const Sharded& x = env.at(op.inputs[0]);
        for (const auto& sh : x.shards) {
          OperatorNode unary = op;
          Env tmp;
          tmp[op.inputs[0]] = sh;
          out.shards.push_back(eval_op(unary, tmp));
        }
        break;
      }
    }
    env[op.outputs[0]] = std::move(out);
  }
  return unshard(env.at(cand.out_tensor));
}

}  // namespace coserve::testsupport
