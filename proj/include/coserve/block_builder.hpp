#pragma once

#include <string>

#include "coserve/peft.hpp"

namespace coserve {

struct BlockSpec {
  long seqlen = 1024;
  long hidden = 4096;
  long ffn_mult = 4;
  int lora_rank = 16;
};

// Single transformer block (attention + relu MLP) with a low-rank bypass on
// the MLP down projection. Backbone weights frozen; key/value tensors tagged
// for the memory accounting's full-length gradient accumulators. The block
// output is the designated loss tensor.
inline PeftModel build_transformer_block(const BlockSpec& spec) {
  const long s = spec.seqlen;
  const long h = spec.hidden;
  const long f = spec.hidden * spec.ffn_mult;

  PeftModel m;
  Pcg& g = m.backbone;

  auto act = [&](const std::string& id, long r, long c, const std::string& prod,
                 const std::string& role = "") {
    ParallelTensor t;
    t.id = id;
    t.dims = {{r, nonpar()}, {c, nonpar()}};
    t.producer = prod;
    t.role = role;
    g.add_tensor(t);
  };
  auto weight = [&](const std::string& id, long r, long c) {
    ParallelTensor t;
    t.id = id;
    t.dims = {{r, nonpar()}, {c, nonpar()}};
    t.kind = ElemKind::Weight;
    g.add_tensor(t);
  };

  act("x", s, h, "");
  weight("wq", h, h);
  weight("wk", h, h);
  weight("wv", h, h);
  weight("wo", h, h);
  weight("w_up", h, f);
  weight("w_down", f, h);

  act("q", s, h, "qproj");
  act("k", s, h, "kproj", "kv");
  act("v", s, h, "vproj", "kv");
  act("k_t", h, s, "ktrans");
  act("scores", s, s, "score_mm");
  act("probs", s, s, "attn_softmax");
  act("attn", s, h, "attn_mm");
  act("o", s, h, "oproj");
  act("r1", s, h, "resid1");
  act("up", s, f, "up_proj");
  act("relu_out", s, f, "mlp_relu");
  act("down", s, h, "down_proj");
  act("y", s, h, "resid2");

  g.add_op({"qproj", OpKind::MatMul, {"x", "wq"}, {"q"}, false});
  g.add_op({"kproj", OpKind::MatMul, {"x", "wk"}, {"k"}, false});
  g.add_op({"vproj", OpKind::MatMul, {"x", "wv"}, {"v"}, false});
  g.add_op({"ktrans", OpKind::Transpose, {"k"}, {"k_t"}, false});
  g.add_op({"score_mm", OpKind::MatMul, {"q", "k_t"}, {"scores"}, false});
  g.add_op({"attn_softmax", OpKind::Softmax, {"scores"}, {"probs"}, false});
  g.add_op({"attn_mm", OpKind::MatMul, {"probs", "v"}, {"attn"}, false});
  g.add_op({"oproj", OpKind::MatMul, {"attn", "wo"}, {"o"}, false});
  g.add_op({"resid1", OpKind::Add, {"x", "o"}, {"r1"}, false});
  g.add_op({"up_proj", OpKind::MatMul, {"r1", "w_up"}, {"up"}, false});
  g.add_op({"mlp_relu", OpKind::Relu, {"up"}, {"relu_out"}, false});
  g.add_op({"down_proj", OpKind::MatMul, {"relu_out", "w_down"}, {"down"}, false});
  g.add_op({"resid2", OpKind::Add, {"r1", "down"}, {"y"}, false});
  g.loss_tensor = "y";

  BypassNetwork lora = build_lora_block(f, spec.lora_rank, "relu_out", h, s);
  lora.attach_out = "down";
  attach_bypass(m, lora);
  return m;
}

// Row-parallel linear backbone: x [m, k|d] -> matmul -> partial sums -> reduce
// -> y [m, n]. The canonical fixture for bypass parallelization: its
// boundaries are a partitioned input and a non-parallel output.
inline PeftModel build_row_parallel_linear(long m_rows, long k, long n, int degree) {
  PeftModel pm;
  Pcg& g = pm.backbone;
  if (degree < 2) {
    ParallelTensor x{"x", {{m_rows, nonpar()}, {k, nonpar()}}, "", ElemKind::Activation};
    ParallelTensor w{"w", {{k, nonpar()}, {n, nonpar()}}, "", ElemKind::Weight};
    ParallelTensor y{"y", {{m_rows, nonpar()}, {n, nonpar()}}, "proj", ElemKind::Activation};
    g.add_tensor(x);
    g.add_tensor(w);
    g.add_tensor(y);
    g.add_op({"proj", OpKind::MatMul, {"x", "w"}, {"y"}, false});
    g.loss_tensor = "y";
    return pm;
  }
  ParallelTensor x{"x", {{m_rows, nonpar()}, {k, partitioned(degree)}}, "", ElemKind::Activation};
  ParallelTensor w{"w", {{k, partitioned(degree)}, {n, nonpar()}}, "", ElemKind::Weight};
  ParallelTensor part{"y_part", {{m_rows, prereduce(degree)}, {n, nonpar()}}, "proj",
                      ElemKind::Activation};
  ParallelTensor y{"y", {{m_rows, nonpar()}, {n, nonpar()}}, "y_reduce", ElemKind::Activation};
  g.add_tensor(x);
  g.add_tensor(w);
  g.add_tensor(part);
  g.add_tensor(y);
  g.add_op({"proj", OpKind::MatMul, {"x", "w"}, {"y_part"}, false});
  g.add_op({"y_reduce", OpKind::Reduce, {"y_part"}, {"y"}, false});
  g.loss_tensor = "y";
  return pm;
}

}  // namespace coserve
