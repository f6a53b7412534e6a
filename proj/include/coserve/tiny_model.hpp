#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "coserve/matrix.hpp"
#include "coserve/rng.hpp"

namespace coserve {

// Dense f64 testbed: a small causal transformer with frozen backbone weights
// and trainable low-rank adapters on the MLP down projections. Exists to make
// the token-level forward/backward mechanism numerically checkable against a
// full-sequence oracle.

struct TinyModelConfig {
  int depth = 2;
  long hidden = 16;
  int heads = 1;
  long ffn_mult = 4;
  long vocab = 64;
  int lora_rank = 2;
  std::uint64_t seed = 1;

  long ffn() const { return hidden * ffn_mult; }
  long head_dim() const { return hidden / heads; }
};

struct LayerWeights {
  Matrix wq, wk, wv, wo;   // [h, h], frozen
  Matrix w_up;             // [h, f], frozen
  Matrix w_down;           // [f, h], frozen
  Matrix lora_a;           // [f, r], trainable
  Matrix lora_b;           // [r, h], trainable
};

struct TinyModel {
  TinyModelConfig cfg;
  Matrix embed;    // [V, h], frozen
  Matrix unembed;  // [h, V], frozen
  std::vector<LayerWeights> layers;

  static TinyModel init(const TinyModelConfig& cfg) {
    if (cfg.hidden % cfg.heads != 0)
      throw std::invalid_argument("tiny model: heads must divide hidden");
    if (cfg.lora_rank < 1) throw std::invalid_argument("tiny model: rank must be >= 1");
    TinyModel m;
    m.cfg = cfg;
    Rng rng(cfg.seed);
    double ws = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
    m.embed = rng.randn(cfg.vocab, cfg.hidden, ws);
    m.unembed = rng.randn(cfg.hidden, cfg.vocab, ws);
    for (int l = 0; l < cfg.depth; ++l) {
      LayerWeights w;
      w.wq = rng.randn(cfg.hidden, cfg.hidden, ws);
      w.wk = rng.randn(cfg.hidden, cfg.hidden, ws);
      w.wv = rng.randn(cfg.hidden, cfg.hidden, ws);
      w.wo = rng.randn(cfg.hidden, cfg.hidden, ws);
      w.w_up = rng.randn(cfg.hidden, cfg.ffn(), ws);
      w.w_down = rng.randn(cfg.ffn(), cfg.hidden, 1.0 / std::sqrt(static_cast<double>(cfg.ffn())));
      w.lora_a = rng.randn(cfg.ffn(), cfg.lora_rank, 0.2 / std::sqrt(static_cast<double>(cfg.ffn())));
      w.lora_b = rng.randn(cfg.lora_rank, cfg.hidden, 0.2);
      m.layers.push_back(std::move(w));
    }
    return m;
  }
};

// Adapter gradients: the only gradient buffers a finetuning pass owns.
struct LoraGrads {
  std::vector<Matrix> a;  // per layer [f, r]
  std::vector<Matrix> b;  // per layer [r, h]

  static LoraGrads zeros(const TinyModelConfig& cfg) {
    LoraGrads g;
    for (int l = 0; l < cfg.depth; ++l) {
      g.a.emplace_back(cfg.ffn(), cfg.lora_rank);
      g.b.emplace_back(cfg.lora_rank, cfg.hidden);
    }
    return g;
  }
};

inline double max_grad_rel_err(const LoraGrads& x, const LoraGrads& ref) {
  double m = 0.0;
  for (std::size_t l = 0; l < ref.a.size(); ++l) {
    m = std::max(m, max_rel_err(x.a[l], ref.a[l]));
    m = std::max(m, max_rel_err(x.b[l], ref.b[l]));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Full-sequence oracle
// ---------------------------------------------------------------------------

struct LayerTrace {
  Matrix x_in;      // [L, h]
  Matrix q, k, v;   // [L, h]
  // probs[i] holds heads rows of length i+1 (causal)
  std::vector<Matrix> probs;
  Matrix relu_out;  // [L, f]
  Matrix lora_u;    // [L, r]
  Matrix r1;        // [L, h]
};

struct ForwardTrace {
  std::vector<int> tokens;
  std::vector<LayerTrace> layers;
  Matrix final_hidden;  // [L, h]
  Matrix logits;        // [L, V]
  double loss = 0.0;    // mean over L-1 next-token predictions
};

namespace numdetail {

// attention for rows [row_begin, row_end) given keys/values [0, row_end);
// writes output rows and appends per-row causal prob matrices.
inline void attention_rows(const TinyModelConfig& cfg, const Matrix& q, const Matrix& k,
                           const Matrix& v, long row_begin, long row_end, Matrix& out,
                           std::vector<Matrix>* probs_sink) {
  const long hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (long i = row_begin; i < row_end; ++i) {
    Matrix pi(cfg.heads, i + 1);
    for (int head = 0; head < cfg.heads; ++head) {
      const long c0 = head * hd;
      double mx = -1e300;
      for (long j = 0; j <= i; ++j) {
        double s = 0.0;
        for (long c = 0; c < hd; ++c) s += q(i, c0 + c) * k(j, c0 + c);
        s *= scale;
        pi(head, j) = s;
        mx = std::max(mx, s);
      }
      double denom = 0.0;
      for (long j = 0; j <= i; ++j) {
        pi(head, j) = std::exp(pi(head, j) - mx);
        denom += pi(head, j);
      }
      for (long j = 0; j <= i; ++j) pi(head, j) /= denom;
      for (long c = 0; c < hd; ++c) {
        double acc = 0.0;
        for (long j = 0; j <= i; ++j) acc += pi(head, j) * v(j, c0 + c);
        out(i - row_begin, c0 + c) = acc;
      }
    }
    if (probs_sink) probs_sink->push_back(std::move(pi));
  }
}

inline Matrix rows(const Matrix& m, long begin, long end) {
  Matrix out(end - begin, m.cols());
  for (long i = begin; i < end; ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i - begin, j) = m(i, j);
  return out;
}

inline void add_rows(Matrix& dst, long begin, const Matrix& src) {
  for (std::size_t i = 0; i < src.rows(); ++i)
    for (std::size_t j = 0; j < src.cols(); ++j) dst(begin + i, j) += src(i, j);
}

inline void set_rows(Matrix& dst, long begin, const Matrix& src) {
  for (std::size_t i = 0; i < src.rows(); ++i)
    for (std::size_t j = 0; j < src.cols(); ++j) dst(begin + i, j) = src(i, j);
}

// next-token cross entropy for one row; returns -log p(target)
inline double row_cross_entropy(const Matrix& logits, long row, int target) {
  double mx = logits(row, 0);
  for (std::size_t j = 1; j < logits.cols(); ++j) mx = std::max(mx, logits(row, j));
  double denom = 0.0;
  for (std::size_t j = 0; j < logits.cols(); ++j) denom += std::exp(logits(row, j) - mx);
  return -(logits(row, target) - mx - std::log(denom));
}

}  // namespace numdetail

inline ForwardTrace forward_full(const TinyModel& m, const std::vector<int>& tokens) {
  const long L = static_cast<long>(tokens.size());
  if (L < 1) throw std::invalid_argument("forward_full: empty sequence");
  const TinyModelConfig& cfg = m.cfg;

  ForwardTrace tr;
  tr.tokens = tokens;
  Matrix x(L, cfg.hidden);
  for (long i = 0; i < L; ++i)
    for (long c = 0; c < cfg.hidden; ++c) x(i, c) = m.embed(tokens[i], c);

  for (int l = 0; l < cfg.depth; ++l) {
    const LayerWeights& w = m.layers[l];
    LayerTrace lt;
    lt.x_in = x;
    lt.q = matmul(x, w.wq);
    lt.k = matmul(x, w.wk);
    lt.v = matmul(x, w.wv);
    Matrix attn(L, cfg.hidden);
    numdetail::attention_rows(cfg, lt.q, lt.k, lt.v, 0, L, attn, &lt.probs);
    Matrix o = matmul(attn, w.wo);
    lt.r1 = add(x, o);
    Matrix up = matmul(lt.r1, w.w_up);
    lt.relu_out = up;
    for (auto& vv : lt.relu_out.data()) vv = vv > 0.0 ? vv : 0.0;
    Matrix down = matmul(lt.relu_out, w.w_down);
    lt.lora_u = matmul(lt.relu_out, w.lora_a);
    Matrix lv = matmul(lt.lora_u, w.lora_b);
    x = lt.r1;
    x += down;
    x += lv;
    tr.layers.push_back(std::move(lt));
  }
  tr.final_hidden = x;
  tr.logits = matmul(x, m.unembed);
  double sum = 0.0;
  for (long i = 0; i + 1 < L; ++i)
    sum += numdetail::row_cross_entropy(tr.logits, i, tokens[i + 1]);
  tr.loss = L > 1 ? sum / static_cast<double>(L - 1) : 0.0;
  return tr;
}

// Gradient of the mean next-token loss with respect to the final hidden
// states; rows past the last predicting position are zero.
inline Matrix loss_head_grad(const TinyModel& m, const Matrix& final_hidden,
                             const std::vector<int>& tokens) {
  const long L = static_cast<long>(tokens.size());
  const long V = m.cfg.vocab;
  Matrix dlogits(L, V);
  for (long i = 0; i + 1 < L; ++i) {
    double mx = -1e300;
    std::vector<double> row(V);
    for (long j = 0; j < V; ++j) {
      double s = 0.0;
      for (long c = 0; c < m.cfg.hidden; ++c) s += final_hidden(i, c) * m.unembed(c, j);
      row[j] = s;
      mx = std::max(mx, s);
    }
    double denom = 0.0;
    for (long j = 0; j < V; ++j) denom += std::exp(row[j] - mx);
    for (long j = 0; j < V; ++j)
      dlogits(i, j) = std::exp(row[j] - mx) / denom / static_cast<double>(L - 1);
    dlogits(i, tokens[i + 1]) -= 1.0 / static_cast<double>(L - 1);
  }
  return matmul_nt(dlogits, m.unembed);
}

struct OracleLayerGrads {
  Matrix dk, dv;  // [L, h]: gradients of the projected keys/values
  Matrix dx;      // [L, h]: gradient of the layer input
};

struct OracleResult {
  double loss = 0.0;
  LoraGrads grads;
  std::vector<OracleLayerGrads> layers;  // indexed by layer
};

inline OracleResult backward_full(const TinyModel& m, const ForwardTrace& tr) {
  const TinyModelConfig& cfg = m.cfg;
  const long L = static_cast<long>(tr.tokens.size());
  const long hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  OracleResult res;
  res.loss = tr.loss;
  res.grads = LoraGrads::zeros(cfg);
  res.layers.resize(cfg.depth);

  Matrix dx = loss_head_grad(m, tr.final_hidden, tr.tokens);

  for (int l = cfg.depth - 1; l >= 0; --l) {
    const LayerWeights& w = m.layers[l];
    const LayerTrace& lt = tr.layers[l];

    // mlp + adapter
    Matrix d_down = dx;              // out = r1 + down + lv
    Matrix d_lv = dx;
    Matrix d_r1 = dx;
    res.grads.b[l] += matmul_tn(lt.lora_u, d_lv);
    Matrix d_lu = matmul_nt(d_lv, w.lora_b);
    res.grads.a[l] += matmul_tn(lt.relu_out, d_lu);
    Matrix d_h = matmul_nt(d_down, w.w_down);
    d_h += matmul_nt(d_lu, w.lora_a);
    for (std::size_t i = 0; i < d_h.data().size(); ++i)
      if (lt.relu_out.data()[i] <= 0.0) d_h.data()[i] = 0.0;
    d_r1 += matmul_nt(d_h, w.w_up);

    // attention
    Matrix d_attn = matmul_nt(d_r1, w.wo);
    Matrix dq(L, cfg.hidden);
    Matrix dk(L, cfg.hidden);
    Matrix dv(L, cfg.hidden);
    for (long i = 0; i < L; ++i) {
      for (int head = 0; head < cfg.heads; ++head) {
        const long c0 = head * hd;
        const Matrix& pi = lt.probs[i];
        std::vector<double> dp(i + 1), ds(i + 1);
        double dot = 0.0;
        for (long j = 0; j <= i; ++j) {
          double acc = 0.0;
          for (long c = 0; c < hd; ++c) acc += d_attn(i, c0 + c) * lt.v(j, c0 + c);
          dp[j] = acc;
          dot += acc * pi(head, j);
        }
        for (long j = 0; j <= i; ++j) ds[j] = (dp[j] - dot) * pi(head, j);
        for (long j = 0; j <= i; ++j) {
          for (long c = 0; c < hd; ++c) {
            dq(i, c0 + c) += ds[j] * lt.k(j, c0 + c) * scale;
            dk(j, c0 + c) += ds[j] * lt.q(i, c0 + c) * scale;
            dv(j, c0 + c) += pi(head, j) * d_attn(i, c0 + c);
          }
        }
      }
    }
    Matrix dx_in = d_r1;  // residual r1 = x + o contributes via d_r1
    dx_in += matmul_nt(dq, w.wq);
    dx_in += matmul_nt(dk, w.wk);
    dx_in += matmul_nt(dv, w.wv);

    res.layers[l].dk = std::move(dk);
    res.layers[l].dv = std::move(dv);
    res.layers[l].dx = dx_in;
    dx = std::move(dx_in);
  }
  return res;
}

}  // namespace coserve
