#pragma once

// Transformer building blocks and the Adam optimizer, composed from tensor
// ops. Encoders follow the SASRec plan: learned absolute positions, residual
// + post-layer-norm sublayers, GELU feed-forward. Sequences are right-aligned
// (left-padded), so the most recent element always sits at the last slot and
// positional rows are assigned from the tail of the table. Row 0 of the
// positional table is reserved for the CLS slot; encoders without a CLS token
// simply never touch it.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "pdt/tensor.hpp"

namespace pdt {

struct EncoderConfig {
  int64_t num_layers = 2;
  int64_t num_heads = 2;
  int64_t d_model = 128;
  int64_t d_ff = 256;
  double dropout_p = 0.2;
  int64_t max_len = 9;
  bool causal = false;
  bool use_cls = false;
  // Dropout is applied to the input stage and sublayer outputs; attention
  // probabilities are left alone unless this is set.
  bool dropout_in_attention = false;
  double ln_eps = 1e-5;

  void validate() const {
    if (d_model < 1 || num_heads < 1 || d_model % num_heads != 0)
      throw ConfigError("encoder: d_model must be divisible by num_heads");
    if (max_len < 1) throw ConfigError("encoder: max_len must be >= 1");
    if (dropout_p < 0 || dropout_p >= 1)
      throw ConfigError("encoder: dropout must be in [0,1)");
    if (num_layers < 1 || d_ff < 1)
      throw ConfigError("encoder: num_layers and d_ff must be >= 1");
  }
};

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <class T>
struct BlockParams {
  Tensor<T> wq, wk, wv, wo;        // [d, d]
  Tensor<T> w1, b1, w2, b2;        // [d, dff], [dff], [dff, d], [d]
  Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;

  static BlockParams init(const EncoderConfig& cfg, Rng& rng) {
    auto xavier = [&](int64_t fin, int64_t fout) {
      double lim = std::sqrt(6.0 / static_cast<double>(fin + fout));
      return Tensor<T>::uniform({fin, fout}, -lim, lim, rng, true);
    };
    BlockParams p;
    int64_t d = cfg.d_model, f = cfg.d_ff;
    p.wq = xavier(d, d);
    p.wk = xavier(d, d);
    p.wv = xavier(d, d);
    p.wo = xavier(d, d);
    p.w1 = xavier(d, f);
    p.b1 = Tensor<T>(Shape{f});
    p.b1.set_requires_grad(true);
    p.w2 = xavier(f, d);
    p.b2 = Tensor<T>(Shape{d});
    p.b2.set_requires_grad(true);
    p.ln1_g = Tensor<T>(Shape{d}, T(1));
    p.ln1_g.set_requires_grad(true);
    p.ln1_b = Tensor<T>(Shape{d});
    p.ln1_b.set_requires_grad(true);
    p.ln2_g = Tensor<T>(Shape{d}, T(1));
    p.ln2_g.set_requires_grad(true);
    p.ln2_b = Tensor<T>(Shape{d});
    p.ln2_b.set_requires_grad(true);
    return p;
  }

  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) const {
    out.push_back({prefix + ".wq", wq});
    out.push_back({prefix + ".wk", wk});
    out.push_back({prefix + ".wv", wv});
    out.push_back({prefix + ".wo", wo});
    out.push_back({prefix + ".w1", w1});
    out.push_back({prefix + ".b1", b1});
    out.push_back({prefix + ".w2", w2});
    out.push_back({prefix + ".b2", b2});
    out.push_back({prefix + ".ln1_g", ln1_g});
    out.push_back({prefix + ".ln1_b", ln1_b});
    out.push_back({prefix + ".ln2_g", ln2_g});
    out.push_back({prefix + ".ln2_b", ln2_b});
  }
};

template <class T>
struct EncoderParams {
  Tensor<T> ln_in_g, ln_in_b;
  Tensor<T> pos;   // [max_len + 1, d]; row 0 is the CLS positional row
  Tensor<T> cls;   // [d]; defined iff built with a CLS token
  std::vector<BlockParams<T>> blocks;

  static EncoderParams init(const EncoderConfig& cfg, bool with_cls, Rng& rng) {
    cfg.validate();
    EncoderParams p;
    int64_t d = cfg.d_model;
    p.ln_in_g = Tensor<T>(Shape{d}, T(1));
    p.ln_in_g.set_requires_grad(true);
    p.ln_in_b = Tensor<T>(Shape{d});
    p.ln_in_b.set_requires_grad(true);
    p.pos = Tensor<T>::uniform({cfg.max_len + 1, d}, -0.02, 0.02, rng, true);
    if (with_cls) p.cls = Tensor<T>::uniform({d}, -0.02, 0.02, rng, true);
    for (int64_t i = 0; i < cfg.num_layers; ++i) p.blocks.push_back(BlockParams<T>::init(cfg, rng));
    return p;
  }

  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) const {
    out.push_back({prefix + ".ln_in_g", ln_in_g});
    out.push_back({prefix + ".ln_in_b", ln_in_b});
    out.push_back({prefix + ".pos", pos});
    if (cls.defined()) out.push_back({prefix + ".cls", cls});
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(prefix + ".layer" + std::to_string(i), out);
  }
};

// Scaled dot-product self-attention with Q/K/V/O projections (no biases).
template <class T>
Tensor<T> multi_head_attention(Tape<T>& tp, const Tensor<T>& x,
                               const std::vector<uint8_t>& key_mask,
                               const EncoderConfig& cfg, const BlockParams<T>& p,
                               bool causal, bool training, Rng& rng) {
  Tensor<T> q = matmul(tp, x, p.wq);
  Tensor<T> k = matmul(tp, x, p.wk);
  Tensor<T> v = matmul(tp, x, p.wv);
  double attn_p = cfg.dropout_in_attention ? cfg.dropout_p : 0.0;
  Tensor<T> mixed =
      attention_core(tp, q, k, v, key_mask, cfg.num_heads, causal, attn_p, training, &rng);
  return matmul(tp, mixed, p.wo);
}

// Attention sublayer then feed-forward sublayer, each with dropout, residual
// add and post-layer-norm.
template <class T>
Tensor<T> transformer_block(Tape<T>& tp, const Tensor<T>& x,
                            const std::vector<uint8_t>& key_mask,
                            const EncoderConfig& cfg, const BlockParams<T>& p,
                            bool causal, bool training, Rng& rng) {
  Tensor<T> a = multi_head_attention(tp, x, key_mask, cfg, p, causal, training, rng);
  a = dropout(tp, a, cfg.dropout_p, training, rng);
  Tensor<T> x1 = layer_norm(tp, add(tp, x, a), p.ln1_g, p.ln1_b, cfg.ln_eps);
  Tensor<T> h = gelu(tp, add(tp, matmul(tp, x1, p.w1), p.b1));
  Tensor<T> f = add(tp, matmul(tp, h, p.w2), p.b2);
  f = dropout(tp, f, cfg.dropout_p, training, rng);
  return layer_norm(tp, add(tp, x1, f), p.ln2_g, p.ln2_b, cfg.ln_eps);
}

// Full encoder over already-embedded tokens [B, L, d].
// Input layer-norm + dropout, tail-aligned positional rows, optional CLS
// prefix, then the block stack. With use_cls the CLS position's output
// [B, d] is returned; otherwise the whole sequence [B, L, d] comes back and
// the caller picks the positions it needs.
template <class T>
Tensor<T> encoder_forward(Tape<T>& tp, const Tensor<T>& token_embs,
                          const std::vector<uint8_t>& key_mask,
                          const EncoderConfig& cfg, const EncoderParams<T>& p,
                          bool training, Rng& rng) {
  cfg.validate();
  if (token_embs.ndim() != 3)
    throw ShapeError("encoder: expected [B, L, d], got " + shape_str(token_embs.shape()));
  int64_t b = token_embs.dim(0), l = token_embs.dim(1);
  if (l > cfg.max_len)
    throw ContractError("encoder: sequence length " + std::to_string(l) +
                        " exceeds max_len " + std::to_string(cfg.max_len));
  if (cfg.use_cls && !p.cls.defined())
    throw ContractError("encoder: use_cls set but params carry no CLS vector");

  Tensor<T> x = layer_norm(tp, token_embs, p.ln_in_g, p.ln_in_b, cfg.ln_eps);
  x = dropout(tp, x, cfg.dropout_p, training, rng);
  // Right-aligned position ids: the last slot always maps to row max_len.
  int64_t start_row = 1 + (cfg.max_len - l);
  x = add_pos_rows(tp, x, p.pos, start_row);

  std::vector<uint8_t> mask = key_mask;
  if (cfg.use_cls) {
    Tensor<T> cls_tok = add(tp, p.cls, slice_row(tp, p.pos, 0));
    x = prepend_row(tp, cls_tok, x);
    std::vector<uint8_t> with_cls(b * (l + 1));
    for (int64_t i = 0; i < b; ++i) {
      with_cls[i * (l + 1)] = 1;
      std::memcpy(with_cls.data() + i * (l + 1) + 1, key_mask.data() + i * l, l);
    }
    mask = std::move(with_cls);
  }

  for (const auto& blk : p.blocks)
    x = transformer_block(tp, x, mask, cfg, blk, cfg.causal, training, rng);

  if (cfg.use_cls) return gather_slots(tp, x, std::vector<int64_t>(b, 0));
  return x;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  int64_t t = 0;
  // name -> (first moment, second moment); shapes mirror the parameters
  std::vector<std::pair<std::string, std::pair<std::vector<T>, std::vector<T>>>> moments;

  std::pair<std::vector<T>, std::vector<T>>* find(const std::string& name) {
    for (auto& kv : moments)
      if (kv.first == name) return &kv.second;
    return nullptr;
  }
};

// One Adam update with bias correction over every named parameter's
// accumulated gradient. Grads are left in place (caller zeroes them).
template <class T>
void adam_step(std::vector<NamedParam<T>>& params, AdamState<T>& state,
               const AdamConfig& cfg) {
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (auto& np : params) {
    Tensor<T>& p = np.tensor;
    p.ensure_grad();
    auto* mv = state.find(np.name);
    if (!mv) {
      state.moments.push_back({np.name,
                               {std::vector<T>(p.numel(), T(0)), std::vector<T>(p.numel(), T(0))}});
      mv = &state.moments.back().second;
    }
    if (static_cast<int64_t>(mv->first.size()) != p.numel())
      throw ShapeError("adam: moment shape mismatch for " + np.name);
    T* w = p.data();
    T* g = p.grad();
    T* m = mv->first.data();
    T* v = mv->second.data();
    for (int64_t i = 0; i < p.numel(); ++i) {
      if (std::isnan(static_cast<double>(g[i])))
        throw TrainingError("adam: NaN gradient in " + np.name + " at step " +
                            std::to_string(state.t));
      m[i] = static_cast<T>(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i]);
      v[i] = static_cast<T>(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i]);
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      w[i] -= static_cast<T>(cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

// Scales all gradients so the global L2 norm is at most max_norm.
// Returns the pre-clip norm.
template <class T>
double clip_grad_norm(std::vector<NamedParam<T>>& params, double max_norm) {
  double sq = 0;
  for (auto& np : params) {
    np.tensor.ensure_grad();
    const T* g = np.tensor.grad();
    for (int64_t i = 0; i < np.tensor.numel(); ++i)
      sq += static_cast<double>(g[i]) * static_cast<double>(g[i]);
  }
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    T s = static_cast<T>(max_norm / norm);
    for (auto& np : params) {
      T* g = np.tensor.grad();
      for (int64_t i = 0; i < np.tensor.numel(); ++i) g[i] *= s;
    }
  }
  return norm;
}

}  // namespace pdt
