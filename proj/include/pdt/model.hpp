#pragma once

// The PDT architecture: user/content embedding tables, a bidirectional CLS
// encoder per side, and a causal next-item decoder that shares every weight
// of the user-history encoder except the CLS vector (and the CLS positional
// row, which only the CLS path ever reads). When the user and item embedding
// widths differ, a linear projection lifts user embeddings to the item width
// before they enter the content encoder or act as contrastive anchors.

#include <optional>
#include <unordered_set>

#include "pdt/data.hpp"
#include "pdt/nn.hpp"
#include "pdt/tensor.hpp"

namespace pdt {

enum class DenominatorMode { Standard, ExcludePositive };
enum class BprMode { Standard, AsWritten };

struct LossConfig {
  double lambda_u = 0.01;
  double lambda_c = 0.01;
  double temperature = 0.5;
  DenominatorMode denominator_mode = DenominatorMode::Standard;
  BprMode bpr_mode = BprMode::Standard;

  void validate() const {
    if (temperature <= 0) throw ConfigError("loss: temperature must be positive");
    if (lambda_u < 0 || lambda_c < 0) throw ConfigError("loss: lambdas must be >= 0");
  }
};

struct ModelConfig {
  int64_t n_users = 0;
  int64_t n_items = 0;
  int64_t d_user = 128;
  int64_t d_item = 128;
  int64_t num_layers = 2;
  int64_t num_heads = 2;
  int64_t d_ff = 256;
  double dropout_p = 0.2;
  // Shared encoder table covers both the pre-training user history length and
  // the fine-tuning history length.
  int64_t max_hist_user = 9;
  int64_t max_hist_content = 9;
  bool dropout_in_attention = false;

  EncoderConfig encoder_user(bool causal) const {
    EncoderConfig c;
    c.num_layers = num_layers;
    c.num_heads = num_heads;
    c.d_model = d_item;
    c.d_ff = d_ff;
    c.dropout_p = dropout_p;
    c.max_len = max_hist_user;
    c.causal = causal;
    c.use_cls = !causal;
    c.dropout_in_attention = dropout_in_attention;
    return c;
  }
  EncoderConfig encoder_content() const {
    EncoderConfig c;
    c.num_layers = num_layers;
    c.num_heads = num_heads;
    c.d_model = d_item;
    c.d_ff = d_ff;
    c.dropout_p = dropout_p;
    c.max_len = max_hist_content;
    c.causal = false;
    c.use_cls = true;
    c.dropout_in_attention = dropout_in_attention;
    return c;
  }
};

template <class T>
struct PdtModel {
  ModelConfig cfg;
  Tensor<T> f_u;  // [n_users + 1, d_user], row 0 = pad, frozen at zero
  Tensor<T> f_c;  // [n_items + 1, d_item]
  // g_u and g_r are two views of enc_u: the CLS path and the causal path.
  EncoderParams<T> enc_u;
  EncoderParams<T> enc_c;
  Tensor<T> user_proj;  // [d_user, d_item]; defined iff d_user != d_item

  static PdtModel init(const ModelConfig& cfg, Rng& rng) {
    if (cfg.n_users < 1 || cfg.n_items < 1)
      throw ConfigError("model: needs at least one user and one item");
    PdtModel m;
    m.cfg = cfg;
    m.f_u = Tensor<T>::uniform({cfg.n_users + 1, cfg.d_user}, -0.02, 0.02, rng, true);
    m.f_c = Tensor<T>::uniform({cfg.n_items + 1, cfg.d_item}, -0.02, 0.02, rng, true);
    std::fill(m.f_u.data(), m.f_u.data() + cfg.d_user, T(0));
    std::fill(m.f_c.data(), m.f_c.data() + cfg.d_item, T(0));
    m.enc_u = EncoderParams<T>::init(cfg.encoder_user(false), /*with_cls=*/true, rng);
    m.enc_c = EncoderParams<T>::init(cfg.encoder_content(), /*with_cls=*/true, rng);
    if (cfg.d_user != cfg.d_item) {
      double lim = std::sqrt(6.0 / static_cast<double>(cfg.d_user + cfg.d_item));
      m.user_proj = Tensor<T>::uniform({cfg.d_user, cfg.d_item}, -lim, lim, rng, true);
    }
    return m;
  }

  std::vector<NamedParam<T>> parameters() const {
    std::vector<NamedParam<T>> out;
    out.push_back({"f_u", f_u});
    out.push_back({"f_c", f_c});
    enc_u.collect("enc_u", out);
    enc_c.collect("enc_c", out);
    if (user_proj.defined()) out.push_back({"user_proj", user_proj});
    return out;
  }

  // Tensors g_r reads; everything of enc_u except the CLS machinery.
  std::vector<NamedParam<T>> shared_decoder_params() const {
    std::vector<NamedParam<T>> out;
    out.push_back({"enc_u.ln_in_g", enc_u.ln_in_g});
    out.push_back({"enc_u.ln_in_b", enc_u.ln_in_b});
    out.push_back({"enc_u.pos", enc_u.pos});
    for (size_t i = 0; i < enc_u.blocks.size(); ++i)
      enc_u.blocks[i].collect("enc_u.layer" + std::to_string(i), out);
    return out;
  }
};

namespace detail {

inline std::vector<uint8_t> pad_mask_of(const IntTensor& idx) {
  std::vector<uint8_t> m(idx.data.size());
  for (size_t i = 0; i < idx.data.size(); ++i) m[i] = idx.data[i] != 0;
  return m;
}

}  // namespace detail

// g_u(U_i): embed item histories through f_c and return the CLS output.
template <class T>
Tensor<T> encode_user_history(Tape<T>& tp, const PdtModel<T>& m, const IntTensor& histories,
                              bool training, Rng& rng) {
  Tensor<T> embs = embedding_seq(tp, m.f_c, histories, /*pad_index=*/0);
  return encoder_forward(tp, embs, detail::pad_mask_of(histories), m.cfg.encoder_user(false),
                         m.enc_u, training, rng);
}

// g_c(C_j): embed user histories through f_u (projected when widths differ)
// and return the CLS output.
template <class T>
Tensor<T> encode_content_history(Tape<T>& tp, const PdtModel<T>& m, const IntTensor& histories,
                                 bool training, Rng& rng) {
  Tensor<T> embs = embedding_seq(tp, m.f_u, histories, /*pad_index=*/0);
  if (m.user_proj.defined()) embs = matmul(tp, embs, m.user_proj);
  return encoder_forward(tp, embs, detail::pad_mask_of(histories), m.cfg.encoder_content(),
                         m.enc_c, training, rng);
}

// g_r(U_i): causal pass over the shared encoder; the hidden state at each
// row's last non-pad slot is the predicted next-item vector.
template <class T>
Tensor<T> decode_next(Tape<T>& tp, const PdtModel<T>& m, const IntTensor& histories,
                      bool training, Rng& rng) {
  int64_t b = histories.dim(0), l = histories.dim(1);
  std::vector<int64_t> last(b, -1);
  for (int64_t i = 0; i < b; ++i) {
    for (int64_t j = l - 1; j >= 0; --j)
      if (histories.data[i * l + j] != 0) {
        last[i] = j;
        break;
      }
    if (last[i] < 0)
      throw ContractError("decode_next: batch row " + std::to_string(i) + " is all padding");
  }
  Tensor<T> embs = embedding_seq(tp, m.f_c, histories, 0);
  Tensor<T> seq = encoder_forward(tp, embs, detail::pad_mask_of(histories),
                                  m.cfg.encoder_user(true), m.enc_u, training, rng);
  return gather_slots(tp, seq, last);
}

// Full-sequence causal pass for per-position training targets.
template <class T>
Tensor<T> decode_all_positions(Tape<T>& tp, const PdtModel<T>& m, const IntTensor& histories,
                               bool training, Rng& rng) {
  Tensor<T> embs = embedding_seq(tp, m.f_c, histories, 0);
  return encoder_forward(tp, embs, detail::pad_mask_of(histories), m.cfg.encoder_user(true),
                         m.enc_u, training, rng);
}

// In-batch InfoNCE. Row i of the logits holds context_i . anchor_k / tau for
// every anchor k; the loss is the mean -log softmax at the matching index.
// With ExcludePositive the k == i term leaves the denominator (an unbounded
// variant kept for study). `anchor_ids` enables the duplicate-anchor warning
// (false negatives).
template <class T>
Tensor<T> info_nce(Tape<T>& tp, const Tensor<T>& anchors, const Tensor<T>& context,
                   const LossConfig& cfg, Warnings* warn = nullptr,
                   const std::vector<int64_t>* anchor_ids = nullptr) {
  cfg.validate();
  if (anchors.ndim() != 2 || anchors.shape() != context.shape())
    throw ShapeError("info_nce: anchors and context must both be [B, d]");
  int64_t b = anchors.dim(0);
  if (b < 2) throw ContractError("info_nce: needs a batch of at least 2, got " + std::to_string(b));
  if (warn && anchor_ids) {
    std::unordered_set<int64_t> seen(anchor_ids->begin(), anchor_ids->end());
    if (seen.size() != anchor_ids->size()) warn->duplicate_anchor_batches += 1;
  }
  Tensor<T> logits = scale(tp, matmul_nt(tp, context, anchors), 1.0 / cfg.temperature);
  bool exclude = cfg.denominator_mode == DenominatorMode::ExcludePositive;
  Tensor<T> lse = logsumexp_rows(tp, logits, exclude);
  Tensor<T> diag = take_diag(tp, logits);
  return mean(tp, sub(tp, lse, diag));
}

// Pairwise ranking loss. Standard: mean -log sigmoid(y.pos - y.neg).
// AsWritten: -log[sigmoid(y.pos) - sigmoid(y.neg)] with the difference
// clamped at 1e-12 (the printed form; undefined when the negative wins).
template <class T>
Tensor<T> bpr_loss(Tape<T>& tp, const Tensor<T>& y, const Tensor<T>& pos_emb,
                   const Tensor<T>& neg_emb, const LossConfig& cfg) {
  if (y.shape() != pos_emb.shape() || y.shape() != neg_emb.shape())
    throw ShapeError("bpr_loss: y/pos/neg must share shape");
  Tensor<T> sp = rows_dot(tp, y, pos_emb);
  Tensor<T> sn = rows_dot(tp, y, neg_emb);
  if (cfg.bpr_mode == BprMode::Standard) {
    return mean(tp, softplus(tp, neg(tp, sub(tp, sp, sn))));
  }
  Tensor<T> diff = sub(tp, sigmoid(tp, sp), sigmoid(tp, sn));
  return neg(tp, mean(tp, log_op(tp, clamp_min(tp, diff, 1e-12))));
}

template <class T>
struct PretrainLosses {
  Tensor<T> l_user;
  Tensor<T> l_content;
};

// Anchors are the entity embeddings, contexts are the encoder outputs;
// in-batch negatives are the other entities.
template <class T>
PretrainLosses<T> pretrain_loss(Tape<T>& tp, const PdtModel<T>& m, const PretrainBatch& batch,
                                const LossConfig& cfg, bool training, Rng& rng,
                                Warnings* warn = nullptr) {
  if (batch.size() < 2) throw ContractError("pretrain_loss: batch must have >= 2 anchors");
  PretrainLosses<T> out;
  {
    Tensor<T> anchors = embedding_rows(tp, m.f_u, batch.user_ids);
    if (m.user_proj.defined()) anchors = matmul(tp, anchors, m.user_proj);
    Tensor<T> ctx = encode_user_history(tp, m, batch.user_histories, training, rng);
    out.l_user = info_nce(tp, anchors, ctx, cfg, warn, &batch.user_ids);
  }
  {
    Tensor<T> anchors = embedding_rows(tp, m.f_c, batch.content_ids);
    Tensor<T> ctx = encode_content_history(tp, m, batch.content_histories, training, rng);
    out.l_content = info_nce(tp, anchors, ctx, cfg, warn, &batch.content_ids);
  }
  return out;
}

template <class T>
struct TotalLossParts {
  Tensor<T> total;
  Tensor<T> l_bpr;
  Tensor<T> l_user;     // undefined when lambda_u == 0
  Tensor<T> l_content;  // undefined when lambda_c == 0
};

// L_total = L_BPR + lambda_u * L_u + lambda_c * L_c. Contrastive terms are
// skipped entirely when their lambda is zero, so the lambda 0/0 case equals
// L_BPR bit-exactly.
template <class T>
TotalLossParts<T> total_loss(Tape<T>& tp, const PdtModel<T>& m, const FinetuneBatch& fb,
                             const PretrainBatch* pb, const LossConfig& cfg, bool training,
                             Rng& rng, Warnings* warn = nullptr, bool multi_target = false) {
  TotalLossParts<T> parts;
  if (multi_target && fb.pos_seq.numel() > 0) {
    Tensor<T> seq = decode_all_positions(tp, m, fb.histories, training, rng);
    Tensor<T> pos = embedding_seq(tp, m.f_c, fb.pos_seq, 0);
    Tensor<T> neg_e = embedding_seq(tp, m.f_c, fb.neg_seq, 0);
    Tensor<T> sp = rows_dot(tp, seq, pos);
    Tensor<T> sn = rows_dot(tp, seq, neg_e);
    std::vector<uint8_t> real(fb.pos_seq.data.size());
    for (size_t i = 0; i < real.size(); ++i) real[i] = fb.pos_seq.data[i] != 0;
    parts.l_bpr = masked_mean(tp, softplus(tp, neg(tp, sub(tp, sp, sn))), real);
  } else {
    Tensor<T> y = decode_next(tp, m, fb.histories, training, rng);
    Tensor<T> pos = embedding_rows(tp, m.f_c, fb.pos_items);
    Tensor<T> neg_e = embedding_rows(tp, m.f_c, fb.neg_items);
    parts.l_bpr = bpr_loss(tp, y, pos, neg_e, cfg);
  }
  parts.total = parts.l_bpr;
  if ((cfg.lambda_u > 0 || cfg.lambda_c > 0)) {
    if (!pb) throw ContractError("total_loss: contrastive lambdas set but no pretrain batch");
    if (cfg.lambda_u > 0) {
      Tensor<T> anchors = embedding_rows(tp, m.f_u, pb->user_ids);
      if (m.user_proj.defined()) anchors = matmul(tp, anchors, m.user_proj);
      Tensor<T> ctx = encode_user_history(tp, m, pb->user_histories, training, rng);
      parts.l_user = info_nce(tp, anchors, ctx, cfg, warn, &pb->user_ids);
      parts.total = add(tp, parts.total, scale(tp, parts.l_user, cfg.lambda_u));
    }
    if (cfg.lambda_c > 0) {
      Tensor<T> anchors = embedding_rows(tp, m.f_c, pb->content_ids);
      Tensor<T> ctx = encode_content_history(tp, m, pb->content_histories, training, rng);
      parts.l_content = info_nce(tp, anchors, ctx, cfg, warn, &pb->content_ids);
      parts.total = add(tp, parts.total, scale(tp, parts.l_content, cfg.lambda_c));
    }
  }
  return parts;
}

// Inner products of each y row against the selected item embeddings.
template <class T>
Tensor<T> score_items(Tape<T>& tp, const PdtModel<T>& m, const Tensor<T>& y,
                      const std::vector<int64_t>& item_ids) {
  for (int64_t id : item_ids)
    if (id == 0) throw ContractError("score_items: pad item id 0 requested");
  Tensor<T> rows = embedding_rows(tp, m.f_c, item_ids);
  return matmul_nt(tp, y, rows);
}

}  // namespace pdt
