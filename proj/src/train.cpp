#include "pdt/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <sstream>

#include "json.hpp"
#include "pdt/io_util.hpp"

namespace pdt {

using nlohmann::json;

std::string to_string(Phase p) { return p == Phase::Pretrain ? "pretrain" : "finetune"; }

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::Full: return "full";
    case Ablation::NoLu: return "no_Lu";
    case Ablation::NoLc: return "no_Lc";
    case Ablation::NoBoth: return "no_both";
  }
  return "full";
}

Ablation ablation_from_string(const std::string& s) {
  if (s == "full") return Ablation::Full;
  if (s == "no_Lu") return Ablation::NoLu;
  if (s == "no_Lc") return Ablation::NoLc;
  if (s == "no_both") return Ablation::NoBoth;
  throw ConfigError("unknown ablation variant: " + s +
                    " (expected full|no_Lu|no_Lc|no_both)");
}

std::string TrainConfig::to_json() const {
  json j;
  j["phase"] = pdt::to_string(phase);
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["lr"] = lr;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["adam_eps"] = adam_eps;
  j["hist_user"] = hist_user;
  j["hist_content"] = hist_content;
  j["hist_finetune"] = hist_finetune;
  j["d_user"] = d_user;
  j["d_item"] = d_item;
  j["num_layers"] = num_layers;
  j["num_heads"] = num_heads;
  j["d_ff"] = d_ff;
  j["dropout"] = dropout;
  j["dropout_in_attention"] = dropout_in_attention;
  j["lambda_u"] = loss.lambda_u;
  j["lambda_c"] = loss.lambda_c;
  j["temperature"] = loss.temperature;
  j["denominator_mode"] =
      loss.denominator_mode == DenominatorMode::Standard ? "standard" : "exclude_positive";
  j["bpr_mode"] = loss.bpr_mode == BprMode::Standard ? "standard" : "as_written";
  j["ablation"] = pdt::to_string(ablation);
  j["seed"] = seed;
  j["eval_every"] = eval_every;
  j["checkpoint_dir"] = checkpoint_dir;
  j["min_hist"] = min_hist;
  j["grad_clip"] = grad_clip;
  j["multi_target"] = multi_target;
  j["val_sampled"] = val_sampled;
  j["val_negatives"] = val_negatives;
  j["val_exclude_seen"] = val_exclude_seen;
  j["eval_batch"] = eval_batch;
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  TrainConfig c;
  c.phase = j.at("phase").get<std::string>() == "pretrain" ? Phase::Pretrain : Phase::Finetune;
  c.epochs = j.at("epochs").get<int64_t>();
  c.batch_size = j.at("batch_size").get<int64_t>();
  c.lr = j.at("lr").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.adam_eps = j.at("adam_eps").get<double>();
  c.hist_user = j.at("hist_user").get<int64_t>();
  c.hist_content = j.at("hist_content").get<int64_t>();
  c.hist_finetune = j.at("hist_finetune").get<int64_t>();
  c.d_user = j.at("d_user").get<int64_t>();
  c.d_item = j.at("d_item").get<int64_t>();
  c.num_layers = j.at("num_layers").get<int64_t>();
  c.num_heads = j.at("num_heads").get<int64_t>();
  c.d_ff = j.at("d_ff").get<int64_t>();
  c.dropout = j.at("dropout").get<double>();
  c.dropout_in_attention = j.at("dropout_in_attention").get<bool>();
  c.loss.lambda_u = j.at("lambda_u").get<double>();
  c.loss.lambda_c = j.at("lambda_c").get<double>();
  c.loss.temperature = j.at("temperature").get<double>();
  c.loss.denominator_mode = j.at("denominator_mode").get<std::string>() == "standard"
                                ? DenominatorMode::Standard
                                : DenominatorMode::ExcludePositive;
  c.loss.bpr_mode =
      j.at("bpr_mode").get<std::string>() == "standard" ? BprMode::Standard : BprMode::AsWritten;
  c.ablation = ablation_from_string(j.at("ablation").get<std::string>());
  c.seed = j.at("seed").get<uint64_t>();
  c.eval_every = j.at("eval_every").get<int64_t>();
  c.checkpoint_dir = j.at("checkpoint_dir").get<std::string>();
  c.min_hist = j.at("min_hist").get<int64_t>();
  c.grad_clip = j.at("grad_clip").get<double>();
  c.multi_target = j.at("multi_target").get<bool>();
  c.val_sampled = j.at("val_sampled").get<bool>();
  c.val_negatives = j.at("val_negatives").get<int64_t>();
  c.val_exclude_seen = j.at("val_exclude_seen").get<bool>();
  c.eval_batch = j.at("eval_batch").get<int64_t>();
  return c;
}

ModelConfig TrainConfig::model_config(int64_t n_users, int64_t n_items) const {
  ModelConfig mc;
  mc.n_users = n_users;
  mc.n_items = n_items;
  mc.d_user = d_user;
  mc.d_item = d_item;
  mc.num_layers = num_layers;
  mc.num_heads = num_heads;
  mc.d_ff = d_ff;
  mc.dropout_p = dropout;
  mc.max_hist_user = std::max(hist_user, hist_finetune);
  mc.max_hist_content = hist_content;
  mc.dropout_in_attention = dropout_in_attention;
  return mc;
}

EvalProtocol TrainConfig::val_protocol() const {
  EvalProtocol p;
  p.mode = val_sampled ? EvalMode::Sampled : EvalMode::FullRank;
  p.n_negatives = val_negatives;
  p.exclude_seen = val_exclude_seen;
  p.ks = {10};
  p.history_len = hist_finetune;
  p.batch = eval_batch;
  return p;
}

// --------------------------------------------------------------------------
// Checkpoint serialization (magic PDTC, CRC32 trailer)

namespace {

constexpr char kCkptMagic[4] = {'P', 'D', 'T', 'C'};
constexpr uint32_t kCkptVersion = 1;

json state_json(const Checkpoint& c) {
  json j;
  j["phase"] = c.phase;
  j["epochs_completed"] = c.epochs_completed;
  j["step"] = c.step;
  j["best_val_recall10"] = c.best_val_recall10;
  j["best_epoch"] = c.best_epoch;
  j["n_users"] = c.n_users;
  j["n_items"] = c.n_items;
  j["adam_t"] = c.adam_t;
  return j;
}

std::vector<unsigned char> checkpoint_bytes(const Checkpoint& c) {
  ByteWriter w;
  w.raw(kCkptMagic, 4);
  w.u32(kCkptVersion);
  w.str(c.config.to_json());
  w.str(state_json(c).dump());
  w.str(c.rng_text);
  w.u32(static_cast<uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    w.str(t.name);
    w.u8(t.dtype);
    w.u32(static_cast<uint32_t>(t.shape.size()));
    for (int64_t d : t.shape) w.u64(static_cast<uint64_t>(d));
    w.u64(t.bytes.size());
    w.raw(t.bytes.data(), t.bytes.size());
  }
  uint32_t crc = crc32(w.bytes.data(), w.bytes.size());
  w.u32(crc);
  return std::move(w.bytes);
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  write_file_bytes(path, checkpoint_bytes(ckpt));
}

Checkpoint load_checkpoint(const std::string& path) {
  auto bytes = read_file_bytes(path);
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kCkptMagic, 4) != 0)
    throw DataError("checkpoint: " + path + " is not a PDTC file");
  ByteReader r{bytes.data(), bytes.size()};
  char magic[4];
  r.raw(magic, 4);
  uint32_t version = r.u32();
  if (version != kCkptVersion)
    throw IntegrityError("checkpoint: format version " + std::to_string(version) +
                         " unsupported (this build reads version " +
                         std::to_string(kCkptVersion) + ")");
  uint32_t stored_crc = static_cast<uint32_t>(bytes[bytes.size() - 4]) |
                        static_cast<uint32_t>(bytes[bytes.size() - 3]) << 8 |
                        static_cast<uint32_t>(bytes[bytes.size() - 2]) << 16 |
                        static_cast<uint32_t>(bytes[bytes.size() - 1]) << 24;
  uint32_t actual = crc32(bytes.data(), bytes.size() - 4);
  if (stored_crc != actual)
    throw IntegrityError("checkpoint: CRC mismatch in " + path + " (file is corrupted)");

  Checkpoint c;
  c.version = version;
  c.config = TrainConfig::from_json(r.str());
  json st = json::parse(r.str());
  c.phase = st.at("phase").get<std::string>();
  c.epochs_completed = st.at("epochs_completed").get<int64_t>();
  c.step = st.at("step").get<int64_t>();
  c.best_val_recall10 = st.at("best_val_recall10").get<double>();
  c.best_epoch = st.at("best_epoch").get<int64_t>();
  c.n_users = st.at("n_users").get<int64_t>();
  c.n_items = st.at("n_items").get<int64_t>();
  c.adam_t = st.at("adam_t").get<int64_t>();
  c.rng_text = r.str();
  uint32_t n = r.u32();
  for (uint32_t i = 0; i < n; ++i) {
    TensorBlob t;
    t.name = r.str();
    t.dtype = r.u8();
    uint32_t nd = r.u32();
    for (uint32_t d = 0; d < nd; ++d) t.shape.push_back(static_cast<int64_t>(r.u64()));
    uint64_t nb = r.u64();
    t.bytes.resize(nb);
    r.raw(t.bytes.data(), nb);
    c.tensors.push_back(std::move(t));
  }
  return c;
}

Checkpoint checkpoint_of(const PdtModel<float>& m, const AdamState<float>& adam,
                         const TrainConfig& cfg, int64_t n_users, int64_t n_items) {
  Checkpoint c;
  c.config = cfg;
  c.n_users = n_users;
  c.n_items = n_items;
  c.adam_t = adam.t;
  auto put = [&](const std::string& name, const Shape& shape, const float* data, int64_t numel) {
    TensorBlob t;
    t.name = name;
    t.dtype = 0;
    t.shape = shape;
    t.bytes.resize(static_cast<size_t>(numel) * sizeof(float));
    std::memcpy(t.bytes.data(), data, t.bytes.size());
    c.tensors.push_back(std::move(t));
  };
  for (const auto& np : m.parameters())
    put(np.name, np.tensor.shape(), np.tensor.data(), np.tensor.numel());
  for (const auto& kv : adam.moments) {
    Shape s{static_cast<int64_t>(kv.second.first.size())};
    put("adam.m." + kv.first, s, kv.second.first.data(),
        static_cast<int64_t>(kv.second.first.size()));
    put("adam.v." + kv.first, s, kv.second.second.data(),
        static_cast<int64_t>(kv.second.second.size()));
  }
  return c;
}

namespace {

const TensorBlob* find_blob(const Checkpoint& c, const std::string& name) {
  for (const auto& t : c.tensors)
    if (t.name == name) return &t;
  return nullptr;
}

}  // namespace

PdtModel<float> model_of(const Checkpoint& ckpt) {
  Rng rng(mix_seed(ckpt.config.seed, 0x1A17));
  PdtModel<float> m = PdtModel<float>::init(ckpt.config.model_config(ckpt.n_users, ckpt.n_items), rng);
  for (auto& np : m.parameters()) {
    const TensorBlob* b = find_blob(ckpt, np.name);
    if (!b) throw IntegrityError("checkpoint: missing tensor " + np.name);
    if (b->shape != np.tensor.shape())
      throw IntegrityError("checkpoint: tensor " + np.name + " has shape " + shape_str(b->shape) +
                           ", model expects " + shape_str(np.tensor.shape()));
    std::memcpy(np.tensor.data(), b->bytes.data(), b->bytes.size());
  }
  return m;
}

AdamState<float> adam_of(const Checkpoint& ckpt) {
  AdamState<float> st;
  st.t = ckpt.adam_t;
  for (const auto& t : ckpt.tensors) {
    if (t.name.rfind("adam.m.", 0) != 0) continue;
    std::string pname = t.name.substr(7);
    const TensorBlob* vb = find_blob(ckpt, "adam.v." + pname);
    if (!vb) throw IntegrityError("checkpoint: adam.v missing for " + pname);
    size_t n = t.bytes.size() / sizeof(float);
    std::vector<float> mvec(n), vvec(n);
    std::memcpy(mvec.data(), t.bytes.data(), t.bytes.size());
    std::memcpy(vvec.data(), vb->bytes.data(), vb->bytes.size());
    st.moments.push_back({pname, {std::move(mvec), std::move(vvec)}});
  }
  return st;
}

// --------------------------------------------------------------------------
// Training loops

void StepLogger::log(Phase phase, int64_t epoch, int64_t step, double l_u, double l_c,
                     double l_bpr, double total, double wall_ms) {
  if (!out) return;
  char buf[320];
  snprintf(buf, sizeof(buf),
           "{\"phase\":\"%s\",\"epoch\":%lld,\"step\":%lld,\"L_u\":%.9g,\"L_c\":%.9g,"
           "\"L_bpr\":%.9g,\"total\":%.9g,\"wall_ms\":%.3f}\n",
           to_string(phase).c_str(), static_cast<long long>(epoch),
           static_cast<long long>(step), l_u, l_c, l_bpr, total, wall_ms);
  (*out) << buf;
  out->flush();
}

namespace {

std::string rng_to_text(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

Rng rng_from_text(const std::string& text) {
  Rng rng;
  std::istringstream is(text);
  is >> rng;
  if (!is) throw IntegrityError("checkpoint: cannot parse rng state");
  return rng;
}

std::vector<int64_t> shuffled(const std::vector<int64_t>& pool, Rng& rng) {
  std::vector<int64_t> order = pool;
  for (size_t i = 0; i + 1 < order.size(); ++i) {
    size_t j = i + static_cast<size_t>(rand_below(rng, order.size() - i));
    std::swap(order[i], order[j]);
  }
  return order;
}

// Batch slices of one epoch: ceil(n/B) batches; a trailing singleton is
// topped up from the front of the permutation so contrastive losses always
// see at least two anchors.
std::vector<std::vector<int64_t>> epoch_batches(const std::vector<int64_t>& order, int64_t b) {
  std::vector<std::vector<int64_t>> out;
  int64_t n = static_cast<int64_t>(order.size());
  for (int64_t s = 0; s < n; s += b) {
    std::vector<int64_t> slice(order.begin() + s, order.begin() + std::min(n, s + b));
    if (slice.size() == 1 && n > 1) slice.push_back(order[0]);
    out.push_back(std::move(slice));
  }
  return out;
}

void ensure_dir(const std::string& dir) {
  if (!dir.empty()) std::filesystem::create_directories(dir);
}

double nan_guard(double v, int64_t step) {
  if (std::isnan(v) || std::isinf(v))
    throw TrainingError("loss is not finite at step " + std::to_string(step));
  return v;
}

}  // namespace

Checkpoint pretrain(const BipartiteDataset& ds, const Split& split, const TrainConfig& cfg,
                    StepLogger logger) {
  if (cfg.ablation == Ablation::NoBoth)
    throw ConfigError("pretrain: ablation no_both skips pre-training entirely");
  cfg.loss.validate();
  if (split.train_edges.empty()) throw DataError("pretrain: empty train split");

  Rng init_rng(mix_seed(cfg.seed, 0x1A17));
  PdtModel<float> model =
      PdtModel<float>::init(cfg.model_config(ds.n_users(), ds.n_items()), init_rng);
  auto params = model.parameters();
  AdamState<float> adam;
  AdamConfig acfg{cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps};
  Rng model_rng(mix_seed(cfg.seed, 0xD807));

  auto pool = pretrain_anchor_pool(ds, split, cfg.min_hist);
  if (pool.empty())
    throw DataError("pretrain: no train edge qualifies as anchor with min_hist=" +
                    std::to_string(cfg.min_hist));

  int64_t step = 0;
  for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng srng(mix_seed(mix_seed(cfg.seed, 1), static_cast<uint64_t>(epoch)));
    auto order = shuffled(pool, srng);
    for (auto& slice : epoch_batches(order, cfg.batch_size)) {
      auto t0 = std::chrono::steady_clock::now();
      PretrainBatch batch = fill_pretrain_batch(ds, slice, cfg.hist_user, cfg.hist_content);
      Tape<float> tp(true);
      Tensor<float> l_u, l_c, loss;
      if (cfg.ablation != Ablation::NoLu) {
        Tensor<float> anchors = embedding_rows(tp, model.f_u, batch.user_ids);
        if (model.user_proj.defined()) anchors = matmul(tp, anchors, model.user_proj);
        Tensor<float> ctx = encode_user_history(tp, model, batch.user_histories, true, model_rng);
        l_u = info_nce(tp, anchors, ctx, cfg.loss);
      }
      if (cfg.ablation != Ablation::NoLc) {
        Tensor<float> anchors = embedding_rows(tp, model.f_c, batch.content_ids);
        Tensor<float> ctx =
            encode_content_history(tp, model, batch.content_histories, true, model_rng);
        l_c = info_nce(tp, anchors, ctx, cfg.loss);
      }
      if (l_u.defined() && l_c.defined()) loss = add(tp, l_u, l_c);
      else loss = l_u.defined() ? l_u : l_c;

      double lv = nan_guard(loss.item(), step);
      for (auto& np : params) np.tensor.zero_grad();
      tp.backward(loss);
      if (cfg.grad_clip > 0) clip_grad_norm(params, cfg.grad_clip);
      adam_step(params, adam, acfg);
      ++step;
      double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                      .count();
      logger.log(Phase::Pretrain, epoch, step, l_u.defined() ? l_u.item() : 0.0,
                 l_c.defined() ? l_c.item() : 0.0, 0.0, lv, ms);
    }
  }

  Checkpoint ckpt = checkpoint_of(model, adam, cfg, ds.n_users(), ds.n_items());
  ckpt.phase = "pretrain";
  ckpt.epochs_completed = cfg.epochs;
  ckpt.step = step;
  ckpt.rng_text = rng_to_text(model_rng);
  if (!cfg.checkpoint_dir.empty()) {
    ensure_dir(cfg.checkpoint_dir);
    save_checkpoint(ckpt, cfg.checkpoint_dir + "/pretrain.ckpt");
  }
  return ckpt;
}

Checkpoint finetune(const BipartiteDataset& ds, const Split& split, const TrainConfig& cfg,
                    const Checkpoint* init, StepLogger logger) {
  cfg.loss.validate();
  if (split.train_edges.empty()) throw DataError("finetune: empty train split");
  bool resume = init && init->phase == "finetune";
  if (!init && cfg.ablation != Ablation::NoBoth)
    throw ConfigError("finetune: init checkpoint required unless ablation is no_both");
  if (init && (init->n_users != ds.n_users() || init->n_items != ds.n_items()))
    throw ConfigError("finetune: checkpoint vocab sizes do not match the dataset");

  LossConfig lc = cfg.loss;
  if (cfg.ablation == Ablation::NoLu || cfg.ablation == Ablation::NoBoth) lc.lambda_u = 0;
  if (cfg.ablation == Ablation::NoLc || cfg.ablation == Ablation::NoBoth) lc.lambda_c = 0;

  PdtModel<float> model = [&]() {
    if (init) return model_of(*init);
    Rng init_rng(mix_seed(cfg.seed, 0x1A17));
    return PdtModel<float>::init(cfg.model_config(ds.n_users(), ds.n_items()), init_rng);
  }();
  auto params = model.parameters();
  // Fresh optimizer state at fine-tune start; carried over only on resume.
  AdamState<float> adam = resume ? adam_of(*init) : AdamState<float>{};
  AdamConfig acfg{cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps};
  Rng model_rng = resume ? rng_from_text(init->rng_text) : Rng(mix_seed(cfg.seed, 0xF17E));

  auto ft_pool = finetune_anchor_pool(ds, split);
  if (ft_pool.empty()) throw DataError("finetune: no train edge has a prior user history");
  bool needs_contrastive = lc.lambda_u > 0 || lc.lambda_c > 0;
  std::vector<int64_t> pt_pool;
  std::vector<uint8_t> pt_ok;
  if (needs_contrastive) {
    pt_pool = pretrain_anchor_pool(ds, split, cfg.min_hist);
    if (pt_pool.empty())
      throw DataError("finetune: contrastive terms active but no edge qualifies as "
                      "pre-training anchor");
    pt_ok.assign(ds.n_edges(), 0);
    for (int64_t e : pt_pool) pt_ok[e] = 1;
  }

  int64_t start_epoch = resume ? init->epochs_completed : 0;
  int64_t step = resume ? init->step : 0;
  double best_val = resume ? init->best_val_recall10 : -1.0;
  int64_t best_epoch = resume ? init->best_epoch : -1;
  Checkpoint best_ckpt;
  bool have_best = false;
  std::string best_path =
      cfg.checkpoint_dir.empty() ? "" : cfg.checkpoint_dir + "/finetune_best.ckpt";
  if (resume && !best_path.empty() && std::filesystem::exists(best_path)) {
    best_ckpt = load_checkpoint(best_path);
    have_best = true;
  }
  if (!cfg.checkpoint_dir.empty()) ensure_dir(cfg.checkpoint_dir);

  for (int64_t epoch = start_epoch + 1; epoch <= cfg.epochs; ++epoch) {
    Rng srng(mix_seed(mix_seed(cfg.seed, 2), static_cast<uint64_t>(epoch)));
    auto order = shuffled(ft_pool, srng);
    for (auto& slice : epoch_batches(order, cfg.batch_size)) {
      auto t0 = std::chrono::steady_clock::now();
      FinetuneBatch fb = fill_finetune_batch(ds, split, slice, cfg.hist_finetune, srng,
                                             cfg.multi_target);
      PretrainBatch pb;
      if (needs_contrastive) {
        // Contrastive terms ride on the same anchor edges where both
        // histories exist; others are resampled from the qualifying pool.
        std::vector<int64_t> anchors;
        anchors.reserve(slice.size());
        for (int64_t e : slice)
          anchors.push_back(pt_ok[e] ? e
                                     : pt_pool[rand_below(srng, pt_pool.size())]);
        pb = fill_pretrain_batch(ds, anchors, cfg.hist_user, cfg.hist_content);
      }
      Tape<float> tp(true);
      TotalLossParts<float> parts = total_loss(tp, model, fb, needs_contrastive ? &pb : nullptr,
                                               lc, true, model_rng, nullptr, cfg.multi_target);
      double lv = nan_guard(parts.total.item(), step);
      for (auto& np : params) np.tensor.zero_grad();
      tp.backward(parts.total);
      if (cfg.grad_clip > 0) clip_grad_norm(params, cfg.grad_clip);
      adam_step(params, adam, acfg);
      ++step;
      double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                      .count();
      logger.log(Phase::Finetune, epoch, step, parts.l_user.defined() ? parts.l_user.item() : 0.0,
                 parts.l_content.defined() ? parts.l_content.item() : 0.0, parts.l_bpr.item(), lv,
                 ms);
    }

    if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
      Rng eval_rng(mix_seed(mix_seed(cfg.seed, 3), static_cast<uint64_t>(epoch)));
      MetricsReport rep = evaluate(model, ds, split, Which::Val, cfg.val_protocol(), eval_rng);
      double r10 = rep.recall_at(10);
      if (r10 > best_val) {  // ties keep the earlier epoch
        best_val = r10;
        best_epoch = epoch;
        best_ckpt = checkpoint_of(model, adam, cfg, ds.n_users(), ds.n_items());
        best_ckpt.phase = "finetune";
        best_ckpt.epochs_completed = epoch;
        best_ckpt.step = step;
        best_ckpt.best_val_recall10 = best_val;
        best_ckpt.best_epoch = best_epoch;
        best_ckpt.rng_text = rng_to_text(model_rng);
        have_best = true;
        if (!best_path.empty()) save_checkpoint(best_ckpt, best_path);
      }
      if (!cfg.checkpoint_dir.empty()) {
        Checkpoint boundary = checkpoint_of(model, adam, cfg, ds.n_users(), ds.n_items());
        boundary.phase = "finetune";
        boundary.epochs_completed = epoch;
        boundary.step = step;
        boundary.best_val_recall10 = best_val;
        boundary.best_epoch = best_epoch;
        boundary.rng_text = rng_to_text(model_rng);
        save_checkpoint(boundary, cfg.checkpoint_dir + "/finetune_resume.ckpt");
      }
    }
  }

  if (!have_best) throw TrainingError("finetune: no epochs were run, nothing to select");
  return best_ckpt;
}

}  // namespace pdt
