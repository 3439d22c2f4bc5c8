#include "pdt/runconfig.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace pdt {

const std::vector<KeySpec>& RunConfig::known_keys() {
  static const std::vector<KeySpec> keys = {
      {"data.file", "", "interaction log (user<TAB>item<TAB>timestamp[<TAB>rating])"},
      {"data.format", "tsv", "tsv | csv"},
      {"data.cols", "0,1,2,3", "column order: user,item,time,rating (-1 = no rating column)"},
      {"data.max_bad_fraction", "0", "tolerated fraction of malformed lines"},
      {"data.cache", "", "dataset cache path (PDTD); read when present, else built from data.file"},
      {"data.split", "leave_one_out", "leave_one_out | time"},
      {"data.fractions", "0.8,0.1,0.1", "train/val/test fractions for the time split"},
      {"data.min_hist", "1", "minimum history entries for a pre-training anchor"},

      {"model.d_user", "128", "user embedding width"},
      {"model.d_item", "128", "item embedding width (encoder d_model)"},
      {"model.layers", "2", "transformer layers per encoder"},
      {"model.heads", "2", "attention heads"},
      {"model.d_ff", "256", "feed-forward width"},
      {"model.dropout", "0.2", "dropout probability"},
      {"model.attn_dropout", "false", "also apply dropout to attention weights"},

      {"loss.lambda_u", "0.01", "weight of the user-side contrastive loss"},
      {"loss.lambda_c", "0.01", "weight of the content-side contrastive loss"},
      {"loss.temperature", "0.5", "InfoNCE temperature"},
      {"loss.denominator", "standard", "standard | exclude_positive"},
      {"loss.bpr", "standard", "standard | as_written"},

      {"train.epochs_pretrain", "2", "pre-training epochs"},
      {"train.epochs_finetune", "30", "fine-tuning epochs"},
      {"train.batch", "1024", "batch size"},
      {"train.lr", "0.0001", "Adam learning rate"},
      {"train.beta1", "0.9", "Adam beta1"},
      {"train.beta2", "0.999", "Adam beta2"},
      {"train.adam_eps", "1e-8", "Adam epsilon"},
      {"train.hist_user", "9", "pre-training user history length"},
      {"train.hist_content", "9", "pre-training content history length"},
      {"train.hist_finetune", "8", "fine-tuning history length"},
      {"train.ablation", "full", "full | no_Lu | no_Lc | no_both"},
      {"train.seed", "", "run seed; falls back to env PDT_SEED, then 42"},
      {"train.eval_every", "1", "epochs between validation evaluations"},
      {"train.grad_clip", "0", "global-norm gradient clip; 0 disables"},
      {"train.multi_target", "false", "per-position targets instead of last-position only"},
      {"train.init", "", "checkpoint to initialize fine-tuning from"},
      {"train.val_sampled", "false", "use the sampled protocol for validation selection"},
      {"train.val_negatives", "10000", "negatives for sampled validation"},

      {"eval.checkpoint", "", "checkpoint to evaluate"},
      {"eval.which", "test", "val | test"},
      {"eval.protocol", "full", "full | sampled"},
      {"eval.negatives", "10000", "sampled-protocol negative count"},
      {"eval.exclude_seen", "true", "drop the user's earlier items from full-rank candidates"},
      {"eval.ks", "5,10,20", "cutoffs for Recall@K / NDCG@K"},
      {"eval.neg_scope", "all", "negatives never interacted within: all | train"},
      {"eval.batch", "256", "evaluation batch size"},

      {"ablate.variants", "full,no_Lu,no_Lc,no_both", "ablation variants to run"},
      {"ablate.seeds", "42,43,44", "seeds for each variant"},

      {"analysis.kind", "content", "user | content"},
      {"analysis.checkpoint", "", "checkpoint to read embeddings from"},
      {"analysis.query", "", "entity key to query neighbors for"},
      {"analysis.k", "10", "neighbor count"},
      {"analysis.format", "raw", "raw | pca2d"},
      {"analysis.metadata", "", "optional metadata TSV joined by key"},
      {"analysis.normalize", "true", "L2-normalize rows before neighbor queries"},

      {"run.out", "out", "output directory for artifacts and manifests"},
      {"run.threads", "0", "worker threads (0 = hardware default; compute is single-threaded)"},
  };
  return keys;
}

namespace {

const KeySpec* find_key(const std::string& name) {
  for (const auto& k : RunConfig::known_keys())
    if (name == k.name) return &k;
  return nullptr;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

RunConfig RunConfig::load(const std::string& file, const std::vector<std::string>& overrides) {
  RunConfig rc;
  for (const auto& k : known_keys()) rc.values_[k.name] = k.def;

  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw IoError("cannot open config file: " + file);
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      size_t eq = t.find('=');
      if (eq == std::string::npos)
        throw ConfigError(file + ":" + std::to_string(lineno) + ": expected key = value");
      std::string key = trim(t.substr(0, eq));
      std::string val = trim(t.substr(eq + 1));
      if (!find_key(key))
        throw ConfigError(file + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
      rc.values_[key] = val;
    }
  }
  for (const auto& ov : overrides) {
    size_t eq = ov.find('=');
    if (eq == std::string::npos) throw ConfigError("override must be key=value, got '" + ov + "'");
    std::string key = trim(ov.substr(0, eq));
    std::string val = trim(ov.substr(eq + 1));
    if (!find_key(key)) throw ConfigError("unknown key '" + key + "'");
    rc.values_[key] = val;
  }
  return rc;
}

const std::string& RunConfig::str(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown key '" + key + "'");
  return it->second;
}

int64_t RunConfig::i64(const std::string& key) const {
  const std::string& v = str(key);
  try {
    size_t pos = 0;
    int64_t r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
}

uint64_t RunConfig::u64(const std::string& key) const {
  const std::string& v = str(key);
  try {
    size_t pos = 0;
    uint64_t r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
  }
}

double RunConfig::f64(const std::string& key) const {
  const std::string& v = str(key);
  try {
    size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

bool RunConfig::flag(const std::string& key) const {
  const std::string& v = str(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

std::vector<std::string> RunConfig::str_list(const std::string& key) const {
  std::vector<std::string> out;
  std::stringstream ss(str(key));
  std::string f;
  while (std::getline(ss, f, ',')) {
    f = trim(f);
    if (!f.empty()) out.push_back(f);
  }
  return out;
}

std::vector<int64_t> RunConfig::i64_list(const std::string& key) const {
  std::vector<int64_t> out;
  for (const auto& s : str_list(key)) {
    try {
      out.push_back(std::stoll(s));
    } catch (const std::exception&) {
      throw ConfigError(key + ": expected integers, got '" + s + "'");
    }
  }
  return out;
}

std::vector<double> RunConfig::f64_list(const std::string& key) const {
  std::vector<double> out;
  for (const auto& s : str_list(key)) {
    try {
      out.push_back(std::stod(s));
    } catch (const std::exception&) {
      throw ConfigError(key + ": expected numbers, got '" + s + "'");
    }
  }
  return out;
}

std::string RunConfig::echo() const {
  std::ostringstream os;
  for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
  return os.str();
}

TrainConfig RunConfig::train_config(Phase phase) const {
  TrainConfig c;
  c.phase = phase;
  c.epochs = phase == Phase::Pretrain ? i64("train.epochs_pretrain") : i64("train.epochs_finetune");
  c.batch_size = i64("train.batch");
  c.lr = f64("train.lr");
  c.beta1 = f64("train.beta1");
  c.beta2 = f64("train.beta2");
  c.adam_eps = f64("train.adam_eps");
  c.hist_user = i64("train.hist_user");
  c.hist_content = i64("train.hist_content");
  c.hist_finetune = i64("train.hist_finetune");
  c.d_user = i64("model.d_user");
  c.d_item = i64("model.d_item");
  c.num_layers = i64("model.layers");
  c.num_heads = i64("model.heads");
  c.d_ff = i64("model.d_ff");
  c.dropout = f64("model.dropout");
  c.dropout_in_attention = flag("model.attn_dropout");
  c.loss.lambda_u = f64("loss.lambda_u");
  c.loss.lambda_c = f64("loss.lambda_c");
  c.loss.temperature = f64("loss.temperature");
  const std::string& dm = str("loss.denominator");
  if (dm == "standard") c.loss.denominator_mode = DenominatorMode::Standard;
  else if (dm == "exclude_positive") c.loss.denominator_mode = DenominatorMode::ExcludePositive;
  else throw ConfigError("loss.denominator: expected standard|exclude_positive");
  const std::string& bm = str("loss.bpr");
  if (bm == "standard") c.loss.bpr_mode = BprMode::Standard;
  else if (bm == "as_written") c.loss.bpr_mode = BprMode::AsWritten;
  else throw ConfigError("loss.bpr: expected standard|as_written");
  c.ablation = ablation_from_string(str("train.ablation"));
  const std::string& seed_str = str("train.seed");
  if (!seed_str.empty()) {
    c.seed = u64("train.seed");
  } else if (const char* env = std::getenv("PDT_SEED"); env && *env) {
    c.seed = std::strtoull(env, nullptr, 10);
  } else {
    c.seed = 42;
  }
  c.eval_every = i64("train.eval_every");
  c.checkpoint_dir = str("run.out");
  c.min_hist = i64("data.min_hist");
  c.grad_clip = f64("train.grad_clip");
  c.multi_target = flag("train.multi_target");
  c.val_sampled = flag("train.val_sampled");
  c.val_negatives = i64("train.val_negatives");
  c.val_exclude_seen = flag("eval.exclude_seen");
  c.eval_batch = i64("eval.batch");
  return c;
}

EvalProtocol RunConfig::eval_protocol() const {
  EvalProtocol p;
  const std::string& mode = str("eval.protocol");
  if (mode == "full") p.mode = EvalMode::FullRank;
  else if (mode == "sampled") p.mode = EvalMode::Sampled;
  else throw ConfigError("eval.protocol: expected full|sampled");
  p.n_negatives = i64("eval.negatives");
  p.exclude_seen = flag("eval.exclude_seen");
  p.ks = i64_list("eval.ks");
  p.history_len = i64("train.hist_finetune");
  const std::string& sc = str("eval.neg_scope");
  if (sc == "all") p.neg_scope = NegScope::All;
  else if (sc == "train") p.neg_scope = NegScope::Train;
  else throw ConfigError("eval.neg_scope: expected all|train");
  p.batch = i64("eval.batch");
  p.validate();
  return p;
}

FormatSpec RunConfig::format_spec() const {
  FormatSpec f;
  const std::string& fmt = str("data.format");
  if (fmt == "tsv") f.delimiter = '\t';
  else if (fmt == "csv") f.delimiter = ',';
  else throw ConfigError("data.format: expected tsv|csv");
  auto cols = i64_list("data.cols");
  if (cols.size() < 3 || cols.size() > 4)
    throw ConfigError("data.cols: expected 3 or 4 column indices");
  f.user_col = static_cast<int>(cols[0]);
  f.item_col = static_cast<int>(cols[1]);
  f.time_col = static_cast<int>(cols[2]);
  f.rating_col = cols.size() == 4 ? static_cast<int>(cols[3]) : -1;
  f.max_malformed_fraction = f64("data.max_bad_fraction");
  return f;
}

}  // namespace pdt
