#pragma once

// Pre-training and fine-tuning loops, binary checkpoints (magic PDTC with a
// CRC32 trailer), JSON-lines step logs, and the ablation grid. Given (seed,
// config, data) every logged loss and every checkpoint byte is reproducible
// on one build/platform; resuming from an epoch-boundary checkpoint replays
// the uninterrupted run exactly.

#include <optional>
#include <ostream>
#include <string>

#include "pdt/data.hpp"
#include "pdt/eval.hpp"
#include "pdt/model.hpp"
#include "pdt/nn.hpp"

namespace pdt {

enum class Phase { Pretrain, Finetune };
enum class Ablation { Full, NoLu, NoLc, NoBoth };

std::string to_string(Phase p);
std::string to_string(Ablation a);
Ablation ablation_from_string(const std::string& s);

struct TrainConfig {
  Phase phase = Phase::Pretrain;
  int64_t epochs = 2;  // pre-training default; fine-tuning defaults to 30
  int64_t batch_size = 1024;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int64_t hist_user = 9;
  int64_t hist_content = 9;
  int64_t hist_finetune = 8;
  int64_t d_user = 128;
  int64_t d_item = 128;
  int64_t num_layers = 2;
  int64_t num_heads = 2;
  int64_t d_ff = 256;
  double dropout = 0.2;
  bool dropout_in_attention = false;
  LossConfig loss;
  Ablation ablation = Ablation::Full;
  uint64_t seed = 42;
  int64_t eval_every = 1;
  std::string checkpoint_dir;
  int64_t min_hist = 1;
  double grad_clip = 0.0;  // 0 disables clipping
  bool multi_target = false;
  // Validation protocol used for best-checkpoint selection during fine-tune.
  bool val_sampled = false;
  int64_t val_negatives = 10000;
  bool val_exclude_seen = true;
  int64_t eval_batch = 256;

  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);

  ModelConfig model_config(int64_t n_users, int64_t n_items) const;
  EvalProtocol val_protocol() const;
};

struct TensorBlob {
  std::string name;
  uint8_t dtype = 0;  // 0 = f32
  Shape shape;
  std::vector<unsigned char> bytes;
};

struct Checkpoint {
  uint32_t version = 1;
  TrainConfig config;
  // run state
  std::string phase;
  int64_t epochs_completed = 0;
  int64_t step = 0;
  double best_val_recall10 = -1.0;
  int64_t best_epoch = -1;
  int64_t n_users = 0;
  int64_t n_items = 0;
  int64_t adam_t = 0;
  std::string rng_text;  // model rng stream (dropout)
  std::vector<TensorBlob> tensors;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Model + optimizer state <-> checkpoint blobs.
Checkpoint checkpoint_of(const PdtModel<float>& m, const AdamState<float>& adam,
                         const TrainConfig& cfg, int64_t n_users, int64_t n_items);
PdtModel<float> model_of(const Checkpoint& ckpt);
AdamState<float> adam_of(const Checkpoint& ckpt);

// One JSON object per optimizer step. wall_ms is wall clock and is the only
// non-reproducible field.
struct StepLogger {
  std::ostream* out = nullptr;
  void log(Phase phase, int64_t epoch, int64_t step, double l_u, double l_c, double l_bpr,
           double total, double wall_ms);
};

// Contrastive pre-training over the train split. Ablation NoBoth skips
// pre-training entirely and is rejected here.
Checkpoint pretrain(const BipartiteDataset& ds, const Split& split, const TrainConfig& cfg,
                    StepLogger logger = {});

// Fine-tunes with the ablation-weighted total loss, evaluating val Recall@10
// every eval_every epochs and retaining the best epoch's checkpoint. `init`
// is a pre-training checkpoint (or a fine-tune checkpoint to resume from);
// required unless ablation is NoBoth.
Checkpoint finetune(const BipartiteDataset& ds, const Split& split, const TrainConfig& cfg,
                    const Checkpoint* init, StepLogger logger = {});

}  // namespace pdt
