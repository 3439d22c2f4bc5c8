#pragma once

// Interaction-log ingestion, the temporal bipartite graph, splits, per-entity
// histories and training batches. The dataset is immutable once built; batch
// builders own their RNG, so batches are a pure function of (dataset, split,
// rng state).
//
// Index 0 is the shared padding index in both vocabs; real users and items
// start at 1. Histories are right-aligned: pads occupy a prefix and the most
// recent element is always the last slot.

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "pdt/common.hpp"
#include "pdt/tensor.hpp"

namespace pdt {

struct InteractionRecord {
  std::string user_key;
  std::string item_key;
  int64_t timestamp = 0;
  std::optional<double> rating;

  bool operator==(const InteractionRecord&) const = default;
};

struct FormatSpec {
  char delimiter = '\t';
  int user_col = 0;
  int item_col = 1;
  int time_col = 2;
  int rating_col = 3;  // absent column in a line just means "no rating"
  // Fraction of malformed lines tolerated before the load fails.
  double max_malformed_fraction = 0.0;
};

struct LoadResult {
  std::vector<InteractionRecord> records;
  size_t malformed = 0;
};

LoadResult load_interactions(const std::string& path, const FormatSpec& fmt = {});
void write_interactions(const std::string& path, const std::vector<InteractionRecord>& records,
                        const FormatSpec& fmt = {});

struct Edge {
  int64_t user = 0;  // vocab index, >= 1
  int64_t item = 0;
  int64_t t = 0;
};

struct BipartiteDataset {
  // keys[0] is the pad slot and holds an empty string
  std::vector<std::string> user_keys;
  std::vector<std::string> item_keys;
  std::unordered_map<std::string, int64_t> user_index;
  std::unordered_map<std::string, int64_t> item_index;

  // Sorted by timestamp, ties in original input order.
  std::vector<Edge> edges;
  std::vector<double> ratings;  // parallel to edges, NaN when absent

  // Chronological adjacency: edge indices per entity.
  std::vector<std::vector<int64_t>> user_edges;
  std::vector<std::vector<int64_t>> item_edges;
  // Position of each edge inside its user's / item's chronological list.
  std::vector<int64_t> edge_user_pos;
  std::vector<int64_t> edge_item_pos;

  int64_t n_users() const { return static_cast<int64_t>(user_keys.size()) - 1; }
  int64_t n_items() const { return static_cast<int64_t>(item_keys.size()) - 1; }
  int64_t n_edges() const { return static_cast<int64_t>(edges.size()); }
};

BipartiteDataset build_dataset(const std::vector<InteractionRecord>& records);

// Binary dataset cache (magic PDTD). Stores vocabs and edge triples only;
// ratings live in the source log, not the cache.
void save_dataset_cache(const BipartiteDataset& ds, const std::string& path);
BipartiteDataset load_dataset_cache(const std::string& path);

enum class SplitMode { LeaveOneOut, TimeFraction };

struct Split {
  SplitMode mode = SplitMode::LeaveOneOut;
  // Per edge: 0 train, 1 val, 2 test, 3 dropped by cold-item pruning.
  std::vector<uint8_t> assign;
  std::vector<int64_t> train_edges, val_edges, test_edges;
  std::vector<uint8_t> item_in_train;  // indexed by item id
  size_t pruned = 0;
};

// Per user with >= 3 interactions: last -> test, second-last -> val, rest ->
// train; smaller users contribute everything to train. Val/test edges whose
// item never occurs in train are dropped.
Split split_leave_one_out(const BipartiteDataset& ds);

// Global timestamp-ordered cut at cumulative fractions, then the same
// cold-item pruning.
Split split_by_time(const BipartiteDataset& ds, double f_train = 0.8, double f_val = 0.1,
                    double f_test = 0.1);

// Last `len` items of user u strictly before `before_t`, left-padded with 0.
// When `exclude_edge` (an edge of u) is given, the cut is positional: exactly
// the edges preceding it in u's chronology, so equal-timestamp edges earlier
// in input order still count.
std::vector<int64_t> user_history(const BipartiteDataset& ds, int64_t u, int64_t before_t,
                                  int64_t exclude_edge, int64_t len);
std::vector<int64_t> content_history(const BipartiteDataset& ds, int64_t c, int64_t before_t,
                                     int64_t exclude_edge, int64_t len);

// History anchored directly at an edge (everything strictly before it in the
// entity's chronology).
std::vector<int64_t> user_history_at(const BipartiteDataset& ds, int64_t edge_idx, int64_t len);
std::vector<int64_t> content_history_at(const BipartiteDataset& ds, int64_t edge_idx, int64_t len);

struct PretrainBatch {
  std::vector<int64_t> anchor_edges;
  std::vector<int64_t> user_ids;
  std::vector<int64_t> content_ids;
  IntTensor user_histories;     // [B, L_u] item ids
  IntTensor content_histories;  // [B, L_c] user ids
  int64_t size() const { return static_cast<int64_t>(anchor_edges.size()); }
};

struct FinetuneBatch {
  std::vector<int64_t> anchor_edges;
  IntTensor histories;  // [B, L] item ids
  std::vector<int64_t> pos_items;
  std::vector<int64_t> neg_items;
  // Per-position targets for the multi-target training flag; empty otherwise.
  IntTensor pos_seq;
  IntTensor neg_seq;
  int64_t size() const { return static_cast<int64_t>(anchor_edges.size()); }
};

enum class NegScope { Train, All };

// Train-split edges usable as pre-training anchors: both the user and the
// content history hold at least `min_hist` real entries before the edge.
std::vector<int64_t> pretrain_anchor_pool(const BipartiteDataset& ds, const Split& split,
                                          int64_t min_hist);
// Train-split edges with a nonempty prior user history.
std::vector<int64_t> finetune_anchor_pool(const BipartiteDataset& ds, const Split& split);

PretrainBatch fill_pretrain_batch(const BipartiteDataset& ds,
                                  const std::vector<int64_t>& anchors, int64_t l_user,
                                  int64_t l_content);
PretrainBatch make_pretrain_batch(const BipartiteDataset& ds, const Split& split, int64_t batch,
                                  int64_t l_user, int64_t l_content, Rng& rng,
                                  int64_t min_hist = 1);

FinetuneBatch fill_finetune_batch(const BipartiteDataset& ds, const Split& split,
                                  const std::vector<int64_t>& anchors, int64_t len, Rng& rng,
                                  bool multi_target = false);
FinetuneBatch make_finetune_batch(const BipartiteDataset& ds, const Split& split, int64_t batch,
                                  int64_t len, Rng& rng, bool multi_target = false);

// Uniform sample, without replacement, of n items the user never interacted
// with (within the given scope). `split` may be null for NegScope::All.
std::vector<int64_t> sample_negatives(const BipartiteDataset& ds, const Split* split, int64_t u,
                                      int64_t n, Rng& rng, NegScope scope);

// Sorted item ids of u's train-split interactions.
std::vector<int64_t> user_train_items(const BipartiteDataset& ds, const Split& split, int64_t u);

}  // namespace pdt
