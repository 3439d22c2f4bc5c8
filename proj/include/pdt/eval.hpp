#pragma once

// Ranking protocols and metrics. Single-target evaluation: each val/test edge
// contributes one ranked query built from the user's strictly earlier
// interactions. Ties rank against the target (pessimistic), so results are
// reproducible and conservative.

#include <string>
#include <vector>

#include "pdt/data.hpp"
#include "pdt/model.hpp"

namespace pdt {

enum class EvalMode { FullRank, Sampled };
enum class Which { Val, Test };

struct EvalProtocol {
  EvalMode mode = EvalMode::FullRank;
  int64_t n_negatives = 10000;
  bool exclude_seen = true;  // full_rank only: drop the user's earlier items
  std::vector<int64_t> ks = {5, 10, 20};
  int64_t history_len = 8;
  NegScope neg_scope = NegScope::All;
  int64_t batch = 256;  // evaluation chunking; no effect on results

  void validate() const {
    if (ks.empty()) throw ConfigError("eval: ks must be nonempty");
    for (size_t i = 1; i < ks.size(); ++i)
      if (ks[i] <= ks[i - 1]) throw ConfigError("eval: ks must be strictly ascending");
    if (mode == EvalMode::Sampled && n_negatives < ks.back())
      throw ConfigError("eval: sampled protocol needs n_negatives >= max K");
    if (history_len < 1) throw ConfigError("eval: history_len must be >= 1");
  }
  std::string describe() const;
};

struct MetricsReport {
  std::vector<int64_t> ks;
  std::vector<double> recall;
  std::vector<double> ndcg;
  int64_t n_users = 0;
  int64_t n_skipped = 0;
  std::string protocol;
  std::string checkpoint_id;

  double recall_at(int64_t k) const;
  double ndcg_at(int64_t k) const;
  std::string to_json() const;
  // One CSV row per K: checkpoint,protocol,K,recall,ndcg
  void append_csv(std::ostream& out) const;
  static const char* csv_header();
};

inline int recall_at_k(int64_t rank, int64_t k) { return rank <= k ? 1 : 0; }

inline double ndcg_at_k(int64_t rank, int64_t k) {
  if (rank < 1) throw ContractError("ndcg_at_k: rank must be >= 1");
  if (rank > k) return 0.0;
  return 1.0 / std::log2(static_cast<double>(rank) + 1.0);
}

// 1 + number of candidates scoring >= the target's score (target excluded).
int64_t rank_of_target(const PdtModel<float>& m, const std::vector<int64_t>& history,
                       int64_t target, const std::vector<int64_t>& candidate_items);

MetricsReport evaluate(const PdtModel<float>& m, const BipartiteDataset& ds, const Split& split,
                       Which which, const EvalProtocol& protocol, Rng& rng);

// Index of the report with the best recall@10; earliest wins ties.
size_t select_model(const std::vector<MetricsReport>& reports);

}  // namespace pdt
