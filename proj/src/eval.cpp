#include "pdt/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <ostream>
#include <sstream>

namespace pdt {

std::string EvalProtocol::describe() const {
  std::ostringstream os;
  if (mode == EvalMode::FullRank) {
    os << "full_rank(exclude_seen=" << (exclude_seen ? "true" : "false") << ")";
  } else {
    os << "sampled(n=" << n_negatives
       << ",scope=" << (neg_scope == NegScope::All ? "all" : "train") << ")";
  }
  os << " L=" << history_len;
  return os.str();
}

double MetricsReport::recall_at(int64_t k) const {
  for (size_t i = 0; i < ks.size(); ++i)
    if (ks[i] == k) return recall[i];
  throw ContractError("metrics report has no K=" + std::to_string(k));
}

double MetricsReport::ndcg_at(int64_t k) const {
  for (size_t i = 0; i < ks.size(); ++i)
    if (ks[i] == k) return ndcg[i];
  throw ContractError("metrics report has no K=" + std::to_string(k));
}

std::string MetricsReport::to_json() const {
  std::ostringstream os;
  char buf[64];
  os << "{\"checkpoint\":\"" << checkpoint_id << "\",\"protocol\":\"" << protocol
     << "\",\"n_users\":" << n_users << ",\"n_skipped\":" << n_skipped << ",\"metrics\":[";
  for (size_t i = 0; i < ks.size(); ++i) {
    if (i) os << ',';
    snprintf(buf, sizeof(buf), "{\"k\":%lld,\"recall\":%.9g,\"ndcg\":%.9g}",
             static_cast<long long>(ks[i]), recall[i], ndcg[i]);
    os << buf;
  }
  os << "]}";
  return os.str();
}

const char* MetricsReport::csv_header() { return "checkpoint,protocol,K,recall,ndcg"; }

void MetricsReport::append_csv(std::ostream& out) const {
  char buf[64];
  for (size_t i = 0; i < ks.size(); ++i) {
    out << checkpoint_id << ',' << protocol << ',' << ks[i] << ',';
    snprintf(buf, sizeof(buf), "%.9g,%.9g", recall[i], ndcg[i]);
    out << buf << '\n';
  }
}

namespace {

// Count-based pessimistic rank of `target` within scores over candidate ids.
int64_t pessimistic_rank(const std::vector<float>& scores, const std::vector<int64_t>& ids,
                         int64_t target) {
  float ts = 0;
  bool found = false;
  for (size_t i = 0; i < ids.size(); ++i)
    if (ids[i] == target) {
      ts = scores[i];
      found = true;
      break;
    }
  if (!found) throw ContractError("rank_of_target: target not among candidates");
  int64_t worse = 0;
  for (size_t i = 0; i < ids.size(); ++i)
    if (ids[i] != target && scores[i] >= ts) ++worse;
  return 1 + worse;
}

}  // namespace

int64_t rank_of_target(const PdtModel<float>& m, const std::vector<int64_t>& history,
                       int64_t target, const std::vector<int64_t>& candidate_items) {
  bool nonempty = false;
  for (int64_t h : history) nonempty |= h != 0;
  if (!nonempty) throw ContractError("rank_of_target: empty history");
  Tape<float> tp(false);
  Rng rng(0);  // inference path; never consulted
  IntTensor hist(Shape{1, static_cast<int64_t>(history.size())}, history);
  Tensor<float> y = decode_next(tp, m, hist, /*training=*/false, rng);
  Tensor<float> sc = score_items(tp, m, y, candidate_items);
  std::vector<float> row(sc.data(), sc.data() + sc.numel());
  return pessimistic_rank(row, candidate_items, target);
}

MetricsReport evaluate(const PdtModel<float>& m, const BipartiteDataset& ds, const Split& split,
                       Which which, const EvalProtocol& protocol, Rng& rng) {
  protocol.validate();
  const std::vector<int64_t>& targets =
      which == Which::Val ? split.val_edges : split.test_edges;
  if (targets.empty()) throw DataError("evaluate: split has no target edges");

  MetricsReport rep;
  rep.ks = protocol.ks;
  rep.protocol = protocol.describe();
  std::vector<KahanSum> recall_sum(protocol.ks.size()), ndcg_sum(protocol.ks.size());

  const int64_t L = protocol.history_len;
  const int64_t n_items = ds.n_items();
  std::vector<int64_t> batch_edges;
  std::vector<int64_t> hist_buf;

  for (size_t start = 0; start < targets.size(); start += protocol.batch) {
    size_t stop = std::min(targets.size(), start + protocol.batch);
    batch_edges.clear();
    hist_buf.clear();
    for (size_t i = start; i < stop; ++i) {
      int64_t e = targets[i];
      if (ds.edge_user_pos[e] == 0) {
        ++rep.n_skipped;  // user with no earlier interaction
        continue;
      }
      auto h = user_history_at(ds, e, L);
      batch_edges.push_back(e);
      hist_buf.insert(hist_buf.end(), h.begin(), h.end());
    }
    if (batch_edges.empty()) continue;
    int64_t b = static_cast<int64_t>(batch_edges.size());
    IntTensor hist(Shape{b, L}, hist_buf);
    Tape<float> tp(false);
    Rng dummy(0);
    Tensor<float> y = decode_next(tp, m, hist, false, dummy);

    if (protocol.mode == EvalMode::FullRank) {
      // scores against the whole table; column 0 (pad) is never a candidate
      Tensor<float> sc = matmul_nt(tp, y, m.f_c);
      for (int64_t r = 0; r < b; ++r) {
        int64_t e = batch_edges[r];
        int64_t target = ds.edges[e].item;
        const float* row = sc.data() + r * (n_items + 1);
        std::vector<uint8_t> excluded(n_items + 1, 0);
        if (protocol.exclude_seen) {
          const auto& ue = ds.user_edges[ds.edges[e].user];
          for (int64_t p = 0; p < ds.edge_user_pos[e]; ++p)
            excluded[ds.edges[ue[p]].item] = 1;
        }
        excluded[target] = 0;  // the target always stays a candidate
        float ts = row[target];
        int64_t worse = 0;
        for (int64_t c = 1; c <= n_items; ++c)
          if (!excluded[c] && c != target && row[c] >= ts) ++worse;
        int64_t rank = 1 + worse;
        for (size_t ki = 0; ki < protocol.ks.size(); ++ki) {
          recall_sum[ki].add(recall_at_k(rank, protocol.ks[ki]));
          ndcg_sum[ki].add(ndcg_at_k(rank, protocol.ks[ki]));
        }
        ++rep.n_users;
      }
    } else {
      for (int64_t r = 0; r < b; ++r) {
        int64_t e = batch_edges[r];
        int64_t target = ds.edges[e].item;
        int64_t u = ds.edges[e].user;
        std::vector<int64_t> cand =
            sample_negatives(ds, &split, u, protocol.n_negatives, rng, protocol.neg_scope);
        cand.push_back(target);
        Tape<float> tp2(false);
        Tensor<float> yr(Shape{1, m.cfg.d_item},
                         std::vector<float>(y.data() + r * m.cfg.d_item,
                                            y.data() + (r + 1) * m.cfg.d_item));
        Tensor<float> sc = score_items(tp2, m, yr, cand);
        std::vector<float> row(sc.data(), sc.data() + sc.numel());
        int64_t rank = pessimistic_rank(row, cand, target);
        for (size_t ki = 0; ki < protocol.ks.size(); ++ki) {
          recall_sum[ki].add(recall_at_k(rank, protocol.ks[ki]));
          ndcg_sum[ki].add(ndcg_at_k(rank, protocol.ks[ki]));
        }
        ++rep.n_users;
      }
    }
  }

  if (rep.n_users == 0) throw DataError("evaluate: every target user had an empty history");
  for (size_t ki = 0; ki < protocol.ks.size(); ++ki) {
    rep.recall.push_back(recall_sum[ki].value() / static_cast<double>(rep.n_users));
    rep.ndcg.push_back(ndcg_sum[ki].value() / static_cast<double>(rep.n_users));
  }
  return rep;
}

size_t select_model(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw ContractError("select_model: no reports");
  size_t best = 0;
  double best_val = reports[0].recall_at(10);
  for (size_t i = 1; i < reports.size(); ++i) {
    double v = reports[i].recall_at(10);
    if (v > best_val) {
      best = i;
      best_val = v;
    }
  }
  return best;
}

}  // namespace pdt
