#include "pdt/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace pdt {

namespace {

bool parse_int64(std::string_view s, int64_t& out) {
  if (s.empty()) return false;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && p == s.data() + s.size();
}

bool parse_double(std::string_view s, double& out) {
  if (s.empty()) return false;
  // from_chars for doubles is spotty in older libstdc++; strtod is fine here
  std::string tmp(s);
  char* end = nullptr;
  out = std::strtod(tmp.c_str(), &end);
  return end == tmp.c_str() + tmp.size();
}

std::vector<std::string_view> split_fields(std::string_view line, char delim) {
  std::vector<std::string_view> out;
  size_t start = 0;
  while (true) {
    size_t p = line.find(delim, start);
    if (p == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, p - start));
    start = p + 1;
  }
  return out;
}

}  // namespace

LoadResult load_interactions(const std::string& path, const FormatSpec& fmt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open interaction file: " + path);
  LoadResult res;
  std::string line;
  size_t considered = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    ++considered;
    auto fields = split_fields(line, fmt.delimiter);
    int needed = std::max({fmt.user_col, fmt.item_col, fmt.time_col});
    if (static_cast<int>(fields.size()) <= needed) {
      ++res.malformed;
      continue;
    }
    InteractionRecord rec;
    rec.user_key = std::string(fields[fmt.user_col]);
    rec.item_key = std::string(fields[fmt.item_col]);
    int64_t ts = 0;
    if (rec.user_key.empty() || rec.item_key.empty() ||
        !parse_int64(fields[fmt.time_col], ts) || ts < 0) {
      ++res.malformed;
      continue;
    }
    rec.timestamp = ts;
    if (fmt.rating_col >= 0 && fmt.rating_col < static_cast<int>(fields.size())) {
      double r = 0;
      if (parse_double(fields[fmt.rating_col], r)) rec.rating = r;
    }
    res.records.push_back(std::move(rec));
  }
  if (considered > 0) {
    double frac = static_cast<double>(res.malformed) / static_cast<double>(considered);
    if (frac > fmt.max_malformed_fraction)
      throw DataError("interaction file " + path + ": " + std::to_string(res.malformed) + "/" +
                      std::to_string(considered) + " malformed lines exceeds tolerated fraction " +
                      std::to_string(fmt.max_malformed_fraction));
  }
  return res;
}

void write_interactions(const std::string& path, const std::vector<InteractionRecord>& records,
                        const FormatSpec& fmt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write interaction file: " + path);
  for (const auto& r : records) {
    out << r.user_key << fmt.delimiter << r.item_key << fmt.delimiter << r.timestamp;
    if (r.rating) out << fmt.delimiter << *r.rating;
    out << '\n';
  }
  if (!out) throw IoError("short write to " + path);
}

BipartiteDataset build_dataset(const std::vector<InteractionRecord>& records) {
  if (records.empty()) throw DataError("build_dataset: no interaction records");
  BipartiteDataset ds;
  ds.user_keys.push_back("");
  ds.item_keys.push_back("");

  struct Raw {
    int64_t user, item, t, order;
    double rating;
  };
  std::vector<Raw> raw;
  raw.reserve(records.size());
  for (size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.timestamp < 0) throw DataError("build_dataset: negative timestamp");
    auto [uit, unew] = ds.user_index.try_emplace(r.user_key, ds.user_keys.size());
    if (unew) ds.user_keys.push_back(r.user_key);
    auto [iit, inew] = ds.item_index.try_emplace(r.item_key, ds.item_keys.size());
    if (inew) ds.item_keys.push_back(r.item_key);
    raw.push_back({uit->second, iit->second, r.timestamp, static_cast<int64_t>(i),
                   r.rating ? *r.rating : std::nan("")});
  }
  std::stable_sort(raw.begin(), raw.end(), [](const Raw& a, const Raw& b) { return a.t < b.t; });

  ds.edges.reserve(raw.size());
  ds.ratings.reserve(raw.size());
  ds.user_edges.assign(ds.user_keys.size(), {});
  ds.item_edges.assign(ds.item_keys.size(), {});
  ds.edge_user_pos.resize(raw.size());
  ds.edge_item_pos.resize(raw.size());
  for (const auto& r : raw) {
    int64_t e = static_cast<int64_t>(ds.edges.size());
    ds.edges.push_back({r.user, r.item, r.t});
    ds.ratings.push_back(r.rating);
    ds.edge_user_pos[e] = static_cast<int64_t>(ds.user_edges[r.user].size());
    ds.edge_item_pos[e] = static_cast<int64_t>(ds.item_edges[r.item].size());
    ds.user_edges[r.user].push_back(e);
    ds.item_edges[r.item].push_back(e);
  }
  return ds;
}

// --------------------------------------------------------------------------
// Dataset cache

namespace {

constexpr char kDatasetMagic[4] = {'P', 'D', 'T', 'D'};
constexpr uint32_t kDatasetVersion = 1;

void put_u32(std::ostream& o, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  o.write(reinterpret_cast<char*>(b), 4);
}

void put_u64(std::ostream& o, uint64_t v) {
  put_u32(o, static_cast<uint32_t>(v));
  put_u32(o, static_cast<uint32_t>(v >> 32));
}

uint32_t get_u32(std::istream& i) {
  unsigned char b[4];
  i.read(reinterpret_cast<char*>(b), 4);
  if (!i) throw IntegrityError("dataset cache: truncated file");
  return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
         static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

uint64_t get_u64(std::istream& i) {
  uint64_t lo = get_u32(i);
  uint64_t hi = get_u32(i);
  return lo | hi << 32;
}

void put_str(std::ostream& o, const std::string& s) {
  put_u32(o, static_cast<uint32_t>(s.size()));
  o.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_str(std::istream& i) {
  uint32_t n = get_u32(i);
  std::string s(n, '\0');
  i.read(s.data(), n);
  if (!i) throw IntegrityError("dataset cache: truncated string");
  return s;
}

}  // namespace

void save_dataset_cache(const BipartiteDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write dataset cache: " + path);
  out.write(kDatasetMagic, 4);
  put_u32(out, kDatasetVersion);
  put_u32(out, static_cast<uint32_t>(ds.n_users()));
  put_u32(out, static_cast<uint32_t>(ds.n_items()));
  for (int64_t u = 1; u <= ds.n_users(); ++u) put_str(out, ds.user_keys[u]);
  for (int64_t c = 1; c <= ds.n_items(); ++c) put_str(out, ds.item_keys[c]);
  put_u64(out, ds.edges.size());
  for (const auto& e : ds.edges) {
    if (e.t > static_cast<int64_t>(UINT32_MAX))
      throw DataError("dataset cache: timestamp " + std::to_string(e.t) + " exceeds u32");
    put_u32(out, static_cast<uint32_t>(e.user));
    put_u32(out, static_cast<uint32_t>(e.item));
    put_u32(out, static_cast<uint32_t>(e.t));
  }
  if (!out) throw IoError("short write to " + path);
}

BipartiteDataset load_dataset_cache(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset cache: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kDatasetMagic, 4) != 0)
    throw DataError("dataset cache: " + path + " is not a PDTD file");
  uint32_t version = get_u32(in);
  if (version != kDatasetVersion)
    throw DataError("dataset cache: version " + std::to_string(version) +
                    " unsupported (expected " + std::to_string(kDatasetVersion) + ")");
  BipartiteDataset ds;
  uint32_t nu = get_u32(in), ni = get_u32(in);
  ds.user_keys.reserve(nu + 1);
  ds.item_keys.reserve(ni + 1);
  ds.user_keys.push_back("");
  ds.item_keys.push_back("");
  for (uint32_t u = 0; u < nu; ++u) {
    ds.user_keys.push_back(get_str(in));
    ds.user_index[ds.user_keys.back()] = u + 1;
  }
  for (uint32_t c = 0; c < ni; ++c) {
    ds.item_keys.push_back(get_str(in));
    ds.item_index[ds.item_keys.back()] = c + 1;
  }
  uint64_t ne = get_u64(in);
  ds.edges.reserve(ne);
  ds.user_edges.assign(nu + 1, {});
  ds.item_edges.assign(ni + 1, {});
  ds.edge_user_pos.resize(ne);
  ds.edge_item_pos.resize(ne);
  ds.ratings.assign(ne, std::nan(""));
  for (uint64_t i = 0; i < ne; ++i) {
    int64_t u = get_u32(in), c = get_u32(in), t = get_u32(in);
    if (u < 1 || u > nu || c < 1 || c > ni)
      throw IntegrityError("dataset cache: edge index out of vocab bounds");
    int64_t e = static_cast<int64_t>(ds.edges.size());
    ds.edges.push_back({u, c, t});
    ds.edge_user_pos[e] = static_cast<int64_t>(ds.user_edges[u].size());
    ds.edge_item_pos[e] = static_cast<int64_t>(ds.item_edges[c].size());
    ds.user_edges[u].push_back(e);
    ds.item_edges[c].push_back(e);
  }
  return ds;
}

// --------------------------------------------------------------------------
// Splits

namespace {

void prune_cold_items(const BipartiteDataset& ds, Split& sp) {
  sp.item_in_train.assign(ds.item_keys.size(), 0);
  for (int64_t e : sp.train_edges) sp.item_in_train[ds.edges[e].item] = 1;
  auto prune = [&](std::vector<int64_t>& list) {
    std::vector<int64_t> kept;
    kept.reserve(list.size());
    for (int64_t e : list) {
      if (sp.item_in_train[ds.edges[e].item]) {
        kept.push_back(e);
      } else {
        sp.assign[e] = 3;
        ++sp.pruned;
      }
    }
    list = std::move(kept);
  };
  prune(sp.val_edges);
  prune(sp.test_edges);
}

}  // namespace

Split split_leave_one_out(const BipartiteDataset& ds) {
  Split sp;
  sp.mode = SplitMode::LeaveOneOut;
  sp.assign.assign(ds.edges.size(), 0);
  for (int64_t u = 1; u <= ds.n_users(); ++u) {
    const auto& list = ds.user_edges[u];
    if (list.size() >= 3) {
      sp.assign[list[list.size() - 1]] = 2;
      sp.assign[list[list.size() - 2]] = 1;
    }
  }
  for (int64_t e = 0; e < ds.n_edges(); ++e) {
    if (sp.assign[e] == 0) sp.train_edges.push_back(e);
    else if (sp.assign[e] == 1) sp.val_edges.push_back(e);
    else sp.test_edges.push_back(e);
  }
  prune_cold_items(ds, sp);
  return sp;
}

Split split_by_time(const BipartiteDataset& ds, double f_train, double f_val, double f_test) {
  if (f_train < 0 || f_val < 0 || f_test < 0 || std::abs(f_train + f_val + f_test - 1.0) > 1e-9)
    throw ConfigError("split_by_time: fractions must be nonnegative and sum to 1");
  Split sp;
  sp.mode = SplitMode::TimeFraction;
  int64_t n = ds.n_edges();
  sp.assign.assign(n, 0);
  int64_t b1 = llround(f_train * static_cast<double>(n));
  int64_t b2 = llround((f_train + f_val) * static_cast<double>(n));
  b1 = std::clamp<int64_t>(b1, 0, n);
  b2 = std::clamp<int64_t>(b2, b1, n);
  // edges are already in (timestamp, input order); the cut inherits that
  // stable tie-breaking
  for (int64_t e = 0; e < n; ++e) {
    if (e < b1) {
      sp.train_edges.push_back(e);
    } else if (e < b2) {
      sp.assign[e] = 1;
      sp.val_edges.push_back(e);
    } else {
      sp.assign[e] = 2;
      sp.test_edges.push_back(e);
    }
  }
  prune_cold_items(ds, sp);
  return sp;
}

// --------------------------------------------------------------------------
// Histories

namespace {

// Number of edges in `list` strictly preceding the anchor point.
int64_t history_cut(const BipartiteDataset& ds, const std::vector<int64_t>& list,
                    int64_t entity_pos_of_exclude, int64_t before_t, int64_t exclude_edge) {
  if (exclude_edge >= 0 && entity_pos_of_exclude >= 0) return entity_pos_of_exclude;
  // pure time cut: first position with t >= before_t
  int64_t lo = 0, hi = static_cast<int64_t>(list.size());
  while (lo < hi) {
    int64_t mid = (lo + hi) / 2;
    if (ds.edges[list[mid]].t < before_t) lo = mid + 1;
    else hi = mid;
  }
  return lo;
}

std::vector<int64_t> take_suffix(const BipartiteDataset& ds, const std::vector<int64_t>& list,
                                 int64_t cut, int64_t len, bool items) {
  std::vector<int64_t> out(len, 0);
  int64_t take = std::min(cut, len);
  for (int64_t i = 0; i < take; ++i) {
    int64_t e = list[cut - take + i];
    out[len - take + i] = items ? ds.edges[e].item : ds.edges[e].user;
  }
  return out;
}

}  // namespace

std::vector<int64_t> user_history(const BipartiteDataset& ds, int64_t u, int64_t before_t,
                                  int64_t exclude_edge, int64_t len) {
  if (u < 1 || u > ds.n_users()) throw IndexError("user_history: bad user id " + std::to_string(u));
  if (len < 1) throw ContractError("user_history: len must be >= 1");
  const auto& list = ds.user_edges[u];
  int64_t pos = (exclude_edge >= 0 && ds.edges[exclude_edge].user == u)
                    ? ds.edge_user_pos[exclude_edge]
                    : -1;
  int64_t cut = history_cut(ds, list, pos, before_t, exclude_edge);
  return take_suffix(ds, list, cut, len, /*items=*/true);
}

std::vector<int64_t> content_history(const BipartiteDataset& ds, int64_t c, int64_t before_t,
                                     int64_t exclude_edge, int64_t len) {
  if (c < 1 || c > ds.n_items())
    throw IndexError("content_history: bad item id " + std::to_string(c));
  if (len < 1) throw ContractError("content_history: len must be >= 1");
  const auto& list = ds.item_edges[c];
  int64_t pos = (exclude_edge >= 0 && ds.edges[exclude_edge].item == c)
                    ? ds.edge_item_pos[exclude_edge]
                    : -1;
  int64_t cut = history_cut(ds, list, pos, before_t, exclude_edge);
  return take_suffix(ds, list, cut, len, /*items=*/false);
}

std::vector<int64_t> user_history_at(const BipartiteDataset& ds, int64_t edge_idx, int64_t len) {
  const Edge& e = ds.edges[edge_idx];
  return take_suffix(ds, ds.user_edges[e.user], ds.edge_user_pos[edge_idx], len, true);
}

std::vector<int64_t> content_history_at(const BipartiteDataset& ds, int64_t edge_idx, int64_t len) {
  const Edge& e = ds.edges[edge_idx];
  return take_suffix(ds, ds.item_edges[e.item], ds.edge_item_pos[edge_idx], len, false);
}

// --------------------------------------------------------------------------
// Batches

std::vector<int64_t> pretrain_anchor_pool(const BipartiteDataset& ds, const Split& split,
                                          int64_t min_hist) {
  std::vector<int64_t> pool;
  for (int64_t e : split.train_edges)
    if (ds.edge_user_pos[e] >= min_hist && ds.edge_item_pos[e] >= min_hist) pool.push_back(e);
  return pool;
}

std::vector<int64_t> finetune_anchor_pool(const BipartiteDataset& ds, const Split& split) {
  std::vector<int64_t> pool;
  for (int64_t e : split.train_edges)
    if (ds.edge_user_pos[e] >= 1) pool.push_back(e);
  return pool;
}

PretrainBatch fill_pretrain_batch(const BipartiteDataset& ds,
                                  const std::vector<int64_t>& anchors, int64_t l_user,
                                  int64_t l_content) {
  int64_t b = static_cast<int64_t>(anchors.size());
  PretrainBatch out;
  out.anchor_edges = anchors;
  out.user_ids.reserve(b);
  out.content_ids.reserve(b);
  std::vector<int64_t> uh(b * l_user), ch(b * l_content);
  for (int64_t i = 0; i < b; ++i) {
    int64_t e = anchors[i];
    out.user_ids.push_back(ds.edges[e].user);
    out.content_ids.push_back(ds.edges[e].item);
    auto h1 = user_history_at(ds, e, l_user);
    auto h2 = content_history_at(ds, e, l_content);
    std::copy(h1.begin(), h1.end(), uh.begin() + i * l_user);
    std::copy(h2.begin(), h2.end(), ch.begin() + i * l_content);
  }
  out.user_histories = IntTensor(Shape{b, l_user}, std::move(uh));
  out.content_histories = IntTensor(Shape{b, l_content}, std::move(ch));
  return out;
}

namespace {

// B draws from the pool: without replacement when it is large enough,
// wrapping to with-replacement otherwise.
std::vector<int64_t> draw_anchors(const std::vector<int64_t>& pool, int64_t b, Rng& rng) {
  std::vector<int64_t> picked;
  picked.reserve(b);
  if (static_cast<int64_t>(pool.size()) >= b) {
    std::vector<int64_t> copy = pool;
    for (int64_t i = 0; i < b; ++i) {
      int64_t j = i + static_cast<int64_t>(rand_below(rng, copy.size() - i));
      std::swap(copy[i], copy[j]);
      picked.push_back(copy[i]);
    }
  } else {
    for (int64_t i = 0; i < b; ++i)
      picked.push_back(pool[rand_below(rng, pool.size())]);
  }
  return picked;
}

}  // namespace

PretrainBatch make_pretrain_batch(const BipartiteDataset& ds, const Split& split, int64_t batch,
                                  int64_t l_user, int64_t l_content, Rng& rng,
                                  int64_t min_hist) {
  if (split.train_edges.empty()) throw DataError("make_pretrain_batch: empty train split");
  auto pool = pretrain_anchor_pool(ds, split, min_hist);
  if (pool.empty())
    throw DataError("make_pretrain_batch: no train edge has both histories >= min_hist=" +
                    std::to_string(min_hist));
  return fill_pretrain_batch(ds, draw_anchors(pool, batch, rng), l_user, l_content);
}

FinetuneBatch fill_finetune_batch(const BipartiteDataset& ds, const Split& split,
                                  const std::vector<int64_t>& anchors, int64_t len, Rng& rng,
                                  bool multi_target) {
  int64_t b = static_cast<int64_t>(anchors.size());
  FinetuneBatch out;
  out.anchor_edges = anchors;
  std::vector<int64_t> hist(b * len);
  out.pos_items.reserve(b);
  out.neg_items.reserve(b);
  std::vector<int64_t> pos_seq, neg_seq;
  if (multi_target) {
    pos_seq.assign(b * len, 0);
    neg_seq.assign(b * len, 0);
  }
  for (int64_t i = 0; i < b; ++i) {
    int64_t e = anchors[i];
    int64_t u = ds.edges[e].user;
    auto h = user_history_at(ds, e, len);
    std::copy(h.begin(), h.end(), hist.begin() + i * len);
    out.pos_items.push_back(ds.edges[e].item);
    out.neg_items.push_back(sample_negatives(ds, &split, u, 1, rng, NegScope::Train)[0]);
    if (multi_target) {
      // slot j's target is the item at slot j+1; the last real slot points at
      // the anchor's item
      for (int64_t j = 0; j < len; ++j) {
        if (h[j] == 0) continue;
        int64_t target = (j + 1 < len) ? h[j + 1] : 0;
        if (j + 1 == len || target == 0) target = ds.edges[e].item;
        pos_seq[i * len + j] = target;
        neg_seq[i * len + j] = sample_negatives(ds, &split, u, 1, rng, NegScope::Train)[0];
      }
    }
  }
  out.histories = IntTensor(Shape{b, len}, std::move(hist));
  if (multi_target) {
    out.pos_seq = IntTensor(Shape{b, len}, std::move(pos_seq));
    out.neg_seq = IntTensor(Shape{b, len}, std::move(neg_seq));
  }
  return out;
}

FinetuneBatch make_finetune_batch(const BipartiteDataset& ds, const Split& split, int64_t batch,
                                  int64_t len, Rng& rng, bool multi_target) {
  if (split.train_edges.empty()) throw DataError("make_finetune_batch: empty train split");
  auto pool = finetune_anchor_pool(ds, split);
  if (pool.empty())
    throw DataError("make_finetune_batch: no train edge has a nonempty prior user history");
  return fill_finetune_batch(ds, split, draw_anchors(pool, batch, rng), len, rng, multi_target);
}

std::vector<int64_t> user_train_items(const BipartiteDataset& ds, const Split& split, int64_t u) {
  std::vector<int64_t> items;
  for (int64_t e : ds.user_edges[u])
    if (split.assign[e] == 0) items.push_back(ds.edges[e].item);
  std::sort(items.begin(), items.end());
  items.erase(std::unique(items.begin(), items.end()), items.end());
  return items;
}

std::vector<int64_t> sample_negatives(const BipartiteDataset& ds, const Split* split, int64_t u,
                                      int64_t n, Rng& rng, NegScope scope) {
  if (u < 1 || u > ds.n_users()) throw IndexError("sample_negatives: bad user id");
  if (n == 0) return {};
  std::vector<int64_t> excluded;
  if (scope == NegScope::Train) {
    if (!split) throw ContractError("sample_negatives: train scope requires a split");
    excluded = user_train_items(ds, *split, u);
  } else {
    for (int64_t e : ds.user_edges[u]) excluded.push_back(ds.edges[e].item);
    std::sort(excluded.begin(), excluded.end());
    excluded.erase(std::unique(excluded.begin(), excluded.end()), excluded.end());
  }
  int64_t catalog = ds.n_items();
  int64_t eligible = catalog - static_cast<int64_t>(excluded.size());
  if (eligible < n)
    throw DataError("sample_negatives: need " + std::to_string(n) + " items but only " +
                    std::to_string(eligible) + " are eligible for user " + std::to_string(u));
  auto is_excluded = [&](int64_t c) {
    return std::binary_search(excluded.begin(), excluded.end(), c);
  };

  std::vector<int64_t> out;
  out.reserve(n);
  if (n > 256 || n * 4 >= eligible) {
    // dense path: materialize the eligible list and partially shuffle it
    std::vector<int64_t> elig;
    elig.reserve(eligible);
    for (int64_t c = 1; c <= catalog; ++c)
      if (!is_excluded(c)) elig.push_back(c);
    for (int64_t i = 0; i < n; ++i) {
      int64_t j = i + static_cast<int64_t>(rand_below(rng, elig.size() - i));
      std::swap(elig[i], elig[j]);
      out.push_back(elig[i]);
    }
  } else {
    // sparse path: rejection sampling, linear dup check over the small draw
    while (static_cast<int64_t>(out.size()) < n) {
      int64_t c = 1 + static_cast<int64_t>(rand_below(rng, catalog));
      if (is_excluded(c)) continue;
      if (std::find(out.begin(), out.end(), c) != out.end()) continue;
      out.push_back(c);
    }
  }
  return out;
}

}  // namespace pdt
