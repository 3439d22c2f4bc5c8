#include "pdt/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace pdt {

size_t normalize_rows(std::vector<float>& matrix, int64_t rows, int64_t dim) {
  if (static_cast<int64_t>(matrix.size()) != rows * dim)
    throw ShapeError("normalize_rows: matrix size does not match rows*dim");
  size_t zero_rows = 0;
  for (int64_t r = 0; r < rows; ++r) {
    float* row = matrix.data() + r * dim;
    double sq = 0;
    for (int64_t j = 0; j < dim; ++j) sq += static_cast<double>(row[j]) * row[j];
    if (sq == 0) {
      ++zero_rows;
      continue;
    }
    float inv = static_cast<float>(1.0 / std::sqrt(sq));
    for (int64_t j = 0; j < dim; ++j) row[j] *= inv;
  }
  return zero_rows;
}

namespace {

double cosine(const float* a, const float* b, int64_t dim) {
  double dot = 0, na = 0, nb = 0;
  for (int64_t j = 0; j < dim; ++j) {
    dot += static_cast<double>(a[j]) * b[j];
    na += static_cast<double>(a[j]) * a[j];
    nb += static_cast<double>(b[j]) * b[j];
  }
  if (na == 0 || nb == 0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

std::vector<std::pair<int64_t, double>> nearest_neighbor_rows(const float* matrix, int64_t rows,
                                                              int64_t dim, int64_t query_row,
                                                              int64_t k) {
  if (query_row < 0 || query_row >= rows)
    throw IndexError("nearest_neighbors: query row " + std::to_string(query_row) +
                     " out of range");
  if (k < 0 || k >= rows)
    throw ContractError("nearest_neighbors: k must satisfy 0 <= k < rows");
  const float* q = matrix + query_row * dim;
  std::vector<std::pair<int64_t, double>> all;
  all.reserve(rows - 1);
  for (int64_t r = 0; r < rows; ++r) {
    if (r == query_row) continue;
    all.push_back({r, cosine(q, matrix + r * dim, dim)});
  }
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  all.resize(k);
  return all;
}

std::vector<std::pair<int64_t, double>> nearest_neighbors(const EmbeddingExport& e,
                                                          int64_t query_id, int64_t k) {
  int64_t qrow = -1;
  for (int64_t r = 0; r < e.rows(); ++r)
    if (e.ids[r] == query_id) {
      qrow = r;
      break;
    }
  if (qrow < 0) throw IndexError("nearest_neighbors: unknown id " + std::to_string(query_id));
  auto rows = nearest_neighbor_rows(e.matrix.data(), e.rows(), e.dim, qrow, k);
  for (auto& p : rows) p.first = e.ids[p.first];
  return rows;
}

namespace {

// Largest eigenpair of a symmetric d x d matrix by power iteration from a
// fixed, generic start vector. When `against` is given, every iterate is
// re-orthogonalized to it, so deflation noise cannot leak the dominant
// direction back in. Iterates until the VECTOR stabilizes; the eigenvalue
// alone converges long before the direction does.
std::pair<double, std::vector<double>> power_iterate(const std::vector<double>& cov, int64_t d,
                                                     const std::vector<double>* against = nullptr) {
  std::vector<double> v(d), next(d);
  for (int64_t j = 0; j < d; ++j) v[j] = std::sin(static_cast<double>(j) + 1.0);
  auto orth = [&](std::vector<double>& w) {
    if (!against) return;
    double dot = 0;
    for (int64_t j = 0; j < d; ++j) dot += w[j] * (*against)[j];
    for (int64_t j = 0; j < d; ++j) w[j] -= dot * (*against)[j];
  };
  auto normalize = [&](std::vector<double>& w) {
    double n = 0;
    for (double x : w) n += x * x;
    n = std::sqrt(n);
    if (n < 1e-300) return false;
    for (double& x : w) x /= n;
    return true;
  };
  orth(v);
  if (!normalize(v)) {
    // degenerate start: fall back to the first basis vector orthogonal to
    // `against`
    std::fill(v.begin(), v.end(), 0.0);
    v[0] = 1.0;
    orth(v);
    normalize(v);
  }

  double lambda = 0;
  for (int iter = 0; iter < 20000; ++iter) {
    for (int64_t i = 0; i < d; ++i) {
      double s = 0;
      for (int64_t j = 0; j < d; ++j) s += cov[i * d + j] * v[j];
      next[i] = s;
    }
    orth(next);
    if (!normalize(next)) {  // zero in this subspace: keep the current basis
      lambda = 0;
      break;
    }
    double drift = 0;
    for (int64_t j = 0; j < d; ++j) drift = std::max(drift, std::abs(next[j] - v[j]));
    // sign flips between iterates mean the dominant eigenvalue is negative
    // in this subspace; compare against the flipped vector too
    double drift_neg = 0;
    for (int64_t j = 0; j < d; ++j) drift_neg = std::max(drift_neg, std::abs(next[j] + v[j]));
    v = next;
    if (std::min(drift, drift_neg) < 1e-14 && iter > 2) break;
  }
  {
    std::vector<double> cv(d);
    for (int64_t i = 0; i < d; ++i) {
      double s = 0;
      for (int64_t j = 0; j < d; ++j) s += cov[i * d + j] * v[j];
      cv[i] = s;
    }
    lambda = 0;
    for (int64_t i = 0; i < d; ++i) lambda += v[i] * cv[i];
  }
  // sign convention: largest-magnitude component positive
  int64_t arg = 0;
  for (int64_t j = 1; j < d; ++j)
    if (std::abs(v[j]) > std::abs(v[arg])) arg = j;
  if (v[arg] < 0)
    for (double& x : v) x = -x;
  return {lambda, v};
}

}  // namespace

Pca2d pca_2d(const float* matrix, int64_t rows, int64_t dim) {
  if (dim < 2) throw ContractError("pca_2d: need dimension >= 2, got " + std::to_string(dim));
  if (rows < 2) throw ContractError("pca_2d: need at least 2 rows");

  std::vector<double> mean(dim, 0);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < dim; ++j) mean[j] += matrix[r * dim + j];
  for (double& m : mean) m /= static_cast<double>(rows);

  std::vector<double> centered(rows * dim);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < dim; ++j) centered[r * dim + j] = matrix[r * dim + j] - mean[j];

  std::vector<double> cov(dim * dim, 0);
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = centered.data() + r * dim;
    for (int64_t i = 0; i < dim; ++i)
      for (int64_t j = i; j < dim; ++j) cov[i * dim + j] += x[i] * x[j];
  }
  for (int64_t i = 0; i < dim; ++i)
    for (int64_t j = i; j < dim; ++j) {
      cov[i * dim + j] /= static_cast<double>(rows);
      cov[j * dim + i] = cov[i * dim + j];
    }

  Pca2d out;
  for (int64_t i = 0; i < dim; ++i) out.total_var += cov[i * dim + i];

  auto [l1, v1] = power_iterate(cov, dim);
  out.eig1 = l1;
  std::vector<double> deflated = cov;
  for (int64_t i = 0; i < dim; ++i)
    for (int64_t j = 0; j < dim; ++j) deflated[i * dim + j] -= l1 * v1[i] * v1[j];
  auto [l2, v2] = power_iterate(deflated, dim, &v1);
  out.eig2 = l2;

  out.coords.resize(rows * 2);
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = centered.data() + r * dim;
    double c1 = 0, c2 = 0;
    for (int64_t j = 0; j < dim; ++j) {
      c1 += x[j] * v1[j];
      c2 += x[j] * v2[j];
    }
    out.coords[r * 2] = c1;
    out.coords[r * 2 + 1] = c2;
  }
  return out;
}

size_t join_metadata(EmbeddingExport& e, const std::string& tsv_path) {
  std::ifstream in(tsv_path);
  if (!in) throw IoError("cannot open metadata file: " + tsv_path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("metadata file is empty: " + tsv_path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) header.push_back(f);
  }
  if (header.size() < 2) throw DataError("metadata file needs a key column plus data columns");
  e.meta_header.assign(header.begin() + 1, header.end());
  std::unordered_map<std::string, std::vector<std::string>> table;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    if (fields.empty()) continue;
    std::vector<std::string> cols(e.meta_header.size());
    for (size_t i = 0; i + 1 < fields.size() && i < cols.size(); ++i) cols[i] = fields[i + 1];
    table[fields[0]] = std::move(cols);
  }
  size_t missing = 0;
  e.meta.assign(e.rows(), std::vector<std::string>(e.meta_header.size()));
  for (int64_t r = 0; r < e.rows(); ++r) {
    auto it = table.find(e.keys[r]);
    if (it == table.end()) {
      ++missing;  // blanks stay
    } else {
      e.meta[r] = it->second;
    }
  }
  return missing;
}

void export_tsv(const EmbeddingExport& e, const std::string& path, ExportFormat format) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write export file: " + path);
  out << "id\tkey";
  for (const auto& h : e.meta_header) out << '\t' << h;
  if (format == ExportFormat::Pca2d) {
    out << "\tx\ty\n";
  } else {
    for (int64_t j = 0; j < e.dim; ++j) out << "\tv" << j;
    out << '\n';
  }

  Pca2d pca;
  if (format == ExportFormat::Pca2d) pca = pca_2d(e.matrix.data(), e.rows(), e.dim);
  char buf[32];
  for (int64_t r = 0; r < e.rows(); ++r) {
    out << e.ids[r] << '\t' << e.keys[r];
    for (size_t c = 0; c < e.meta_header.size(); ++c)
      out << '\t' << (e.meta.empty() ? "" : e.meta[r][c]);
    if (format == ExportFormat::Pca2d) {
      snprintf(buf, sizeof(buf), "%.17g", pca.coords[r * 2]);
      out << '\t' << buf;
      snprintf(buf, sizeof(buf), "%.17g", pca.coords[r * 2 + 1]);
      out << '\t' << buf;
    } else {
      for (int64_t j = 0; j < e.dim; ++j) {
        // 9 significant digits round-trip binary32 exactly
        snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(e.matrix[r * e.dim + j]));
        out << '\t' << buf;
      }
    }
    out << '\n';
  }
  if (!out) throw IoError("short write to " + path);
}

EmbeddingExport import_tsv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open export file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("export file is empty: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) header.push_back(f);
  }
  if (header.size() < 3 || header[0] != "id" || header[1] != "key" || header[2].rfind("v", 0) != 0)
    throw DataError("export file is not a raw-vector export: " + path);
  EmbeddingExport e;
  e.dim = static_cast<int64_t>(header.size()) - 2;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f;
    std::getline(ss, f, '\t');
    e.ids.push_back(std::stoll(f));
    std::getline(ss, f, '\t');
    e.keys.push_back(f);
    for (int64_t j = 0; j < e.dim; ++j) {
      std::getline(ss, f, '\t');
      e.matrix.push_back(std::strtof(f.c_str(), nullptr));
    }
  }
  return e;
}

}  // namespace pdt
