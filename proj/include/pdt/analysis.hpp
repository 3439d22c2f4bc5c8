#pragma once

// Embedding post-processing: L2 row normalization, cosine nearest neighbors,
// deterministic 2-component PCA, and TSV export with optional metadata join.
// Everything here is a pure function over an immutable export.

#include <string>
#include <utility>
#include <vector>

#include "pdt/common.hpp"

namespace pdt {

struct EmbeddingExport {
  std::string kind;  // "user" or "content"
  std::vector<int64_t> ids;
  std::vector<std::string> keys;
  int64_t dim = 0;
  std::vector<float> matrix;  // [ids.size(), dim], no pad row
  std::vector<std::string> meta_header;
  std::vector<std::vector<std::string>> meta;  // per-row columns, may be empty

  int64_t rows() const { return static_cast<int64_t>(ids.size()); }
};

// Each nonzero row is divided by its L2 norm; zero rows stay zero.
// Returns the zero-row count (the caller's warning).
size_t normalize_rows(std::vector<float>& matrix, int64_t rows, int64_t dim);

// Top-k rows by cosine similarity to the query row, excluding the query;
// ties broken by ascending row index. Pairs of (row index, similarity).
std::vector<std::pair<int64_t, double>> nearest_neighbor_rows(const float* matrix, int64_t rows,
                                                              int64_t dim, int64_t query_row,
                                                              int64_t k);

// Same, addressed by export ids; pairs of (id, similarity).
std::vector<std::pair<int64_t, double>> nearest_neighbors(const EmbeddingExport& e,
                                                          int64_t query_id, int64_t k);

struct Pca2d {
  std::vector<double> coords;  // [rows, 2]
  double eig1 = 0, eig2 = 0;   // variance along the two components
  double total_var = 0;
};

// Mean-centered projection onto the top-2 principal directions found by
// power iteration with deflation. Sign convention: the largest-magnitude
// component of each direction is positive.
Pca2d pca_2d(const float* matrix, int64_t rows, int64_t dim);

// Metadata side file: TSV with a header line, first column is the entity key.
// Returns the number of export rows with no metadata match.
size_t join_metadata(EmbeddingExport& e, const std::string& tsv_path);

enum class ExportFormat { RawVectors, Pca2d };

void export_tsv(const EmbeddingExport& e, const std::string& path, ExportFormat format);

// Reload of an exported raw-vector TSV (used to verify lossless round trips).
EmbeddingExport import_tsv(const std::string& path);

}  // namespace pdt
