#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "pdt/analysis.hpp"
#include "support/oracles.hpp"

using namespace pdt;
namespace fs = std::filesystem;

namespace {

std::string temp_path(const std::string& name) {
  return (fs::temp_directory_path() / name).string();
}

EmbeddingExport tiny_export(std::vector<float> matrix, int64_t rows, int64_t dim) {
  EmbeddingExport e;
  e.kind = "content";
  e.dim = dim;
  e.matrix = std::move(matrix);
  for (int64_t i = 0; i < rows; ++i) {
    e.ids.push_back(i + 1);
    e.keys.push_back("k" + std::to_string(i + 1));
  }
  return e;
}

}  // namespace

TEST_CASE("normalize_rows: known values, unit rows, zero rows") {
  std::vector<float> m = {3, 4, 1, 0, 0, 0};
  size_t zeros = normalize_rows(m, 3, 2);
  CHECK(zeros == 1);
  CHECK(m[0] == doctest::Approx(0.6f));
  CHECK(m[1] == doctest::Approx(0.8f));
  CHECK(m[2] == doctest::Approx(1.0f));
  CHECK(m[3] == 0.0f);
  CHECK(m[4] == 0.0f);
  CHECK(m[5] == 0.0f);
}

TEST_CASE("nearest_neighbors: duplicate row ranks first with similarity 1") {
  std::vector<float> m = {1, 0, 0.9f, 0.1f, 1, 0, -1, 0};
  auto e = tiny_export(m, 4, 2);
  auto nn = nearest_neighbors(e, 1, 3);
  REQUIRE(nn.size() == 3);
  CHECK(nn[0].first == 3);  // the duplicate of row 0
  CHECK(nn[0].second == doctest::Approx(1.0));
  CHECK(nn[2].first == 4);
  CHECK(nn[2].second == doctest::Approx(-1.0));
}

TEST_CASE("nearest_neighbors: orthogonal catalog ties break by ascending id") {
  std::vector<float> m = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  auto e = tiny_export(m, 3, 3);
  auto nn = nearest_neighbors(e, 2, 2);
  REQUIRE(nn.size() == 2);
  CHECK(nn[0].first == 1);
  CHECK(nn[1].first == 3);
  CHECK(nn[0].second == doctest::Approx(0.0));
}

TEST_CASE("nearest_neighbors matches the scan oracle on random matrices") {
  Rng rng(404);
  for (int trial = 0; trial < 30; ++trial) {
    int64_t rows = 12 + rand_below(rng, 20), dim = 3 + rand_below(rng, 5);
    std::vector<float> m(rows * dim);
    for (auto& v : m) v = static_cast<float>(rand_uniform(rng, -1, 1));
    int64_t q = rand_below(rng, rows);
    int64_t k = 1 + rand_below(rng, 10);
    auto got = nearest_neighbor_rows(m.data(), rows, dim, q, k);
    auto ref = oracle::scan_neighbors(m.data(), rows, dim, q, k);
    REQUIRE(got.size() == ref.size());
    for (size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].first == ref[i].first);
      CHECK(got[i].second == doctest::Approx(ref[i].second).epsilon(1e-12));
    }
  }
}

TEST_CASE("neighbor lists are invariant to positive rescaling of the matrix") {
  Rng rng(7);
  int64_t rows = 15, dim = 4;
  std::vector<float> m(rows * dim);
  for (auto& v : m) v = static_cast<float>(rand_uniform(rng, -1, 1));
  std::vector<float> scaled = m;
  for (auto& v : scaled) v *= 37.5f;
  for (int64_t q = 0; q < rows; ++q) {
    auto a = nearest_neighbor_rows(m.data(), rows, dim, q, 5);
    auto b = nearest_neighbor_rows(scaled.data(), rows, dim, q, 5);
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].first == b[i].first);
  }
}

TEST_CASE("pca_2d: collinear points have a vanishing second coordinate") {
  Rng rng(8);
  int64_t rows = 40, dim = 5;
  std::vector<float> m(rows * dim);
  // direction entries and scalars exactly representable so the points sit on
  // the line to the last bit
  std::vector<double> dir = {1, -2, 0.5, 3, -1};
  for (int64_t r = 0; r < rows; ++r) {
    double t = static_cast<double>(static_cast<int64_t>(rand_below(rng, 1025)) - 512) / 256.0;
    for (int64_t j = 0; j < dim; ++j) m[r * dim + j] = static_cast<float>(t * dir[j]);
  }
  auto p = pca_2d(m.data(), rows, dim);
  double scale1 = 0, scale2 = 0;
  for (int64_t r = 0; r < rows; ++r) {
    scale1 = std::max(scale1, std::abs(p.coords[r * 2]));
    scale2 = std::max(scale2, std::abs(p.coords[r * 2 + 1]));
  }
  CHECK(scale2 < 1e-8 * scale1);
}

TEST_CASE("pca_2d preserves pairwise distances for data already in a 2D subspace") {
  Rng rng(9);
  int64_t rows = 25, dim = 6;
  std::vector<double> u = {1, 0, 1, 0, 1, 0}, v = {0, 1, 0, -1, 0, 1};
  // orthonormalize the two directions
  double nu = std::sqrt(3.0), nv = std::sqrt(3.0);
  std::vector<float> m(rows * dim);
  std::vector<std::pair<double, double>> ab(rows);
  for (int64_t r = 0; r < rows; ++r) {
    double a = rand_uniform(rng, -2, 2), b = rand_uniform(rng, -1, 1);
    ab[r] = {a, b};
    for (int64_t j = 0; j < dim; ++j)
      m[r * dim + j] = static_cast<float>(a * u[j] / nu + b * v[j] / nv);
  }
  auto p = pca_2d(m.data(), rows, dim);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t s = r + 1; s < rows; ++s) {
      double d_orig = std::hypot(ab[r].first - ab[s].first, ab[r].second - ab[s].second);
      double d_proj = std::hypot(p.coords[r * 2] - p.coords[s * 2],
                                 p.coords[r * 2 + 1] - p.coords[s * 2 + 1]);
      CHECK(d_proj == doctest::Approx(d_orig).epsilon(1e-6));
    }
}

TEST_CASE("pca_2d explained variance matches the Jacobi eigensolver oracle") {
  Rng rng(10);
  int64_t rows = 10, dim = 5;
  std::vector<float> m(rows * dim);
  for (auto& v : m) v = static_cast<float>(rand_uniform(rng, -1, 1));
  auto p = pca_2d(m.data(), rows, dim);

  // oracle: covariance + full eigendecomposition in doubles
  std::vector<double> mean(dim, 0);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < dim; ++j) mean[j] += m[r * dim + j];
  for (auto& x : mean) x /= rows;
  std::vector<double> cov(dim * dim, 0);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t i = 0; i < dim; ++i)
      for (int64_t j = 0; j < dim; ++j)
        cov[i * dim + j] += (m[r * dim + i] - mean[i]) * (m[r * dim + j] - mean[j]) / rows;
  auto eig = oracle::jacobi_eigenvalues(cov, dim);
  CHECK(p.eig1 == doctest::Approx(eig[0]).epsilon(1e-9));
  CHECK(p.eig2 == doctest::Approx(eig[1]).epsilon(1e-9));
}

TEST_CASE("pca_2d is translation invariant") {
  Rng rng(11);
  int64_t rows = 18, dim = 4;
  std::vector<float> m(rows * dim), shifted(rows * dim);
  // entries are multiples of 2^-10 and offsets powers of two, so the shift
  // is exact in binary32 and any coordinate drift is the pipeline's own
  std::vector<float> offset = {4.0f, -2.0f, 8.0f, 0.5f};
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < dim; ++j) {
      m[r * dim + j] =
          static_cast<float>(static_cast<int64_t>(rand_below(rng, 2049)) - 1024) / 1024.0f;
      shifted[r * dim + j] = m[r * dim + j] + offset[j];
    }
  auto a = pca_2d(m.data(), rows, dim);
  auto b = pca_2d(shifted.data(), rows, dim);
  for (size_t i = 0; i < a.coords.size(); ++i)
    CHECK(std::abs(a.coords[i] - b.coords[i]) < 1e-9);
}

TEST_CASE("pca_2d rejects rank-deficient width") {
  std::vector<float> m = {1, 2, 3};
  CHECK_THROWS_AS(pca_2d(m.data(), 3, 1), ContractError);
}

TEST_CASE("export: header-only file for an empty export") {
  EmbeddingExport e;
  e.kind = "content";
  e.dim = 3;
  std::string path = temp_path("pdt_export_empty.tsv");
  export_tsv(e, path, ExportFormat::RawVectors);
  std::ifstream in(path);
  std::string line;
  CHECK(std::getline(in, line));
  CHECK(line == "id\tkey\tv0\tv1\tv2");
  CHECK_FALSE(std::getline(in, line));
}

TEST_CASE("export/import round trip is lossless for f32") {
  Rng rng(12);
  auto e = tiny_export({}, 0, 4);
  e.dim = 4;
  for (int64_t r = 0; r < 9; ++r) {
    e.ids.push_back(r + 1);
    e.keys.push_back("key" + std::to_string(r));
    for (int64_t j = 0; j < 4; ++j)
      e.matrix.push_back(static_cast<float>(rand_uniform(rng, -10, 10)));
  }
  std::string path = temp_path("pdt_export_rt.tsv");
  export_tsv(e, path, ExportFormat::RawVectors);
  auto re = import_tsv(path);
  CHECK(re.ids == e.ids);
  CHECK(re.keys == e.keys);
  REQUIRE(re.matrix.size() == e.matrix.size());
  for (size_t i = 0; i < e.matrix.size(); ++i) CHECK(re.matrix[i] == e.matrix[i]);
}

TEST_CASE("metadata join fills blanks for missing keys and reports the count") {
  auto e = tiny_export({1, 0, 0, 1, 1, 1}, 3, 2);
  std::string meta = temp_path("pdt_meta.tsv");
  {
    std::ofstream f(meta);
    f << "key\ttitle\tyear\n";
    f << "k1\tFirst Movie\t1999\n";
    f << "k3\tThird Movie\t2007\n";
    f << "unrelated\tNobody\t1900\n";
  }
  size_t missing = join_metadata(e, meta);
  CHECK(missing == 1);
  REQUIRE(e.meta_header.size() == 2);
  CHECK(e.meta[0][0] == "First Movie");
  CHECK(e.meta[1][0] == "");
  CHECK(e.meta[2][1] == "2007");

  std::string path = temp_path("pdt_export_meta.tsv");
  export_tsv(e, path, ExportFormat::Pca2d);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "id\tkey\ttitle\tyear\tx\ty");
}
