#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pdt {

// Error taxonomy. The CLI maps these to exit codes: config/usage -> 1,
// data/io/integrity -> 2, numeric contract violations -> 3.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IndexError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

// All randomness flows through one generator type so that a (seed, config,
// data) triple fully determines a run on a given build.
using Rng = std::mt19937_64;

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  // splitmix64 finalizer over the xor of the two words
  uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Uniform in [0,1). Hand-rolled instead of uniform_real_distribution so the
// stream does not depend on the standard library implementation.
inline double rand_unit(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double rand_uniform(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * rand_unit(rng);
}

// Unbiased integer in [0, n) via rejection.
inline uint64_t rand_below(Rng& rng, uint64_t n) {
  if (n == 0) throw ContractError("rand_below: n must be positive");
  uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % n;
}

// Order-stable compensated accumulator for metric means.
struct KahanSum {
  double sum = 0.0;
  double carry = 0.0;
  void add(double x) {
    double y = x - carry;
    double t = sum + y;
    carry = (t - sum) - y;
    sum = t;
  }
  double value() const { return sum; }
};

// Count of warnings surfaced by loss/analysis code; callers that care pass a
// sink and inspect or log the totals.
struct Warnings {
  size_t duplicate_anchor_batches = 0;
  size_t zero_rows_normalized = 0;
};

}  // namespace pdt
