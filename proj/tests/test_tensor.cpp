#include <cmath>

#include "doctest.h"
#include "pdt/tensor.hpp"
#include "support/oracles.hpp"

using namespace pdt;

namespace {

template <class T>
Tensor<T> rand_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1,
                      bool requires_grad = true) {
  return Tensor<T>::uniform(std::move(shape), lo, hi, rng, requires_grad);
}

}  // namespace

TEST_CASE("matmul identity and known product") {
  Tape<double> tp(false);
  Tensor<double> a({2, 2}, {1, 2, 3, 4});
  Tensor<double> eye({2, 2}, {1, 0, 0, 1});
  auto r = matmul(tp, a, eye);
  CHECK(r.values() == std::vector<double>{1, 2, 3, 4});

  Tensor<double> b({2, 1}, {5, 6});
  auto r2 = matmul(tp, a, b);
  CHECK(r2.values() == std::vector<double>{17, 39});
}

TEST_CASE("matmul matches triple-loop oracle on random shapes") {
  Rng rng(11);
  Tape<double> tp(false);
  for (int it = 0; it < 10; ++it) {
    int64_t m = 1 + rand_below(rng, 6), k = 1 + rand_below(rng, 6), n = 1 + rand_below(rng, 6);
    auto a = rand_tensor<double>({m, k}, rng);
    auto b = rand_tensor<double>({k, n}, rng);
    auto c = matmul(tp, a, b);
    auto ref = oracle::matmul(a.values(), b.values(), m, k, n);
    for (int64_t i = 0; i < c.numel(); ++i)
      CHECK(c.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape<double> tp(false);
  Tensor<double> a({2, 3});
  Tensor<double> b({4, 2});
  try {
    matmul(tp, a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,2]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient vs central differences") {
  Rng rng(3);
  auto a = rand_tensor<double>({3, 4}, rng);
  auto b = rand_tensor<double>({4, 2}, rng);
  auto probe = rand_tensor<double>({3, 2}, rng, -1, 1, false);
  std::vector<Tensor<double>> ps = {a, b};
  double err = grad_check<double>(
      [&](Tape<double>& tp) { return sum(tp, mul(tp, matmul(tp, a, b), probe)); }, ps, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("softmax basics") {
  Tape<double> tp(false);
  Tensor<double> x({2}, {0, 0});
  auto y = softmax(tp, x, 0);
  CHECK(y.data()[0] == doctest::Approx(0.5));
  CHECK(y.data()[1] == doctest::Approx(0.5));

  Tensor<double> x2({2}, {std::log(2.0), 0});
  auto y2 = softmax(tp, x2, 0);
  CHECK(y2.data()[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-9));
  CHECK(y2.data()[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-9));
}

TEST_CASE("softmax rows sum to 1 and match exp/sum oracle") {
  Rng rng(5);
  Tape<double> tp(false);
  for (int it = 0; it < 20; ++it) {
    int64_t n = 2 + rand_below(rng, 7);
    auto x = rand_tensor<double>({3, n}, rng, -4, 4, false);
    auto y = softmax(tp, x, -1);
    for (int64_t r = 0; r < 3; ++r) {
      std::vector<double> row(x.data() + r * n, x.data() + (r + 1) * n);
      auto ref = oracle::softmax_row(row);
      double s = 0;
      for (int64_t j = 0; j < n; ++j) {
        CHECK(y.data()[r * n + j] == doctest::Approx(ref[j]).epsilon(1e-9));
        CHECK(y.data()[r * n + j] >= 0.0);
        s += y.data()[r * n + j];
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("softmax along a non-last axis") {
  Tape<double> tp(false);
  Tensor<double> x({2, 3}, {1, 2, 3, 4, 5, 6});
  auto y = softmax(tp, x, 0);
  for (int64_t j = 0; j < 3; ++j) CHECK(y.data()[j] + y.data()[3 + j] == doctest::Approx(1.0));
}

TEST_CASE("softmax propagates NaN") {
  Tape<double> tp(false);
  Tensor<double> x({2}, {std::nan(""), 0.0});
  auto y = softmax(tp, x, 0);
  CHECK(std::isnan(y.data()[0]));
}

TEST_CASE("layer_norm edge cases") {
  Tape<double> tp(false);
  Tensor<double> x({2, 3}, {5, 5, 5, -2, -2, -2});
  Tensor<double> gamma({3}, {1, 1, 1});
  Tensor<double> beta({3}, {0, 0, 0});
  auto y = layer_norm(tp, x, gamma, beta, 1e-5);
  for (int64_t i = 0; i < 6; ++i) CHECK(std::abs(y.data()[i]) < 1e-9);

  Tensor<double> g0({3}, {0, 0, 0});
  Tensor<double> b1({3}, {1, 2, 3});
  auto y2 = layer_norm(tp, x, g0, b1, 1e-5);
  CHECK(y2.values() == std::vector<double>{1, 2, 3, 1, 2, 3});
}

TEST_CASE("layer_norm gradient vs central differences") {
  Rng rng(13);
  auto x = rand_tensor<double>({3, 5}, rng);
  auto g = rand_tensor<double>({5}, rng, 0.5, 1.5);
  auto b = rand_tensor<double>({5}, rng, -0.5, 0.5);
  auto probe = rand_tensor<double>({3, 5}, rng, -1, 1, false);
  std::vector<Tensor<double>> ps = {x, g, b};
  double err = grad_check<double>(
      [&](Tape<double>& tp) { return sum(tp, mul(tp, layer_norm(tp, x, g, b, 1e-5), probe)); },
      ps, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("gelu known values") {
  Tape<double> tp(false);
  Tensor<double> x({3}, {0.0, 10.0, 1.0});
  auto y = gelu(tp, x);
  CHECK(y.data()[0] == 0.0);
  CHECK(y.data()[1] == doctest::Approx(10.0).epsilon(1e-7));
  double phi1 = 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0)));
  CHECK(y.data()[2] == doctest::Approx(phi1).epsilon(1e-12));
}

TEST_CASE("backward: sum gives ones, quadratic gives 2x") {
  Rng rng(2);
  auto x = rand_tensor<double>({4, 3}, rng);
  {
    Tape<double> tp(true);
    auto loss = sum(tp, x);
    x.zero_grad();
    tp.backward(loss);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == 1.0);
  }
  {
    Tape<double> tp(true);
    auto loss = sum(tp, mul(tp, x, x));
    x.zero_grad();
    tp.backward(loss);
    for (int64_t i = 0; i < x.numel(); ++i)
      CHECK(x.grad()[i] == doctest::Approx(2 * x.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("backward rejects non-scalar and disconnected losses") {
  Rng rng(2);
  auto x = rand_tensor<double>({3}, rng);
  Tape<double> tp(true);
  auto y = mul(tp, x, x);
  CHECK_THROWS_AS(tp.backward(y), ContractError);
  auto loss = sum(tp, y);
  Tensor<double> stranger = Tensor<double>::scalar(1.0);
  CHECK_THROWS_AS(tp.backward(stranger), ContractError);
  tp.backward(loss);
  CHECK(tp.size() == 0);
}

TEST_CASE("backward is linear in the loss") {
  Rng rng(9);
  auto x = rand_tensor<double>({5}, rng);
  double a = 1.7, b = -0.6;
  auto run = [&](double ca, double cb) {
    Tape<double> tp(true);
    auto f = sum(tp, mul(tp, x, x));
    auto g = sum(tp, gelu(tp, x));
    auto loss = add(tp, scale(tp, f, ca), scale(tp, g, cb));
    x.zero_grad();
    tp.backward(loss);
    return x.grad_values();
  };
  auto gf = run(1, 0);
  auto gg = run(0, 1);
  auto gab = run(a, b);
  for (size_t i = 0; i < gab.size(); ++i)
    CHECK(gab[i] == doctest::Approx(a * gf[i] + b * gg[i]).epsilon(1e-6));
}

TEST_CASE("gradients accumulate across fan-out and zero_grad resets") {
  Rng rng(4);
  auto x = rand_tensor<double>({3}, rng);
  Tape<double> tp(true);
  auto y = add(tp, x, x);
  auto loss = sum(tp, y);
  x.zero_grad();
  tp.backward(loss);
  for (int64_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == 2.0);
  x.zero_grad();
  for (int64_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == 0.0);
}

TEST_CASE("grad_check on 0.5||x||^2 is essentially exact") {
  Rng rng(6);
  auto x = rand_tensor<double>({7}, rng);
  std::vector<Tensor<double>> ps = {x};
  // the loss is quadratic, so central differences carry no truncation error
  // and a generous step keeps rounding noise far below the bound
  double err = grad_check<double>(
      [&](Tape<double>& tp) { return scale(tp, sum(tp, mul(tp, x, x)), 0.5); }, ps, 1e-3);
  CHECK(err < 1e-10);
}

TEST_CASE("grad_check detects nondeterminism from live dropout") {
  Rng rng(6);
  auto x = rand_tensor<double>({64}, rng);
  Rng drop_rng(1);
  std::vector<Tensor<double>> ps = {x};
  CHECK_THROWS_AS(
      grad_check<double>(
          [&](Tape<double>& tp) { return sum(tp, dropout(tp, x, 0.5, true, drop_rng)); }, ps,
          1e-6),
      ContractError);
}

TEST_CASE("dropout is identity when off") {
  Rng rng(8);
  auto x = rand_tensor<double>({50}, rng, 1, 2, false);
  Tape<double> tp(false);
  Rng r1(1);
  CHECK(dropout(tp, x, 0.0, true, r1).same_storage(x));
  CHECK(dropout(tp, x, 0.3, false, r1).same_storage(x));
}

TEST_CASE("dropout statistics at p=0.2") {
  Tensor<float> x({100000}, 1.0f);
  Tape<float> tp(false);
  Rng drop_rng(99);
  auto y = dropout(tp, x, 0.2, true, drop_rng);
  int64_t kept = 0;
  double total = 0;
  for (int64_t i = 0; i < y.numel(); ++i) {
    if (y.data()[i] != 0.0f) ++kept;
    total += y.data()[i];
  }
  double kept_frac = double(kept) / y.numel();
  CHECK(kept_frac > 0.78);
  CHECK(kept_frac < 0.82);
  CHECK(total / y.numel() == doctest::Approx(1.0).epsilon(0.02));
}

// Finite-difference sweep across the differentiable ops on random small
// shapes: rel err < 1e-6 in f64 and < 1e-3 in f32.
namespace {

// Vector-norm relative error between analytic and numeric gradients; the
// numeric side is a fresh central-difference loop, independent of grad_check.
template <class T>
double fd_norm_err(const std::function<Tensor<T>(Tape<T>&)>& f, std::vector<Tensor<T>>& params,
                   T eps) {
  Tape<T> tp(true);
  for (auto& p : params) p.zero_grad();
  Tensor<T> loss = f(tp);
  tp.backward(loss);
  auto eval = [&]() {
    Tape<T> probe(false);
    return static_cast<double>(f(probe).item());
  };
  double worst = 0;
  for (auto& p : params) {
    p.ensure_grad();
    double num_inf = 0, ana_inf = 0, diff_inf = 0;
    for (int64_t i = 0; i < p.numel(); ++i) {
      T saved = p.data()[i];
      p.data()[i] = saved + eps;
      double up = eval();
      p.data()[i] = saved - eps;
      double dn = eval();
      p.data()[i] = saved;
      double numeric = (up - dn) / (2.0 * static_cast<double>(eps));
      double analytic = static_cast<double>(p.grad_values()[i]);
      num_inf = std::max(num_inf, std::abs(numeric));
      ana_inf = std::max(ana_inf, std::abs(analytic));
      diff_inf = std::max(diff_inf, std::abs(analytic - numeric));
    }
    worst = std::max(worst, diff_inf / std::max({ana_inf, num_inf, 1e-12}));
  }
  return worst;
}

template <class T>
void op_fd_sweep(double eps, double tol, uint64_t seed, int rounds, bool norm_mode) {
  Rng rng(seed);
  for (int it = 0; it < rounds; ++it) {
    int64_t b = 2 + rand_below(rng, 3);
    int64_t n = 2 + rand_below(rng, 4);
    int64_t d = 2 * (1 + rand_below(rng, 2));
    auto x = rand_tensor<T>({b, n}, rng);
    auto y = rand_tensor<T>({b, n}, rng);
    auto bias = rand_tensor<T>({n}, rng);
    auto beta = rand_tensor<T>({n}, rng);
    // layer-norm fd case needs rows of >= 3 (two-element rows normalize to
    // +-1 whatever the input, leaving no x gradient to measure) and a
    // per-column ramp keeping the row variance away from zero
    int64_t ln_n = std::max<int64_t>(n, 3);
    auto x_spread = rand_tensor<T>({b, ln_n}, rng);
    for (int64_t r = 0; r < b; ++r)
      for (int64_t j = 0; j < ln_n; ++j) x_spread.data()[r * ln_n + j] += T(3 * j);
    auto ln_g = rand_tensor<T>({ln_n}, rng);
    auto ln_b = rand_tensor<T>({ln_n}, rng);
    auto ln_pr = rand_tensor<T>({b, ln_n}, rng, -1, 1, false);
    auto sc = Tensor<T>::scalar(T(0.7));
    sc.set_requires_grad(true);
    auto sq = rand_tensor<T>({b, b}, rng);
    auto a3 = rand_tensor<T>({b, n, d}, rng);
    auto table = rand_tensor<T>({n + 2, d}, rng);
    auto w = rand_tensor<T>({n, d}, rng);
    auto vec = rand_tensor<T>({d}, rng);
    auto positive = rand_tensor<T>({b, n}, rng, 0.5, 3.0);
    // keep clamp inputs away from the kink at 0.25, where central
    // differences straddle the non-smooth point
    auto clampable = rand_tensor<T>({b, n}, rng);
    for (int64_t i = 0; i < clampable.numel(); ++i)
      if (std::abs(double(clampable.data()[i]) - 0.25) < 0.05)
        clampable.data()[i] = T(0.45);
    auto pr2 = rand_tensor<T>({b, n}, rng, -1, 1, false);
    auto prb = rand_tensor<T>({b}, rng, -1, 1, false);
    auto prsq = rand_tensor<T>({b, b}, rng, -1, 1, false);
    auto pr3 = rand_tensor<T>({b, n, d}, rng, -1, 1, false);
    auto pr3p = rand_tensor<T>({b, n + 1, d}, rng, -1, 1, false);
    auto prd = rand_tensor<T>({b, d}, rng, -1, 1, false);
    auto prv = rand_tensor<T>({d}, rng, -1, 1, false);

    std::vector<int64_t> slots;
    for (int64_t i = 0; i < b; ++i) slots.push_back(rand_below(rng, n));
    std::vector<int64_t> seq_ids(b * n);
    for (auto& e : seq_ids) e = rand_below(rng, n + 2);
    IntTensor idx({b, n}, seq_ids);
    std::vector<int64_t> ids;
    for (int64_t i = 0; i < b; ++i) ids.push_back(1 + rand_below(rng, n + 1));
    std::vector<uint8_t> mask(b * n, 1);
    mask[0] = 0;
    std::vector<uint8_t> mm(b * n);
    for (auto& v : mm) v = static_cast<uint8_t>(rand_below(rng, 2));
    if (std::count(mm.begin(), mm.end(), 1) == 0) mm[0] = 1;

    struct Case {
      const char* name;
      std::function<Tensor<T>(Tape<T>&)> f;
      std::vector<Tensor<T>> params;
    };
    std::vector<Case> cases = {
        {"add", [&](Tape<T>& tp) { return sum(tp, mul(tp, add(tp, x, y), pr2)); }, {x, y}},
        {"add_bias",
         [&](Tape<T>& tp) { return sum(tp, mul(tp, add(tp, x, bias), pr2)); },
         {x, bias}},
        {"add_scalar", [&](Tape<T>& tp) { return sum(tp, mul(tp, add(tp, x, sc), pr2)); }, {x, sc}},
        {"sub_bias",
         [&](Tape<T>& tp) { return sum(tp, mul(tp, sub(tp, x, bias), pr2)); },
         {x, bias}},
        {"mul", [&](Tape<T>& tp) { return sum(tp, mul(tp, mul(tp, x, y), pr2)); }, {x, y}},
        {"mul_scalar", [&](Tape<T>& tp) { return sum(tp, mul(tp, mul(tp, x, sc), pr2)); }, {x, sc}},
        {"scale", [&](Tape<T>& tp) { return sum(tp, mul(tp, scale(tp, x, -1.3), pr2)); }, {x}},
        {"mean", [&](Tape<T>& tp) { return mean(tp, mul(tp, x, y)); }, {x, y}},
        {"masked_mean", [&](Tape<T>& tp) { return masked_mean(tp, mul(tp, x, y), mm); }, {x, y}},
        {"matmul", [&](Tape<T>& tp) { return sum(tp, mul(tp, matmul(tp, x, w), prd)); }, {x, w}},
        {"matmul_nt",
         [&](Tape<T>& tp) { return sum(tp, mul(tp, matmul_nt(tp, x, y), prsq)); },
         {x, y}},
        {"softmax", [&](Tape<T>& tp) { return sum(tp, mul(tp, softmax(tp, x, -1), pr2)); }, {x}},
        {"layer_norm",
         [&](Tape<T>& tp) {
           return sum(tp, mul(tp, layer_norm(tp, x_spread, ln_g, ln_b, 1e-5), ln_pr));
         },
         {x_spread, ln_g, ln_b}},
        {"gelu", [&](Tape<T>& tp) { return sum(tp, mul(tp, gelu(tp, x), pr2)); }, {x}},
        {"sigmoid", [&](Tape<T>& tp) { return sum(tp, mul(tp, sigmoid(tp, x), pr2)); }, {x}},
        {"softplus", [&](Tape<T>& tp) { return sum(tp, mul(tp, softplus(tp, x), pr2)); }, {x}},
        {"log",
         [&](Tape<T>& tp) { return sum(tp, mul(tp, log_op(tp, positive), pr2)); },
         {positive}},
        {"clamp_min",
         [&](Tape<T>& tp) { return sum(tp, mul(tp, clamp_min(tp, clampable, 0.25), pr2)); },
         {clampable}},
        {"logsumexp",
         [&](Tape<T>& tp) { return sum(tp, mul(tp, logsumexp_rows(tp, sq, false), prb)); },
         {sq}},
        {"logsumexp_excl",
         [&](Tape<T>& tp) { return sum(tp, mul(tp, logsumexp_rows(tp, sq, true), prb)); },
         {sq}},
        {"take_diag",
         [&](Tape<T>& tp) { return sum(tp, mul(tp, take_diag(tp, sq), prb)); },
         {sq}},
        {"rows_dot",
         [&](Tape<T>& tp) { return sum(tp, mul(tp, rows_dot(tp, x, y), prb)); },
         {x, y}},
        {"gather_slots",
         [&](Tape<T>& tp) { return sum(tp, mul(tp, gather_slots(tp, a3, slots), prd)); },
         {a3}},
        {"prepend_row",
         [&](Tape<T>& tp) { return sum(tp, mul(tp, prepend_row(tp, vec, a3), pr3p)); },
         {vec, a3}},
        {"slice_row",
         [&](Tape<T>& tp) { return sum(tp, mul(tp, slice_row(tp, table, 2), prv)); },
         {table}},
        {"add_pos_rows",
         [&](Tape<T>& tp) { return sum(tp, mul(tp, add_pos_rows(tp, a3, table, 1), pr3)); },
         {a3, table}},
        {"embedding_seq",
         [&](Tape<T>& tp) { return sum(tp, mul(tp, embedding_seq(tp, table, idx, 0), pr3)); },
         {table}},
        {"embedding_rows",
         [&](Tape<T>& tp) { return sum(tp, mul(tp, embedding_rows(tp, table, ids), prd)); },
         {table}},
        {"attention",
         [&](Tape<T>& tp) {
           return sum(tp, mul(tp, attention_core(tp, a3, a3, a3, mask, 2, false), pr3));
         },
         {a3}},
        {"attention_causal",
         [&](Tape<T>& tp) {
           return sum(tp, mul(tp, attention_core(tp, a3, a3, a3, mask, 1, true), pr3));
         },
         {a3}},
    };
    for (auto& c : cases) {
      double err = norm_mode ? fd_norm_err<T>(c.f, c.params, static_cast<T>(eps))
                             : grad_check<T>(c.f, c.params, static_cast<T>(eps));
      INFO(std::string(c.name) << " round " << it);
      CHECK(err < tol);
    }
  }
}

}  // namespace

TEST_CASE("all differentiable ops pass fd checks in f64") {
  op_fd_sweep<double>(1e-5, 1e-6, 41, 20, /*norm_mode=*/false);
}

// In f32 the forward pass itself carries ~1e-7 relative noise, so
// per-element relative errors on near-zero gradient entries are meaningless;
// the comparison is per-parameter in the infinity norm instead.
TEST_CASE("all differentiable ops pass fd checks in f32") {
  op_fd_sweep<float>(1e-2, 1e-3, 42, 20, /*norm_mode=*/true);
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor<double>({2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  Tensor<double> s = Tensor<double>::scalar(3.5);
  CHECK(s.numel() == 1);
  CHECK(s.shape().empty());
  CHECK(s.item() == 3.5);
}

TEST_CASE("pad embedding rows come back zero; bad indices throw") {
  Tape<double> tp(false);
  Tensor<double> table({3, 2}, {0, 0, 3, 4, 5, 6});
  IntTensor idx({1, 2}, {0, 2});
  auto out = embedding_seq(tp, table, idx, 0);
  CHECK(out.values() == std::vector<double>{0, 0, 5, 6});
  IntTensor bad({1, 1}, {7});
  CHECK_THROWS_AS(embedding_seq(tp, table, bad, 0), IndexError);
  CHECK_THROWS_AS(embedding_rows(tp, table, {0}), ContractError);
}
