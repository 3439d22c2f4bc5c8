#include <cmath>

#include "doctest.h"
#include "pdt/nn.hpp"
#include "support/oracles.hpp"

using namespace pdt;

namespace {

EncoderConfig small_cfg(int64_t layers = 1, int64_t heads = 2, int64_t d = 8, int64_t dff = 12,
                        double p = 0.0, int64_t max_len = 4) {
  EncoderConfig c;
  c.num_layers = layers;
  c.num_heads = heads;
  c.d_model = d;
  c.d_ff = dff;
  c.dropout_p = p;
  c.max_len = max_len;
  return c;
}

}  // namespace

TEST_CASE("multi_head_attention with L=1 reduces to Wo Wv x") {
  Rng rng(21);
  auto cfg = small_cfg(1, 2, 6, 8);
  auto p = BlockParams<double>::init(cfg, rng);
  auto x = Tensor<double>::uniform({2, 1, 6}, -1, 1, rng);
  std::vector<uint8_t> mask = {1, 1};
  Tape<double> tp(false);
  Rng r(1);
  for (bool causal : {false, true}) {
    auto out = multi_head_attention(tp, x, mask, cfg, p, causal, false, r);
    auto v = matmul(tp, x, p.wv);
    auto expect = matmul(tp, v, p.wo);
    for (int64_t i = 0; i < out.numel(); ++i)
      CHECK(out.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-9));
  }
}

TEST_CASE("causal attention: prefix outputs are bit-identical under suffix perturbation") {
  Rng rng(22);
  auto cfg = small_cfg(2, 2, 8, 16, 0.0, 6);
  cfg.causal = true;
  auto params = EncoderParams<double>::init(cfg, false, rng);
  int64_t b = 2, l = 5;
  auto x = Tensor<double>::uniform({b, l, 8}, -1, 1, rng);
  std::vector<uint8_t> mask(b * l, 1);
  Rng r1(9), r2(9);
  Tape<double> tp(false);
  auto base = encoder_forward(tp, x, mask, cfg, params, false, r1);
  for (int trial = 0; trial < 20; ++trial) {
    int64_t p = 1 + rand_below(rng, l - 1);
    auto x2 = Tensor<double>(x.shape(), x.values());
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t j = p; j < l; ++j)
        for (int64_t q = 0; q < 8; ++q)
          x2.data()[(bi * l + j) * 8 + q] = rand_uniform(rng, -1, 1);
    auto out = encoder_forward(tp, x2, mask, cfg, params, false, r2);
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t j = 0; j < p; ++j)
        for (int64_t q = 0; q < 8; ++q)
          CHECK(out.data()[(bi * l + j) * 8 + q] == base.data()[(bi * l + j) * 8 + q]);
  }
}

TEST_CASE("single-head attention matches explicit arithmetic") {
  // B=1, L=2, one head, hand-set weights; oracle computes the attention
  // arithmetic directly in doubles.
  int64_t d = 2;
  auto cfg = small_cfg(1, 1, d, 4);
  Rng rng(1);
  auto p = BlockParams<double>::init(cfg, rng);
  p.wq = Tensor<double>({2, 2}, {1, 0, 0, 1});
  p.wk = Tensor<double>({2, 2}, {0.5, 0, 0, 0.5});
  p.wv = Tensor<double>({2, 2}, {1, 2, 3, 4});
  p.wo = Tensor<double>({2, 2}, {1, 0, 0, 1});
  Tensor<double> x({1, 2, 2}, {1.0, -1.0, 0.5, 2.0});
  std::vector<uint8_t> mask = {1, 1};
  Tape<double> tp(false);
  Rng r(1);
  auto out = multi_head_attention(tp, x, mask, cfg, p, false, false, r);

  // oracle
  double q[2][2], k[2][2], v[2][2];
  double xs[2][2] = {{1.0, -1.0}, {0.5, 2.0}};
  double wq[2][2] = {{1, 0}, {0, 1}}, wk[2][2] = {{0.5, 0}, {0, 0.5}},
         wv[2][2] = {{1, 2}, {3, 4}};
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      q[i][j] = xs[i][0] * wq[0][j] + xs[i][1] * wq[1][j];
      k[i][j] = xs[i][0] * wk[0][j] + xs[i][1] * wk[1][j];
      v[i][j] = xs[i][0] * wv[0][j] + xs[i][1] * wv[1][j];
    }
  for (int i = 0; i < 2; ++i) {
    double s0 = (q[i][0] * k[0][0] + q[i][1] * k[0][1]) / std::sqrt(2.0);
    double s1 = (q[i][0] * k[1][0] + q[i][1] * k[1][1]) / std::sqrt(2.0);
    double mx = std::max(s0, s1);
    double e0 = std::exp(s0 - mx), e1 = std::exp(s1 - mx);
    double p0 = e0 / (e0 + e1), p1 = e1 / (e0 + e1);
    for (int j = 0; j < 2; ++j) {
      double expect = p0 * v[0][j] + p1 * v[1][j];  // wo = identity
      CHECK(out.data()[i * 2 + j] == doctest::Approx(expect).epsilon(1e-6));
    }
  }
}

TEST_CASE("transformer_block: eval mode matches p=0 training mode") {
  Rng rng(31);
  auto cfg = small_cfg(1, 2, 8, 16);
  auto p = BlockParams<double>::init(cfg, rng);
  auto x = Tensor<double>::uniform({2, 3, 8}, -1, 1, rng);
  std::vector<uint8_t> mask(6, 1);
  Tape<double> tp(false);
  Rng r1(5), r2(5);
  auto a = transformer_block(tp, x, mask, cfg, p, false, false, r1);
  auto b = transformer_block(tp, x, mask, cfg, p, false, true, r2);  // p=0: dropout inert
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
}

TEST_CASE("transformer_block with zero weights passes the residual through layer norms") {
  Rng rng(32);
  auto cfg = small_cfg(1, 2, 8, 16);
  auto p = BlockParams<double>::init(cfg, rng);
  for (auto* t : {&p.wq, &p.wk, &p.wv, &p.wo, &p.w1, &p.w2})
    std::fill(t->data(), t->data() + t->numel(), 0.0);
  auto x = Tensor<double>::uniform({2, 3, 8}, -1, 1, rng);
  std::vector<uint8_t> mask(6, 1);
  Tape<double> tp(false);
  Rng r(5);
  auto out = transformer_block(tp, x, mask, cfg, p, false, false, r);
  auto x1 = layer_norm(tp, x, p.ln1_g, p.ln1_b, cfg.ln_eps);
  auto expect = layer_norm(tp, x1, p.ln2_g, p.ln2_b, cfg.ln_eps);
  for (int64_t i = 0; i < out.numel(); ++i)
    CHECK(out.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-12));
}

TEST_CASE("block-stack gradient checks pass for 1 and 2 layers") {
  Rng rng(33);
  for (int64_t layers : {1, 2}) {
    auto cfg = small_cfg(layers, 2, 6, 10, 0.0, 3);
    std::vector<BlockParams<double>> blocks;
    std::vector<Tensor<double>> ps;
    auto x = Tensor<double>::uniform({2, 3, 6}, -1, 1, rng, true);
    ps.push_back(x);
    for (int64_t i = 0; i < layers; ++i) {
      blocks.push_back(BlockParams<double>::init(cfg, rng));
      auto& blk = blocks.back();
      for (auto* t : {&blk.wq, &blk.wk, &blk.wv, &blk.wo, &blk.w1, &blk.b1, &blk.w2, &blk.b2,
                      &blk.ln1_g, &blk.ln1_b, &blk.ln2_g, &blk.ln2_b})
        ps.push_back(*t);
    }
    auto probe = Tensor<double>::uniform({2, 3, 6}, -1, 1, rng);
    std::vector<uint8_t> mask = {0, 1, 1, 1, 1, 1};
    double err = grad_check<double>(
        [&](Tape<double>& tp) {
          Rng r(2);
          Tensor<double> h = x;
          for (auto& blk : blocks)
            h = transformer_block(tp, h, mask, cfg, blk, false, false, r);
          return sum(tp, mul(tp, h, probe));
        },
        ps, 3e-5);
    INFO("layers=" << layers);
    CHECK(err < 1e-6);
  }
}

TEST_CASE("full encoder (CLS, positions, input norm) passes fd at the training tolerance") {
  Rng rng(38);
  auto cfg = small_cfg(2, 2, 6, 10, 0.0, 3);
  cfg.use_cls = true;
  auto params = EncoderParams<double>::init(cfg, true, rng);
  auto x = Tensor<double>::uniform({2, 3, 6}, -1, 1, rng, true);
  auto probe = Tensor<double>::uniform({2, 6}, -1, 1, rng);
  std::vector<uint8_t> mask = {0, 1, 1, 1, 1, 1};
  std::vector<Tensor<double>> ps = {x, params.ln_in_g, params.ln_in_b, params.pos, params.cls};
  for (auto& blk : params.blocks) {
    for (auto* t : {&blk.wq, &blk.wk, &blk.wv, &blk.wo, &blk.w1, &blk.b1, &blk.w2, &blk.b2,
                    &blk.ln1_g, &blk.ln1_b, &blk.ln2_g, &blk.ln2_b})
      ps.push_back(*t);
  }
  double err = grad_check<double>(
      [&](Tape<double>& tp) {
        Rng r(2);
        auto out = encoder_forward(tp, x, mask, cfg, params, false, r);
        return sum(tp, mul(tp, out, probe));
      },
      ps, 3e-5);
  CHECK(err < 1e-4);
}

TEST_CASE("CLS output is invariant to trailing pad tokens") {
  Rng rng(39);
  auto cfg = small_cfg(2, 2, 8, 16, 0.0, 5);
  cfg.use_cls = true;
  auto params = EncoderParams<double>::init(cfg, true, rng);
  int64_t b = 2, l = 5, d = 8;
  auto x = Tensor<double>::uniform({b, l, d}, -1, 1, rng);
  std::vector<uint8_t> mask(b * l, 1);
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t j = l - 2; j < l; ++j) mask[bi * l + j] = 0;  // trailing pads
  Tape<double> tp(false);
  Rng r1(3), r2(3);
  auto base = encoder_forward(tp, x, mask, cfg, params, false, r1);
  auto x2 = Tensor<double>(x.shape(), x.values());
  for (int64_t i = 0; i < b * l; ++i)
    if (!mask[i])
      for (int64_t q = 0; q < d; ++q) x2.data()[i * d + q] = rand_uniform(rng, -7, 7);
  auto out = encoder_forward(tp, x2, mask, cfg, params, false, r2);
  for (int64_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == base.data()[i]);
}

TEST_CASE("CLS output is invariant to pad slot contents") {
  Rng rng(34);
  auto cfg = small_cfg(2, 2, 8, 16, 0.0, 5);
  cfg.use_cls = true;
  auto params = EncoderParams<double>::init(cfg, true, rng);
  int64_t b = 3, l = 5, d = 8;
  auto x = Tensor<double>::uniform({b, l, d}, -1, 1, rng);
  std::vector<uint8_t> mask(b * l, 1);
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t j = 0; j < bi + 1; ++j) mask[bi * l + j] = 0;  // left pads
  Tape<double> tp(false);
  Rng r1(3), r2(3);
  auto base = encoder_forward(tp, x, mask, cfg, params, false, r1);
  for (int trial = 0; trial < 20; ++trial) {
    auto x2 = Tensor<double>(x.shape(), x.values());
    for (int64_t i = 0; i < b * l; ++i)
      if (!mask[i])
        for (int64_t q = 0; q < d; ++q) x2.data()[i * d + q] = rand_uniform(rng, -5, 5);
    auto out = encoder_forward(tp, x2, mask, cfg, params, false, r2);
    for (int64_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == base.data()[i]);
  }
}

TEST_CASE("causal last-position output reacts to earlier tokens") {
  Rng rng(35);
  auto cfg = small_cfg(2, 2, 8, 16, 0.0, 5);
  cfg.causal = true;
  auto params = EncoderParams<double>::init(cfg, false, rng);
  int64_t l = 4, d = 8;
  auto x = Tensor<double>::uniform({1, l, d}, -1, 1, rng);
  std::vector<uint8_t> mask(l, 1);
  Tape<double> tp(false);
  Rng r1(3), r2(3);
  auto base = encoder_forward(tp, x, mask, cfg, params, false, r1);
  auto x2 = Tensor<double>(x.shape(), x.values());
  x2.data()[0 * d + 3] += 0.5;  // perturb the first token
  auto out = encoder_forward(tp, x2, mask, cfg, params, false, r2);
  double delta = 0;
  for (int64_t q = 0; q < d; ++q)
    delta += std::abs(out.data()[(l - 1) * d + q] - base.data()[(l - 1) * d + q]);
  CHECK(delta > 1e-8);
}

TEST_CASE("encoder is deterministic under a fixed seed with dropout live") {
  Rng rng(36);
  auto cfg = small_cfg(2, 2, 8, 16, 0.3, 4);
  cfg.use_cls = true;
  auto params = EncoderParams<double>::init(cfg, true, rng);
  auto x = Tensor<double>::uniform({2, 4, 8}, -1, 1, rng);
  std::vector<uint8_t> mask(8, 1);
  Tape<double> tp(false);
  Rng r1(77), r2(77);
  auto a = encoder_forward(tp, x, mask, cfg, params, true, r1);
  auto b = encoder_forward(tp, x, mask, cfg, params, true, r2);
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
}

TEST_CASE("encoder rejects sequences beyond max_len") {
  Rng rng(37);
  auto cfg = small_cfg(1, 2, 8, 16, 0.0, 3);
  auto params = EncoderParams<double>::init(cfg, false, rng);
  auto x = Tensor<double>::uniform({1, 4, 8}, -1, 1, rng);
  std::vector<uint8_t> mask(4, 1);
  Tape<double> tp(false);
  Rng r(1);
  CHECK_THROWS_AS(encoder_forward(tp, x, mask, cfg, params, false, r), ContractError);
}

TEST_CASE("adam: zero gradients leave parameters unchanged") {
  Rng rng(41);
  auto w = Tensor<float>::uniform({4, 3}, -1, 1, rng, true);
  auto before = w.values();
  std::vector<NamedParam<float>> params = {{"w", w}};
  AdamState<float> st;
  AdamConfig cfg;
  w.zero_grad();
  for (int i = 0; i < 3; ++i) adam_step(params, st, cfg);
  CHECK(w.values() == before);
  CHECK(st.t == 3);
}

TEST_CASE("adam single-step reference: unit gradient moves param by ~lr") {
  auto w = Tensor<double>::uniform({1}, 0, 0, *(new Rng(1)), true);
  w.data()[0] = 1.0;
  w.ensure_grad();
  w.grad()[0] = 1.0;
  std::vector<NamedParam<double>> params = {{"w", w}};
  AdamState<double> st;
  AdamConfig cfg;
  cfg.lr = 0.1;
  adam_step(params, st, cfg);
  // mhat = 1, vhat = 1 at t=1, so the update is lr/(1+eps)
  CHECK(w.data()[0] == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(st.t == 1);
}

TEST_CASE("adam matches a hand-rolled reference over steps") {
  Rng rng(43);
  auto w = Tensor<double>::uniform({6}, -1, 1, rng, true);
  std::vector<double> ref_w(w.data(), w.data() + 6);
  oracle::ReferenceAdam ref(6, 0.01, 0.9, 0.999, 1e-8);
  std::vector<NamedParam<double>> params = {{"w", w}};
  AdamState<double> st;
  AdamConfig cfg;
  cfg.lr = 0.01;
  for (int stepi = 0; stepi < 5; ++stepi) {
    std::vector<double> g(6);
    for (auto& v : g) v = rand_uniform(rng, -2, 2);
    w.zero_grad();
    for (int i = 0; i < 6; ++i) w.grad()[i] = g[i];
    adam_step(params, st, cfg);
    ref.step(ref_w, g);
    for (int i = 0; i < 6; ++i) CHECK(w.data()[i] == doctest::Approx(ref_w[i]).epsilon(1e-12));
  }
}

TEST_CASE("adam rejects NaN gradients with the step index") {
  auto w = Tensor<float>({2}, {1, 2});
  w.set_requires_grad(true);
  w.ensure_grad();
  w.grad()[1] = std::nanf("");
  std::vector<NamedParam<float>> params = {{"w", w}};
  AdamState<float> st;
  AdamConfig cfg;
  try {
    adam_step(params, st, cfg);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("step 1") != std::string::npos);
  }
}

TEST_CASE("grad clipping caps the global norm") {
  auto w = Tensor<double>({2}, {0, 0});
  w.set_requires_grad(true);
  w.ensure_grad();
  w.grad()[0] = 3.0;
  w.grad()[1] = 4.0;
  std::vector<NamedParam<double>> params = {{"w", w}};
  double pre = clip_grad_norm(params, 1.0);
  CHECK(pre == doctest::Approx(5.0));
  CHECK(std::sqrt(w.grad()[0] * w.grad()[0] + w.grad()[1] * w.grad()[1]) ==
        doctest::Approx(1.0).epsilon(1e-9));
}
