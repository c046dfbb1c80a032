#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "grad_check.hpp"
#include "molang/checkpoint.hpp"
#include "molang/nn.hpp"
#include "molang/ops.hpp"

using namespace molang;
using namespace molang::ops;
using molang::testing::check_gradients;
using molang::testing::dot_f64;
using molang::testing::random_tensor;

namespace {

constexpr double kGradTol = 2e-3;

Tensor coeffs(const std::vector<int64_t>& shape, uint64_t seed) {
  Rng rng(seed);
  Tensor c = Tensor::uninit(shape);
  for (float& v : c.data) v = static_cast<float>(rng.uniform(0.5, 1.5)) *
                              (rng.uniform() < 0.5 ? -1.0f : 1.0f);
  return c;
}

// random values kept away from zero, for ops with a kink at the origin
Tensor random_away_from_zero(std::vector<int64_t> shape, Rng& rng, double margin = 0.2) {
  Tensor t = Tensor::uninit(std::move(shape));
  for (float& v : t.data) {
    double mag = rng.uniform(margin, 1.0);
    v = static_cast<float>(rng.uniform() < 0.5 ? -mag : mag);
  }
  return t;
}

}  // namespace

TEST_CASE("elementwise op gradients match central finite differences") {
  Rng rng(11);
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
  Tensor c = coeffs({3, 4}, 101);

  auto rep = check_gradients({a, b}, [](Tape& t, const std::vector<Var>& v) {
    return add(t, v[0], v[1]);
  }, c);
  CHECK(rep.max_rel < kGradTol);

  rep = check_gradients({a, b}, [](Tape& t, const std::vector<Var>& v) {
    return sub(t, v[0], v[1]);
  }, c);
  CHECK(rep.max_rel < kGradTol);

  rep = check_gradients({a, b}, [](Tape& t, const std::vector<Var>& v) {
    return mul(t, v[0], v[1]);
  }, c);
  CHECK(rep.max_rel < kGradTol);

  rep = check_gradients({a}, [](Tape& t, const std::vector<Var>& v) {
    return scale(t, v[0], -1.7f);
  }, c);
  CHECK(rep.max_rel < kGradTol);
}

TEST_CASE("add_bias, relu, gelu gradients") {
  Rng rng(12);
  Tensor x = random_away_from_zero({4, 5}, rng);
  Tensor bias = random_tensor({5}, rng);
  Tensor c = coeffs({4, 5}, 102);

  auto rep = check_gradients({x, bias}, [](Tape& t, const std::vector<Var>& v) {
    return add_bias(t, v[0], v[1]);
  }, c);
  CHECK(rep.max_rel < kGradTol);

  rep = check_gradients({x}, [](Tape& t, const std::vector<Var>& v) {
    return relu(t, v[0]);
  }, c);
  CHECK(rep.max_rel < kGradTol);

  Tensor xg = random_tensor({4, 5}, rng, -2.0, 2.0);
  rep = check_gradients({xg}, [](Tape& t, const std::vector<Var>& v) {
    return gelu(t, v[0]);
  }, c);
  CHECK(rep.max_rel < kGradTol);
}

TEST_CASE("matmul family gradients and f64 forward oracle") {
  Rng rng(13);
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng);
  Tensor bt = random_tensor({5, 4}, rng);
  Tensor c = coeffs({3, 5}, 103);

  auto rep = check_gradients({a, b}, [](Tape& t, const std::vector<Var>& v) {
    return matmul(t, v[0], v[1]);
  }, c);
  CHECK(rep.max_rel < kGradTol);

  rep = check_gradients({a, bt}, [](Tape& t, const std::vector<Var>& v) {
    return matmul_nt(t, v[0], v[1]);
  }, c);
  CHECK(rep.max_rel < kGradTol);

  // forward against a brute-force f64 triple loop
  Tape t;
  Var va = t.leaf(a), vb = t.leaf(b);
  const Tensor& y = t.val(matmul(t, va, vb));
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 5; ++j) {
      double s = 0.0;
      for (int64_t k = 0; k < 4; ++k)
        s += static_cast<double>(a.data[i * 4 + k]) * static_cast<double>(b.data[k * 5 + j]);
      CHECK(std::abs(y.data[i * 5 + j] - s) < 1e-5);
    }

  const Tensor& ynt = t.val(matmul_nt(t, t.leaf(a), t.leaf(bt)));
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 5; ++j) {
      double s = 0.0;
      for (int64_t k = 0; k < 4; ++k)
        s += static_cast<double>(a.data[i * 4 + k]) * static_cast<double>(bt.data[j * 4 + k]);
      CHECK(std::abs(ynt.data[i * 5 + j] - s) < 1e-5);
    }
}

TEST_CASE("linear gradients, with bias and rank-3 input") {
  Rng rng(14);
  Tensor x = random_tensor({2, 3, 4}, rng);
  Tensor w = random_tensor({4, 5}, rng);
  Tensor bias = random_tensor({5}, rng);
  Tensor c = coeffs({2, 3, 5}, 104);

  auto rep = check_gradients({x, w, bias}, [](Tape& t, const std::vector<Var>& v) {
    return linear(t, v[0], v[1], v[2]);
  }, c);
  CHECK(rep.max_rel < kGradTol);

  rep = check_gradients({x, w}, [](Tape& t, const std::vector<Var>& v) {
    return linear(t, v[0], v[1]);
  }, c);
  CHECK(rep.max_rel < kGradTol);
}

TEST_CASE("transpose2 gradient and forward") {
  Rng rng(15);
  Tensor x = random_tensor({3, 4}, rng);
  Tensor c = coeffs({4, 3}, 105);
  auto rep = check_gradients({x}, [](Tape& t, const std::vector<Var>& v) {
    return transpose2(t, v[0]);
  }, c);
  CHECK(rep.max_rel < kGradTol);

  Tape t;
  const Tensor& y = t.val(transpose2(t, t.leaf(x)));
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 4; ++j) CHECK(y.data[j * 3 + i] == x.data[i * 4 + j]);
}

TEST_CASE("layer_norm gradients and normalization property") {
  Rng rng(16);
  Tensor x = random_tensor({4, 6}, rng, -2.0, 2.0);
  Tensor gamma = random_tensor({6}, rng, 0.5, 1.5);
  Tensor beta = random_tensor({6}, rng);
  Tensor c = coeffs({4, 6}, 106);

  auto rep = check_gradients({x, gamma, beta}, [](Tape& t, const std::vector<Var>& v) {
    return layer_norm(t, v[0], v[1], v[2]);
  }, c);
  CHECK(rep.max_rel < kGradTol);

  // with gamma = 1, beta = 0 every row has mean ~0 and variance ~1
  Tape t;
  Var vy = layer_norm(t, t.leaf(x), t.leaf(Tensor::full({6}, 1.0f)), t.leaf(Tensor::zeros({6})));
  const Tensor& y = t.val(vy);
  for (int64_t i = 0; i < 4; ++i) {
    double mean = 0.0, var = 0.0;
    for (int64_t j = 0; j < 6; ++j) mean += y.data[i * 6 + j];
    mean /= 6.0;
    for (int64_t j = 0; j < 6; ++j) {
      double d = y.data[i * 6 + j] - mean;
      var += d * d;
    }
    var /= 6.0;
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-3);
  }
}

TEST_CASE("gather_rows accumulates gradients for repeated ids") {
  Rng rng(17);
  Tensor table = random_tensor({5, 3}, rng);
  std::vector<int64_t> ids = {4, 1, 1, 0, 1};
  Tensor c = coeffs({5, 3}, 107);

  auto rep = check_gradients({table}, [&](Tape& t, const std::vector<Var>& v) {
    return gather_rows(t, v[0], ids);
  }, c);
  CHECK(rep.max_rel < kGradTol);

  // with all-ones upstream, each table row's gradient equals its usage count
  Tape t;
  Var vt = t.leaf(table, true);
  Var y = gather_rows(t, vt, ids);
  Var loss = molang::testing::weighted_sum(t, y, Tensor::full({5, 3}, 1.0f));
  t.backward(loss);
  const Tensor& g = t.grad(vt);
  std::vector<int> counts(5, 0);
  for (int64_t id : ids) counts[static_cast<size_t>(id)]++;
  for (int64_t r = 0; r < 5; ++r)
    for (int64_t k = 0; k < 3; ++k)
      CHECK(g.data[r * 3 + k] == doctest::Approx(counts[static_cast<size_t>(r)]).epsilon(1e-6));

  CHECK_THROWS_AS((gather_rows(t, vt, {5})), ShapeError);
}

TEST_CASE("select_rows gradient with repeated indices") {
  Rng rng(18);
  Tensor x = random_tensor({4, 3}, rng);
  std::vector<int64_t> idx = {2, 0, 2, 3};
  Tensor c = coeffs({4, 3}, 108);
  auto rep = check_gradients({x}, [&](Tape& t, const std::vector<Var>& v) {
    return select_rows(t, v[0], idx);
  }, c);
  CHECK(rep.max_rel < kGradTol);
}

TEST_CASE("pack_with_cls and merge_cls_frames gradients and layout") {
  Rng rng(19);
  PackedOffsets fo{{0, 3, 5}};  // two items, 3 and 2 frames
  Tensor frames = random_tensor({5, 4}, rng);
  Tensor cls = random_tensor({4}, rng);
  Tensor c = coeffs({7, 4}, 109);

  auto rep = check_gradients({frames, cls}, [&](Tape& t, const std::vector<Var>& v) {
    return pack_with_cls(t, v[0], v[1], fo);
  }, c);
  CHECK(rep.max_rel < kGradTol);

  Tensor cls_rows = random_tensor({2, 4}, rng);
  rep = check_gradients({cls_rows, frames}, [&](Tape& t, const std::vector<Var>& v) {
    return merge_cls_frames(t, v[0], v[1], fo);
  }, c);
  CHECK(rep.max_rel < kGradTol);

  // layout: packed row fo.offsets[b]+b is the CLS copy, frames follow in order
  Tape t;
  const Tensor& y = t.val(pack_with_cls(t, t.leaf(frames), t.leaf(cls), fo));
  CHECK(y.dim(0) == 7);
  for (int64_t k = 0; k < 4; ++k) {
    CHECK(y.data[0 * 4 + k] == cls.data[k]);       // item 0 CLS at row 0
    CHECK(y.data[4 * 4 + k] == cls.data[k]);       // item 1 CLS at row 3+1
    CHECK(y.data[1 * 4 + k] == frames.data[k]);    // first frame of item 0
    CHECK(y.data[5 * 4 + k] == frames.data[3 * 4 + k]);  // first frame of item 1
  }
}

TEST_CASE("mhsa_packed gradients on a ragged batch") {
  Rng rng(20);
  const int64_t d = 8;
  PackedOffsets po{{0, 3, 5}};
  Tensor x = random_tensor({5, d}, rng, -0.5, 0.5);
  Tensor w_qkv = random_tensor({d, 3 * d}, rng, -0.4, 0.4);
  Tensor b_qkv = random_tensor({3 * d}, rng, -0.1, 0.1);
  Tensor w_out = random_tensor({d, d}, rng, -0.4, 0.4);
  Tensor b_out = random_tensor({d}, rng, -0.1, 0.1);
  Tensor c = coeffs({5, d}, 110);

  auto rep = check_gradients({x, w_qkv, b_qkv, w_out, b_out},
                             [&](Tape& t, const std::vector<Var>& v) {
    return mhsa_packed(t, v[0], po, v[1], v[2], v[3], v[4], 2);
  }, c, 5e-3);
  CHECK(rep.max_rel < 5e-3);
}

TEST_CASE("mhsa_packed items are independent across the batch") {
  // perturbing item 1's rows must not change item 0's output
  Rng rng(21);
  const int64_t d = 8;
  PackedOffsets po{{0, 3, 6}};
  Tensor x = random_tensor({6, d}, rng);
  Tensor w_qkv = random_tensor({d, 3 * d}, rng, -0.4, 0.4);
  Tensor b_qkv = random_tensor({3 * d}, rng);
  Tensor w_out = random_tensor({d, d}, rng, -0.4, 0.4);
  Tensor b_out = random_tensor({d}, rng);

  auto run = [&](const Tensor& xin) {
    Tape t;
    return t.val(mhsa_packed(t, t.leaf(xin), po, t.leaf(w_qkv), t.leaf(b_qkv), t.leaf(w_out),
                             t.leaf(b_out), 2));
  };
  Tensor y0 = run(x);
  Tensor x2 = x;
  for (int64_t r = 3; r < 6; ++r)
    for (int64_t k = 0; k < d; ++k) x2.data[r * d + k] += 0.7f;
  Tensor y1 = run(x2);
  for (int64_t r = 0; r < 3; ++r)
    for (int64_t k = 0; k < d; ++k) CHECK(y0.data[r * d + k] == y1.data[r * d + k]);
}

TEST_CASE("graph_conv gradients") {
  Rng rng(22);
  const int j = 3, g = 2;
  Tensor adj = Tensor::from({j, j}, {0.5f, 0.25f, 0.0f, 0.25f, 0.5f, 0.25f, 0.0f, 0.25f, 0.5f});
  Tensor x = random_tensor({4, j * g}, rng);
  Tensor w = random_tensor({g, g}, rng, -0.8, 0.8);
  Tensor c = coeffs({4, j * g}, 111);

  auto rep = check_gradients({x, w}, [&](Tape& t, const std::vector<Var>& v) {
    return graph_conv(t, v[0], adj, v[1], j, g);
  }, c, 5e-3);
  CHECK(rep.max_rel < 5e-3);
}

TEST_CASE("l2_normalize_rows gradient and unit norms") {
  Rng rng(23);
  Tensor x = random_tensor({3, 5}, rng, -1.5, 1.5);
  Tensor c = coeffs({3, 5}, 112);
  auto rep = check_gradients({x}, [](Tape& t, const std::vector<Var>& v) {
    return l2_normalize_rows(t, v[0]);
  }, c);
  CHECK(rep.max_rel < kGradTol);

  Tape t;
  const Tensor& y = t.val(l2_normalize_rows(t, t.leaf(x)));
  for (int64_t i = 0; i < 3; ++i) {
    double n = 0.0;
    for (int64_t k = 0; k < 5; ++k) n += static_cast<double>(y.data[i * 5 + k]) * y.data[i * 5 + k];
    CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-5);
  }
}

TEST_CASE("scale_by_exp gradient including the scalar exponent") {
  Rng rng(24);
  Tensor x = random_tensor({3, 4}, rng);
  Tensor s = Tensor::scalar(0.37f);
  Tensor c = coeffs({3, 4}, 113);
  auto rep = check_gradients({x, s}, [](Tape& t, const std::vector<Var>& v) {
    return scale_by_exp(t, v[0], v[1]);
  }, c);
  CHECK(rep.max_rel < kGradTol);
}

TEST_CASE("cross_entropy_diag matches a brute-force f64 oracle") {
  Rng rng(25);
  Tensor s = random_tensor({4, 4}, rng, -2.0, 2.0);

  // oracle: mean_i(log sum_j exp(S[i,j]) - S[i,i])
  double expect = 0.0;
  for (int64_t i = 0; i < 4; ++i) {
    double mx = -1e30;
    for (int64_t j = 0; j < 4; ++j) mx = std::max(mx, static_cast<double>(s.data[i * 4 + j]));
    double acc = 0.0;
    for (int64_t j = 0; j < 4; ++j) acc += std::exp(static_cast<double>(s.data[i * 4 + j]) - mx);
    expect += mx + std::log(acc) - static_cast<double>(s.data[i * 4 + i]);
  }
  expect /= 4.0;

  Tape t;
  CHECK(t.val(cross_entropy_diag(t, t.leaf(s))).item() == doctest::Approx(expect).epsilon(1e-6));

  Tensor c = Tensor::scalar(1.0f);
  auto rep = check_gradients({s}, [](Tape& tp, const std::vector<Var>& v) {
    return cross_entropy_diag(tp, v[0]);
  }, c, 1e-2, 1e-3);
  CHECK(rep.max_rel < kGradTol);

  CHECK_THROWS_AS((cross_entropy_diag(t, t.leaf(Tensor::zeros({2, 3})))), ShapeError);
}

TEST_CASE("l1_weighted matches a brute-force oracle and checks selection") {
  Rng rng(26);
  Tensor pred = random_tensor({6, 3}, rng);
  Tensor target = random_tensor({6, 3}, rng, 1.3, 2.5);  // keep |pred-target| away from 0
  std::vector<float> w = {1, 0, 1, 1, 0, 1};
  std::vector<int64_t> item_of_row = {0, 0, 0, 1, 1, 2};

  double expect = 0.0;
  int active = 0;
  for (int64_t it = 0; it < 3; ++it) {
    double s = 0.0;
    int cnt = 0;
    for (int64_t r = 0; r < 6; ++r) {
      if (item_of_row[static_cast<size_t>(r)] != it || w[static_cast<size_t>(r)] == 0.0f) continue;
      ++cnt;
      for (int64_t k = 0; k < 3; ++k)
        s += std::abs(static_cast<double>(pred.data[r * 3 + k]) - target.data[r * 3 + k]);
    }
    if (cnt > 0) {
      expect += s / (cnt * 3.0);
      ++active;
    }
  }
  expect /= active;

  Tape t;
  CHECK(t.val(l1_weighted(t, t.leaf(pred), target, w, item_of_row, 3)).item() ==
        doctest::Approx(expect).epsilon(1e-6));

  Tensor c = Tensor::scalar(1.0f);
  auto rep = check_gradients({pred}, [&](Tape& tp, const std::vector<Var>& v) {
    return l1_weighted(tp, v[0], target, w, item_of_row, 3);
  }, c, 1e-2, 1e-3);
  CHECK(rep.max_rel < kGradTol);

  std::vector<float> none(6, 0.0f);
  CHECK_THROWS_AS((l1_weighted(t, t.leaf(pred), target, none, item_of_row, 3)),
                  std::invalid_argument);
}

TEST_CASE("dropout masks, rescales and routes gradients through the mask") {
  Rng rng(27);
  Tensor x = random_tensor({8, 16}, rng, 0.5, 1.5);  // strictly positive input

  // eval mode and p = 0 are identity
  {
    Tape t;
    Rng r1(5);
    const Tensor& y = t.val(dropout(t, t.leaf(x), 0.5f, r1, false));
    CHECK(y.data == x.data);
    Rng r2(5);
    const Tensor& y0 = t.val(dropout(t, t.leaf(x), 0.0f, r2, true));
    CHECK(y0.data == x.data);
  }

  const float p = 0.5f;
  Tape t;
  Rng r(5);
  Var vx = t.leaf(x, true);
  Var vy = dropout(t, vx, p, r, true);
  const Tensor& y = t.val(vy);

  // extract the realized mask: each element is either 0 or x / (1 - p)
  std::vector<float> mask(y.data.size());
  int64_t kept = 0;
  for (size_t i = 0; i < y.data.size(); ++i) {
    float ratio = y.data[i] / x.data[i];
    bool zero = y.data[i] == 0.0f;
    bool scaled = std::abs(ratio - 1.0f / (1.0f - p)) < 1e-6f;
    CHECK((zero || scaled));
    mask[i] = zero ? 0.0f : 1.0f / (1.0f - p);
    kept += scaled ? 1 : 0;
  }
  // keep rate should be near 1 - p (128 Bernoulli draws)
  CHECK(kept > 64 - 30);
  CHECK(kept < 64 + 30);

  // gradient equals upstream coefficients times the same mask
  Tensor c = coeffs({8, 16}, 114);
  Var loss = molang::testing::weighted_sum(t, vy, c);
  t.backward(loss);
  const Tensor& g = t.grad(vx);
  for (size_t i = 0; i < g.data.size(); ++i)
    CHECK(g.data[i] == doctest::Approx(c.data[i] * mask[i]).epsilon(1e-6));

  // same seed reproduces the same mask
  Tape t2;
  Rng r2(5);
  const Tensor& y2 = t2.val(dropout(t2, t2.leaf(x), p, r2, true));
  CHECK(y2.data == y.data);
}

TEST_CASE("shape mismatches throw") {
  Tape t;
  Var a = t.leaf(Tensor::zeros({2, 3}));
  Var b = t.leaf(Tensor::zeros({3, 2}));
  CHECK_THROWS_AS(add(t, a, b), ShapeError);
  CHECK_THROWS_AS(matmul(t, a, a), ShapeError);
  CHECK_THROWS_AS(matmul_nt(t, a, t.leaf(Tensor::zeros({2, 4}))), ShapeError);
  CHECK_THROWS_AS(add_bias(t, a, t.leaf(Tensor::zeros({4}))), ShapeError);
  CHECK_THROWS_AS(mhsa_packed(t, t.leaf(Tensor::zeros({2, 6})), PackedOffsets{{0, 2}},
                              t.leaf(Tensor::zeros({6, 18})), t.leaf(Tensor::zeros({18})),
                              t.leaf(Tensor::zeros({6, 6})), t.leaf(Tensor::zeros({6})), 4),
                  ShapeError);
  CHECK_THROWS_AS(t.backward(a), ShapeError);  // non-scalar root
}

TEST_CASE("Adam single update matches a hand-computed reference") {
  AdamConfig cfg;
  cfg.lr = 1e-3;
  double p = 0.5, g = 0.2, m = 0.0, v = 0.0;
  double got = Adam::update(p, g, m, v, 1, cfg);

  double em = cfg.beta1 * 0.0 + (1.0 - cfg.beta1) * g;
  double ev = cfg.beta2 * 0.0 + (1.0 - cfg.beta2) * g * g;
  double mhat = em / (1.0 - std::pow(cfg.beta1, 1));
  double vhat = ev / (1.0 - std::pow(cfg.beta2, 1));
  double expect = p - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);

  CHECK(std::abs(got - expect) < 1e-10);
  CHECK(std::abs(m - em) < 1e-10);
  CHECK(std::abs(v - ev) < 1e-10);

  // a second step continues from the stored moments
  double got2 = Adam::update(got, -0.1, m, v, 2, cfg);
  em = cfg.beta1 * em + (1.0 - cfg.beta1) * -0.1;
  ev = cfg.beta2 * ev + (1.0 - cfg.beta2) * 0.01;
  mhat = em / (1.0 - std::pow(cfg.beta1, 2));
  vhat = ev / (1.0 - std::pow(cfg.beta2, 2));
  expect = got - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  CHECK(std::abs(got2 - expect) < 1e-10);
}

TEST_CASE("Adam::step applies the per-element update across a store") {
  ParamStore store;
  store.create("w", Tensor::from({3}, {0.5f, -0.25f, 1.0f}));
  store.create("b", Tensor::from({2}, {0.0f, 2.0f}));
  std::vector<float> grads = {0.1f, -0.2f, 0.3f, 0.05f, -0.6f};
  {
    size_t k = 0;
    for (int i = 0; i < store.size(); ++i)
      for (float& g : store.grad(i).data) g = grads[k++];
  }
  Adam adam;
  const double lr = 3e-4;
  AdamConfig ref_cfg = adam.config();
  ref_cfg.lr = lr;

  std::vector<double> pexp, mexp(5, 0.0), vexp(5, 0.0);
  for (float g : {0.5f, -0.25f, 1.0f, 0.0f, 2.0f}) pexp.push_back(g);
  adam.step(store, lr);
  CHECK(adam.step_count() == 1);

  size_t k = 0;
  for (int i = 0; i < store.size(); ++i)
    for (float v : store.value(i).data) {
      double m = mexp[k], mv = vexp[k];
      double expect = Adam::update(pexp[k], grads[k], m, mv, 1, ref_cfg);
      CHECK(v == doctest::Approx(expect).epsilon(1e-7));
      ++k;
    }

  // non-finite gradients must be rejected
  store.grad(0).data[1] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(adam.step(store, lr), NanGradientError);
}

TEST_CASE("Adam export/import round-trips moments and step count") {
  ParamStore store;
  Rng rng(30);
  store.create("w", random_tensor({4}, rng));
  for (float& g : store.grad(0).data) g = 0.25f;
  Adam adam;
  adam.step(store, 1e-3);
  adam.step(store, 1e-3);

  ParamStore moments;
  adam.export_state(moments);
  CHECK(moments.has("adam.m.w"));
  CHECK(moments.has("adam.v.w"));

  // continuing from imported state matches continuing the original
  ParamStore store2;
  store2.create("w", store.value(0));
  Adam adam2;
  adam2.import_state(moments, store2, adam.step_count());
  CHECK(adam2.step_count() == 2);

  for (float& g : store.grad(0).data) g = -0.1f;
  for (float& g : store2.grad(0).data) g = -0.1f;
  adam.step(store, 1e-3);
  adam2.step(store2, 1e-3);
  CHECK(store.value(0).data == store2.value(0).data);
}

TEST_CASE("cosine schedule hits its pinned anchor values") {
  CosineScheduleConfig cfg;  // eta_max 1e-4, eta_min 7e-5, period 20
  CHECK(std::abs(cosine_lr(cfg, 0) - 1e-4) < 1e-12);
  CHECK(std::abs(cosine_lr(cfg, 10) - 8.5e-5) < 1e-12);
  CHECK(std::abs(cosine_lr(cfg, 20) - 1e-4) < 1e-12);  // warm restart
  CHECK(std::abs(cosine_lr(cfg, 40) - 1e-4) < 1e-12);
  // interior point against the closed form
  double expect = 7e-5 + 0.5 * (1e-4 - 7e-5) * (1.0 + std::cos(M_PI * 5.0 / 20.0));
  CHECK(std::abs(cosine_lr(cfg, 5) - expect) < 1e-12);
  CHECK(cosine_lr(cfg, 10) > cosine_lr(cfg, 19));
}

TEST_CASE("checkpoint round-trip preserves tensors and sidecar") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "molang_test_ckpt";
  fs::create_directories(dir);
  std::string path = (dir / "a.ckpt").string();

  ParamStore store;
  Rng rng(31);
  store.create("enc.w", random_tensor({3, 4}, rng));
  store.create("enc.b", random_tensor({4}, rng));
  store.create("scalarish", random_tensor({1}, rng));
  save_checkpoint(store, path, "{\"kind\":\"test\",\"epoch\":7}");

  ParamStore back = load_checkpoint(path);
  CHECK(back.size() == store.size());
  for (int i = 0; i < store.size(); ++i) {
    CHECK(back.name(i) == store.name(i));
    CHECK(back.value(i).shape == store.value(i).shape);
    CHECK(back.value(i).data == store.value(i).data);
  }
  CHECK(load_checkpoint_sidecar(path) == "{\"kind\":\"test\",\"epoch\":7}");
  fs::remove_all(dir);
}

TEST_CASE("corrupted checkpoints are rejected") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "molang_test_ckpt2";
  fs::create_directories(dir);
  std::string path = (dir / "b.ckpt").string();

  ParamStore store;
  Rng rng(32);
  store.create("w", random_tensor({8, 8}, rng));
  save_checkpoint(store, path, "{}");

  auto slurp = [&]() {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  };
  auto spit = [&](const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  };
  const std::string good = slurp();

  // single bit flip in the payload -> CRC failure
  std::string bad = good;
  bad[bad.size() / 2] = static_cast<char>(bad[bad.size() / 2] ^ 0x10);
  spit(bad);
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);

  // truncation
  spit(good.substr(0, good.size() - 7));
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);

  // wrong magic
  bad = good;
  bad[0] = 'X';
  spit(bad);
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);

  spit(good);
  CHECK_NOTHROW(load_checkpoint(path));
  fs::remove_all(dir);
}

TEST_CASE("rng streams are deterministic and well separated") {
  Rng a = Rng::stream(7, 1, 2, 3);
  Rng b = Rng::stream(7, 1, 2, 3);
  Rng other = Rng::stream(7, 1, 2, 4);
  bool all_same = true, any_same = false;
  for (int i = 0; i < 64; ++i) {
    uint64_t x = a.next_u64();
    all_same = all_same && (x == b.next_u64());
    any_same = any_same || (x == other.next_u64());
  }
  CHECK(all_same);
  CHECK(!any_same);

  Rng r(99);
  bool hit_lo = false, hit_hi = false;
  for (int i = 0; i < 2000; ++i) {
    int64_t v = r.uniform_int(2, 5);
    CHECK(v >= 2);
    CHECK(v <= 5);
    hit_lo = hit_lo || v == 2;
    hit_hi = hit_hi || v == 5;
  }
  CHECK(hit_lo);
  CHECK(hit_hi);

  double mean = 0.0, var = 0.0;
  const int n = 20000;
  std::vector<double> xs(n);
  for (int i = 0; i < n; ++i) {
    xs[static_cast<size_t>(i)] = r.normal();
    mean += xs[static_cast<size_t>(i)];
  }
  mean /= n;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= n;
  CHECK(std::abs(mean) < 0.05);
  CHECK(std::abs(var - 1.0) < 0.05);

  for (int i = 0; i < 1000; ++i) {
    double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    double tn = r.truncated_normal(0.02);
    CHECK(std::abs(tn) <= 0.04 + 1e-12);
  }
}
