#include <doctest.h>

#include <cmath>
#include <vector>

#include "helpers.hpp"
#include "l2p/errors.hpp"
#include "l2p/head.hpp"
#include "l2p/tape.hpp"

using l2p::ConfigError;
using l2p::HeadParams;
using l2p::LayerStack;
using l2p::Parameter;
using l2p::Rng;
using l2p::Tape;
using l2p::Tensor;
using l2p::ValueId;

namespace {

/// A depth stack of constant representation matrices.
LayerStack constant_stack(Tape& t, const std::vector<Tensor>& layers) {
  LayerStack s;
  for (const Tensor& h : layers) s.h.push_back(t.constant(h));
  return s;
}

LayerStack random_stack(Tape& t, int depth, int n, int dim, Rng& rng) {
  LayerStack s;
  for (int k = 0; k <= depth; ++k)
    s.h.push_back(t.constant(testutil::random_tensor(n, dim, rng, 2.0)));
  return s;
}

void set_scalar_weight(HeadParams& p, int k, double w, double b) {
  p.w[k]->value.at(0, 0) = w;
  if (p.bias) p.b[k]->value.at(0, 0) = b;
}

bool is_simplex_row(const Tensor& q, int row, double tol) {
  double sum = 0.0;
  for (int k = 0; k < q.cols(); ++k) {
    const double v = q.at(row, k);
    if (v < -tol || v > 1.0 + tol) return false;
    sum += v;
  }
  return std::abs(sum - 1.0) <= tol;
}

}  // namespace

TEST_CASE("depth priors: uniform rows and geometric decay") {
  Tensor u = l2p::uniform_prior(3, 2);
  REQUIRE(u.rows() == 2);
  REQUIRE(u.cols() == 4);
  for (std::size_t i = 0; i < u.size(); ++i) CHECK(u[i] == doctest::Approx(0.25));

  Tensor one = l2p::uniform_prior(0, 1);
  CHECK(one.at(0, 0) == 1.0);

  Tensor geo = l2p::geometric_prior(1, 1, 0.5);
  CHECK(geo.at(0, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(geo.at(0, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  // ratio 1 recovers the uniform prior
  Tensor flat = l2p::geometric_prior(3, 1, 1.0);
  for (int k = 0; k < 4; ++k) CHECK(flat.at(0, k) == doctest::Approx(0.25));

  CHECK_THROWS_AS(l2p::geometric_prior(2, 1, 0.0), ConfigError);
  CHECK_THROWS_AS(l2p::geometric_prior(2, 1, 1.5), ConfigError);
}

TEST_CASE("softmax head: hand values, symmetry and shift invariance") {
  Rng rng(5);
  // single node, scalar representations: H_0 = [[1]], H_1 = [[1]]
  std::vector<Tensor> layers = {Tensor(1, 1, 1.0), Tensor(1, 1, 1.0)};

  HeadParams zero("l2s", 1, 1, false, rng);
  set_scalar_weight(zero, 0, 0.0, 0.0);
  set_scalar_weight(zero, 1, 0.0, 0.0);
  {
    Tape t;
    LayerStack s = constant_stack(t, layers);
    Tensor q = t.value(l2p::l2s_posterior(t, s, zero));
    CHECK(q.at(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(q.at(0, 1) == doctest::Approx(0.5).epsilon(1e-12));
  }

  // scores (ln 3, 0) soften to (0.75, 0.25)
  HeadParams hand("l2s", 1, 1, false, rng);
  set_scalar_weight(hand, 0, std::log(3.0), 0.0);
  set_scalar_weight(hand, 1, 0.0, 0.0);
  {
    Tape t;
    LayerStack s = constant_stack(t, layers);
    Tensor q = t.value(l2p::l2s_posterior(t, s, hand));
    CHECK(q.at(0, 0) == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(q.at(0, 1) == doctest::Approx(0.25).epsilon(1e-12));
  }

  // adding the same constant to every depth score leaves the rows unchanged
  Rng wrng(9);
  HeadParams base("l2s", 2, 4, true, wrng);
  Rng wrng2(9);
  HeadParams shifted("l2s", 2, 4, true, wrng2);  // identical weights
  for (int k = 0; k <= 2; ++k) shifted.b[k]->value.at(0, 0) = 1.7;
  Rng srng(21);
  Tape t1, t2;
  LayerStack s1 = random_stack(t1, 2, 5, 4, srng);
  Rng srng2(21);
  LayerStack s2 = random_stack(t2, 2, 5, 4, srng2);
  Tensor q1 = t1.value(l2p::l2s_posterior(t1, s1, base));
  Tensor q2 = t2.value(l2p::l2s_posterior(t2, s2, shifted));
  CHECK(testutil::max_abs_diff(q1, q2) < 1e-12);
}

TEST_CASE("quit gates: sigmoid hand values and range") {
  Rng rng(6);
  std::vector<Tensor> layers = {Tensor(1, 1, 1.0), Tensor(1, 1, 1.0),
                                Tensor(1, 1, 1.0)};
  HeadParams p("l2q", 2, 1, false, rng);
  set_scalar_weight(p, 0, 0.0, 0.0);
  set_scalar_weight(p, 1, std::log(3.0), 0.0);
  Tape t;
  LayerStack s = constant_stack(t, layers);
  Tensor a = t.value(l2p::l2q_quit(t, s, p));
  REQUIRE(a.cols() == 2);  // gates stop one short of the final depth
  CHECK(a.at(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(a.at(0, 1) == doctest::Approx(0.75).epsilon(1e-12));
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i] > 0.0);
    CHECK(a[i] < 1.0);
  }
}

TEST_CASE("stick breaking: hand values and boundary behavior") {
  Tensor q = l2p::stick_break_values(Tensor::from({{0.3, 0.5}}));
  CHECK(q.at(0, 0) == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(q.at(0, 1) == doctest::Approx(0.35).epsilon(1e-12));
  CHECK(q.at(0, 2) == doctest::Approx(0.35).epsilon(1e-12));

  Tensor half = l2p::stick_break_values(Tensor::from({{0.5, 0.5}}));
  CHECK(half.at(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(half.at(0, 1) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(half.at(0, 2) == doctest::Approx(0.25).epsilon(1e-12));

  // gates near zero leave almost all mass on the final depth
  Tensor tail = l2p::stick_break_values(Tensor::from({{1e-9, 1e-9, 1e-9}}));
  CHECK(tail.at(0, 3) == doctest::Approx(1.0).epsilon(1e-8));

  // the tape version computes the same rows
  Tape t;
  ValueId qt = l2p::stick_break(t, t.constant(Tensor::from({{0.3, 0.5}})));
  CHECK(testutil::max_abs_diff(t.value(qt), q) < 1e-15);
}

TEST_CASE("stick breaking: telescoping prefix identity") {
  Rng rng(12);
  for (int trial = 0; trial < 300; ++trial) {
    const int gates = 1 + rng.index(6);
    Tensor alpha(1, gates, 0.0);
    for (int k = 0; k < gates; ++k) alpha.at(0, k) = rng.uniform_open();
    Tensor q = l2p::stick_break_values(alpha);
    double mass_before = 0.0, prefix = 1.0;
    for (int j = 0; j < gates; ++j) {
      CHECK(std::abs((1.0 - mass_before) - prefix) <= 1e-12);
      mass_before += q.at(0, j);
      prefix *= 1.0 - alpha.at(0, j);
    }
    CHECK(std::abs((1.0 - mass_before) - prefix) <= 1e-12);
    CHECK(q.at(0, gates) == doctest::Approx(prefix).epsilon(1e-12));
  }
}

TEST_CASE("both heads always emit simplex rows") {
  Rng rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    const int depth = 1 + rng.index(5);
    const int n = 1 + rng.index(6);
    const int dim = 1 + rng.index(5);
    for (const char* kind : {"l2s", "l2q"}) {
      Rng wrng = rng.child(static_cast<uint64_t>(trial) * 2 + (kind[2] == 's'));
      HeadParams p(kind, depth, dim, trial % 2 == 0, wrng);
      // exaggerate the weights so saturation cases appear
      for (auto& w : p.w)
        for (std::size_t i = 0; i < w->value.size(); ++i) w->value[i] *= 30.0;
      Tape t;
      LayerStack s = random_stack(t, depth, n, dim, wrng);
      Tensor q = t.value(l2p::head_posterior(t, s, p));
      REQUIRE(q.cols() == depth + 1);
      for (int i = 0; i < n; ++i) CHECK(is_simplex_row(q, i, 1e-9));
    }
  }
}

TEST_CASE("relaxed depth samples: temperature limits and validation") {
  Tape t;
  ValueId post = t.constant(Tensor::from({{0.6, 0.3, 0.1}}));
  Tensor zero_noise(1, 3, 0.0);

  // cold limit concentrates on the posterior argmax
  Tensor cold = t.value(l2p::gumbel_softmax_sample(t, post, 1e-3, zero_noise));
  CHECK(cold.at(0, 0) == doctest::Approx(1.0).epsilon(1e-9));

  // hot limit flattens toward uniform
  Tensor hot = t.value(l2p::gumbel_softmax_sample(t, post, 1e3, zero_noise));
  for (int k = 0; k < 3; ++k)
    CHECK(hot.at(0, k) == doctest::Approx(1.0 / 3.0).epsilon(1e-2));

  // rows always renormalize
  Rng rng(3);
  Tensor noise = l2p::draw_gumbel_noise(1, 2, rng);
  Tensor warm = t.value(l2p::gumbel_softmax_sample(t, post, 0.5, noise));
  double s = 0.0;
  for (int k = 0; k < 3; ++k) s += warm.at(0, k);
  CHECK(s == doctest::Approx(1.0).epsilon(1e-12));

  CHECK_THROWS_AS(l2p::gumbel_softmax_sample(t, post, 0.0, zero_noise), ConfigError);
  CHECK_THROWS_AS(l2p::gumbel_softmax_sample(t, post, -1.0, zero_noise), ConfigError);
  Tensor bad_noise(2, 3, 0.0);
  CHECK_THROWS_AS(l2p::gumbel_softmax_sample(t, post, 0.5, bad_noise),
                  l2p::ShapeError);
}

TEST_CASE("relaxed samples harden to the exact categorical") {
  // argmax of (log q + g) over Gumbel draws g has law q; the sample's argmax
  // never depends on the temperature.
  const std::vector<double> q = {0.5, 0.3, 0.2};
  const Tensor row(1, 3, std::vector<double>(q));
  const int draws = 100000;
  Rng rng(99);
  std::vector<int> hits(q.size(), 0);
  for (int i = 0; i < draws; ++i) {
    Tape t(false);
    Tensor noise = l2p::draw_gumbel_noise(1, 2, rng);
    Tensor sample =
        t.value(l2p::gumbel_softmax_sample(t, t.constant(row), 0.7, noise));
    int best = 0;
    for (int k = 1; k < 3; ++k)
      if (sample.at(0, k) > sample.at(0, best)) best = k;
    ++hits[best];
  }
  for (std::size_t k = 0; k < q.size(); ++k) {
    const double freq = static_cast<double>(hits[k]) / draws;
    const double sigma = std::sqrt(q[k] * (1.0 - q[k]) / draws);
    CHECK(std::abs(freq - q[k]) <= 3.0 * sigma);
  }
}

TEST_CASE("depth divergence: hand value, nonnegativity, equality case") {
  std::vector<bool> all = {true};

  // point mass against uniform over four depths
  Tensor onehot = Tensor::from({{1.0, 0.0, 0.0, 0.0}});
  Tensor uni = l2p::uniform_prior(3, 1);
  CHECK(l2p::kl_rows_mean(onehot, uni, all) ==
        doctest::Approx(std::log(4.0)).epsilon(1e-9));

  // matching rows carry no divergence
  CHECK(l2p::kl_rows_mean(uni, uni, all) == doctest::Approx(0.0).epsilon(1e-12));

  // the tape node agrees with the plain computation
  Tape t;
  ValueId kl = l2p::kl_to_prior(t, t.constant(onehot), t.constant(uni), all);
  CHECK(t.value(kl).scalar() == doctest::Approx(std::log(4.0)).epsilon(1e-9));

  // strictly positive whenever the rows differ
  Rng rng(41);
  for (int trial = 0; trial < 200; ++trial) {
    const int c = 2 + rng.index(4);
    Tensor a(1, c, 0.0), b(1, c, 0.0);
    double sa = 0.0, sb = 0.0;
    for (int k = 0; k < c; ++k) {
      a.at(0, k) = rng.uniform_open();
      b.at(0, k) = rng.uniform_open();
      sa += a.at(0, k);
      sb += b.at(0, k);
    }
    for (int k = 0; k < c; ++k) {
      a.at(0, k) /= sa;
      b.at(0, k) /= sb;
    }
    const double kl_ab = l2p::kl_rows_mean(a, b, all);
    CHECK(kl_ab >= 0.0);
    double gap = 0.0;
    for (int k = 0; k < c; ++k) gap = std::max(gap, std::abs(a.at(0, k) - b.at(0, k)));
    if (gap > 1e-3) CHECK(kl_ab > 0.0);
    CHECK(l2p::kl_rows_mean(a, a, all) == doctest::Approx(0.0).epsilon(1e-12));
  }
}

TEST_CASE("quit-gate mass decays along the depths for centered logits") {
  // With i.i.d. centered gate logits the expected stick-breaking mass halves
  // at each depth until the tail, so the sequence is non-increasing.
  const int depth = 4, draws = 10000;
  Rng rng(2024);
  std::vector<double> mean(depth + 1, 0.0), m2(depth + 1, 0.0);
  for (int i = 0; i < draws; ++i) {
    Tensor alpha(1, depth, 0.0);
    for (int k = 0; k < depth; ++k)
      alpha.at(0, k) = 1.0 / (1.0 + std::exp(-rng.normal()));
    Tensor q = l2p::stick_break_values(alpha);
    for (int k = 0; k <= depth; ++k) {
      mean[k] += q.at(0, k);
      m2[k] += q.at(0, k) * q.at(0, k);
    }
  }
  for (int k = 0; k <= depth; ++k) {
    mean[k] /= draws;
    m2[k] /= draws;
  }
  for (int k = 0; k < depth; ++k) {
    const double var = (m2[k] - mean[k] * mean[k]) + (m2[k + 1] - mean[k + 1] * mean[k + 1]);
    const double sigma = std::sqrt(var / draws);
    CHECK(mean[k] >= mean[k + 1] - 3.0 * sigma);
  }
}

TEST_CASE("pathwise gradients flow through a frozen relaxed sample") {
  Rng rng(8);
  const int depth = 2, n = 4, dim = 3;
  HeadParams p("l2q", depth, dim, true, rng);
  std::vector<Tensor> layers;
  for (int k = 0; k <= depth; ++k)
    layers.push_back(testutil::random_tensor(n, dim, rng));
  Rng noise_rng(55);
  Tensor noise = l2p::draw_gumbel_noise(n, depth, noise_rng);
  Tensor cotangent = testutil::random_tensor(n, depth + 1, rng);

  auto f = [&](Tape& t) {
    LayerStack s = constant_stack(t, layers);
    ValueId q = l2p::head_posterior(t, s, p);
    ValueId sample = l2p::gumbel_softmax_sample(t, q, 0.6, noise);
    return t.reduce_mean(t.pointwise_mul(sample, t.constant(cotangent)));
  };
  std::vector<Parameter*> params = p.all();
  CHECK(l2p::grad_check(f, params, 1e-5) < 1e-6);
}
