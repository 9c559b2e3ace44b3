#include <doctest.h>

#include <cmath>
#include <limits>
#include <memory>
#include <vector>

#include "helpers.hpp"
#include "l2p/backbone.hpp"
#include "l2p/errors.hpp"
#include "l2p/graph.hpp"
#include "l2p/head.hpp"
#include "l2p/optim.hpp"
#include "l2p/tape.hpp"
#include "l2p/trainers.hpp"

using l2p::BackboneConfig;
using l2p::BackboneParams;
using l2p::BilevelConfig;
using l2p::BilevelOutcome;
using l2p::ConfigError;
using l2p::ContractError;
using l2p::CsrMatrix;
using l2p::DatasetError;
using l2p::ElboBreakdown;
using l2p::ElboNodes;
using l2p::ElboStyle;
using l2p::Graph;
using l2p::HeadParams;
using l2p::LossSpec;
using l2p::NumericError;
using l2p::Optimizer;
using l2p::Parameter;
using l2p::Rng;
using l2p::ShapeError;
using l2p::Tape;
using l2p::Tensor;
using l2p::TrainConfig;
using l2p::TrainContext;
using l2p::TrainResult;
using l2p::ValueId;

namespace {

/// Ring graph whose labels alternate and whose features carry the label, so
/// a trained model can actually improve.
Graph labeled_ring(int n, int classes, int feature_dim, uint64_t seed) {
  Graph g;
  g.num_nodes = n;
  g.labels.resize(static_cast<std::size_t>(n));
  Rng rng(seed);
  g.features = Tensor(n, feature_dim, 0.0);
  for (int i = 0; i < n; ++i) {
    g.labels[static_cast<std::size_t>(i)] = i % classes;
    for (int f = 0; f < feature_dim; ++f) g.features.at(i, f) = 0.3 * rng.normal();
    g.features.at(i, i % classes) += 2.0;
  }
  for (int i = 0; i < n; ++i)
    g.edges.push_back({std::min(i, (i + 1) % n), std::max(i, (i + 1) % n)});
  g.train_mask.assign(static_cast<std::size_t>(n), false);
  g.val_mask.assign(static_cast<std::size_t>(n), false);
  g.test_mask.assign(static_cast<std::size_t>(n), false);
  for (int i = 0; i < n; ++i) {
    if (i % 5 == 3)
      g.val_mask[static_cast<std::size_t>(i)] = true;
    else if (i % 5 == 4)
      g.test_mask[static_cast<std::size_t>(i)] = true;
    else
      g.train_mask[static_cast<std::size_t>(i)] = true;
  }
  return g;
}

/// Owns a graph plus a wired-up model so tests can share one setup.
struct ModelFixture {
  Graph g;
  CsrMatrix x, adj;
  std::unique_ptr<BackboneParams> backbone;
  std::unique_ptr<HeadParams> head;
  TrainContext ctx;

  ModelFixture(Graph graph, const char* head_kind, int depth, uint64_t seed,
               double dropout = 0.0)
      : g(std::move(graph)) {
    x = CsrMatrix::from_dense(g.features);
    adj = l2p::normalize_adjacency(g);
    BackboneConfig bcfg;
    bcfg.kind = "appnp";
    bcfg.input_dim = g.feature_dim();
    bcfg.hidden = 8;
    bcfg.repr_dim = 8;
    bcfg.num_classes = std::max(2, g.num_classes());
    bcfg.depth = depth;
    bcfg.alpha = 0.2;
    bcfg.dropout = dropout;
    Rng rng(seed);
    backbone = std::make_unique<BackboneParams>(bcfg, rng);
    if (head_kind)
      head = std::make_unique<HeadParams>(head_kind, depth, bcfg.repr_dim, true, rng);
    ctx.graph = &g;
    ctx.features = &x;
    ctx.adj = &adj;
    ctx.backbone = backbone.get();
    ctx.head = head.get();
    ctx.prior = l2p::uniform_prior(depth, 1);
  }
  ModelFixture(const ModelFixture&) = delete;
};

std::vector<double> flat_values(std::vector<Parameter*> params) {
  return l2p::snapshot_values(params);
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

double grad_norm(std::vector<Parameter*> params) {
  double s = 0.0;
  for (const Parameter* p : params)
    for (std::size_t i = 0; i < p->grad.size(); ++i) s += p->grad[i] * p->grad[i];
  return std::sqrt(s);
}

/// Objective value for one responsibility matrix: -mean(E_q[log lik]) + KL.
double responsibility_objective(const Tensor& loglik, const Tensor& q,
                                const Tensor& prior, const std::vector<bool>& mask) {
  double recon = 0.0;
  int count = 0;
  for (int i = 0; i < loglik.rows(); ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    for (int k = 0; k < loglik.cols(); ++k) recon += q.at(i, k) * loglik.at(i, k);
    ++count;
  }
  recon /= count;
  return -recon + l2p::kl_rows_mean(q, prior, mask);
}

}  // namespace

TEST_CASE("variational objective: hand values in both styles") {
  // one node, two depths, two classes, label 0
  const std::vector<int> labels = {0};
  const std::vector<bool> mask = {true};
  std::vector<Tensor> rows = {Tensor::from({{std::log(0.8), std::log(0.2)}}),
                              Tensor::from({{std::log(0.4), std::log(0.6)}})};

  Tape t;
  std::vector<ValueId> logp = {t.constant(rows[0]), t.constant(rows[1])};
  ValueId prior = t.constant(l2p::uniform_prior(1, 1));
  ValueId uniform = t.constant(Tensor::from({{0.5, 0.5}}));

  // exact expectation under a uniform q, with q matching the prior
  ElboNodes exp_nodes = l2p::negative_elbo(t, logp, uniform, labels, mask, prior,
                                           ElboStyle::expected);
  ElboBreakdown exp_bd = l2p::read_breakdown(t, exp_nodes);
  const double expected_recon = 0.5 * (std::log(0.8) + std::log(0.4));
  CHECK(exp_bd.reconstruction == doctest::Approx(expected_recon).epsilon(1e-12));
  CHECK(exp_bd.kl == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(exp_bd.total == doctest::Approx(-expected_recon).epsilon(1e-12));
  CHECK(exp_bd.total == exp_bd.kl - exp_bd.reconstruction);  // exact identity

  // the lower bound sits below the exact log evidence
  CHECK(-exp_bd.total <= std::log(0.6) + 1e-12);

  // blending the predictions instead gives exactly the log marginal
  ElboNodes mix_nodes = l2p::negative_elbo(t, logp, uniform, labels, mask, prior,
                                           ElboStyle::sampled);
  ElboBreakdown mix_bd = l2p::read_breakdown(t, mix_nodes);
  CHECK(mix_bd.reconstruction == doctest::Approx(std::log(0.6)).epsilon(1e-12));
  CHECK(mix_bd.total == doctest::Approx(-std::log(0.6)).epsilon(1e-12));
}

TEST_CASE("variational objective: point-mass selection reduces to one depth") {
  const std::vector<int> labels = {0, 1};
  const std::vector<bool> mask = {true, true};
  Tape t;
  std::vector<ValueId> logp = {
      t.constant(Tensor::from({{std::log(0.8), std::log(0.2)},
                               {std::log(0.3), std::log(0.7)}})),
      t.constant(Tensor::from({{std::log(0.4), std::log(0.6)},
                               {std::log(0.9), std::log(0.1)}})),
  };
  ValueId prior = t.constant(l2p::uniform_prior(1, 1));
  ValueId onehot = t.constant(Tensor::from({{0.0, 1.0}, {0.0, 1.0}}));

  // reconstruction is exactly the depth-1 likelihood; the point mass still
  // pays its divergence from the uniform prior
  ElboNodes nodes = l2p::negative_elbo(t, logp, onehot, labels, mask, prior,
                                       ElboStyle::sampled);
  ElboBreakdown bd = l2p::read_breakdown(t, nodes);
  const double depth1 = 0.5 * (std::log(0.4) + std::log(0.1));
  CHECK(bd.reconstruction == doctest::Approx(depth1).epsilon(1e-12));
  CHECK(bd.kl == doctest::Approx(std::log(2.0)).epsilon(1e-9));

  // routing the divergence through a separate parametric posterior frees the
  // likelihood term from the sampled selection
  ValueId half = t.constant(Tensor::from({{0.5, 0.5}, {0.5, 0.5}}));
  ElboNodes split = l2p::negative_elbo(t, logp, onehot, labels, mask, prior,
                                       ElboStyle::sampled, 1.0, half);
  ElboBreakdown split_bd = l2p::read_breakdown(t, split);
  CHECK(split_bd.reconstruction == doctest::Approx(depth1).epsilon(1e-12));
  CHECK(split_bd.kl == doctest::Approx(0.0).epsilon(1e-12));

  // the divergence weight scales only the kl node
  ElboNodes heavy = l2p::negative_elbo(t, logp, onehot, labels, mask, prior,
                                       ElboStyle::sampled, 2.5);
  CHECK(l2p::read_breakdown(t, heavy).kl == doctest::Approx(2.5 * bd.kl).epsilon(1e-12));

  // shape and mask violations are rejected
  ValueId narrow = t.constant(Tensor::from({{1.0}, {1.0}}));
  CHECK_THROWS_AS(l2p::negative_elbo(t, logp, narrow, labels, mask, prior,
                                     ElboStyle::sampled),
                  ShapeError);
  const std::vector<bool> empty = {false, false};
  CHECK_THROWS_AS(l2p::negative_elbo(t, logp, onehot, labels, empty, prior,
                                     ElboStyle::sampled),
                  ContractError);
}

TEST_CASE("responsibility update: closed form, prior handling, failure modes") {
  Tensor loglik = Tensor::from({{std::log(0.9), std::log(0.6), std::log(0.3)},
                                {-1.0, -1.0, -1.0}});
  std::vector<bool> mask = {true, true};
  Tensor q = l2p::em_e_step(loglik, mask);
  CHECK(q.at(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(q.at(0, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(q.at(0, 2) == doctest::Approx(1.0 / 6.0).epsilon(1e-12));
  // equal likelihoods split evenly
  for (int k = 0; k < 3; ++k)
    CHECK(q.at(1, k) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  // rows outside the mask fall back to the prior
  Tensor prior = l2p::geometric_prior(2, 1, 0.5);
  Tensor q2 = l2p::em_e_step(loglik, {true, false}, &prior);
  for (int k = 0; k < 3; ++k)
    CHECK(q2.at(1, k) == doctest::Approx(prior.at(0, k)).epsilon(1e-12));

  // a nonuniform prior tilts the masked rows: q ~ lik * prior
  Tensor q3 = l2p::em_e_step(loglik, mask, &prior);
  const double w0 = 0.9 * prior.at(0, 0), w1 = 0.6 * prior.at(0, 1),
               w2 = 0.3 * prior.at(0, 2);
  CHECK(q3.at(0, 0) == doctest::Approx(w0 / (w0 + w1 + w2)).epsilon(1e-12));

  const double inf = std::numeric_limits<double>::infinity();
  Tensor dead = Tensor::from({{-inf, -inf, -inf}});
  CHECK_THROWS_AS(l2p::em_e_step(dead, {true}), NumericError);
  Tensor poisoned = Tensor::from({{0.0, std::nan(""), 0.0}});
  CHECK_THROWS_AS(l2p::em_e_step(poisoned, {true}), NumericError);
}

TEST_CASE("responsibility update beats random candidates") {
  Rng rng(61);
  const int n = 5, depths = 3;
  for (int instance = 0; instance < 10; ++instance) {
    Tensor loglik = testutil::random_tensor(n, depths, rng, 1.5);
    std::vector<bool> mask(n, true);
    Tensor prior = l2p::uniform_prior(depths - 1, 1);
    Tensor best = l2p::em_e_step(loglik, mask, &prior);
    const double best_obj = responsibility_objective(loglik, best, prior, mask);
    for (int trial = 0; trial < 200; ++trial) {
      Tensor q(n, depths, 0.0);
      for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int k = 0; k < depths; ++k) {
          q.at(i, k) = -std::log(rng.uniform_open());
          s += q.at(i, k);
        }
        for (int k = 0; k < depths; ++k) q.at(i, k) /= s;
      }
      CHECK(best_obj <= responsibility_objective(loglik, q, prior, mask) + 1e-12);
    }
  }
}

TEST_CASE("head projection: stationary at its own output") {
  for (const char* kind : {"l2s", "l2q"}) {
    ModelFixture m(labeled_ring(10, 2, 4, 7), kind, 2, 11);
    Tensor target = l2p::evaluate(m.ctx).posterior;

    // cross-entropy gradient wrt the head vanishes when the target already
    // equals the head's output
    Tape t;
    l2p::LayerStack s = l2p::build_stack(t, m.x, m.adj, *m.backbone, false, nullptr);
    ValueId q = l2p::head_posterior(t, s, *m.head);
    ValueId per = t.row_sum(t.pointwise_mul(t.constant(target), t.log_clamped(q)));
    ValueId ce = t.scale(t.masked_mean(per, m.g.train_mask), -1.0);
    for (Parameter* p : m.head->all()) p->zero_grad();
    for (Parameter* p : m.backbone->all()) p->zero_grad();
    t.backward(ce);
    CHECK(grad_norm(m.head->all()) < 1e-8);
  }
}

TEST_CASE("head projection: converges to a point-mass target on one node") {
  Graph g;
  g.num_nodes = 1;
  g.features = Tensor::from({{1.0, 0.5}});
  g.labels = {0};
  g.train_mask = {true};
  g.val_mask = {false};
  g.test_mask = {false};
  ModelFixture m(std::move(g), "l2q", 1, 3);

  Tensor target = Tensor::from({{1.0, 0.0}});
  l2p::PhiFitStats st = l2p::em_fit_phi(m.ctx, target, m.g.train_mask, 500, 0.5);
  CHECK(st.last <= st.first + 1e-12);
  Tensor q = l2p::evaluate(m.ctx).posterior;
  CHECK(q.at(0, 0) > 0.9);
}

TEST_CASE("head projection: loss is the divergence plus the target entropy") {
  ModelFixture m(labeled_ring(10, 2, 4, 13), "l2q", 2, 17);
  // an arbitrary valid target, different from the head output
  Tensor target(10, 3, 0.0);
  Rng rng(29);
  for (int i = 0; i < 10; ++i) {
    double s = 0.0;
    for (int k = 0; k < 3; ++k) {
      target.at(i, k) = rng.uniform_open();
      s += target.at(i, k);
    }
    for (int k = 0; k < 3; ++k) target.at(i, k) /= s;
  }

  l2p::PhiFitStats st = l2p::em_fit_phi(m.ctx, target, m.g.train_mask, 0, 0.1);
  Tensor q = l2p::evaluate(m.ctx).posterior;
  double entropy = 0.0;
  int count = 0;
  for (int i = 0; i < 10; ++i) {
    if (!m.g.train_mask[static_cast<std::size_t>(i)]) continue;
    for (int k = 0; k < 3; ++k)
      entropy -= target.at(i, k) * std::log(target.at(i, k));
    ++count;
  }
  entropy /= count;
  const double kl = l2p::kl_rows_mean(target, q, m.g.train_mask);
  CHECK(st.first == doctest::Approx(kl + entropy).epsilon(1e-12));
  CHECK(st.first == st.last);  // zero steps change nothing

  // a short fit must not increase the projection loss
  l2p::PhiFitStats fitted = l2p::em_fit_phi(m.ctx, target, m.g.train_mask, 50, 0.2);
  CHECK(fitted.last <= fitted.first + 1e-12);
}

TEST_CASE("frozen-responsibility step: zero rate is a no-op") {
  ModelFixture m(labeled_ring(10, 2, 4, 23), nullptr, 2, 31);
  Tensor q = l2p::uniform_prior(2, 10);
  std::vector<double> before = flat_values(m.backbone->all());
  ElboBreakdown bd = l2p::em_m_step_theta(m.ctx, q, m.g.train_mask, 0.0);
  CHECK(bitwise_equal(before, flat_values(m.backbone->all())));
  CHECK(std::isfinite(bd.total));
  CHECK_THROWS_AS(l2p::em_m_step_theta(m.ctx, q, m.g.train_mask, -0.1), ConfigError);
}

TEST_CASE("frozen-responsibility step: point mass equals a plain depth loss step") {
  const int j = 2;
  ModelFixture a(labeled_ring(10, 2, 4, 23), nullptr, 2, 31);
  ModelFixture b(labeled_ring(10, 2, 4, 23), nullptr, 2, 31);
  REQUIRE(bitwise_equal(flat_values(a.backbone->all()), flat_values(b.backbone->all())));

  Tensor onehot(10, 3, 0.0);
  for (int i = 0; i < 10; ++i) onehot.at(i, j) = 1.0;
  const double lr = 0.05;
  l2p::em_m_step_theta(a.ctx, onehot, a.g.train_mask, lr);

  // the same update, spelled as a gradient step on the depth-j classification
  // loss (the divergence term is constant in theta and contributes nothing)
  Tape t;
  l2p::LayerStack s = l2p::build_stack(t, b.x, b.adj, *b.backbone, false, nullptr);
  std::vector<ValueId> logp = l2p::classify_stack(t, s, *b.backbone);
  ValueId nll = t.nll_loss(logp[j], b.g.labels, b.g.train_mask);
  for (Parameter* p : b.backbone->all()) p->zero_grad();
  t.backward(nll);
  for (Parameter* p : b.backbone->all())
    for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] -= lr * p->grad[i];

  std::vector<double> va = flat_values(a.backbone->all());
  std::vector<double> vb = flat_values(b.backbone->all());
  REQUIRE(va.size() == vb.size());
  for (std::size_t i = 0; i < va.size(); ++i)
    CHECK(va[i] == doctest::Approx(vb[i]).epsilon(1e-12));
}

TEST_CASE("frozen-responsibility steps drive the objective down") {
  ModelFixture m(labeled_ring(15, 3, 5, 41), nullptr, 2, 43);
  Tensor q = l2p::uniform_prior(2, 15);
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 50; ++step) {
    ElboBreakdown bd = l2p::em_m_step_theta(m.ctx, q, m.g.train_mask, 0.05);
    if (step == 0) first = bd.total;
    last = bd.total;
  }
  CHECK(last < first);
}

TEST_CASE("one alternating iteration never worsens the variational objective") {
  ModelFixture m(labeled_ring(10, 2, 4, 47), "l2q", 2, 53);
  double previous = std::numeric_limits<double>::infinity();
  for (int it = 0; it < 8; ++it) {
    l2p::EvalOutputs ev = l2p::evaluate(m.ctx);
    Tensor loglik = l2p::per_depth_label_loglik(ev.log_probs, m.g.labels);
    Tensor q_star = l2p::em_e_step(loglik, m.g.train_mask, &m.ctx.prior);
    const double objective =
        responsibility_objective(loglik, q_star, m.ctx.prior, m.g.train_mask);
    CHECK(objective <= previous + 1e-7);
    previous = objective;
    l2p::em_fit_phi(m.ctx, q_star, m.g.train_mask, 1, 0.05);
    l2p::em_m_step_theta(m.ctx, q_star, m.g.train_mask, 0.01);
  }
}

TEST_CASE("joint relaxed step: bit-identical under a fixed seed, loss trends down") {
  ModelFixture a(labeled_ring(10, 2, 4, 59), "l2q", 2, 61);
  ModelFixture b(labeled_ring(10, 2, 4, 59), "l2q", 2, 61);

  auto run_step = [](ModelFixture& m, uint64_t seed) {
    Optimizer theta_opt(Optimizer::Kind::adam, m.backbone->all(), 0.02);
    Optimizer phi_opt(Optimizer::Kind::adam, m.head->all(), 0.02);
    Rng step_rng(seed);
    return l2p::vi_step(m.ctx, m.g.train_mask, theta_opt, phi_opt, step_rng);
  };
  ElboBreakdown bda = run_step(a, 42);
  ElboBreakdown bdb = run_step(b, 42);
  CHECK(bda.total == bdb.total);
  CHECK(bitwise_equal(flat_values(a.backbone->all()), flat_values(b.backbone->all())));
  CHECK(bitwise_equal(flat_values(a.head->all()), flat_values(b.head->all())));

  // multiple steps improve the objective on average
  ModelFixture m(labeled_ring(10, 2, 4, 59), "l2q", 2, 61);
  Optimizer theta_opt(Optimizer::Kind::adam, m.backbone->all(), 0.02);
  Optimizer phi_opt(Optimizer::Kind::adam, m.head->all(), 0.02);
  Rng root(71);
  std::vector<double> totals;
  for (int step = 0; step < 100; ++step) {
    Rng step_rng = root.child(static_cast<uint64_t>(step) + 1);
    totals.push_back(
        l2p::vi_step(m.ctx, m.g.train_mask, theta_opt, phi_opt, step_rng).total);
  }
  double head_mean = 0.0, tail_mean = 0.0;
  for (int i = 0; i < 10; ++i) {
    head_mean += totals[static_cast<std::size_t>(i)] / 10.0;
    tail_mean += totals[totals.size() - 1 - static_cast<std::size_t>(i)] / 10.0;
  }
  CHECK(tail_mean < head_mean);

  ModelFixture bare(labeled_ring(10, 2, 4, 59), nullptr, 2, 61);
  Optimizer t_opt(Optimizer::Kind::adam, bare.backbone->all(), 0.02);
  Rng r(1);
  CHECK_THROWS_AS(l2p::vi_step(bare.ctx, bare.g.train_mask, t_opt, t_opt, r),
                  ContractError);
}

TEST_CASE("mixed-derivative probe: bilinear problem is exact") {
  Rng rng(83);
  Parameter theta("theta", testutil::random_tensor(1, 3, rng));
  Parameter phi("phi", testutil::random_tensor(4, 1, rng));
  Tensor m_vals = testutil::random_tensor(3, 4, rng);

  int evaluations = 0;
  auto loss = [&](Tape& t) {
    ++evaluations;
    return t.reduce_mean(t.matmul(t.matmul(t.param(theta), t.constant(m_vals)),
                                  t.param(phi)));
  };
  std::vector<Parameter*> th = {&theta};
  std::vector<Parameter*> ph = {&phi};
  std::vector<double> v = {0.3, -1.1, 0.7};

  std::vector<double> fd = l2p::hypergrad_fd(loss, th, ph, v, 1e-3);
  CHECK(evaluations == 2);  // exactly two gradient passes
  REQUIRE(fd.size() == 4);
  for (int c = 0; c < 4; ++c) {
    double expected = 0.0;
    for (int r = 0; r < 3; ++r)
      expected += m_vals.at(r, c) * v[static_cast<std::size_t>(r)];
    CHECK(fd[static_cast<std::size_t>(c)] == doctest::Approx(expected).epsilon(1e-9));
  }

  // the parameters come back bit-exact
  std::vector<double> before = l2p::snapshot_values(th);
  l2p::hypergrad_fd(loss, th, ph, v, 1e-3);
  CHECK(bitwise_equal(before, l2p::snapshot_values(th)));

  // a zero direction produces an exactly zero probe
  std::vector<double> zero = {0.0, 0.0, 0.0};
  for (double x : l2p::hypergrad_fd(loss, th, ph, zero, 1e-3)) CHECK(x == 0.0);

  CHECK_THROWS_AS(l2p::hypergrad_fd(loss, th, ph, v, 0.0), ConfigError);
  std::vector<double> short_v = {1.0};
  CHECK_THROWS_AS(l2p::hypergrad_fd(loss, th, ph, short_v, 1e-3), ShapeError);
  std::vector<double> bad_v = {std::nan(""), 0.0, 0.0};
  CHECK_THROWS_AS(l2p::hypergrad_fd(loss, th, ph, bad_v, 1e-3), NumericError);
}

TEST_CASE("mixed-derivative probe: halving the step halves the bias") {
  Rng rng(89);
  Parameter theta("theta", testutil::random_tensor(1, 3, rng));
  Parameter phi("phi", testutil::random_tensor(4, 1, rng));
  Tensor m_vals = testutil::random_tensor(3, 4, rng);
  Tensor a_vals = testutil::random_tensor(3, 1, rng);
  Tensor b_vals = testutil::random_tensor(1, 4, rng);

  // bilinear term plus a theta-quadratic coupling, so the probe has an
  // O(eps) bias the halved step must shrink
  auto loss = [&](Tape& t) {
    ValueId bilinear = t.matmul(t.matmul(t.param(theta), t.constant(m_vals)),
                                t.param(phi));
    ValueId s = t.matmul(t.param(theta), t.constant(a_vals));
    ValueId curve = t.pointwise_mul(t.pointwise_mul(s, s),
                                    t.matmul(t.constant(b_vals), t.param(phi)));
    return t.reduce_mean(t.add(bilinear, curve));
  };
  std::vector<Parameter*> th = {&theta};
  std::vector<Parameter*> ph = {&phi};
  std::vector<double> v = {0.9, -0.4, 1.3};

  const double eps = 1e-2;
  std::vector<double> coarse = l2p::hypergrad_fd(loss, th, ph, v, eps);
  std::vector<double> fine = l2p::hypergrad_fd(loss, th, ph, v, eps / 2.0);

  // analytic probe: M^T v + (2 (theta a)(v a) + eps (v a)^2) b^T
  double ta = 0.0, va = 0.0;
  for (int r = 0; r < 3; ++r) {
    ta += theta.value.at(0, r) * a_vals.at(r, 0);
    va += v[static_cast<std::size_t>(r)] * a_vals.at(r, 0);
  }
  for (int c = 0; c < 4; ++c) {
    double linear = 0.0;
    for (int r = 0; r < 3; ++r)
      linear += m_vals.at(r, c) * v[static_cast<std::size_t>(r)];
    const double exact = linear + 2.0 * ta * va * b_vals.at(0, c);
    const double bias = va * va * b_vals.at(0, c);
    CHECK(coarse[static_cast<std::size_t>(c)] ==
          doctest::Approx(exact + eps * bias).epsilon(1e-6));
    CHECK(fine[static_cast<std::size_t>(c)] ==
          doctest::Approx(exact + 0.5 * eps * bias).epsilon(1e-6));
    // halving the step leaves exactly half of the first-order bias
    const double gap = coarse[static_cast<std::size_t>(c)] -
                       fine[static_cast<std::size_t>(c)];
    CHECK(gap == doctest::Approx(0.5 * eps * bias).epsilon(1e-4));
  }
}

namespace {

/// Tiny two-level toy: train couples theta and phi, validation pulls theta
/// toward a target and regularizes phi.
struct BilevelToy {
  Parameter theta, phi;
  Tensor m_vals, target;

  explicit BilevelToy(uint64_t seed)
      : theta("theta", Tensor(1, 2, 0.0)), phi("phi", Tensor(1, 2, 0.0)) {
    Rng rng(seed);
    theta.value = testutil::random_tensor(1, 2, rng);
    phi.value = testutil::random_tensor(1, 2, rng);
    m_vals = testutil::random_tensor(2, 2, rng);
    target = testutil::random_tensor(1, 2, rng);
  }

  l2p::LossFn train_loss(bool coupled) {
    return [this, coupled](Tape& t) {
      ValueId th = t.param(theta);
      ValueId quad = t.reduce_mean(t.pointwise_mul(th, th));
      ValueId ph = t.param(phi);
      ValueId reg = t.reduce_mean(t.pointwise_mul(ph, ph));
      ValueId total = t.add(quad, reg);
      if (coupled) {
        ValueId cross =
            t.reduce_mean(t.pointwise_mul(t.matmul(th, t.constant(m_vals)), ph));
        total = t.add(total, cross);
      }
      return total;
    };
  }

  l2p::LossFn val_loss() {
    return [this](Tape& t) {
      ValueId diff = t.sub(t.param(theta), t.constant(target));
      ValueId fit = t.reduce_mean(t.pointwise_mul(diff, diff));
      ValueId ph = t.param(phi);
      return t.add(fit, t.reduce_mean(t.pointwise_mul(ph, ph)));
    };
  }
};

}  // namespace

TEST_CASE("two-level update: correction bookkeeping is exact") {
  const double eta = 0.05;

  BilevelToy first_toy(7);
  BilevelToy second_toy(7);
  REQUIRE(testutil::exactly_equal(first_toy.theta.value, second_toy.theta.value));

  auto run = [&](BilevelToy& toy, const char* mode) {
    std::vector<Parameter*> th = {&toy.theta};
    std::vector<Parameter*> ph = {&toy.phi};
    Optimizer theta_opt(Optimizer::Kind::sgd, th, eta);
    Optimizer phi_opt(Optimizer::Kind::sgd, ph, eta);
    BilevelConfig cfg;
    cfg.mode = mode;
    cfg.eta_theta = eta;
    return l2p::bilevel_step(toy.train_loss(true), toy.val_loss(), th, ph, cfg,
                             theta_opt, phi_opt);
  };

  BilevelOutcome out1 = run(first_toy, "first");
  BilevelOutcome out2 = run(second_toy, "second");

  // the inner update is shared: theta agrees bit for bit
  CHECK(testutil::exactly_equal(first_toy.theta.value, second_toy.theta.value));

  // first-order leaves the correction at exactly zero
  for (double c : out1.fd_correction) CHECK(c == 0.0);
  CHECK(out1.fd_eps == 0.0);
  CHECK(out2.fd_eps > 0.0);

  // the two modes share the direct term, so the second-order gradient is the
  // first-order one minus the scaled correction, bit for bit
  REQUIRE(out1.phi_grad.size() == out2.phi_grad.size());
  bool correction_moved = false;
  for (std::size_t i = 0; i < out1.phi_grad.size(); ++i) {
    CHECK(out2.phi_grad[i] == out1.phi_grad[i] - eta * out2.fd_correction[i]);
    if (out2.fd_correction[i] != 0.0) correction_moved = true;
  }
  CHECK(correction_moved);  // the coupled loss has a real mixed derivative

  // with a separable train loss the correction vanishes and both modes apply
  // the identical phi update
  BilevelToy sep1(9), sep2(9);
  auto run_sep = [&](BilevelToy& toy, const char* mode) {
    std::vector<Parameter*> th = {&toy.theta};
    std::vector<Parameter*> ph = {&toy.phi};
    Optimizer theta_opt(Optimizer::Kind::sgd, th, eta);
    Optimizer phi_opt(Optimizer::Kind::sgd, ph, eta);
    BilevelConfig cfg;
    cfg.mode = mode;
    cfg.eta_theta = eta;
    return l2p::bilevel_step(toy.train_loss(false), toy.val_loss(), th, ph, cfg,
                             theta_opt, phi_opt);
  };
  BilevelOutcome s1 = run_sep(sep1, "first");
  BilevelOutcome s2 = run_sep(sep2, "second");
  for (double c : s2.fd_correction) CHECK(c == 0.0);
  CHECK(testutil::exactly_equal(sep1.phi.value, sep2.phi.value));
  CHECK(s1.val_loss == s2.val_loss);
}

TEST_CASE("two-level update: off mode is one joint step") {
  BilevelToy toy(15), manual(15);
  const double eta = 0.1;

  std::vector<Parameter*> th = {&toy.theta};
  std::vector<Parameter*> ph = {&toy.phi};
  Optimizer theta_opt(Optimizer::Kind::sgd, th, eta);
  Optimizer phi_opt(Optimizer::Kind::sgd, ph, eta);
  BilevelConfig cfg;
  cfg.mode = "off";
  BilevelOutcome out =
      l2p::bilevel_step(toy.train_loss(true), toy.val_loss(), th, ph, cfg,
                        theta_opt, phi_opt);
  CHECK(std::isnan(out.val_loss));  // the outer objective is never evaluated

  // replicate with one tape and two plain steps
  std::vector<Parameter*> mth = {&manual.theta};
  std::vector<Parameter*> mph = {&manual.phi};
  Optimizer m_theta(Optimizer::Kind::sgd, mth, eta);
  Optimizer m_phi(Optimizer::Kind::sgd, mph, eta);
  manual.theta.zero_grad();
  manual.phi.zero_grad();
  Tape t;
  t.backward(manual.train_loss(true)(t));
  m_theta.step();
  m_phi.step();
  CHECK(testutil::exactly_equal(toy.theta.value, manual.theta.value));
  CHECK(testutil::exactly_equal(toy.phi.value, manual.phi.value));

  CHECK_THROWS_AS(BilevelConfig::parse_mode("sideways"), ConfigError);
  CHECK(BilevelConfig::parse_mode("first_order") == "first");
  CHECK(BilevelConfig::parse_mode("second_order") == "second");
}

TEST_CASE("training loop: zero epochs return the initial state") {
  ModelFixture m(labeled_ring(10, 2, 4, 97), "l2q", 2, 101);
  std::vector<double> before = flat_values(m.backbone->all());
  TrainConfig cfg;
  cfg.epochs = 0;
  Rng rng(7);
  TrainResult res = l2p::train(m.ctx, cfg, rng);
  CHECK(res.history.empty());
  CHECK(res.best_epoch == -1);
  CHECK(bitwise_equal(before, flat_values(m.backbone->all())));
  CHECK(res.final_eval.posterior.rows() == 10);
}

TEST_CASE("training loop: the same seed reproduces the run exactly") {
  for (const char* trainer : {"vi", "em"}) {
    ModelFixture a(labeled_ring(10, 2, 4, 103), "l2q", 2, 107);
    ModelFixture b(labeled_ring(10, 2, 4, 103), "l2q", 2, 107);
    TrainConfig cfg;
    cfg.trainer = trainer;
    cfg.bilevel = "first";
    cfg.epochs = 6;
    cfg.lr_theta = 0.02;
    cfg.lr_phi = 0.02;
    Rng ra(5), rb(5);
    TrainResult res_a = l2p::train(a.ctx, cfg, ra);
    TrainResult res_b = l2p::train(b.ctx, cfg, rb);
    REQUIRE(res_a.history.size() == res_b.history.size());
    for (std::size_t e = 0; e < res_a.history.size(); ++e) {
      CHECK(res_a.history[e].epoch == res_b.history[e].epoch);
      CHECK(res_a.history[e].train_loss == res_b.history[e].train_loss);
      CHECK(res_a.history[e].val_loss == res_b.history[e].val_loss);
      CHECK(res_a.history[e].val_acc == res_b.history[e].val_acc);
      CHECK(res_a.history[e].test_acc == res_b.history[e].test_acc);
    }
    CHECK(res_a.best_epoch == res_b.best_epoch);
    CHECK(bitwise_equal(flat_values(a.backbone->all()),
                        flat_values(b.backbone->all())));
    CHECK(bitwise_equal(flat_values(a.head->all()), flat_values(b.head->all())));
  }
}

TEST_CASE("training loop: mask and mode validation") {
  ModelFixture no_val(labeled_ring(10, 2, 4, 109), "l2q", 2, 113);
  no_val.g.val_mask.assign(10, false);
  TrainConfig cfg;
  cfg.epochs = 3;
  Rng rng(1);
  CHECK_THROWS_AS(l2p::train(no_val.ctx, cfg, rng), ConfigError);

  ModelFixture no_train(labeled_ring(10, 2, 4, 109), "l2q", 2, 113);
  no_train.g.train_mask.assign(10, false);
  CHECK_THROWS_AS(l2p::train(no_train.ctx, cfg, rng), DatasetError);

  ModelFixture em2(labeled_ring(10, 2, 4, 109), "l2q", 2, 113);
  TrainConfig bad;
  bad.trainer = "em";
  bad.bilevel = "second";
  bad.epochs = 1;
  CHECK_THROWS_AS(l2p::train(em2.ctx, bad, rng), ConfigError);

  TrainConfig unknown;
  unknown.trainer = "gibbs";
  CHECK_THROWS_AS(unknown.validate(), ConfigError);
}

TEST_CASE("training loop: early stopping obeys the patience window") {
  // a step size too small to move the validation accuracy: the first epoch
  // is the best one and the loop stops after the patience window
  ModelFixture m(labeled_ring(10, 2, 4, 127), "l2q", 2, 131);
  TrainConfig cfg;
  cfg.optimizer = "sgd";
  cfg.lr_theta = 1e-12;
  cfg.lr_phi = 1e-12;
  cfg.weight_decay = 0.0;
  cfg.epochs = 50;
  cfg.patience = 3;
  Rng rng(3);
  TrainResult res = l2p::train(m.ctx, cfg, rng);
  CHECK(res.history.size() == 4);  // epoch 0 plus the exhausted window
  CHECK(res.best_epoch == 0);
}
