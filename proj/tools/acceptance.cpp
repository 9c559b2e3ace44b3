/// End-to-end acceptance checks: numerical oracles for the math kernels plus
/// desk-scale benchmark behaviors of the full training stack. Each check
/// prints one PASS / FAIL / WAIVED line with its measurements; the process
/// exits nonzero if any check fails. Pass criterion numbers as arguments to
/// run a subset (default: all).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "l2p/backbone.hpp"
#include "l2p/errors.hpp"
#include "l2p/gradsuite.hpp"
#include "l2p/graph.hpp"
#include "l2p/head.hpp"
#include "l2p/io.hpp"
#include "l2p/optim.hpp"
#include "l2p/rng.hpp"
#include "l2p/runner.hpp"
#include "l2p/tape.hpp"
#include "l2p/tensor.hpp"
#include "l2p/trainers.hpp"

namespace fs = std::filesystem;
using namespace l2p;

namespace {

struct CheckResult {
  bool pass = false;
  bool waived = false;
  std::string detail;
};

double now_seconds() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

std::string fmt(const char* pattern, ...) {
  char buf[512];
  va_list args;
  va_start(args, pattern);
  vsnprintf(buf, sizeof(buf), pattern, args);
  va_end(args);
  return std::string(buf);
}

fs::path scratch_dir() {
  static fs::path dir = [] {
    fs::path p = fs::temp_directory_path() / "l2p_acceptance";
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

/// Random row on the probability simplex.
std::vector<double> simplex_row(int k, Rng& rng) {
  std::vector<double> row(static_cast<std::size_t>(k));
  double s = 0.0;
  for (double& x : row) {
    x = -std::log(rng.uniform_open());
    s += x;
  }
  for (double& x : row) x /= s;
  return row;
}

Tensor simplex_rows(int n, int k, Rng& rng) {
  Tensor out(n, k, 0.0);
  for (int i = 0; i < n; ++i) {
    std::vector<double> row = simplex_row(k, rng);
    for (int j = 0; j < k; ++j) out.at(i, j) = row[static_cast<std::size_t>(j)];
  }
  return out;
}

/// Row-wise log-softmax of random logits: a valid class log-probability
/// matrix for oracle tests.
Tensor random_log_probs(int n, int classes, Rng& rng) {
  Tensor out(n, classes, 0.0);
  for (int i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < classes; ++c) {
      out.at(i, c) = 2.0 * rng.normal();
      mx = std::max(mx, out.at(i, c));
    }
    double z = 0.0;
    for (int c = 0; c < classes; ++c) z += std::exp(out.at(i, c) - mx);
    const double logz = mx + std::log(z);
    for (int c = 0; c < classes; ++c) out.at(i, c) -= logz;
  }
  return out;
}

// ---- check 1: reverse-mode gradients vs central differences ---------------

CheckResult check_gradients() {
  const double t0 = now_seconds();
  GradSuiteResult r = run_grad_suite(50);
  const double secs = now_seconds() - t0;
  CheckResult out;
  out.pass = r.max_error < 1e-4 && secs < 30.0;
  out.detail = fmt("max rel err %.2e over %d checks, 50 seeds, %.1f s (need < 1e-4, < 30 s)",
                   r.max_error, r.checks, secs);
  return out;
}

// ---- check 2: depth-distribution simplex and divergence laws --------------

CheckResult check_simplex() {
  const int batches = 100, nodes = 100, depth = 5, dim = 8;
  Rng root(2025);
  int bad_sum = 0, bad_prefix = 0;
  double worst_sum = 0.0, worst_prefix = 0.0;
  for (int b = 0; b < batches; ++b) {
    Rng rng = root.child(static_cast<uint64_t>(b) + 1);
    HeadParams l2s("l2s", depth, dim, true, rng);
    HeadParams l2q("l2q", depth, dim, true, rng);
    Tape t(false);
    LayerStack s;
    for (int k = 0; k <= depth; ++k) {
      Tensor h(nodes, dim, 0.0);
      for (int i = 0; i < nodes; ++i)
        for (int j = 0; j < dim; ++j) h.at(i, j) = 2.0 * rng.normal();
      s.h.push_back(t.constant(std::move(h)));
    }

    const Tensor& soft = t.value(l2s_posterior(t, s, l2s));
    for (int i = 0; i < nodes; ++i) {
      double sum = 0.0;
      for (int k = 0; k <= depth; ++k) sum += soft.at(i, k);
      worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
      if (std::abs(sum - 1.0) > 1e-9) ++bad_sum;
    }

    const Tensor& quit = t.value(l2q_quit(t, s, l2q));
    Tensor stick = stick_break_values(quit);
    for (int i = 0; i < nodes; ++i) {
      double sum = 0.0;
      for (int k = 0; k <= depth; ++k) sum += stick.at(i, k);
      worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
      if (std::abs(sum - 1.0) > 1e-9) ++bad_sum;
      // every prefix of quit mass plus the unspent remainder is exactly 1
      double spent = 0.0, remainder = 1.0;
      for (int k = 0; k < depth; ++k) {
        spent += stick.at(i, k);
        remainder *= 1.0 - quit.at(i, k);
        worst_prefix = std::max(worst_prefix, std::abs(spent + remainder - 1.0));
        if (std::abs(spent + remainder - 1.0) > 1e-12) ++bad_prefix;
      }
    }
  }

  // divergence: nonnegative, zero exactly on equal rows, positive otherwise
  Rng rng(77);
  int bad_kl = 0;
  const std::vector<bool> one = {true};
  for (int trial = 0; trial < 10000; ++trial) {
    Tensor q(1, depth + 1, 0.0), p(1, depth + 1, 0.0);
    std::vector<double> qr = simplex_row(depth + 1, rng);
    std::vector<double> pr = simplex_row(depth + 1, rng);
    double gap = 0.0;
    for (int k = 0; k <= depth; ++k) {
      q.at(0, k) = qr[static_cast<std::size_t>(k)];
      p.at(0, k) = pr[static_cast<std::size_t>(k)];
      gap = std::max(gap, std::abs(q.at(0, k) - p.at(0, k)));
    }
    const double kl = kl_rows_mean(q, p, one);
    if (kl < 0.0) ++bad_kl;
    if (gap > 1e-3 && kl <= 1e-8) ++bad_kl;  // distinct rows must diverge
    if (kl_rows_mean(q, q, one) > 1e-15) ++bad_kl;  // equal rows must not
  }

  CheckResult out;
  out.pass = bad_sum == 0 && bad_prefix == 0 && bad_kl == 0;
  out.detail = fmt("10^4 rows/head: worst |sum-1| %.1e (<=1e-9), worst prefix gap %.1e "
                   "(<=1e-12), KL violations %d",
                   worst_sum, worst_prefix, bad_kl);
  return out;
}

// ---- check 3: variational bound vs exact marginal -------------------------

CheckResult check_elbo_bound() {
  Rng rng(31);
  double worst_slack = std::numeric_limits<double>::infinity();
  int estep_losses = 0;
  for (int inst = 0; inst < 100; ++inst) {
    const int n = 1 + static_cast<int>(rng.index(6));
    const int depth = static_cast<int>(rng.index(4));
    const int classes = 2 + static_cast<int>(rng.index(3));
    std::vector<Tensor> log_probs;
    for (int k = 0; k <= depth; ++k) log_probs.push_back(random_log_probs(n, classes, rng));
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = static_cast<int>(rng.index(classes));
    const std::vector<bool> mask(static_cast<std::size_t>(n), true);
    Tensor prior(1, depth + 1, 0.0);
    std::vector<double> pr = simplex_row(depth + 1, rng);
    for (int k = 0; k <= depth; ++k) prior.at(0, k) = pr[static_cast<std::size_t>(k)];

    // exact log evidence: brute-force sum over the latent depth per node
    Tensor loglik = per_depth_label_loglik(log_probs, labels);
    double exact = 0.0;
    for (int i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int k = 0; k <= depth; ++k)
        mx = std::max(mx, std::log(prior.at(0, k)) + loglik.at(i, k));
      double z = 0.0;
      for (int k = 0; k <= depth; ++k)
        z += std::exp(std::log(prior.at(0, k)) + loglik.at(i, k) - mx);
      exact += (mx + std::log(z)) / n;
    }

    // the bound holds for any responsibility matrix
    Tensor q = simplex_rows(n, depth + 1, rng);
    const double neg = eval_elbo(log_probs, q, prior, labels, mask, 1.0).total;
    worst_slack = std::min(worst_slack, neg + exact);  // >= 0 when bound holds

    // and the closed-form responsibilities beat 200 random candidates
    Tensor best = em_e_step(loglik, mask, &prior);
    const double best_obj = eval_elbo(log_probs, best, prior, labels, mask, 1.0).total;
    worst_slack = std::min(worst_slack, best_obj + exact);
    for (int trial = 0; trial < 200; ++trial) {
      Tensor cand = simplex_rows(n, depth + 1, rng);
      if (best_obj > eval_elbo(log_probs, cand, prior, labels, mask, 1.0).total + 1e-12)
        ++estep_losses;
    }
  }
  CheckResult out;
  out.pass = worst_slack >= -1e-9 && estep_losses == 0;
  out.detail = fmt("100 instances: worst bound slack %.2e (need >= -1e-9), "
                   "closed-form update lost %d of 20000 contests",
                   worst_slack, estep_losses);
  return out;
}

// ---- check 4: validation hypergradient vs brute-force unroll --------------

/// Five theta and five phi parameters; the train loss couples them through a
/// bilinear term, the validation loss pulls each toward its own target.
struct HyperToy {
  Parameter theta, phi;
  Tensor A, M, c, d, e;
  bool coupled;

  HyperToy(uint64_t seed, bool coupled_)
      : theta("theta", Tensor(1, 5, 0.0)), phi("phi", Tensor(1, 5, 0.0)), coupled(coupled_) {
    Rng rng(seed);
    auto rand = [&rng](int r, int cdim) {
      Tensor t(r, cdim, 0.0);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < cdim; ++j) t.at(i, j) = rng.normal();
      return t;
    };
    theta.value = rand(1, 5);
    phi.value = rand(1, 5);
    A = rand(5, 5);
    M = rand(5, 5);
    c = rand(1, 5);
    d = rand(1, 5);
    e = rand(1, 5);
  }

  ValueId train_loss(Tape& t) {
    ValueId th = t.param(theta);
    ValueId ph = t.param(phi);
    ValueId quad = t.scale(t.row_sum(t.pointwise_mul(t.matmul(th, t.constant(A)), th)), 0.5);
    ValueId lin = t.row_sum(t.pointwise_mul(t.constant(c), th));
    ValueId reg = t.scale(t.row_sum(t.pointwise_mul(ph, ph)), 0.5);
    ValueId total = t.add(quad, t.add(lin, reg));
    if (coupled)
      total = t.add(total, t.row_sum(t.pointwise_mul(t.matmul(th, t.constant(M)), ph)));
    return t.reduce_mean(total);
  }

  ValueId val_loss(Tape& t) {
    ValueId dth = t.sub(t.param(theta), t.constant(d));
    ValueId dph = t.sub(t.param(phi), t.constant(e));
    ValueId a = t.scale(t.row_sum(t.pointwise_mul(dth, dth)), 0.5);
    ValueId b = t.scale(t.row_sum(t.pointwise_mul(dph, dph)), 0.5);
    return t.reduce_mean(t.add(a, b));
  }

  BilevelOutcome step(const std::string& mode, double eta) {
    std::vector<Parameter*> th = {&theta};
    std::vector<Parameter*> ph = {&phi};
    Optimizer theta_opt(Optimizer::Kind::sgd, th, eta);
    Optimizer phi_opt(Optimizer::Kind::sgd, ph, eta);
    BilevelConfig cfg;
    cfg.mode = mode;
    cfg.eta_theta = eta;
    return bilevel_step([this](Tape& t) { return train_loss(t); },
                        [this](Tape& t) { return val_loss(t); }, th, ph, cfg,
                        theta_opt, phi_opt);
  }
};

CheckResult check_hypergradient() {
  const double eta = 0.05;

  // brute force: differentiate val(theta - eta grad_theta train(theta, phi), phi)
  // by central differences on phi through a manual unroll of the inner step
  HyperToy probe(101, true);
  const Tensor theta0 = probe.theta.value;
  const Tensor phi0 = probe.phi.value;
  auto unrolled_val = [&](const Tensor& phi_vals) {
    probe.phi.value = phi_vals;
    probe.theta.value = theta0;
    probe.theta.zero_grad();
    probe.phi.zero_grad();
    {
      Tape t;
      t.backward(probe.train_loss(t));
    }
    for (int i = 0; i < 5; ++i)
      probe.theta.value.at(0, i) -= eta * probe.theta.grad.at(0, i);
    double v = 0.0;
    {
      Tape t(false);
      v = t.value(probe.val_loss(t)).at(0, 0);
    }
    return v;
  };
  const double delta = 1e-5;
  std::vector<double> brute(5, 0.0);
  for (int i = 0; i < 5; ++i) {
    Tensor up = phi0, dn = phi0;
    up.at(0, i) += delta;
    dn.at(0, i) -= delta;
    brute[static_cast<std::size_t>(i)] = (unrolled_val(up) - unrolled_val(dn)) / (2.0 * delta);
  }
  probe.theta.value = theta0;
  probe.phi.value = phi0;

  HyperToy second(101, true);
  BilevelOutcome out2 = second.step("second", eta);
  double norm = 0.0, diff = 0.0;
  for (int i = 0; i < 5; ++i) {
    const double g = out2.phi_grad[static_cast<std::size_t>(i)];
    diff += (g - brute[static_cast<std::size_t>(i)]) * (g - brute[static_cast<std::size_t>(i)]);
    norm += brute[static_cast<std::size_t>(i)] * brute[static_cast<std::size_t>(i)];
  }
  const double rel = std::sqrt(diff) / std::sqrt(norm);

  // first-order mode shares the direct term bit for bit: subtracting the
  // scaled correction from it must reproduce the second-order gradient exactly
  HyperToy first(101, true);
  BilevelOutcome out1 = first.step("first", eta);
  bool bit_exact = true;
  bool correction_active = false;
  for (int i = 0; i < 5; ++i) {
    if (out2.phi_grad[static_cast<std::size_t>(i)] !=
        out1.phi_grad[static_cast<std::size_t>(i)] -
            eta * out2.fd_correction[static_cast<std::size_t>(i)])
      bit_exact = false;
    if (out1.fd_correction[static_cast<std::size_t>(i)] != 0.0) bit_exact = false;
    if (out2.fd_correction[static_cast<std::size_t>(i)] != 0.0) correction_active = true;
  }

  // with no coupling the correction is exactly zero and both modes apply
  // the identical update
  HyperToy sep1(55, false), sep2(55, false);
  sep1.step("first", eta);
  BilevelOutcome sep_out = sep2.step("second", eta);
  for (int i = 0; i < 5; ++i) {
    if (sep_out.fd_correction[static_cast<std::size_t>(i)] != 0.0) bit_exact = false;
    if (sep1.phi.value.at(0, i) != sep2.phi.value.at(0, i)) bit_exact = false;
    if (sep1.theta.value.at(0, i) != sep2.theta.value.at(0, i)) bit_exact = false;
  }

  CheckResult out;
  out.pass = rel < 5e-2 && bit_exact && correction_active;
  out.detail = fmt("10-param toy: rel err vs brute-force unroll %.2e (need < 5e-2); "
                   "first == second-with-zero-correction bit-exact: %s",
                   rel, bit_exact ? "yes" : "NO");
  return out;
}

// ---- benchmark configurations ---------------------------------------------

std::string write_two_block_benchmark() {
  SyntheticSpec spec;
  spec.nodes_per_block = 300;
  spec.feature_dim = 32;
  spec.num_classes = 4;
  spec.homophily = {0.02, 0.95};
  spec.hops = {0, 2};
  spec.max_depth = 8;
  spec.avg_degree = 12;
  spec.signal_scale = 8.0;
  spec.seed = 1;
  const std::string path = (scratch_dir() / "two_block_600.json").string();
  if (!file_exists(path)) save_graph(make_synthetic(spec), path);
  return path;
}

RunConfig depth_selection_config(const std::string& dataset) {
  RunConfig cfg;
  cfg.dataset = dataset;
  cfg.backbone = "appnp";
  cfg.alpha = 0.05;
  cfg.depth = 8;
  cfg.hidden = 32;
  cfg.dropout = 0.2;
  cfg.head = "l2q";
  cfg.prior = "geometric:0.8";
  cfg.gamma = 1.0;
  cfg.gamma_final = 0.05;
  cfg.gamma_anneal_epochs = 300;
  cfg.trainer = "vi";
  cfg.bilevel = "first";
  cfg.lr_theta = 0.02;
  cfg.lr_phi = 0.1;
  cfg.kl_weight = 0.1;
  cfg.epochs = 600;
  cfg.patience = 200;
  cfg.seeds = {1};
  cfg.outdir = (scratch_dir() / "runs").string();
  return cfg;
}

// ---- check 5: per-node depth personalization -------------------------------

CheckResult check_personalization() {
  const double t0 = now_seconds();
  RunConfig cfg = depth_selection_config(write_two_block_benchmark());
  RunResult r = run_single(cfg, 1);
  const double secs = now_seconds() - t0;

  const Tensor& post = r.train_result.final_eval.posterior;
  const Graph& g = r.graph;
  int a_total = 0, a_zero = 0, b_total = 0, b_deep = 0;
  for (int i = 0; i < g.num_nodes; ++i) {
    if (!g.test_mask[static_cast<std::size_t>(i)]) continue;
    int arg = 0;
    for (int k = 1; k < post.cols(); ++k)
      if (post.at(i, k) > post.at(i, arg)) arg = k;
    if (i < g.num_nodes / 2) {
      ++a_total;
      if (arg == 0) ++a_zero;
    } else {
      ++b_total;
      if (arg >= 2) ++b_deep;
    }
  }
  const double frac_a = static_cast<double>(a_zero) / a_total;
  const double frac_b = static_cast<double>(b_deep) / b_total;
  CheckResult out;
  out.pass = frac_a >= 0.8 && frac_b >= 0.7 && r.outcome.test_acc >= 0.9 && secs < 60.0;
  out.detail = fmt("block A depth-0 argmax %.1f%% (need >= 80), block B depth>=2 "
                   "%.1f%% (need >= 70), test acc %.1f%% (need >= 90), %.0f s (< 60)",
                   100.0 * frac_a, 100.0 * frac_b, 100.0 * r.outcome.test_acc, secs);
  return out;
}

// ---- check 6: the two-level update shrinks the train/validation gap --------

CheckResult check_generalization_gap() {
  SyntheticSpec spec;
  spec.nodes_per_block = 150;
  spec.feature_dim = 48;
  spec.num_classes = 4;
  spec.homophily = {0.1, 0.9};
  spec.hops = {0, 2};
  spec.max_depth = 8;
  spec.avg_degree = 6;
  spec.signal_scale = 2.0;
  spec.train_frac = 0.15;
  spec.val_frac = 0.25;
  spec.seed = 5;
  const std::string path = (scratch_dir() / "gap_bench_300.json").string();
  if (!file_exists(path)) save_graph(make_synthetic(spec), path);

  RunConfig base;
  base.dataset = path;
  base.backbone = "appnp";
  base.alpha = 0.1;
  base.depth = 8;
  base.hidden = 64;
  base.dropout = 0.0;
  base.weight_decay = 0.0;
  base.head = "l2q";
  base.trainer = "vi";
  base.lr_theta = 0.02;
  base.lr_phi = 0.05;
  base.kl_weight = 0.1;
  base.gamma = 0.67;
  base.epochs = 400;
  base.patience = 400;  // run to the end: we want the converged gap
  base.outdir = (scratch_dir() / "runs").string();

  const int num_seeds = 20;
  auto gaps_for = [&](const std::string& mode) {
    RunConfig cfg = base;
    cfg.bilevel = mode;
    std::vector<double> gaps;
    for (uint64_t seed = 1; seed <= num_seeds; ++seed) {
      RunResult r = run_single(cfg, seed);
      const EpochRecord& last = r.train_result.history.back();
      gaps.push_back(last.val_loss - last.train_loss);
    }
    return gaps;
  };
  std::vector<double> off = gaps_for("off");
  std::vector<double> first = gaps_for("first");

  auto mean = [](const std::vector<double>& xs) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s / xs.size();
  };
  auto var = [&](const std::vector<double>& xs) {
    const double m = mean(xs);
    double s = 0.0;
    for (double x : xs) s += (x - m) * (x - m);
    return s / (xs.size() - 1);
  };
  const double m_off = mean(off), m_first = mean(first);
  const double stderr_diff = std::sqrt(var(off) / num_seeds + var(first) / num_seeds);
  const double z = (m_off - m_first) / stderr_diff;

  CheckResult out;
  out.pass = m_first < m_off && z > 3.0;
  out.detail = fmt("20 seeds: mean gap %.3f (two-level) vs %.3f (joint), z = %.1f "
                   "(need > 3)",
                   m_first, m_off, z);
  return out;
}

// ---- check 7: citation benchmark reproduction ------------------------------

CheckResult check_citation() {
  std::string path = "data/cora.json";
  if (const char* env = std::getenv("L2P_CORA_PATH")) path = env;
  CheckResult out;
  if (!file_exists(path)) {
    out.waived = true;
    out.detail = "dataset container not present at '" + path +
                 "' (set L2P_CORA_PATH); waived per the acceptance terms";
    return out;
  }

  RunConfig cfg;
  cfg.dataset = path;
  cfg.backbone = "appnp";
  cfg.alpha = 0.1;
  cfg.depth = 16;
  cfg.hidden = 64;
  cfg.dropout = 0.5;
  cfg.head = "l2q";
  cfg.trainer = "vi";
  cfg.bilevel = "first";
  cfg.lr_theta = 0.01;
  cfg.lr_phi = 0.01;
  cfg.epochs = 1000;
  cfg.patience = 100;
  cfg.seeds = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  cfg.outdir = (scratch_dir() / "runs").string();

  const double t0 = now_seconds();
  MetricsReport l2q = run(cfg);
  const double l2q_secs = now_seconds() - t0;

  RunConfig fixed = cfg;
  fixed.head = "none";
  const double t1 = now_seconds();
  MetricsReport base = run(fixed);
  const double base_secs = now_seconds() - t1;

  const double l2q_acc = 100.0 * l2q.test_mean;
  const double base_acc = 100.0 * base.test_mean;
  out.pass = l2q_acc >= 82.7 && std::abs(base_acc - 83.3) <= 2.5 &&
             l2q_secs < 600.0 && base_secs < 600.0;
  out.detail = fmt("10 seeds: depth-selection %.1f%% (need >= 82.7), fixed-depth "
                   "%.1f%% (need within 2.5 of 83.3), %.0f s + %.0f s",
                   l2q_acc, base_acc, l2q_secs, base_secs);
  return out;
}

// ---- check 8: depth robustness vs fixed-depth degradation ------------------

CheckResult check_depth_robustness() {
  const double t0 = now_seconds();
  const std::string dataset = write_two_block_benchmark();

  auto l2q_acc = [&](int k) {
    RunConfig cfg = depth_selection_config(dataset);
    cfg.depth = k;
    return run_single(cfg, 1).outcome.test_acc;
  };
  const double deep_sel_8 = l2q_acc(8);
  const double deep_sel_64 = l2q_acc(64);

  auto gcn_acc = [&](int k) {
    RunConfig cfg;
    cfg.dataset = dataset;
    cfg.backbone = "gcn";
    cfg.depth = k;
    cfg.hidden = 32;
    cfg.dropout = 0.2;
    cfg.head = "none";
    cfg.lr_theta = 0.01;
    cfg.epochs = 300;
    cfg.patience = 100;
    cfg.outdir = (scratch_dir() / "runs").string();
    return run_single(cfg, 1).outcome.test_acc;
  };
  const double gcn_2 = gcn_acc(2);
  const double gcn_32 = gcn_acc(32);
  const double secs = now_seconds() - t0;

  const double sel_swing = 100.0 * std::abs(deep_sel_8 - deep_sel_64);
  const double gcn_drop = 100.0 * (gcn_2 - gcn_32);
  CheckResult out;
  out.pass = sel_swing < 2.0 && gcn_drop > 8.0 && secs < 1800.0;
  out.detail = fmt("depth-selection swing K=8..64: %.2f pts (need < 2); plain deep "
                   "stack drop K=2..32: %.1f pts (need > 8); %.0f s (< 1800)",
                   sel_swing, gcn_drop, secs);
  return out;
}

// ---- check 9: shallow preference under heterophily --------------------------

CheckResult check_heterophily_mass() {
  auto one_block = [&](double homophily, uint64_t spec_seed, const char* name) {
    SyntheticSpec spec;
    spec.nodes_per_block = 300;
    spec.feature_dim = 32;
    spec.num_classes = 4;
    spec.homophily = {homophily};
    spec.hops = {0};
    spec.max_depth = 8;
    spec.avg_degree = 10;
    spec.signal_scale = 4.0;
    spec.seed = spec_seed;
    const std::string path = (scratch_dir() / name).string();
    if (!file_exists(path)) save_graph(make_synthetic(spec), path);
    return path;
  };
  auto depth0_mass = [&](const std::string& dataset) {
    RunConfig cfg;
    cfg.dataset = dataset;
    cfg.backbone = "appnp";
    cfg.alpha = 0.1;
    cfg.depth = 8;
    cfg.hidden = 32;
    cfg.dropout = 0.2;
    cfg.head = "l2q";
    cfg.trainer = "vi";
    cfg.bilevel = "first";
    cfg.lr_theta = 0.02;
    cfg.lr_phi = 0.1;
    cfg.kl_weight = 0.1;
    cfg.gamma = 0.67;
    cfg.gamma_final = 0.1;
    cfg.gamma_anneal_epochs = 150;
    cfg.epochs = 300;
    cfg.patience = 100;
    cfg.outdir = (scratch_dir() / "runs").string();
    return run_single(cfg, 1).outcome.average_posterior[0];
  };
  const double hetero = depth0_mass(one_block(0.1, 9, "hetero_300.json"));
  const double homo = depth0_mass(one_block(0.9, 9, "homo_300.json"));
  CheckResult out;
  out.pass = hetero - homo >= 0.15;
  out.detail = fmt("mean depth-0 mass: heterophilic %.3f vs homophilous %.3f, "
                   "difference %.3f (need >= 0.15)",
                   hetero, homo, hetero - homo);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  struct Entry {
    int id;
    const char* name;
    CheckResult (*fn)();
  };
  const std::vector<Entry> entries = {
      {1, "reverse-mode gradients vs central differences", check_gradients},
      {2, "depth distributions: simplex, prefix, divergence", check_simplex},
      {3, "variational bound vs exact marginal", check_elbo_bound},
      {4, "validation hypergradient vs brute-force unroll", check_hypergradient},
      {5, "per-node depth personalization (600-node benchmark)", check_personalization},
      {6, "two-level update shrinks the train/val gap", check_generalization_gap},
      {7, "citation benchmark reproduction", check_citation},
      {8, "depth robustness vs fixed-depth degradation", check_depth_robustness},
      {9, "shallow preference under heterophily", check_heterophily_mass},
  };

  std::vector<int> wanted;
  for (int a = 1; a < argc; ++a) wanted.push_back(std::atoi(argv[a]));

  int failed = 0, waived = 0, passed = 0;
  for (const Entry& e : entries) {
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), e.id) == wanted.end())
      continue;
    CheckResult r;
    try {
      r = e.fn();
    } catch (const std::exception& ex) {
      r.pass = false;
      r.detail = std::string("unexpected error: ") + ex.what();
    }
    const char* status = r.waived ? "WAIVED" : (r.pass ? "PASS" : "FAIL");
    std::printf("[%d] %-52s %s  %s\n", e.id, e.name, status, r.detail.c_str());
    std::fflush(stdout);
    if (r.waived)
      ++waived;
    else if (r.pass)
      ++passed;
    else
      ++failed;
  }
  std::printf("acceptance: %d passed, %d failed, %d waived\n", passed, failed, waived);
  return failed == 0 ? 0 : 1;
}
