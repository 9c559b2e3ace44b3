#include "l2p/trainers.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <memory>

#include "l2p/errors.hpp"

namespace l2p {

ElboBreakdown read_breakdown(const Tape& t, const ElboNodes& nodes) {
  ElboBreakdown out;
  out.total = t.value(nodes.total).scalar();
  out.reconstruction = t.value(nodes.reconstruction).scalar();
  out.kl = t.value(nodes.kl).scalar();
  return out;
}

ElboNodes negative_elbo(Tape& t, const std::vector<ValueId>& log_probs,
                        ValueId selection, const std::vector<int>& labels,
                        const std::vector<bool>& mask, ValueId prior,
                        ElboStyle style, double kl_weight, ValueId q_for_kl) {
  if (log_probs.empty()) throw ShapeError("negative_elbo needs at least one depth");
  const Tensor& sel = t.value(selection);
  const int depths = static_cast<int>(log_probs.size());
  if (sel.cols() != depths)
    throw ShapeError("selection has " + std::to_string(sel.cols()) +
                     " columns for " + std::to_string(depths) + " depths");

  ValueId per_node;  // N x 1 log-likelihood of each node's own label
  if (style == ElboStyle::sampled) {
    // log of the blended class probability, log sum_k sel_k p_k(y)
    ValueId mix;
    for (int k = 0; k < depths; ++k) {
      ValueId pk = t.exp(t.select_class(log_probs[k], labels));
      ValueId term = t.pointwise_mul(pk, t.column(selection, k));
      mix = k == 0 ? term : t.add(mix, term);
    }
    per_node = t.log_clamped(mix, 1e-12);
  } else {
    // exact expectation, sum_k sel_k log p_k(y)
    ValueId acc;
    for (int k = 0; k < depths; ++k) {
      ValueId lk = t.select_class(log_probs[k], labels);
      ValueId term = t.pointwise_mul(lk, t.column(selection, k));
      acc = k == 0 ? term : t.add(acc, term);
    }
    per_node = acc;
  }
  ValueId recon = t.masked_mean(per_node, mask);
  ValueId q = q_for_kl.valid() ? q_for_kl : selection;
  ValueId kl = kl_to_prior(t, q, prior, mask);
  if (kl_weight != 1.0) kl = t.scale(kl, kl_weight);
  return {t.sub(kl, recon), recon, kl};
}

ElboNodes build_loss(Tape& t, TrainContext& ctx, const LossSpec& spec) {
  if (!ctx.graph || !ctx.features || !ctx.adj || !ctx.backbone)
    throw ContractError("build_loss needs a fully wired context");
  if (!spec.mask) throw ContractError("build_loss needs a node mask");
  const Graph& g = *ctx.graph;

  LayerStack stack =
      build_stack(t, *ctx.features, *ctx.adj, *ctx.backbone, spec.train_mode,
                  spec.dropout_rng);
  std::vector<ValueId> logp = classify_stack(t, stack, *ctx.backbone);

  if (!ctx.head && !spec.fixed_q) {
    // fixed-depth baseline: plain nll at the final depth
    ValueId nll = t.nll_loss(logp.back(), g.labels, *spec.mask);
    return {nll, t.scale(nll, -1.0), t.constant(Tensor(1, 1, 0.0))};
  }

  ValueId prior = t.constant(ctx.prior);
  if (spec.fixed_q) {
    ValueId target = t.constant(*spec.fixed_q);
    return negative_elbo(t, logp, target, g.labels, *spec.mask, prior,
                         ElboStyle::expected, ctx.kl_weight, target);
  }
  ValueId q = head_posterior(t, stack, *ctx.head);
  if (spec.style == ElboStyle::expected)
    return negative_elbo(t, logp, q, g.labels, *spec.mask, prior,
                         ElboStyle::expected, ctx.kl_weight, q);
  if (!spec.gumbel_noise)
    throw ContractError("a sampled loss needs frozen gumbel noise");
  ValueId sample = gumbel_softmax_sample(t, q, ctx.gamma, *spec.gumbel_noise);
  return negative_elbo(t, logp, sample, g.labels, *spec.mask, prior,
                       ElboStyle::sampled, ctx.kl_weight, q);
}

EvalOutputs evaluate(TrainContext& ctx) {
  Tape t(false);
  LayerStack stack =
      build_stack(t, *ctx.features, *ctx.adj, *ctx.backbone, false, nullptr);
  std::vector<ValueId> logp = classify_stack(t, stack, *ctx.backbone);
  EvalOutputs out;
  out.log_probs.reserve(logp.size());
  for (ValueId id : logp) out.log_probs.push_back(t.value(id));
  const int n = ctx.graph->num_nodes;
  const int depths = static_cast<int>(logp.size());
  if (ctx.head) {
    out.posterior = t.value(head_posterior(t, stack, *ctx.head));
  } else {
    out.posterior = Tensor(n, depths, 0.0);
    for (int i = 0; i < n; ++i) out.posterior.at(i, depths - 1) = 1.0;
  }
  return out;
}

Tensor per_depth_label_loglik(const std::vector<Tensor>& log_probs,
                              const std::vector<int>& labels) {
  if (log_probs.empty()) throw ShapeError("need at least one depth");
  const int n = log_probs[0].rows();
  const int depths = static_cast<int>(log_probs.size());
  if (static_cast<int>(labels.size()) != n)
    throw ShapeError("labels do not match the log-prob rows");
  Tensor out(n, depths, 0.0);
  for (int k = 0; k < depths; ++k)
    for (int i = 0; i < n; ++i)
      if (labels[i] >= 0) out.at(i, k) = log_probs[k].at(i, labels[i]);
  return out;
}

ElboBreakdown eval_elbo(const std::vector<Tensor>& log_probs, const Tensor& posterior,
                        const Tensor& prior, const std::vector<int>& labels,
                        const std::vector<bool>& mask, double kl_weight) {
  const int n = posterior.rows();
  const int depths = static_cast<int>(log_probs.size());
  if (posterior.cols() != depths)
    throw ShapeError("posterior columns do not match the depth count");
  double recon = 0.0;
  int count = 0;
  for (int i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    if (labels[i] < 0) throw ContractError("masked node without a label");
    double row = 0.0;
    for (int k = 0; k < depths; ++k)
      row += posterior.at(i, k) * log_probs[k].at(i, labels[i]);
    recon += row;
    ++count;
  }
  if (count == 0) throw ContractError("eval_elbo needs at least one masked node");
  recon /= count;
  ElboBreakdown out;
  out.reconstruction = recon;
  out.kl = kl_weight == 0.0 ? 0.0 : kl_weight * kl_rows_mean(posterior, prior, mask);
  out.total = -out.reconstruction + out.kl;
  return out;
}

double accuracy(const Tensor& predictions, const std::vector<int>& labels,
                const std::vector<bool>& mask) {
  const int n = predictions.rows(), c = predictions.cols();
  if (static_cast<int>(labels.size()) != n || static_cast<int>(mask.size()) != n)
    throw ShapeError("labels/mask do not match the prediction rows");
  int correct = 0, total = 0;
  for (int i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    if (labels[i] < 0 || labels[i] >= c)
      throw ContractError("masked node " + std::to_string(i) +
                          " lacks a valid label");
    int best = 0;
    for (int j = 1; j < c; ++j)
      if (predictions.at(i, j) > predictions.at(i, best)) best = j;
    if (best == labels[i]) ++correct;
    ++total;
  }
  if (total == 0) throw ContractError("accuracy needs a nonempty mask");
  return static_cast<double>(correct) / total;
}

Tensor em_e_step(const Tensor& loglik, const std::vector<bool>& mask,
                 const Tensor* prior) {
  const int n = loglik.rows(), depths = loglik.cols();
  if (static_cast<int>(mask.size()) != n)
    throw ShapeError("mask does not match the log-likelihood rows");
  if (prior) {
    const bool broadcast = prior->rows() == 1;
    if (prior->cols() != depths || (!broadcast && prior->rows() != n))
      throw ShapeError("prior is " + prior->shape_str() +
                       " but the log-likelihoods are " + loglik.shape_str());
  }
  auto prior_at = [&](int i, int k) {
    if (!prior) return 1.0 / depths;
    return prior->at(prior->rows() == 1 ? 0 : i, k);
  };
  Tensor out(n, depths, 0.0);
  std::vector<double> scores(depths);
  for (int i = 0; i < n; ++i) {
    if (!mask[i]) {
      for (int k = 0; k < depths; ++k) out.at(i, k) = prior_at(i, k);
      continue;
    }
    double best = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < depths; ++k) {
      const double l = loglik.at(i, k);
      if (std::isnan(l) || l == std::numeric_limits<double>::infinity())
        throw NumericError("e-step row " + std::to_string(i) +
                           " has a non-finite log-likelihood");
      scores[k] = l + std::log(std::max(prior_at(i, k), 1e-12));
      best = std::max(best, scores[k]);
    }
    if (!std::isfinite(best))
      throw NumericError("e-step row " + std::to_string(i) +
                         " has no finite likelihood");
    double denom = 0.0;
    for (int k = 0; k < depths; ++k) denom += std::exp(scores[k] - best);
    for (int k = 0; k < depths; ++k) out.at(i, k) = std::exp(scores[k] - best) / denom;
  }
  return out;
}

namespace {

void zero_grads(std::span<Parameter* const> params) {
  for (Parameter* p : params) p->zero_grad();
}

void zero_context_grads(TrainContext& ctx) {
  for (Parameter* p : ctx.backbone->all()) p->zero_grad();
  if (ctx.head)
    for (Parameter* p : ctx.head->all()) p->zero_grad();
}

/// Cross-entropy from a frozen target to the head posterior, on a fresh
/// deterministic stack. Returns the scalar node.
ValueId build_head_cross_entropy(Tape& t, TrainContext& ctx, const Tensor& target,
                                 const std::vector<bool>& mask) {
  LayerStack stack =
      build_stack(t, *ctx.features, *ctx.adj, *ctx.backbone, false, nullptr);
  ValueId q = head_posterior(t, stack, *ctx.head);
  ValueId logq = t.log_clamped(q, 1e-12);
  ValueId per = t.row_sum(t.pointwise_mul(t.constant(target), logq));
  return t.scale(t.masked_mean(per, mask), -1.0);
}

}  // namespace

PhiFitStats em_fit_phi(TrainContext& ctx, const Tensor& target,
                       const std::vector<bool>& mask, int steps, Optimizer& phi_opt) {
  if (!ctx.head) throw ContractError("head projection needs a head");
  if (steps < 0) throw ConfigError("projection step count must be non-negative");
  if (target.rows() != ctx.graph->num_nodes)
    throw ShapeError("target rows do not match the graph");
  PhiFitStats st;
  for (int step = 0; step < steps; ++step) {
    Tape t;
    ValueId ce = build_head_cross_entropy(t, ctx, target, mask);
    if (step == 0) st.first = t.value(ce).scalar();
    zero_context_grads(ctx);
    t.backward(ce);
    phi_opt.step();
  }
  Tape t(false);
  st.last = t.value(build_head_cross_entropy(t, ctx, target, mask)).scalar();
  if (steps == 0) st.first = st.last;
  return st;
}

PhiFitStats em_fit_phi(TrainContext& ctx, const Tensor& target,
                       const std::vector<bool>& mask, int steps, double lr) {
  if (!ctx.head) throw ContractError("head projection needs a head");
  Optimizer opt(Optimizer::Kind::sgd, ctx.head->all(), lr);
  return em_fit_phi(ctx, target, mask, steps, opt);
}

ElboBreakdown em_m_step_theta(TrainContext& ctx, const Tensor& q_star,
                              const std::vector<bool>& mask, double lr) {
  if (lr < 0.0) throw ConfigError("m-step learning rate must be non-negative");
  Tape t;
  LossSpec spec;
  spec.mask = &mask;
  spec.style = ElboStyle::expected;
  spec.fixed_q = &q_star;
  spec.train_mode = false;
  ElboNodes nodes = build_loss(t, ctx, spec);
  ElboBreakdown bd = read_breakdown(t, nodes);
  zero_context_grads(ctx);
  t.backward(nodes.total);
  if (lr > 0.0) {
    for (Parameter* p : ctx.backbone->all()) {
      for (size_t i = 0; i < p->value.size(); ++i) p->value[i] -= lr * p->grad[i];
      if (!p->value.all_finite())
        throw NumericError("m-step produced a non-finite value in " + p->name);
    }
  }
  return bd;
}

ElboBreakdown vi_step(TrainContext& ctx, const std::vector<bool>& mask,
                      Optimizer& theta_opt, Optimizer& phi_opt, Rng& step_rng) {
  if (!ctx.head) throw ContractError("vi_step needs a head");
  Rng noise_rng = step_rng.child(1);
  Rng drop_rng = step_rng.child(2);
  Tensor noise =
      draw_gumbel_noise(ctx.graph->num_nodes, ctx.head->depth, noise_rng);
  Tape t;
  LossSpec spec;
  spec.mask = &mask;
  spec.style = ElboStyle::sampled;
  spec.gumbel_noise = &noise;
  spec.train_mode = true;
  spec.dropout_rng = &drop_rng;
  ElboNodes nodes = build_loss(t, ctx, spec);
  ElboBreakdown bd = read_breakdown(t, nodes);
  zero_context_grads(ctx);
  t.backward(nodes.total);
  theta_opt.step();
  phi_opt.step();
  return bd;
}

// ---- flat parameter/gradient views ----------------------------------------

std::vector<double> collect_grads(std::span<Parameter* const> params) {
  std::vector<double> out;
  for (const Parameter* p : params)
    out.insert(out.end(), p->grad.data(), p->grad.data() + p->grad.size());
  return out;
}

void set_grads(std::span<Parameter* const> params, const std::vector<double>& g) {
  size_t at = 0;
  for (Parameter* p : params) {
    if (at + p->grad.size() > g.size())
      throw ShapeError("gradient vector too short for the parameter list");
    for (size_t i = 0; i < p->grad.size(); ++i) p->grad[i] = g[at + i];
    at += p->grad.size();
  }
  if (at != g.size())
    throw ShapeError("gradient vector does not match the parameter list");
}

std::vector<double> snapshot_values(std::span<Parameter* const> params) {
  std::vector<double> out;
  for (const Parameter* p : params)
    out.insert(out.end(), p->value.data(), p->value.data() + p->value.size());
  return out;
}

void restore_values(std::span<Parameter* const> params, const std::vector<double>& v) {
  size_t at = 0;
  for (Parameter* p : params) {
    if (at + p->value.size() > v.size())
      throw ShapeError("value vector too short for the parameter list");
    for (size_t i = 0; i < p->value.size(); ++i) p->value[i] = v[at + i];
    at += p->value.size();
  }
  if (at != v.size())
    throw ShapeError("value vector does not match the parameter list");
}

void perturb_values(std::span<Parameter* const> params, double eps,
                    const std::vector<double>& v) {
  size_t at = 0;
  for (Parameter* p : params) {
    if (at + p->value.size() > v.size())
      throw ShapeError("direction vector too short for the parameter list");
    for (size_t i = 0; i < p->value.size(); ++i) p->value[i] += eps * v[at + i];
    at += p->value.size();
  }
  if (at != v.size())
    throw ShapeError("direction vector does not match the parameter list");
}

std::vector<double> hypergrad_fd(const LossFn& train_loss,
                                 std::span<Parameter* const> theta,
                                 std::span<Parameter* const> phi,
                                 const std::vector<double>& v, double eps) {
  if (!(eps > 0.0)) throw ConfigError("finite-difference step must be positive");
  size_t theta_size = 0;
  for (const Parameter* p : theta) theta_size += p->value.size();
  if (v.size() != theta_size)
    throw ShapeError("direction vector does not match the theta parameters");
  for (double x : v)
    if (!std::isfinite(x)) throw NumericError("non-finite probe direction");

  auto phi_grad_at_current = [&]() {
    zero_grads(theta);
    zero_grads(phi);
    Tape t;
    t.backward(train_loss(t));
    return collect_grads(phi);
  };

  std::vector<double> base = phi_grad_at_current();
  std::vector<double> saved = snapshot_values(theta);
  perturb_values(theta, eps, v);
  std::vector<double> probe = phi_grad_at_current();
  restore_values(theta, saved);

  std::vector<double> out(base.size());
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = (probe[i] - base[i]) / eps;
    if (!std::isfinite(out[i]))
      throw NumericError("hypergradient probe produced a non-finite value "
                         "(finite-difference step too small?)");
  }
  return out;
}

std::string BilevelConfig::parse_mode(const std::string& name) {
  if (name == "off") return "off";
  if (name == "first" || name == "first_order") return "first";
  if (name == "second" || name == "second_order") return "second";
  throw ConfigError("unknown bilevel mode '" + name +
                    "' (expected off, first or second)");
}

BilevelOutcome bilevel_step(const LossFn& train_loss, const LossFn& val_loss,
                            std::span<Parameter* const> theta,
                            std::span<Parameter* const> phi,
                            const BilevelConfig& cfg, Optimizer& theta_opt,
                            Optimizer& phi_opt) {
  const std::string mode = BilevelConfig::parse_mode(cfg.mode);
  BilevelOutcome out;

  if (mode == "off") {
    zero_grads(theta);
    zero_grads(phi);
    Tape t;
    ValueId l = train_loss(t);
    out.train_loss = t.value(l).scalar();
    out.val_loss = std::numeric_limits<double>::quiet_NaN();
    t.backward(l);
    out.phi_grad = collect_grads(phi);
    out.fd_correction.assign(out.phi_grad.size(), 0.0);
    theta_opt.step();
    phi_opt.step();
    return out;
  }

  if (!(cfg.eta_theta > 0.0))
    throw ConfigError("bilevel eta_theta must be positive");

  // inner level: theta steps on the train loss
  zero_grads(theta);
  zero_grads(phi);
  Tape t;
  ValueId l = train_loss(t);
  out.train_loss = t.value(l).scalar();
  t.backward(l);
  std::vector<double> theta_old = snapshot_values(theta);
  theta_opt.step();

  // outer level: direct val gradient at the updated theta
  zero_grads(theta);
  zero_grads(phi);
  Tape tv;
  ValueId lv = val_loss(tv);
  out.val_loss = tv.value(lv).scalar();
  tv.backward(lv);
  std::vector<double> v = collect_grads(theta);
  std::vector<double> direct = collect_grads(phi);

  out.fd_correction.assign(direct.size(), 0.0);
  if (mode == "second") {
    double norm_sq = 0.0;
    for (double x : v) norm_sq += x * x;
    const double norm = std::sqrt(norm_sq);
    out.fd_eps = norm > 0.0 ? std::clamp(0.01 / norm, 1e-8, 1e-2) : 1e-2;
    std::vector<double> theta_new = snapshot_values(theta);
    restore_values(theta, theta_old);  // probe around the pre-step point
    out.fd_correction = hypergrad_fd(train_loss, theta, phi, v, out.fd_eps);
    restore_values(theta, theta_new);
  }

  out.phi_grad.resize(direct.size());
  for (size_t i = 0; i < direct.size(); ++i) {
    out.phi_grad[i] = direct[i] - cfg.eta_theta * out.fd_correction[i];
    if (!std::isfinite(out.phi_grad[i]))
      throw NumericError("bilevel head gradient is non-finite");
  }
  set_grads(phi, out.phi_grad);
  phi_opt.step();
  return out;
}

// ---- training loop ----------------------------------------------------------

void TrainConfig::validate() const {
  if (trainer != "vi" && trainer != "em")
    throw ConfigError("unknown trainer '" + trainer + "' (expected vi or em)");
  BilevelConfig::parse_mode(bilevel);
  Optimizer::parse_kind(optimizer);
  if (!(lr_theta > 0.0)) throw ConfigError("lr_theta must be positive");
  if (!(lr_phi > 0.0)) throw ConfigError("lr_phi must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (patience < 1) throw ConfigError("patience must be at least 1");
  if (phi_steps < 0) throw ConfigError("phi_steps must be non-negative");
  if (kl_weight < 0.0) throw ConfigError("kl_weight must be non-negative");
  if (gamma_anneal_epochs < 0)
    throw ConfigError("gamma_anneal_epochs must be non-negative");
  if (gamma_anneal_epochs > 0 && !(gamma_final > 0.0))
    throw ConfigError("annealing needs a positive gamma_final");
}

TrainResult train(TrainContext& ctx, const TrainConfig& cfg, Rng& rng) {
  cfg.validate();
  const Graph& g = *ctx.graph;
  const std::string mode =
      ctx.head ? BilevelConfig::parse_mode(cfg.bilevel) : "off";
  if (cfg.epochs > 0) {
    if (g.count(g.train_mask) == 0) throw DatasetError("training mask is empty");
    if (g.count(g.val_mask) == 0)
      throw ConfigError("validation mask is empty (needed for early stopping "
                        "and the outer objective)");
  }
  if (ctx.head && cfg.trainer == "em" && mode == "second")
    throw ConfigError("second-order hypergradients need the vi trainer");

  std::vector<Parameter*> theta = ctx.backbone->all();
  std::vector<Parameter*> phi = ctx.head ? ctx.head->all() : std::vector<Parameter*>{};
  std::vector<Parameter*> everything = theta;
  everything.insert(everything.end(), phi.begin(), phi.end());

  const Optimizer::Kind kind = Optimizer::parse_kind(cfg.optimizer);
  Optimizer theta_opt(kind, theta, cfg.lr_theta, cfg.weight_decay);
  std::unique_ptr<Optimizer> phi_opt;
  if (ctx.head)
    phi_opt = std::make_unique<Optimizer>(kind, phi, cfg.lr_phi, cfg.weight_decay);

  BilevelConfig bcfg;
  bcfg.mode = mode;
  bcfg.eta_theta = cfg.lr_theta;

  const bool has_test = g.count(g.test_mask) > 0;
  const double kl_w_eval = ctx.head ? ctx.kl_weight : 0.0;
  const double gamma_base = ctx.gamma;

  TrainResult res;
  double best = -1.0;
  std::vector<double> best_values;
  int since_best = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    if (cfg.gamma_anneal_epochs > 0) {
      const double progress =
          std::min(1.0, static_cast<double>(epoch) / cfg.gamma_anneal_epochs);
      ctx.gamma = gamma_base + progress * (cfg.gamma_final - gamma_base);
    }
    Rng step_rng = rng.child(static_cast<uint64_t>(epoch) + 1);

    if (!ctx.head) {
      Rng drop_rng = step_rng.child(2);
      Tape t;
      LossSpec spec;
      spec.mask = &g.train_mask;
      spec.train_mode = true;
      spec.dropout_rng = &drop_rng;
      ElboNodes nodes = build_loss(t, ctx, spec);
      zero_context_grads(ctx);
      t.backward(nodes.total);
      theta_opt.step();
    } else if (cfg.trainer == "em") {
      EvalOutputs ev = evaluate(ctx);
      Tensor loglik = per_depth_label_loglik(ev.log_probs, g.labels);
      Tensor q_train = em_e_step(loglik, g.train_mask, &ctx.prior);
      if (mode == "off") {
        em_fit_phi(ctx, q_train, g.train_mask, cfg.phi_steps, *phi_opt);
      } else {
        // the head projection targets the validation posterior
        Tensor q_val = em_e_step(loglik, g.val_mask, &ctx.prior);
        em_fit_phi(ctx, q_val, g.val_mask, cfg.phi_steps, *phi_opt);
      }
      em_m_step_theta(ctx, q_train, g.train_mask, cfg.lr_theta);
    } else if (mode == "off") {
      vi_step(ctx, g.train_mask, theta_opt, *phi_opt, step_rng);
    } else {
      Rng noise_rng = step_rng.child(1);
      Tensor noise =
          draw_gumbel_noise(g.num_nodes, ctx.head->depth, noise_rng);
      const uint64_t drop_seed = step_rng.child(2).seed();
      auto make_loss = [&ctx, noise, drop_seed](const std::vector<bool>* m) {
        return [&ctx, noise, drop_seed, m](Tape& t) {
          Rng drop(drop_seed);
          LossSpec spec;
          spec.mask = m;
          spec.style = ElboStyle::sampled;
          spec.gumbel_noise = &noise;
          spec.train_mode = true;
          spec.dropout_rng = &drop;
          return build_loss(t, ctx, spec).total;
        };
      };
      bilevel_step(make_loss(&g.train_mask), make_loss(&g.val_mask), theta, phi,
                   bcfg, theta_opt, *phi_opt);
    }

    EvalOutputs ev = evaluate(ctx);
    Tensor preds = predict(ev.log_probs, ev.posterior, PredictMode::expected);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.val_acc = accuracy(preds, g.labels, g.val_mask);
    rec.test_acc = has_test ? accuracy(preds, g.labels, g.test_mask) : 0.0;
    rec.train_loss = eval_elbo(ev.log_probs, ev.posterior, ctx.prior, g.labels,
                               g.train_mask, kl_w_eval)
                         .total;
    rec.val_loss = eval_elbo(ev.log_probs, ev.posterior, ctx.prior, g.labels,
                             g.val_mask, kl_w_eval)
                       .total;
    rec.seconds = std::chrono::duration<double>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    res.history.push_back(rec);

    if (rec.val_acc > best) {
      best = rec.val_acc;
      res.best_epoch = epoch;
      best_values = snapshot_values(everything);
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }

  ctx.gamma = gamma_base;
  if (!best_values.empty()) restore_values(everything, best_values);
  res.best_val_acc = best < 0.0 ? 0.0 : best;
  res.final_eval = evaluate(ctx);
  if (g.count(g.train_mask) > 0)
    res.train_loss = eval_elbo(res.final_eval.log_probs, res.final_eval.posterior,
                               ctx.prior, g.labels, g.train_mask, kl_w_eval)
                         .total;
  if (g.count(g.val_mask) > 0)
    res.val_loss = eval_elbo(res.final_eval.log_probs, res.final_eval.posterior,
                             ctx.prior, g.labels, g.val_mask, kl_w_eval)
                       .total;
  if (has_test) {
    Tensor preds = predict(res.final_eval.log_probs, res.final_eval.posterior,
                           PredictMode::expected);
    res.test_acc = accuracy(preds, g.labels, g.test_mask);
  }
  return res;
}

}  // namespace l2p
