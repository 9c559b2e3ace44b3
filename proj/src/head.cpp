#include "l2p/head.hpp"

#include <cmath>

#include "l2p/errors.hpp"

namespace l2p {

HeadParams::HeadParams(const std::string& kind_, int depth_, int repr_dim, bool bias_,
                       Rng& rng)
    : kind(kind_), depth(depth_), bias(bias_) {
  if (kind != "l2s" && kind != "l2q")
    throw ConfigError("unknown head kind '" + kind + "' (expected l2s or l2q)");
  if (depth < 0) throw ConfigError("head depth must be non-negative");
  if (repr_dim < 1) throw ConfigError("head repr_dim must be positive");
  const int count = kind == "l2s" ? depth + 1 : depth;
  w.reserve(count);
  for (int k = 0; k < count; ++k) {
    w.push_back(std::make_unique<Parameter>("head_w" + std::to_string(k),
                                            Tensor::glorot(repr_dim, 1, rng)));
    if (bias)
      b.push_back(std::make_unique<Parameter>("head_b" + std::to_string(k),
                                              Tensor(1, 1, 0.0)));
  }
}

std::vector<Parameter*> HeadParams::all() {
  std::vector<Parameter*> out;
  for (auto& p : w) out.push_back(p.get());
  for (auto& p : b) out.push_back(p.get());
  return out;
}

Tensor uniform_prior(int depth, int num_nodes) {
  if (depth < 0) throw ConfigError("prior depth must be non-negative");
  if (num_nodes < 1) throw ConfigError("prior needs at least one node");
  return Tensor(num_nodes, depth + 1, 1.0 / (depth + 1));
}

Tensor geometric_prior(int depth, int num_nodes, double ratio) {
  if (depth < 0) throw ConfigError("prior depth must be non-negative");
  if (num_nodes < 1) throw ConfigError("prior needs at least one node");
  if (!(ratio > 0.0 && ratio <= 1.0))
    throw ConfigError("geometric prior ratio must lie in (0, 1]");
  std::vector<double> row(depth + 1);
  double weight = 1.0, total = 0.0;
  for (int k = 0; k <= depth; ++k) {
    row[k] = weight;
    total += weight;
    weight *= ratio;
  }
  Tensor out(num_nodes, depth + 1, 0.0);
  for (int i = 0; i < num_nodes; ++i)
    for (int k = 0; k <= depth; ++k) out.at(i, k) = row[k] / total;
  return out;
}

namespace {

/// One scalar score per node from the depth-k representation.
ValueId depth_score(Tape& t, ValueId h, HeadParams& p, int k) {
  ValueId s = t.matmul(h, t.param(*p.w[k]));
  if (p.bias) s = t.add(s, t.param(*p.b[k]));
  return s;
}

}  // namespace

ValueId l2s_logits(Tape& t, const LayerStack& s, HeadParams& p) {
  if (p.kind != "l2s") throw ContractError("l2s_logits needs an l2s head");
  if (s.depth() != p.depth)
    throw ShapeError("head sized for depth " + std::to_string(p.depth) +
                     " but the stack has depth " + std::to_string(s.depth()));
  std::vector<ValueId> cols;
  cols.reserve(p.depth + 1);
  for (int k = 0; k <= p.depth; ++k) cols.push_back(depth_score(t, s.h[k], p, k));
  return t.concat_cols(cols);
}

ValueId l2s_posterior(Tape& t, const LayerStack& s, HeadParams& p) {
  return t.exp(t.row_log_softmax(l2s_logits(t, s, p)));
}

ValueId l2q_quit(Tape& t, const LayerStack& s, HeadParams& p) {
  if (p.kind != "l2q") throw ContractError("l2q_quit needs an l2q head");
  if (p.depth < 1) throw ContractError("quit gates need depth >= 1");
  if (s.depth() != p.depth)
    throw ShapeError("head sized for depth " + std::to_string(p.depth) +
                     " but the stack has depth " + std::to_string(s.depth()));
  std::vector<ValueId> cols;
  cols.reserve(p.depth);
  for (int k = 0; k < p.depth; ++k)
    cols.push_back(t.sigmoid(depth_score(t, s.h[k], p, k)));
  return t.concat_cols(cols);
}

ValueId stick_break(Tape& t, ValueId quit) {
  const Tensor& q = t.value(quit);
  const int n = q.rows(), k_max = q.cols();
  std::vector<ValueId> cols;
  cols.reserve(k_max + 1);
  ValueId prefix = t.constant(Tensor(n, 1, 1.0));
  for (int k = 0; k < k_max; ++k) {
    ValueId a = t.column(quit, k);
    cols.push_back(t.pointwise_mul(a, prefix));
    prefix = t.pointwise_mul(prefix, t.add_const(t.scale(a, -1.0), 1.0));
  }
  cols.push_back(prefix);
  return t.concat_cols(cols);
}

Tensor stick_break_values(const Tensor& quit) {
  const int n = quit.rows(), k_max = quit.cols();
  Tensor out(n, k_max + 1, 0.0);
  for (int i = 0; i < n; ++i) {
    double prefix = 1.0;
    for (int k = 0; k < k_max; ++k) {
      out.at(i, k) = quit.at(i, k) * prefix;
      prefix *= 1.0 - quit.at(i, k);
    }
    out.at(i, k_max) = prefix;
  }
  return out;
}

ValueId head_posterior(Tape& t, const LayerStack& s, HeadParams& p) {
  if (p.kind == "l2s") return l2s_posterior(t, s, p);
  if (p.depth == 0) return t.constant(Tensor(t.value(s.h[0]).rows(), 1, 1.0));
  return stick_break(t, l2q_quit(t, s, p));
}

Tensor draw_gumbel_noise(int num_nodes, int depth, Rng& rng) {
  if (num_nodes < 1) throw ConfigError("gumbel noise needs at least one node");
  if (depth < 0) throw ConfigError("gumbel noise depth must be non-negative");
  Tensor g(num_nodes, depth + 1, 0.0);
  for (size_t i = 0; i < g.size(); ++i) g[i] = rng.gumbel();
  return g;
}

ValueId gumbel_softmax_sample(Tape& t, ValueId posterior, double gamma,
                              const Tensor& noise) {
  if (!(gamma > 0.0)) throw ConfigError("gumbel temperature must be positive");
  const Tensor& q = t.value(posterior);
  if (q.rows() != noise.rows() || q.cols() != noise.cols())
    throw ShapeError("gumbel noise is " + noise.shape_str() + " but the posterior is " +
                     q.shape_str());
  ValueId perturbed = t.add(t.log_clamped(posterior, 1e-12), t.constant(noise));
  return t.exp(t.row_log_softmax(t.scale(perturbed, 1.0 / gamma)));
}

ValueId gumbel_softmax_sample(Tape& t, ValueId posterior, double gamma, Rng& rng) {
  const Tensor& q = t.value(posterior);
  return gumbel_softmax_sample(t, posterior, gamma,
                               draw_gumbel_noise(q.rows(), q.cols() - 1, rng));
}

ValueId kl_to_prior(Tape& t, ValueId posterior, ValueId prior,
                    const std::vector<bool>& mask) {
  ValueId diff = t.sub(t.log_clamped(posterior, 1e-12), t.log_clamped(prior, 1e-12));
  ValueId per_node = t.row_sum(t.pointwise_mul(posterior, diff));
  return t.masked_mean(per_node, mask);
}

double kl_rows_mean(const Tensor& posterior, const Tensor& prior,
                    const std::vector<bool>& mask) {
  const int n = posterior.rows(), c = posterior.cols();
  const bool broadcast = prior.rows() == 1;
  if (prior.cols() != c || (!broadcast && prior.rows() != n))
    throw ShapeError("prior is " + prior.shape_str() + " but the posterior is " +
                     posterior.shape_str());
  if (static_cast<int>(mask.size()) != n)
    throw ShapeError("mask length does not match the posterior");
  double total = 0.0;
  int count = 0;
  for (int i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    double row = 0.0;
    for (int k = 0; k < c; ++k) {
      const double q = posterior.at(i, k);
      const double p = prior.at(broadcast ? 0 : i, k);
      row += q * (std::log(std::max(q, 1e-12)) - std::log(std::max(p, 1e-12)));
    }
    total += row;
    ++count;
  }
  if (count == 0) throw ContractError("kl_rows_mean needs at least one selected row");
  return total / count;
}

}  // namespace l2p
