#include "l2p/backbone.hpp"

#include <cmath>

#include "l2p/errors.hpp"

namespace l2p {

void BackboneConfig::validate() const {
  if (kind != "appnp" && kind != "gcn")
    throw ConfigError("unknown backbone kind '" + kind + "' (expected appnp or gcn)");
  if (input_dim < 1) throw ConfigError("backbone input_dim must be positive");
  if (hidden < 1) throw ConfigError("backbone hidden width must be positive");
  if (repr_dim < 1) throw ConfigError("backbone repr_dim must be positive");
  if (num_classes < 2) throw ConfigError("backbone needs at least two classes");
  if (depth < 0) throw ConfigError("backbone depth must be non-negative");
  if (!(alpha > 0.0 && alpha <= 1.0))
    throw ConfigError("appnp alpha must lie in (0, 1]");
  if (!(dropout >= 0.0 && dropout < 1.0))
    throw ConfigError("dropout must lie in [0, 1)");
}

BackboneParams::BackboneParams(const BackboneConfig& config, Rng& rng) : cfg(config) {
  cfg.validate();
  auto mk = [](const std::string& name, Tensor v) {
    return std::make_unique<Parameter>(name, std::move(v));
  };
  if (cfg.kind == "appnp") {
    enc_w1 = mk("enc_w1", Tensor::glorot(cfg.input_dim, cfg.hidden, rng));
    enc_b1 = mk("enc_b1", Tensor(1, cfg.hidden, 0.0));
    enc_w2 = mk("enc_w2", Tensor::glorot(cfg.hidden, cfg.repr_dim, rng));
    enc_b2 = mk("enc_b2", Tensor(1, cfg.repr_dim, 0.0));
  } else {
    gcn_w0 = mk("gcn_w0", Tensor::glorot(cfg.input_dim, cfg.repr_dim, rng));
    gcn_w.reserve(cfg.depth);
    for (int k = 1; k <= cfg.depth; ++k)
      gcn_w.push_back(mk("gcn_w" + std::to_string(k),
                         Tensor::glorot(cfg.repr_dim, cfg.repr_dim, rng)));
  }
  cls_w = mk("cls_w", Tensor::glorot(cfg.repr_dim, cfg.num_classes, rng));
  cls_b = mk("cls_b", Tensor(1, cfg.num_classes, 0.0));
}

std::vector<Parameter*> BackboneParams::all() {
  std::vector<Parameter*> out;
  if (enc_w1) {
    out.push_back(enc_w1.get());
    out.push_back(enc_b1.get());
    out.push_back(enc_w2.get());
    out.push_back(enc_b2.get());
  }
  if (gcn_w0) out.push_back(gcn_w0.get());
  for (auto& w : gcn_w) out.push_back(w.get());
  out.push_back(cls_w.get());
  out.push_back(cls_b.get());
  return out;
}

ValueId encode(Tape& t, const CsrMatrix& x, BackboneParams& p, bool train, Rng* rng) {
  if (p.cfg.kind != "appnp")
    throw ContractError("encode is only defined for the appnp backbone");
  ValueId h = t.sparse_linear(x, t.param(*p.enc_w1), p.cfg.dropout, train, rng);
  h = t.add(h, t.param(*p.enc_b1));
  h = t.relu(h);
  if (train && p.cfg.dropout > 0.0) {
    if (!rng) throw ContractError("encode needs an rng for training-mode dropout");
    h = t.dropout(h, p.cfg.dropout, train, *rng);
  }
  h = t.matmul(h, t.param(*p.enc_w2));
  return t.add(h, t.param(*p.enc_b2));
}

LayerStack propagate_appnp(Tape& t, ValueId h0, const CsrMatrix& adj, int depth,
                           double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0))
    throw ConfigError("appnp alpha must lie in (0, 1]");
  if (depth < 0) throw ConfigError("propagation depth must be non-negative");
  LayerStack s;
  s.h.reserve(depth + 1);
  s.h.push_back(h0);
  for (int k = 1; k <= depth; ++k) {
    ValueId agg = t.sparse_aggregate(adj, s.h.back());
    s.h.push_back(t.add(t.scale(agg, 1.0 - alpha), t.scale(h0, alpha)));
  }
  return s;
}

LayerStack propagate_gcn(Tape& t, const CsrMatrix& x, const CsrMatrix& adj,
                         BackboneParams& p, int depth, bool train, Rng* rng) {
  if (p.cfg.kind != "gcn")
    throw ContractError("propagate_gcn needs gcn backbone parameters");
  if (depth < 0) throw ConfigError("propagation depth must be non-negative");
  if (static_cast<int>(p.gcn_w.size()) != depth)
    throw ConfigError("gcn backbone holds " + std::to_string(p.gcn_w.size()) +
                      " layer weights but depth " + std::to_string(depth) +
                      " was requested");
  if (train && p.cfg.dropout > 0.0 && !rng)
    throw ContractError("propagate_gcn needs an rng for training-mode dropout");
  LayerStack s;
  s.h.reserve(depth + 1);
  s.h.push_back(t.sparse_linear(x, t.param(*p.gcn_w0), p.cfg.dropout, train, rng));
  for (int k = 1; k <= depth; ++k) {
    ValueId h = s.h.back();
    if (train && p.cfg.dropout > 0.0) h = t.dropout(h, p.cfg.dropout, train, *rng);
    ValueId agg = t.sparse_aggregate(adj, h);
    s.h.push_back(t.relu(t.matmul(agg, t.param(*p.gcn_w[k - 1]))));
  }
  return s;
}

LayerStack build_stack(Tape& t, const CsrMatrix& x, const CsrMatrix& adj,
                       BackboneParams& p, bool train, Rng* rng) {
  if (p.cfg.kind == "appnp") {
    ValueId h0 = encode(t, x, p, train, rng);
    return propagate_appnp(t, h0, adj, p.cfg.depth, p.cfg.alpha);
  }
  return propagate_gcn(t, x, adj, p, p.cfg.depth, train, rng);
}

ValueId classify(Tape& t, ValueId h, BackboneParams& p) {
  ValueId logits = t.add(t.matmul(h, t.param(*p.cls_w)), t.param(*p.cls_b));
  return t.row_log_softmax(logits);
}

std::vector<ValueId> classify_stack(Tape& t, const LayerStack& s, BackboneParams& p) {
  std::vector<ValueId> out;
  out.reserve(s.h.size());
  for (ValueId h : s.h) out.push_back(classify(t, h, p));
  return out;
}

PredictMode parse_predict_mode(const std::string& name) {
  if (name == "expected") return PredictMode::expected;
  if (name == "argmax") return PredictMode::argmax;
  throw ConfigError("unknown predict mode '" + name + "' (expected or argmax)");
}

Tensor predict(const std::vector<Tensor>& log_probs, const Tensor& posterior,
               PredictMode mode) {
  if (log_probs.empty()) throw ShapeError("predict needs at least one depth");
  const int n = log_probs[0].rows();
  const int c = log_probs[0].cols();
  const int depths = static_cast<int>(log_probs.size());
  for (const Tensor& lp : log_probs)
    if (lp.rows() != n || lp.cols() != c)
      throw ShapeError("predict: per-depth log-prob shapes disagree");
  if (posterior.rows() != n || posterior.cols() != depths)
    throw ShapeError("predict: posterior is " + posterior.shape_str() +
                     ", expected " + std::to_string(n) + "x" + std::to_string(depths));
  for (int i = 0; i < n; ++i) {
    double sum = 0.0;
    for (int k = 0; k < depths; ++k) sum += posterior.at(i, k);
    if (std::abs(sum - 1.0) > 1e-6)
      throw ContractError("predict: posterior row " + std::to_string(i) +
                          " sums to " + std::to_string(sum));
  }

  Tensor out(n, c, 0.0);
  if (mode == PredictMode::expected) {
    for (int k = 0; k < depths; ++k)
      for (int i = 0; i < n; ++i) {
        const double q = posterior.at(i, k);
        if (q == 0.0) continue;
        for (int j = 0; j < c; ++j)
          out.at(i, j) += q * std::exp(log_probs[k].at(i, j));
      }
  } else {
    for (int i = 0; i < n; ++i) {
      int best = 0;
      for (int k = 1; k < depths; ++k)
        if (posterior.at(i, k) > posterior.at(i, best)) best = k;
      for (int j = 0; j < c; ++j) out.at(i, j) = std::exp(log_probs[best].at(i, j));
    }
  }
  if (!out.all_finite()) throw NumericError("predict produced a non-finite value");
  return out;
}

}  // namespace l2p
