#include "l2p/optim.hpp"

#include <cmath>
#include <cstddef>

#include "l2p/errors.hpp"

namespace l2p {

void sgd_step(Parameter& p, double lr, double weight_decay) {
  if (!(lr > 0.0)) throw ConfigError("sgd: learning rate must be positive");
  if (weight_decay < 0.0) throw ConfigError("sgd: weight decay must be >= 0");
  for (std::size_t i = 0; i < p.value.size(); ++i)
    p.value[i] -= lr * (p.grad[i] + weight_decay * p.value[i]);
  if (!p.value.all_finite())
    throw NumericError("sgd produced a non-finite value for " + p.name);
}

void adam_step(Parameter& p, AdamState& st, const AdamConfig& cfg) {
  if (!(cfg.lr > 0.0)) throw ConfigError("adam: learning rate must be positive");
  if (cfg.weight_decay < 0.0) throw ConfigError("adam: weight decay must be >= 0");
  if (cfg.beta1 < 0.0 || cfg.beta1 >= 1.0 || cfg.beta2 < 0.0 || cfg.beta2 >= 1.0)
    throw ConfigError("adam: betas must be in [0, 1)");
  if (!(cfg.eps > 0.0)) throw ConfigError("adam: eps must be positive");
  if (st.m.empty()) {
    st.m = Tensor::zeros_like(p.value);
    st.v = Tensor::zeros_like(p.value);
    st.step = 0;
  }
  if (!st.m.same_shape(p.value))
    throw ContractError("adam: state shape drifted for " + p.name);
  ++st.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < p.value.size(); ++i) {
    const double g = p.grad[i] + cfg.weight_decay * p.value[i];
    st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g;
    st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = st.m[i] / bc1;
    const double vhat = st.v[i] / bc2;
    p.value[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
  if (!p.value.all_finite())
    throw NumericError("adam produced a non-finite value for " + p.name);
}

Optimizer::Optimizer(Kind kind, std::vector<Parameter*> params, double lr,
                     double weight_decay)
    : kind_(kind), params_(std::move(params)), lr_(lr), weight_decay_(weight_decay) {
  if (!(lr_ > 0.0)) throw ConfigError("optimizer: learning rate must be positive");
  if (weight_decay_ < 0.0) throw ConfigError("optimizer: weight decay must be >= 0");
  for (Parameter* p : params_)
    if (p == nullptr) throw ContractError("optimizer: null parameter");
}

Optimizer::Kind Optimizer::parse_kind(const std::string& name) {
  if (name == "sgd") return Kind::sgd;
  if (name == "adam") return Kind::adam;
  throw ConfigError("unknown optimizer '" + name + "' (expected sgd or adam)");
}

void Optimizer::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

void Optimizer::step() {
  if (kind_ == Kind::sgd) {
    for (Parameter* p : params_) sgd_step(*p, lr_, weight_decay_);
    return;
  }
  AdamConfig cfg;
  cfg.lr = lr_;
  cfg.weight_decay = weight_decay_;
  for (Parameter* p : params_) adam_step(*p, adam_[p], cfg);
}

void Optimizer::set_lr(double lr) {
  if (!(lr > 0.0)) throw ConfigError("optimizer: learning rate must be positive");
  lr_ = lr;
}

}  // namespace l2p
