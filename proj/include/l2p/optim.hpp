#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "l2p/tape.hpp"
#include "l2p/tensor.hpp"

namespace l2p {

/// value -= lr * (grad + weight_decay * value)
void sgd_step(Parameter& p, double lr, double weight_decay = 0.0);

struct AdamConfig {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // coupled: applied to the gradient, not the value
};

struct AdamState {
  Tensor m;  // first moment
  Tensor v;  // second moment
  long step = 0;
};

/// One Adam update with bias correction. State tensors are allocated on
/// first use and must keep the parameter's shape afterwards.
void adam_step(Parameter& p, AdamState& state, const AdamConfig& cfg);

/// Owns per-parameter optimizer state for a fixed parameter group.
class Optimizer {
 public:
  enum class Kind { sgd, adam };

  Optimizer(Kind kind, std::vector<Parameter*> params, double lr,
            double weight_decay = 0.0);

  /// Parse "sgd" / "adam"; anything else is a ConfigError.
  static Kind parse_kind(const std::string& name);

  void zero_grad();
  /// Apply one update from the gradients currently stored on the parameters.
  void step();

  double lr() const { return lr_; }
  void set_lr(double lr);

 private:
  Kind kind_;
  std::vector<Parameter*> params_;
  std::unordered_map<Parameter*, AdamState> adam_;
  double lr_;
  double weight_decay_;
};

}  // namespace l2p
