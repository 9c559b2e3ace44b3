#pragma once

#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "l2p/rng.hpp"
#include "l2p/sparse.hpp"
#include "l2p/tensor.hpp"

namespace l2p {

/// A trainable tensor with an accumulated gradient and a stable name.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter(std::string n, Tensor init)
      : name(std::move(n)), value(std::move(init)), grad(Tensor::zeros_like(value)) {}

  void zero_grad() { grad.fill(0.0); }

  Parameter(const Parameter&) = delete;
  Parameter& operator=(const Parameter&) = delete;
};

/// Handle to a value recorded on a Tape.
struct ValueId {
  int idx = -1;
  bool valid() const { return idx >= 0; }
};

/// Records one forward pass and replays adjoints in reverse. One backward
/// pass per tape; a fresh tape is built every training step.
///
/// Every op validates input shapes (ShapeError) and rejects non-finite
/// outputs (NumericError). Ops are appended after their inputs, so reverse
/// creation order is a valid topological order for the backward sweep.
class Tape {
 public:
  /// grad_enabled=false builds a forward-only tape (no adjoint closures);
  /// used for evaluation passes.
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  ValueId constant(Tensor t);
  /// Registers a parameter leaf. Repeat registrations return the same node.
  ValueId param(Parameter& p);

  // ---- operator catalog -------------------------------------------------
  ValueId matmul(ValueId a, ValueId b);
  /// out = adj * h. The sparse operand is fixed (not differentiated) and
  /// must outlive the tape. Bridges to the graph aggregate kernel.
  ValueId sparse_aggregate(const CsrMatrix& adj, ValueId h);
  /// out = x * w with x a fixed sparse matrix; optional inverted dropout is
  /// applied over x's stored non-zeros (identical to dense dropout on x).
  ValueId sparse_linear(const CsrMatrix& x, ValueId w, double dropout_rate = 0.0,
                        bool train = false, Rng* rng = nullptr);
  /// b may match a's shape or be a 1 x C row broadcast over rows.
  ValueId add(ValueId a, ValueId b);
  ValueId sub(ValueId a, ValueId b);
  ValueId scale(ValueId a, double c);
  ValueId add_const(ValueId a, double c);
  ValueId relu(ValueId a);
  ValueId sigmoid(ValueId a);
  ValueId exp(ValueId a);
  /// log(max(x, floor)); the adjoint uses the clamped argument.
  ValueId log_clamped(ValueId a, double floor = 1e-12);
  ValueId row_log_softmax(ValueId a);
  /// Inverted dropout: keep with probability 1-rate, scale kept by
  /// 1/(1-rate). train=false is the identity (no rng draws).
  ValueId dropout(ValueId a, double rate, bool train, Rng& rng);
  ValueId gather_rows(ValueId a, std::vector<int> rows);
  ValueId concat_cols(std::span<const ValueId> cols);
  ValueId column(ValueId a, int k);
  ValueId pointwise_mul(ValueId a, ValueId b);
  /// out[n,c] = m[n,c] * s[n,0] with s an N x 1 column.
  ValueId scale_rows(ValueId m, ValueId s);
  ValueId row_sum(ValueId a);
  ValueId reduce_mean(ValueId a);
  /// Mean of an N x 1 column over the masked rows. Mask must select >= 1 row.
  ValueId masked_mean(ValueId a, const std::vector<bool>& mask);
  /// out[n,0] = logp[n, labels[n]] for labeled rows (labels[n] >= 0), else 0.
  ValueId select_class(ValueId logp, const std::vector<int>& labels);
  /// Mean negative log-likelihood over masked rows; masked rows must be
  /// labeled.
  ValueId nll_loss(ValueId logp, const std::vector<int>& labels,
                   const std::vector<bool>& mask);

  const Tensor& value(ValueId v) const;
  int num_nodes() const { return static_cast<int>(nodes_.size()); }

  /// Accumulates d(loss)/d(param) into every registered Parameter's grad.
  /// loss must be scalar and recorded on this tape; callable once.
  void backward(ValueId loss);

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // allocated on demand during backward
    std::function<void(Tape&)> back;
    Parameter* bound = nullptr;
    bool needs_grad = false;
  };

  ValueId push(Tensor value, bool needs_grad, const char* op);
  Node& node(ValueId v);
  const Node& node(ValueId v) const;
  Tensor& grad_buffer(ValueId v);
  bool wants_grad(ValueId v) const { return node(v).needs_grad; }
  void set_back(ValueId v, std::function<void(Tape&)> fn);
  ValueId binary_broadcast(ValueId a, ValueId b, double sign, const char* opname);

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_nodes_;
  bool grad_enabled_ = true;
  bool backward_done_ = false;
};

/// Max over parameter coordinates of
///   |analytic - central_difference| / (|analytic| + |central| + 1e-12).
/// f must rebuild the same scalar loss on any fresh tape (checked by
/// evaluating it twice; a mismatch raises ContractError, which is also how
/// live dropout inside f gets caught). eps must lie in (0, 1e-2].
double grad_check(const std::function<ValueId(Tape&)>& f,
                  std::span<Parameter* const> params, double eps = 1e-5);

}  // namespace l2p
