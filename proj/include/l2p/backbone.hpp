#pragma once

#include <memory>
#include <string>
#include <vector>

#include "l2p/rng.hpp"
#include "l2p/sparse.hpp"
#include "l2p/tape.hpp"
#include "l2p/tensor.hpp"

namespace l2p {

struct BackboneConfig {
  std::string kind = "appnp";  // appnp | gcn
  int input_dim = 0;
  int hidden = 64;   // encoder MLP hidden width (appnp only)
  int repr_dim = 64; // representation width D
  int num_classes = 0;
  int depth = 16;      // K, number of propagation steps
  double alpha = 0.1;  // appnp teleport weight, in (0, 1]
  double dropout = 0.5;

  void validate() const;  // ConfigError on out-of-range fields
};

/// Trainable weights for one backbone plus the classifier shared by all
/// depths. Weight matrices are Glorot-uniform, biases zero.
struct BackboneParams {
  BackboneConfig cfg;

  // appnp encoder MLP: input -> hidden -> repr
  std::unique_ptr<Parameter> enc_w1, enc_b1, enc_w2, enc_b2;
  // gcn: linear input projection plus one weight matrix per layer
  std::unique_ptr<Parameter> gcn_w0;
  std::vector<std::unique_ptr<Parameter>> gcn_w;
  // shared classifier repr -> classes
  std::unique_ptr<Parameter> cls_w, cls_b;

  BackboneParams(const BackboneConfig& config, Rng& rng);
  std::vector<Parameter*> all();
};

/// Representations H_0..H_K recorded on one tape.
struct LayerStack {
  std::vector<ValueId> h;
  int depth() const { return static_cast<int>(h.size()) - 1; }
};

/// H_0 = MLP(X) with inverted dropout in training mode. rng may be null
/// when train is false or dropout is 0.
ValueId encode(Tape& t, const CsrMatrix& x, BackboneParams& p, bool train, Rng* rng);

/// H_k = (1-alpha) * adj * H_{k-1} + alpha * H_0. No weights inside.
LayerStack propagate_appnp(Tape& t, ValueId h0, const CsrMatrix& adj, int depth,
                           double alpha);

/// H_0 = X * W_0, then H_k = relu(adj * dropout(H_{k-1}) * W_k).
LayerStack propagate_gcn(Tape& t, const CsrMatrix& x, const CsrMatrix& adj,
                         BackboneParams& p, int depth, bool train, Rng* rng);

/// Dispatch on cfg.kind; returns the full K+1 stack.
LayerStack build_stack(Tape& t, const CsrMatrix& x, const CsrMatrix& adj,
                       BackboneParams& p, bool train, Rng* rng);

/// Per-node class log-probabilities of one depth: row_log_softmax(H W + b).
ValueId classify(Tape& t, ValueId h, BackboneParams& p);

/// classify applied to every depth (the shared per-depth logit cache).
std::vector<ValueId> classify_stack(Tape& t, const LayerStack& s, BackboneParams& p);

enum class PredictMode { expected, argmax };
PredictMode parse_predict_mode(const std::string& name);

/// Blend per-depth class probabilities with a per-node depth distribution.
/// expected: sum_k q_k * softmax_k; argmax: the single best depth per node,
/// ties toward the smaller depth. Returns N x C probabilities.
Tensor predict(const std::vector<Tensor>& log_probs, const Tensor& posterior,
               PredictMode mode);

}  // namespace l2p
