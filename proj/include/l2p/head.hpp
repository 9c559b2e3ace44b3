#pragma once

#include <memory>
#include <string>
#include <vector>

#include "l2p/backbone.hpp"
#include "l2p/rng.hpp"
#include "l2p/tape.hpp"
#include "l2p/tensor.hpp"

namespace l2p {

/// Trainable weights of a per-node depth-selection head. The softmax head
/// scores every depth 0..K; the quit head gates depths 0..K-1 and keeps the
/// leftover mass for depth K.
struct HeadParams {
  std::string kind;  // l2s (softmax over depths) | l2q (quit gates)
  int depth = 0;     // K
  bool bias = true;

  std::vector<std::unique_ptr<Parameter>> w;  // repr_dim x 1 score vectors
  std::vector<std::unique_ptr<Parameter>> b;  // 1 x 1 offsets when bias is on

  HeadParams(const std::string& kind, int depth, int repr_dim, bool bias, Rng& rng);
  std::vector<Parameter*> all();
};

/// N x (K+1) rows of 1/(K+1).
Tensor uniform_prior(int depth, int num_nodes);

/// Rows proportional to ratio^k, normalized. ratio in (0, 1].
Tensor geometric_prior(int depth, int num_nodes, double ratio);

/// Raw per-depth scores w_k . H_k (plus bias), N x (K+1).
ValueId l2s_logits(Tape& t, const LayerStack& s, HeadParams& p);

/// Softmax head posterior: rows of softmax over l2s_logits.
ValueId l2s_posterior(Tape& t, const LayerStack& s, HeadParams& p);

/// Quit gates sigmoid(w_k . H_k) for k = 0..K-1, N x K.
ValueId l2q_quit(Tape& t, const LayerStack& s, HeadParams& p);

/// Stick-breaking: q_k = a_k * prod_{j<k}(1 - a_j), q_K = prod_{j<K}(1 - a_j).
ValueId stick_break(Tape& t, ValueId quit);
Tensor stick_break_values(const Tensor& quit);

/// Posterior of either head kind over the stack.
ValueId head_posterior(Tape& t, const LayerStack& s, HeadParams& p);

/// N x (K+1) of standard Gumbel draws, one row per node.
Tensor draw_gumbel_noise(int num_nodes, int depth, Rng& rng);

/// Soft one-hot sample: softmax((log max(q, 1e-12) + g) / gamma). The noise
/// is a constant, so gradients flow only into the posterior.
ValueId gumbel_softmax_sample(Tape& t, ValueId posterior, double gamma,
                              const Tensor& noise);
ValueId gumbel_softmax_sample(Tape& t, ValueId posterior, double gamma, Rng& rng);

/// Mean over selected rows of KL(posterior_row || prior_row). The prior may
/// be a matching matrix or a single broadcast row.
ValueId kl_to_prior(Tape& t, ValueId posterior, ValueId prior,
                    const std::vector<bool>& mask);
double kl_rows_mean(const Tensor& posterior, const Tensor& prior,
                    const std::vector<bool>& mask);

}  // namespace l2p
