#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "l2p/backbone.hpp"
#include "l2p/graph.hpp"
#include "l2p/head.hpp"
#include "l2p/optim.hpp"
#include "l2p/rng.hpp"
#include "l2p/tape.hpp"
#include "l2p/tensor.hpp"

namespace l2p {

/// One evaluation of the variational objective.
struct ElboBreakdown {
  double reconstruction = 0.0;  // mean log-likelihood over the mask
  double kl = 0.0;              // mean KL(q || prior) over the mask, weighted
  double total = 0.0;           // -reconstruction + kl
};

/// How the likelihood term treats the depth-selection matrix.
/// expected: sum_k sel_k * log p_k  (exact expectation under sel)
/// sampled:  log sum_k sel_k * p_k  (likelihood of the blended prediction,
///           the relaxed-sample objective)
enum class ElboStyle { expected, sampled };

/// Borrowed views of everything one training step reads.
struct TrainContext {
  const Graph* graph = nullptr;
  const CsrMatrix* features = nullptr;  // CSR copy of graph->features
  const CsrMatrix* adj = nullptr;       // normalized adjacency
  BackboneParams* backbone = nullptr;
  HeadParams* head = nullptr;  // null = fixed-depth baseline, no posterior
  Tensor prior;                // 1 x (K+1) row, broadcast over nodes
  double gamma = 0.5;          // relaxed-sample temperature
  double kl_weight = 1.0;
};

/// Scalar nodes of one loss build, all recorded on the caller's tape.
struct ElboNodes {
  ValueId total, reconstruction, kl;
};

ElboBreakdown read_breakdown(const Tape& t, const ElboNodes& nodes);

/// Negative ELBO from per-depth class log-probabilities already on the tape.
/// selection drives the likelihood mixture; the KL term reads q_for_kl
/// (pass the parametric posterior there when selection is a relaxed sample;
/// invalid id means "use selection").
ElboNodes negative_elbo(Tape& t, const std::vector<ValueId>& log_probs,
                        ValueId selection, const std::vector<int>& labels,
                        const std::vector<bool>& mask, ValueId prior,
                        ElboStyle style, double kl_weight = 1.0,
                        ValueId q_for_kl = ValueId{});

/// Options for building the full model loss on one tape.
struct LossSpec {
  const std::vector<bool>* mask = nullptr;
  ElboStyle style = ElboStyle::sampled;
  const Tensor* fixed_q = nullptr;       // frozen target; bypasses the head
  const Tensor* gumbel_noise = nullptr;  // required for sampled head losses
  bool train_mode = true;
  Rng* dropout_rng = nullptr;
};

/// Stack -> per-depth log-probs -> posterior/sample -> negative ELBO.
/// With no head the loss is the final-depth nll and the kl node is zero.
ElboNodes build_loss(Tape& t, TrainContext& ctx, const LossSpec& spec);

/// Deterministic forward pass without gradients.
struct EvalOutputs {
  std::vector<Tensor> log_probs;  // K+1 matrices, N x C
  Tensor posterior;               // N x (K+1); one-hot at K when head is null
};
EvalOutputs evaluate(TrainContext& ctx);

/// log p(y_n | depth k) for labeled rows (0 elsewhere), N x (K+1).
Tensor per_depth_label_loglik(const std::vector<Tensor>& log_probs,
                              const std::vector<int>& labels);

/// Plain-number ELBO of the expected style, for history/reporting.
ElboBreakdown eval_elbo(const std::vector<Tensor>& log_probs, const Tensor& posterior,
                        const Tensor& prior, const std::vector<int>& labels,
                        const std::vector<bool>& mask, double kl_weight);

/// Fraction of masked rows whose argmax prediction matches the label.
double accuracy(const Tensor& predictions, const std::vector<int>& labels,
                const std::vector<bool>& mask);

/// Closed-form posterior rows q(k) proportional to exp(loglik_k) * prior_k
/// on masked rows (log-sum-exp normalized); unmasked rows copy the prior.
Tensor em_e_step(const Tensor& loglik, const std::vector<bool>& mask,
                 const Tensor* prior = nullptr);

/// Cross-entropy projection of a frozen target onto the parametric head.
struct PhiFitStats {
  double first = 0.0;  // cross-entropy before the first step
  double last = 0.0;   // cross-entropy after the last step
};
PhiFitStats em_fit_phi(TrainContext& ctx, const Tensor& target,
                       const std::vector<bool>& mask, int steps, Optimizer& phi_opt);
PhiFitStats em_fit_phi(TrainContext& ctx, const Tensor& target,
                       const std::vector<bool>& mask, int steps, double lr);

/// One plain gradient step on the exact expected ELBO with q frozen.
/// lr = 0 evaluates without moving the parameters.
ElboBreakdown em_m_step_theta(TrainContext& ctx, const Tensor& q_star,
                              const std::vector<bool>& mask, double lr);

/// One relaxed sample, one joint gradient step on backbone and head.
ElboBreakdown vi_step(TrainContext& ctx, const std::vector<bool>& mask,
                      Optimizer& theta_opt, Optimizer& phi_opt, Rng& step_rng);

// ---- flat parameter/gradient views ---------------------------------------
std::vector<double> collect_grads(std::span<Parameter* const> params);
void set_grads(std::span<Parameter* const> params, const std::vector<double>& g);
std::vector<double> snapshot_values(std::span<Parameter* const> params);
void restore_values(std::span<Parameter* const> params, const std::vector<double>& v);
/// value += eps * v
void perturb_values(std::span<Parameter* const> params, double eps,
                    const std::vector<double>& v);

using LossFn = std::function<ValueId(Tape&)>;

/// Mixed-derivative probe (d/d_phi of loss, differenced along v in theta):
///   (grad_phi L(theta + eps v) - grad_phi L(theta)) / eps.
/// Exactly two gradient evaluations; theta is restored bit-exactly.
/// loss must be deterministic (freeze any noise inside the closure).
std::vector<double> hypergrad_fd(const LossFn& train_loss,
                                 std::span<Parameter* const> theta,
                                 std::span<Parameter* const> phi,
                                 const std::vector<double>& v, double eps);

struct BilevelConfig {
  std::string mode = "first";  // off | first | second (or *_order aliases)
  double eta_theta = 0.01;     // inner-step rate inside the correction term

  /// Canonical mode name; ConfigError on anything unknown.
  static std::string parse_mode(const std::string& name);
};

struct BilevelOutcome {
  double train_loss = 0.0;
  double val_loss = 0.0;              // NaN in off mode (not evaluated)
  std::vector<double> phi_grad;       // gradient applied to the head
  std::vector<double> fd_correction;  // same length; zeros in first/off
  double fd_eps = 0.0;
};

/// theta steps on the train loss; the head then steps on the val loss with
/// the mode-appropriate gradient (direct term minus eta_theta times the FD
/// correction). In off mode both step jointly on the train loss.
BilevelOutcome bilevel_step(const LossFn& train_loss, const LossFn& val_loss,
                            std::span<Parameter* const> theta,
                            std::span<Parameter* const> phi,
                            const BilevelConfig& cfg, Optimizer& theta_opt,
                            Optimizer& phi_opt);

// ---- training loop --------------------------------------------------------
struct TrainConfig {
  std::string trainer = "vi";      // vi | em
  std::string bilevel = "first";   // off | first | second
  std::string optimizer = "adam";  // adam | sgd
  double lr_theta = 0.01;
  double lr_phi = 0.01;
  double weight_decay = 5e-4;
  int epochs = 1000;
  int patience = 100;  // early stopping on validation accuracy
  int phi_steps = 1;   // head-projection steps per EM iteration
  double kl_weight = 1.0;
  // optional linear annealing of the sample temperature: ctx.gamma slides
  // to gamma_final over the first gamma_anneal_epochs epochs
  double gamma_final = -1.0;
  int gamma_anneal_epochs = 0;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  double test_acc = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = -1;  // -1 when no epoch ran
  double best_val_acc = 0.0;
  double test_acc = 0.0;   // at the restored checkpoint
  double train_loss = 0.0;
  double val_loss = 0.0;
  EvalOutputs final_eval;  // forward pass of the restored parameters
};

/// Full loop: per-epoch EM or VI updates, early stopping on validation
/// accuracy, best-validation parameters restored at the end.
TrainResult train(TrainContext& ctx, const TrainConfig& cfg, Rng& rng);

}  // namespace l2p
