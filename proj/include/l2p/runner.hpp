#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "l2p/graph.hpp"
#include "l2p/tensor.hpp"
#include "l2p/trainers.hpp"

namespace l2p {

/// Fully resolved experiment description. Loadable from a JSON file whose
/// keys use the same kebab-case names as the CLI flags.
struct RunConfig {
  std::string dataset;          // container path
  std::string format = "json";  // json | tsv

  std::string backbone = "appnp";  // appnp | gcn
  double alpha = 0.1;              // appnp teleport weight
  int depth = 16;                  // K
  int hidden = 64;                 // D: encoder width and representation width
  double dropout = 0.5;

  std::string head = "l2q";  // none | l2s | l2q
  bool head_bias = true;
  std::string prior = "uniform";  // uniform | geometric:<ratio>
  double gamma = 0.5;             // sample temperature
  double gamma_final = -1.0;      // optional annealing target (<0 = constant)
  int gamma_anneal_epochs = 0;

  std::string trainer = "vi";      // vi | em
  std::string bilevel = "first";   // off | first | second
  std::string optimizer = "adam";  // adam | sgd
  double lr_theta = 0.01;
  double lr_phi = 0.01;
  double weight_decay = 5e-4;
  double kl_weight = 1.0;
  int epochs = 1000;
  int patience = 100;
  int phi_steps = 1;

  std::vector<uint64_t> seeds = {1};
  std::string outdir = "out";
  std::string predict_mode = "expected";

  void validate() const;
};

/// Reads a JSON config file; unknown keys raise ConfigError.
RunConfig load_run_config(const std::string& path);
/// Serializes the resolved config (kebab-case keys, sorted).
std::string run_config_json(const RunConfig& cfg);

/// Prior row 1 x (K+1) from a prior spec string.
Tensor parse_prior(const std::string& spec, int depth);

struct SeedOutcome {
  uint64_t seed = 0;
  double test_acc = 0.0;
  double val_acc = 0.0;
  int best_epoch = -1;
  int epochs_run = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double seconds = 0.0;
  std::vector<double> average_posterior;
};

struct MetricsReport {
  std::vector<SeedOutcome> per_seed;
  double test_mean = 0.0, test_std = 0.0;
  double val_mean = 0.0, val_std = 0.0;
  bool has_std = false;  // std needs at least two seeds
  std::vector<double> average_posterior;  // mean over seeds
  double wall_seconds = 0.0;
};

/// Everything one trained seed produces, for analysis exports.
struct RunResult {
  SeedOutcome outcome;
  TrainResult train_result;
  Graph graph;
};

/// Train one seed of the configured experiment (no files written).
RunResult run_single(const RunConfig& cfg, uint64_t seed);

/// Train every configured seed, write metrics.json plus per-seed history
/// and checkpoint files under cfg.outdir, and return the aggregate report.
MetricsReport run(const RunConfig& cfg);

/// metrics.json text for a finished report (timing fields carry real times,
/// everything else is a pure function of config and dataset bytes).
std::string metrics_json(const RunConfig& cfg, const MetricsReport& report);

/// CSV with header node_id,argmax_depth,q_0..q_K; one row per node.
std::string posteriors_csv(const Tensor& posterior);

/// Columnwise mean of posterior rows; still sums to 1.
std::vector<double> average_posterior(const Tensor& posteriors);

/// Pairwise cosine similarities of the given vectors.
Tensor graph_correlation(const std::vector<std::vector<double>>& vectors);
std::string correlation_csv(const Tensor& matrix);

/// One multi-seed run per requested depth; CSV with K,mean,std.
std::string layer_sweep(const RunConfig& cfg, const std::vector<int>& depths);

}  // namespace l2p
