#include "l2p/runner.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <memory>
#include <thread>

#include <json.hpp>

#include "l2p/checkpoint.hpp"
#include "l2p/errors.hpp"
#include "l2p/io.hpp"
#include "l2p/parallel.hpp"
#include "l2p/version.hpp"

namespace l2p {

using nlohmann::json;

void RunConfig::validate() const {
  if (dataset.empty()) throw ConfigError("no dataset path given");
  if (format != "json" && format != "tsv")
    throw ConfigError("unknown dataset format '" + format + "'");
  if (backbone != "appnp" && backbone != "gcn")
    throw ConfigError("unknown backbone '" + backbone + "'");
  if (head != "none" && head != "l2s" && head != "l2q")
    throw ConfigError("unknown head '" + head + "'");
  if (depth < 0) throw ConfigError("depth must be non-negative");
  if (hidden < 1) throw ConfigError("hidden width must be positive");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in (0, 1]");
  if (!(dropout >= 0.0 && dropout < 1.0))
    throw ConfigError("dropout must lie in [0, 1)");
  if (!(gamma > 0.0)) throw ConfigError("gamma must be positive");
  parse_prior(prior, depth);
  parse_predict_mode(predict_mode);
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (outdir.empty()) throw ConfigError("no output directory given");
  TrainConfig t;
  t.trainer = trainer;
  t.bilevel = bilevel;
  t.optimizer = optimizer;
  t.lr_theta = lr_theta;
  t.lr_phi = lr_phi;
  t.weight_decay = weight_decay;
  t.epochs = epochs;
  t.patience = patience;
  t.phi_steps = phi_steps;
  t.kl_weight = kl_weight;
  t.gamma_final = gamma_final;
  t.gamma_anneal_epochs = gamma_anneal_epochs;
  t.validate();
}

Tensor parse_prior(const std::string& spec, int depth) {
  if (spec == "uniform") return uniform_prior(depth, 1);
  const std::string prefix = "geometric:";
  if (spec.rfind(prefix, 0) == 0) {
    const std::string arg = spec.substr(prefix.size());
    double ratio = 0.0;
    try {
      size_t used = 0;
      ratio = std::stod(arg, &used);
      if (used != arg.size()) throw std::invalid_argument(arg);
    } catch (const std::exception&) {
      throw ConfigError("bad geometric prior ratio '" + arg + "'");
    }
    return geometric_prior(depth, 1, ratio);
  }
  throw ConfigError("unknown prior spec '" + spec +
                    "' (expected uniform or geometric:<ratio>)");
}

namespace {

const std::vector<std::string>& known_config_keys() {
  static const std::vector<std::string> keys = {
      "dataset",      "format",    "backbone",   "alpha",
      "depth",        "hidden",    "dropout",    "head",
      "head-bias",    "prior",     "gamma",      "gamma-final",
      "gamma-anneal-epochs",       "trainer",    "bilevel",
      "optimizer",    "lr-theta",  "lr-phi",     "weight-decay",
      "kl-weight",    "epochs",    "patience",   "phi-steps",
      "seed",         "outdir",    "predict-mode"};
  return keys;
}

template <typename T>
void read_key(const json& j, const char* key, T& into) {
  if (!j.contains(key)) return;
  try {
    into = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

void read_seeds(const json& j, RunConfig& cfg) {
  if (!j.contains("seed")) return;
  const json& s = j.at("seed");
  cfg.seeds.clear();
  if (s.is_number_unsigned() || s.is_number_integer()) {
    cfg.seeds.push_back(s.get<uint64_t>());
  } else if (s.is_array()) {
    for (const json& e : s) {
      if (!e.is_number_unsigned() && !e.is_number_integer())
        throw ConfigError("config key 'seed' must hold integers");
      cfg.seeds.push_back(e.get<uint64_t>());
    }
  } else {
    throw ConfigError("config key 'seed' must be an integer or integer list");
  }
}

}  // namespace

RunConfig load_run_config(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config " + path + " must be a JSON object");
  const auto& known = known_config_keys();
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError("config " + path + " has unknown key '" + key + "'");

  RunConfig cfg;
  read_key(j, "dataset", cfg.dataset);
  read_key(j, "format", cfg.format);
  read_key(j, "backbone", cfg.backbone);
  read_key(j, "alpha", cfg.alpha);
  read_key(j, "depth", cfg.depth);
  read_key(j, "hidden", cfg.hidden);
  read_key(j, "dropout", cfg.dropout);
  read_key(j, "head", cfg.head);
  read_key(j, "head-bias", cfg.head_bias);
  read_key(j, "prior", cfg.prior);
  read_key(j, "gamma", cfg.gamma);
  read_key(j, "gamma-final", cfg.gamma_final);
  read_key(j, "gamma-anneal-epochs", cfg.gamma_anneal_epochs);
  read_key(j, "trainer", cfg.trainer);
  read_key(j, "bilevel", cfg.bilevel);
  read_key(j, "optimizer", cfg.optimizer);
  read_key(j, "lr-theta", cfg.lr_theta);
  read_key(j, "lr-phi", cfg.lr_phi);
  read_key(j, "weight-decay", cfg.weight_decay);
  read_key(j, "kl-weight", cfg.kl_weight);
  read_key(j, "epochs", cfg.epochs);
  read_key(j, "patience", cfg.patience);
  read_key(j, "phi-steps", cfg.phi_steps);
  read_seeds(j, cfg);
  read_key(j, "outdir", cfg.outdir);
  read_key(j, "predict-mode", cfg.predict_mode);
  return cfg;
}

namespace {

json config_to_json(const RunConfig& cfg) {
  json j;
  j["dataset"] = cfg.dataset;
  j["format"] = cfg.format;
  j["backbone"] = cfg.backbone;
  j["alpha"] = cfg.alpha;
  j["depth"] = cfg.depth;
  j["hidden"] = cfg.hidden;
  j["dropout"] = cfg.dropout;
  j["head"] = cfg.head;
  j["head-bias"] = cfg.head_bias;
  j["prior"] = cfg.prior;
  j["gamma"] = cfg.gamma;
  j["gamma-final"] = cfg.gamma_final;
  j["gamma-anneal-epochs"] = cfg.gamma_anneal_epochs;
  j["trainer"] = cfg.trainer;
  j["bilevel"] = cfg.bilevel;
  j["optimizer"] = cfg.optimizer;
  j["lr-theta"] = cfg.lr_theta;
  j["lr-phi"] = cfg.lr_phi;
  j["weight-decay"] = cfg.weight_decay;
  j["kl-weight"] = cfg.kl_weight;
  j["epochs"] = cfg.epochs;
  j["patience"] = cfg.patience;
  j["phi-steps"] = cfg.phi_steps;
  j["seed"] = cfg.seeds;
  j["outdir"] = cfg.outdir;
  j["predict-mode"] = cfg.predict_mode;
  return j;
}

TrainConfig train_config_of(const RunConfig& cfg) {
  TrainConfig t;
  t.trainer = cfg.trainer;
  t.bilevel = cfg.bilevel;
  t.optimizer = cfg.optimizer;
  t.lr_theta = cfg.lr_theta;
  t.lr_phi = cfg.lr_phi;
  t.weight_decay = cfg.weight_decay;
  t.epochs = cfg.epochs;
  t.patience = cfg.patience;
  t.phi_steps = cfg.phi_steps;
  t.kl_weight = cfg.kl_weight;
  t.gamma_final = cfg.gamma_final;
  t.gamma_anneal_epochs = cfg.gamma_anneal_epochs;
  return t;
}

std::string history_jsonl(const std::vector<EpochRecord>& history) {
  std::string out;
  for (const EpochRecord& r : history) {
    json line;
    line["epoch"] = r.epoch;
    line["train-loss"] = r.train_loss;
    line["val-loss"] = r.val_loss;
    line["val-acc"] = r.val_acc;
    line["test-acc"] = r.test_acc;
    line["seconds"] = r.seconds;
    out += line.dump() + "\n";
  }
  return out;
}

struct SeedRun {
  SeedOutcome outcome;
  TrainResult result;
};

/// Train one seed on a prepared graph. Artifacts (history, checkpoint) land
/// under outdir when requested.
SeedRun run_seed(const RunConfig& cfg, const Graph& g, const CsrMatrix& x,
                 const CsrMatrix& adj, uint64_t seed, bool write_artifacts) {
  const auto t0 = std::chrono::steady_clock::now();
  BackboneConfig bcfg;
  bcfg.kind = cfg.backbone;
  bcfg.input_dim = g.feature_dim();
  bcfg.hidden = cfg.hidden;
  bcfg.repr_dim = cfg.hidden;
  bcfg.num_classes = g.num_classes();
  bcfg.depth = cfg.depth;
  bcfg.alpha = cfg.alpha;
  bcfg.dropout = cfg.dropout;

  Rng root(seed);
  Rng backbone_rng = root.child(10);
  BackboneParams backbone(bcfg, backbone_rng);
  std::unique_ptr<HeadParams> head;
  if (cfg.head != "none") {
    Rng head_rng = root.child(11);
    head = std::make_unique<HeadParams>(cfg.head, cfg.depth, cfg.hidden,
                                        cfg.head_bias, head_rng);
  }

  TrainContext ctx;
  ctx.graph = &g;
  ctx.features = &x;
  ctx.adj = &adj;
  ctx.backbone = &backbone;
  ctx.head = head.get();
  ctx.prior = parse_prior(cfg.prior, cfg.depth);
  ctx.gamma = cfg.gamma;
  ctx.kl_weight = cfg.kl_weight;

  Rng train_rng = root.child(12);
  SeedRun out;
  out.result = train(ctx, train_config_of(cfg), train_rng);

  const TrainResult& tr = out.result;
  SeedOutcome& o = out.outcome;
  o.seed = seed;
  o.best_epoch = tr.best_epoch;
  o.epochs_run = static_cast<int>(tr.history.size());
  o.train_loss = tr.train_loss;
  o.val_loss = tr.val_loss;
  o.average_posterior = average_posterior(tr.final_eval.posterior);
  Tensor preds = predict(tr.final_eval.log_probs, tr.final_eval.posterior,
                         parse_predict_mode(cfg.predict_mode));
  if (g.count(g.val_mask) > 0) o.val_acc = accuracy(preds, g.labels, g.val_mask);
  if (g.count(g.test_mask) > 0) o.test_acc = accuracy(preds, g.labels, g.test_mask);
  o.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (write_artifacts) {
    const std::string stem = cfg.outdir + "/seed_" + std::to_string(seed);
    write_file_atomic(stem + "_history.jsonl", history_jsonl(tr.history));
    std::vector<Parameter*> params = backbone.all();
    if (head)
      for (Parameter* p : head->all()) params.push_back(p);
    save_checkpoint(params, stem + "_checkpoint.json");
  }
  return out;
}

double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / xs.size();
}

double sample_std(const std::vector<double>& xs) {
  const double m = mean_of(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / (xs.size() - 1));
}

}  // namespace

RunResult run_single(const RunConfig& cfg, uint64_t seed) {
  cfg.validate();
  Graph g = load_graph(cfg.dataset, cfg.format);
  CsrMatrix x = CsrMatrix::from_dense(g.features);
  CsrMatrix adj = normalize_adjacency(g);
  SeedRun sr = run_seed(cfg, g, x, adj, seed, false);
  RunResult out;
  out.outcome = std::move(sr.outcome);
  out.train_result = std::move(sr.result);
  out.graph = std::move(g);
  return out;
}

MetricsReport run(const RunConfig& cfg) {
  cfg.validate();
  const auto wall0 = std::chrono::steady_clock::now();
  Graph g = load_graph(cfg.dataset, cfg.format);
  if (g.count(g.test_mask) == 0) throw DatasetError("dataset has no test nodes");
  CsrMatrix x = CsrMatrix::from_dense(g.features);
  CsrMatrix adj = normalize_adjacency(g);

  const int n = static_cast<int>(cfg.seeds.size());
  std::vector<SeedRun> runs(n);
  const int workers = std::min<int>(max_threads(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i)
      runs[i] = run_seed(cfg, g, x, adj, cfg.seeds[i], true);
  } else {
    // independent runs; each worker keeps its internal kernels single-threaded
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    std::vector<std::exception_ptr> errors(workers);
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        set_thread_override(1);
        try {
          for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1))
            runs[i] = run_seed(cfg, g, x, adj, cfg.seeds[i], true);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  MetricsReport report;
  std::vector<double> test_accs, val_accs;
  for (SeedRun& sr : runs) {
    test_accs.push_back(sr.outcome.test_acc);
    val_accs.push_back(sr.outcome.val_acc);
    report.per_seed.push_back(std::move(sr.outcome));
  }
  report.test_mean = mean_of(test_accs);
  report.val_mean = mean_of(val_accs);
  report.has_std = n >= 2;
  if (report.has_std) {
    report.test_std = sample_std(test_accs);
    report.val_std = sample_std(val_accs);
  }
  const int depths = cfg.depth + 1;
  report.average_posterior.assign(depths, 0.0);
  for (const SeedOutcome& o : report.per_seed)
    for (int k = 0; k < depths; ++k) report.average_posterior[k] += o.average_posterior[k] / n;
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();

  write_file_atomic(cfg.outdir + "/metrics.json", metrics_json(cfg, report));
  return report;
}

std::string run_config_json(const RunConfig& cfg) {
  return config_to_json(cfg).dump(2) + "\n";
}

std::string metrics_json(const RunConfig& cfg, const MetricsReport& report) {
  json j;
  j["version"] = kVersion;
  j["config"] = config_to_json(cfg);
  j["average-posterior"] = report.average_posterior;
  j["test-acc-mean"] = report.test_mean;
  j["val-acc-mean"] = report.val_mean;
  if (report.has_std) {
    j["test-acc-std"] = report.test_std;
    j["val-acc-std"] = report.val_std;
  }
  j["wall-seconds"] = report.wall_seconds;
  json seeds = json::array();
  for (const SeedOutcome& o : report.per_seed) {
    json e;
    e["seed"] = o.seed;
    e["test-acc"] = o.test_acc;
    e["val-acc"] = o.val_acc;
    e["best-epoch"] = o.best_epoch;
    e["epochs-run"] = o.epochs_run;
    e["train-loss"] = o.train_loss;
    e["val-loss"] = o.val_loss;
    e["seconds"] = o.seconds;
    e["average-posterior"] = o.average_posterior;
    seeds.push_back(std::move(e));
  }
  j["per-seed"] = std::move(seeds);
  return j.dump(2) + "\n";
}

namespace {

std::string fmt_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

}  // namespace

std::string posteriors_csv(const Tensor& posterior) {
  const int n = posterior.rows(), depths = posterior.cols();
  std::string out = "node_id,argmax_depth";
  for (int k = 0; k < depths; ++k) out += ",q_" + std::to_string(k);
  out += "\n";
  for (int i = 0; i < n; ++i) {
    int best = 0;
    for (int k = 1; k < depths; ++k)
      if (posterior.at(i, k) > posterior.at(i, best)) best = k;
    out += std::to_string(i) + "," + std::to_string(best);
    for (int k = 0; k < depths; ++k) out += "," + fmt_double(posterior.at(i, k));
    out += "\n";
  }
  return out;
}

std::vector<double> average_posterior(const Tensor& posteriors) {
  if (posteriors.rows() < 1 || posteriors.cols() < 1)
    throw ContractError("average_posterior needs at least one row");
  std::vector<double> out(posteriors.cols(), 0.0);
  for (int i = 0; i < posteriors.rows(); ++i)
    for (int k = 0; k < posteriors.cols(); ++k)
      out[k] += posteriors.at(i, k) / posteriors.rows();
  return out;
}

Tensor graph_correlation(const std::vector<std::vector<double>>& vectors) {
  const int m = static_cast<int>(vectors.size());
  if (m == 0) throw ContractError("graph_correlation needs at least one vector");
  const size_t len = vectors[0].size();
  if (len == 0) throw ShapeError("graph_correlation vectors must be nonempty");
  std::vector<double> norms(m);
  for (int i = 0; i < m; ++i) {
    if (vectors[i].size() != len)
      throw ShapeError("graph_correlation vectors differ in length");
    double s = 0.0;
    for (double x : vectors[i]) s += x * x;
    norms[i] = std::sqrt(s);
    if (norms[i] == 0.0)
      throw ContractError("graph_correlation vector " + std::to_string(i) +
                          " is all zero");
  }
  Tensor out(m, m, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) {
      double dot = 0.0;
      for (size_t k = 0; k < len; ++k) dot += vectors[i][k] * vectors[j][k];
      out.at(i, j) = dot / (norms[i] * norms[j]);
    }
  return out;
}

std::string correlation_csv(const Tensor& matrix) {
  std::string out;
  for (int i = 0; i < matrix.rows(); ++i) {
    for (int j = 0; j < matrix.cols(); ++j) {
      if (j) out += ",";
      out += fmt_double(matrix.at(i, j));
    }
    out += "\n";
  }
  return out;
}

std::string layer_sweep(const RunConfig& cfg, const std::vector<int>& depths) {
  if (depths.empty()) throw ConfigError("layer sweep needs at least one depth");
  std::string csv = "K,mean,std\n";
  for (int k : depths) {
    RunConfig c = cfg;
    c.depth = k;
    c.outdir = cfg.outdir + "/sweep_k" + std::to_string(k);
    MetricsReport r = run(c);
    csv += std::to_string(k) + "," + fmt_double(r.test_mean) + ",";
    if (r.has_std) csv += fmt_double(r.test_std);
    csv += "\n";
  }
  write_file_atomic(cfg.outdir + "/sweep.csv", csv);
  return csv;
}

}  // namespace l2p
