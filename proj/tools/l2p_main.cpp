#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "l2p/errors.hpp"
#include "l2p/gradsuite.hpp"
#include "l2p/graph.hpp"
#include "l2p/io.hpp"
#include "l2p/runner.hpp"
#include "l2p/version.hpp"

namespace {

std::vector<uint64_t> parse_seed_list(const std::string& text) {
  std::vector<uint64_t> out;
  size_t at = 0;
  while (at <= text.size()) {
    const size_t comma = text.find(',', at);
    const std::string piece =
        text.substr(at, comma == std::string::npos ? std::string::npos : comma - at);
    try {
      size_t used = 0;
      out.push_back(std::stoull(piece, &used));
      if (used != piece.size()) throw std::invalid_argument(piece);
    } catch (const std::exception&) {
      throw l2p::ConfigError("bad seed '" + piece + "' in seed list");
    }
    if (comma == std::string::npos) break;
    at = comma + 1;
  }
  if (out.empty()) throw l2p::ConfigError("empty seed list");
  return out;
}

std::vector<int> parse_int_list(const std::string& text, const char* what) {
  std::vector<int> out;
  size_t at = 0;
  while (at <= text.size()) {
    const size_t comma = text.find(',', at);
    const std::string piece =
        text.substr(at, comma == std::string::npos ? std::string::npos : comma - at);
    try {
      size_t used = 0;
      out.push_back(std::stoi(piece, &used));
      if (used != piece.size()) throw std::invalid_argument(piece);
    } catch (const std::exception&) {
      throw l2p::ConfigError(std::string("bad ") + what + " value '" + piece + "'");
    }
    if (comma == std::string::npos) break;
    at = comma + 1;
  }
  if (out.empty()) throw l2p::ConfigError(std::string("empty ") + what + " list");
  return out;
}

std::vector<double> parse_double_list(const std::string& text, const char* what) {
  std::vector<double> out;
  size_t at = 0;
  while (at <= text.size()) {
    const size_t comma = text.find(',', at);
    const std::string piece =
        text.substr(at, comma == std::string::npos ? std::string::npos : comma - at);
    try {
      size_t used = 0;
      out.push_back(std::stod(piece, &used));
      if (used != piece.size()) throw std::invalid_argument(piece);
    } catch (const std::exception&) {
      throw l2p::ConfigError(std::string("bad ") + what + " value '" + piece + "'");
    }
    if (comma == std::string::npos) break;
    at = comma + 1;
  }
  return out;
}

/// Flag storage for subcommands that take a full run configuration.
struct RunFlags {
  std::string config;
  std::string seed_list;
  l2p::RunConfig v;
};

void attach_run_flags(CLI::App* cmd, RunFlags& f) {
  cmd->add_option("--config", f.config, "JSON config file; flags override its values");
  cmd->add_option("--dataset", f.v.dataset, "dataset container path");
  cmd->add_option("--format", f.v.format, "dataset format: json or tsv");
  cmd->add_option("--backbone", f.v.backbone, "appnp or gcn");
  cmd->add_option("--alpha", f.v.alpha, "teleport weight (appnp)");
  cmd->add_option("--depth", f.v.depth, "propagation steps K");
  cmd->add_option("--hidden", f.v.hidden, "hidden/representation width");
  cmd->add_option("--dropout", f.v.dropout, "dropout rate");
  cmd->add_option("--head", f.v.head, "none, l2s or l2q");
  cmd->add_flag("--head-bias,!--no-head-bias", f.v.head_bias,
                "bias term in the depth scores");
  cmd->add_option("--prior", f.v.prior, "uniform or geometric:<ratio>");
  cmd->add_option("--gamma", f.v.gamma, "sample temperature");
  cmd->add_option("--gamma-final", f.v.gamma_final, "annealing target temperature");
  cmd->add_option("--gamma-anneal-epochs", f.v.gamma_anneal_epochs,
                  "epochs to reach the target temperature");
  cmd->add_option("--trainer", f.v.trainer, "vi or em");
  cmd->add_option("--bilevel", f.v.bilevel, "off, first or second");
  cmd->add_option("--optimizer", f.v.optimizer, "adam or sgd");
  cmd->add_option("--lr-theta", f.v.lr_theta, "backbone learning rate");
  cmd->add_option("--lr-phi", f.v.lr_phi, "head learning rate");
  cmd->add_option("--weight-decay", f.v.weight_decay, "L2 weight decay");
  cmd->add_option("--kl-weight", f.v.kl_weight, "weight of the KL term");
  cmd->add_option("--epochs", f.v.epochs, "maximum training epochs");
  cmd->add_option("--patience", f.v.patience, "early-stopping patience");
  cmd->add_option("--phi-steps", f.v.phi_steps, "head steps per EM iteration");
  cmd->add_option("--seed", f.seed_list, "seed or comma-separated seed list");
  cmd->add_option("--outdir", f.v.outdir, "output directory");
  cmd->add_option("--predict-mode", f.v.predict_mode, "expected or argmax");
}

l2p::RunConfig resolve_config(CLI::App* cmd, const RunFlags& f) {
  l2p::RunConfig cfg;
  if (!f.config.empty()) cfg = l2p::load_run_config(f.config);
  auto set = [&](const char* flag) { return cmd->count(flag) > 0; };
  if (set("--dataset")) cfg.dataset = f.v.dataset;
  if (set("--format")) cfg.format = f.v.format;
  if (set("--backbone")) cfg.backbone = f.v.backbone;
  if (set("--alpha")) cfg.alpha = f.v.alpha;
  if (set("--depth")) cfg.depth = f.v.depth;
  if (set("--hidden")) cfg.hidden = f.v.hidden;
  if (set("--dropout")) cfg.dropout = f.v.dropout;
  if (set("--head")) cfg.head = f.v.head;
  if (set("--head-bias") || set("--no-head-bias")) cfg.head_bias = f.v.head_bias;
  if (set("--prior")) cfg.prior = f.v.prior;
  if (set("--gamma")) cfg.gamma = f.v.gamma;
  if (set("--gamma-final")) cfg.gamma_final = f.v.gamma_final;
  if (set("--gamma-anneal-epochs"))
    cfg.gamma_anneal_epochs = f.v.gamma_anneal_epochs;
  if (set("--trainer")) cfg.trainer = f.v.trainer;
  if (set("--bilevel")) cfg.bilevel = f.v.bilevel;
  if (set("--optimizer")) cfg.optimizer = f.v.optimizer;
  if (set("--lr-theta")) cfg.lr_theta = f.v.lr_theta;
  if (set("--lr-phi")) cfg.lr_phi = f.v.lr_phi;
  if (set("--weight-decay")) cfg.weight_decay = f.v.weight_decay;
  if (set("--kl-weight")) cfg.kl_weight = f.v.kl_weight;
  if (set("--epochs")) cfg.epochs = f.v.epochs;
  if (set("--patience")) cfg.patience = f.v.patience;
  if (set("--phi-steps")) cfg.phi_steps = f.v.phi_steps;
  if (set("--seed")) cfg.seeds = parse_seed_list(f.seed_list);
  if (set("--outdir")) cfg.outdir = f.v.outdir;
  if (set("--predict-mode")) cfg.predict_mode = f.v.predict_mode;
  return cfg;
}

void print_report(const l2p::RunConfig& cfg, const l2p::MetricsReport& report) {
  for (const l2p::SeedOutcome& o : report.per_seed)
    std::cout << "seed " << o.seed << ": test " << o.test_acc << "  val " << o.val_acc
              << "  best epoch " << o.best_epoch << "\n";
  std::cout << "test accuracy " << report.test_mean;
  if (report.has_std) std::cout << " +- " << report.test_std;
  std::cout << " over " << report.per_seed.size() << " seed(s)\n";
  std::cout << "wrote " << cfg.outdir << "/metrics.json\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"per-node propagation-depth learning for graph neural networks"};
  app.set_version_flag("--version", l2p::kVersion);
  app.require_subcommand(1);

  RunFlags run_flags;
  CLI::App* cmd_run = app.add_subcommand("run", "train and report metrics");
  attach_run_flags(cmd_run, run_flags);
  cmd_run->callback([&] {
    const l2p::RunConfig cfg = resolve_config(cmd_run, run_flags);
    print_report(cfg, l2p::run(cfg));
  });

  RunFlags sweep_flags;
  std::string k_list;
  CLI::App* cmd_sweep = app.add_subcommand("sweep", "accuracy vs propagation depth");
  attach_run_flags(cmd_sweep, sweep_flags);
  cmd_sweep->add_option("--k-list", k_list, "comma-separated depths")->required();
  cmd_sweep->callback([&] {
    const l2p::RunConfig cfg = resolve_config(cmd_sweep, sweep_flags);
    std::cout << l2p::layer_sweep(cfg, parse_int_list(k_list, "depth"));
    std::cout << "wrote " << cfg.outdir << "/sweep.csv\n";
  });

  RunFlags export_flags;
  CLI::App* cmd_export =
      app.add_subcommand("export-posteriors", "per-node depth distributions as CSV");
  attach_run_flags(cmd_export, export_flags);
  cmd_export->callback([&] {
    const l2p::RunConfig cfg = resolve_config(cmd_export, export_flags);
    if (cfg.head == "none")
      throw l2p::ConfigError("export-posteriors needs a learned head (l2s or l2q)");
    const l2p::RunResult rr = l2p::run_single(cfg, cfg.seeds.front());
    const std::string path = cfg.outdir + "/posteriors.csv";
    l2p::write_file_atomic(path,
                           l2p::posteriors_csv(rr.train_result.final_eval.posterior));
    std::cout << "wrote " << path << " (test acc " << rr.outcome.test_acc << ")\n";
  });

  std::vector<std::string> corr_inputs;
  std::string corr_output;
  CLI::App* cmd_corr = app.add_subcommand(
      "correlate", "cosine similarity of average posteriors across runs");
  cmd_corr->add_option("--inputs", corr_inputs, "metrics.json files")
      ->required()
      ->delimiter(',');
  cmd_corr->add_option("--output", corr_output, "output CSV path");
  cmd_corr->callback([&] {
    std::vector<std::vector<double>> vectors;
    for (const std::string& path : corr_inputs) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(l2p::read_file(path));
      } catch (const nlohmann::json::exception& e) {
        throw l2p::DatasetError(path + " is not valid JSON: " + e.what());
      }
      if (!j.contains("average-posterior") || !j["average-posterior"].is_array())
        throw l2p::DatasetError(path + " has no average-posterior array");
      std::vector<double> v;
      for (const auto& e : j["average-posterior"]) {
        if (!e.is_number())
          throw l2p::DatasetError(path + " has a non-numeric posterior entry");
        v.push_back(e.get<double>());
      }
      vectors.push_back(std::move(v));
    }
    const std::string csv = l2p::correlation_csv(l2p::graph_correlation(vectors));
    if (corr_output.empty()) {
      std::cout << csv;
    } else {
      l2p::write_file_atomic(corr_output, csv);
      std::cout << "wrote " << corr_output << "\n";
    }
  });

  l2p::SyntheticSpec spec;
  std::string homophily_list, hops_list, synth_output;
  CLI::App* cmd_synth =
      app.add_subcommand("make-synthetic", "generate a block-structured benchmark graph");
  cmd_synth->add_option("--nodes-per-block", spec.nodes_per_block);
  cmd_synth->add_option("--feature-dim", spec.feature_dim);
  cmd_synth->add_option("--classes", spec.num_classes);
  cmd_synth->add_option("--homophily", homophily_list,
                        "per-block same-class edge probability, comma list");
  cmd_synth->add_option("--hops", hops_list,
                        "per-block label hop radius (0-2), comma list");
  cmd_synth->add_option("--max-depth", spec.max_depth);
  cmd_synth->add_option("--avg-degree", spec.avg_degree);
  cmd_synth->add_option("--signal-scale", spec.signal_scale);
  cmd_synth->add_option("--train-frac", spec.train_frac);
  cmd_synth->add_option("--val-frac", spec.val_frac);
  cmd_synth->add_option("--seed", spec.seed);
  cmd_synth->add_option("--output", synth_output, "where to write the container")
      ->required();
  cmd_synth->callback([&] {
    if (!homophily_list.empty())
      spec.homophily = parse_double_list(homophily_list, "homophily");
    if (!hops_list.empty()) spec.hops = parse_int_list(hops_list, "hops");
    const l2p::Graph g = l2p::make_synthetic(spec);
    l2p::save_graph(g, synth_output);
    std::cout << "wrote " << synth_output << " (" << g.num_nodes << " nodes, "
              << g.edges.size() << " edges)\n";
  });

  int grad_seeds = 5;
  CLI::App* cmd_grad =
      app.add_subcommand("grad-check", "finite-difference check of every gradient path");
  cmd_grad->add_option("--seeds", grad_seeds, "number of random seeds");
  cmd_grad->callback([&] {
    const l2p::GradSuiteResult res = l2p::run_grad_suite(grad_seeds);
    std::cout << res.checks << " checks, max relative error " << res.max_error << "\n";
    if (res.max_error >= 1e-4)
      throw l2p::NumericError("gradient check failed (max relative error " +
                              std::to_string(res.max_error) + ")");
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const l2p::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const l2p::DatasetError& e) {
    std::cerr << "dataset error: " << e.what() << "\n";
    return 3;
  } catch (const l2p::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
