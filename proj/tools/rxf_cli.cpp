#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>

#include "rxf/config.hpp"
#include "rxf/error.hpp"
#include "rxf/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> workers;
  // transfer
  std::string mode;
  std::optional<int> k;
  std::optional<double> beta, lambda_d;
  std::string bn_stats, bn_affine;
  // eval attack
  std::string eps, alpha;
  std::optional<int> steps;
  std::optional<std::size_t> max_examples;
  // sweep
  std::string axis;
  std::vector<double> values;
  std::vector<std::string> strategies;
};

// Flags patch the document before schema validation, so they get the same
// checks as values written in the file.
rxf::ExperimentConfig resolve(const Overrides& o) {
  json doc = json::object();
  if (!o.config.empty()) {
    std::ifstream in(o.config);
    if (!in) throw rxf::DataError("cannot open config " + o.config);
    try {
      doc = json::parse(in);
    } catch (const json::parse_error& e) {
      throw rxf::ConfigError(o.config + ": " + e.what());
    }
  }
  if (o.seed) doc["seed"] = *o.seed;
  if (o.workers) doc["workers"] = *o.workers;
  if (!o.out.empty()) doc["output"]["dir"] = o.out;
  if (!o.mode.empty()) doc["transfer"]["mode"] = o.mode;
  if (o.k) doc["transfer"]["k"] = *o.k;
  if (o.beta) doc["transfer"]["beta"] = *o.beta;
  if (o.lambda_d) doc["transfer"]["lambda_d"] = *o.lambda_d;
  if (!o.bn_stats.empty()) doc["transfer"]["bn_stats"] = o.bn_stats;
  if (!o.bn_affine.empty()) doc["transfer"]["bn_affine"] = o.bn_affine;
  if (!o.eps.empty()) doc["eval"]["attack"]["eps"] = o.eps;
  if (!o.alpha.empty()) doc["eval"]["attack"]["alpha"] = o.alpha;
  if (o.steps) doc["eval"]["attack"]["steps"] = *o.steps;
  if (o.max_examples) doc["eval"]["max_examples"] = *o.max_examples;
  if (!o.axis.empty()) doc["sweep"]["axis"] = o.axis;
  if (!o.values.empty()) doc["sweep"]["values"] = o.values;
  if (!o.strategies.empty()) doc["sweep"]["strategies"] = o.strategies;
  return rxf::parse_config(doc);
}

void print_report(const rxf::AccuracyReport& r) {
  std::cout << "examples " << r.examples << "  clean_acc " << rxf::fmt(r.clean_accuracy) << "  robust_acc "
            << rxf::fmt(r.robust_accuracy) << "\n";
}

void print_table(const rxf::CsvTable& t) {
  for (std::size_t i = 0; i < t.header.size(); ++i) std::cout << (i ? "," : "") << t.header[i];
  std::cout << "\n";
  for (const auto& row : t.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) std::cout << (i ? "," : "") << row[i];
    std::cout << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Robust transfer experiments: source training, fine-tuning, attacks, sweeps"};
  app.require_subcommand(1);
  Overrides o;
  app.add_option("--config", o.config, "JSON experiment config")->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "Experiment seed");
  app.add_option("--out", o.out, "Output directory (overrides output.dir)");
  app.add_option("--workers", o.workers, "Worker threads for evaluation and sweeps");

  auto add_eval_flags = [&](CLI::App* c) {
    c->add_option("--eps", o.eps, "Evaluation attack radius, e.g. 8/255");
    c->add_option("--alpha", o.alpha, "Evaluation attack step size");
    c->add_option("--steps", o.steps, "Evaluation PGD steps");
    c->add_option("--max-examples", o.max_examples, "Evaluate only the first N test examples");
  };
  auto add_transfer_flags = [&](CLI::App* c) {
    c->add_option("--mode", o.mode, "vanilla | neft | lwf");
    c->add_option("--k", o.k, "Number of fine-tuned blocks counted from the output");
    c->add_option("--beta", o.beta, "NEFT per-layer bound");
    c->add_option("--lambda-d", o.lambda_d, "LwF feature penalty weight");
    c->add_option("--bn-stats", o.bn_stats, "Extractor BN running statistics: frozen | updating");
    c->add_option("--bn-affine", o.bn_affine, "Sub-model BN affine parameters: frozen | trainable");
  };

  std::string checkpoint, run_dir;
  auto* train_source = app.add_subcommand("train-source", "Train the source model");
  auto* transfer = app.add_subcommand("transfer", "Fine-tune a source checkpoint on the target domain");
  transfer->add_option("--source", checkpoint, "Source checkpoint")->required()->check(CLI::ExistingFile);
  add_transfer_flags(transfer);
  add_eval_flags(transfer);
  auto* eval = app.add_subcommand("eval", "Clean and robust accuracy of a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate")->required()->check(CLI::ExistingFile);
  add_eval_flags(eval);
  auto* sweep = app.add_subcommand("sweep", "One transfer and evaluation per axis value");
  sweep->add_option("--source", checkpoint, "Source checkpoint")->required()->check(CLI::ExistingFile);
  sweep->add_option("--axis", o.axis, "k | lambda_d | beta | fraction");
  sweep->add_option("--values", o.values, "Axis values")->delimiter(',');
  sweep->add_option("--strategies", o.strategies, "Transfer modes to compare")->delimiter(',');
  add_transfer_flags(sweep);
  add_eval_flags(sweep);
  auto* report = app.add_subcommand("report", "Merge eval.csv files under a directory into one table");
  report->add_option("dir", run_dir, "Run directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (report->parsed()) {
      print_table(rxf::cmd_report(run_dir));
      return 0;
    }
    const rxf::ExperimentConfig cfg = resolve(o);
    const fs::path out = cfg.output_dir;
    if (train_source->parsed()) {
      std::cout << "checkpoint " << rxf::cmd_train_source(cfg, out).string() << "\n";
    } else if (transfer->parsed()) {
      print_report(rxf::cmd_transfer(cfg, checkpoint, out));
    } else if (eval->parsed()) {
      print_report(rxf::cmd_eval(cfg, checkpoint, out));
    } else if (sweep->parsed()) {
      print_table(rxf::cmd_sweep(cfg, checkpoint, out));
    }
  } catch (const rxf::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const rxf::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const rxf::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
