#pragma once

#include <filesystem>
#include <string>

#include "rxf/attack.hpp"
#include "rxf/checkpoint.hpp"
#include "rxf/config.hpp"
#include "rxf/metrics.hpp"
#include "rxf/transfer.hpp"

namespace rxf {

/// Source and target splits of one experiment: the source and target class
/// lists of the configured dataset, each relabelled to 0..n-1.
struct DomainData {
  Dataset source_train, source_test, target_train, target_test;
};

DomainData load_domains(const ExperimentConfig& cfg);
ArchSpec resolve_arch(const ExperimentConfig& cfg, const Dataset& source_train);

/// Outcome of one transfer run plus its evaluation.
struct TransferOutcome {
  TransferResult result;
  AccuracyReport eval;
  bool frozen_unchanged = false;
};

TransferConfig make_transfer_config(const ExperimentConfig& cfg, const nlohmann::json& source_meta, int blocks);
TransferOutcome run_transfer(const ExperimentConfig& cfg, const LoadedCheckpoint& source, const DomainData& data);
AccuracyReport evaluate(Network& net, const Dataset& test, const ExperimentConfig& cfg);

/// Each command writes into `out`: the resolved config, a manifest listing
/// seeds and files, metrics CSVs and checkpoints.
std::filesystem::path cmd_train_source(const ExperimentConfig& cfg, const std::filesystem::path& out);
AccuracyReport cmd_transfer(const ExperimentConfig& cfg, const std::filesystem::path& source_ckpt,
                            const std::filesystem::path& out);
AccuracyReport cmd_eval(const ExperimentConfig& cfg, const std::filesystem::path& ckpt, const std::filesystem::path& out);
CsvTable cmd_sweep(const ExperimentConfig& cfg, const std::filesystem::path& source_ckpt,
                   const std::filesystem::path& out);
/// Merges every eval.csv under run_dir into a grid keyed by
/// (source mode, transfer mode) and writes report.csv there.
CsvTable cmd_report(const std::filesystem::path& run_dir);

/// Re-renders the accuracy/robustness plot of a sweep CSV.
std::string sweep_plot(const CsvTable& sweep);

const std::vector<std::string>& eval_header();
const std::vector<std::string>& sweep_header();

}  // namespace rxf
