#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rxf/attack.hpp"

namespace rxf {

struct DataSection {
  std::string format = "glyphs";  // glyphs | blobs | idx | cifar
  std::uint64_t seed = 0;
  // glyphs / blobs generators
  int per_class = 300;
  int test_per_class = 100;
  int size = 16;
  double noise = 0.08;
  double jitter = 1.0;
  int dims = 2;             // blobs
  double separation = 0.5;  // blobs
  int classes = 10;         // blobs, and the class count of file formats
  // file formats
  std::string train_images, train_labels, test_images, test_labels;  // idx
  std::string train_path, test_path;                                 // cifar
  // domain split: source and target class lists, relabelled to 0..n-1
  std::vector<int> source_classes = {0, 1, 2, 3, 4};
  std::vector<int> target_classes = {5, 6, 7, 8, 9};
  double fraction = 1.0;  // equal-per-class subset of the target training split
};

struct ArchSection {
  std::string family = "small-cnn";
  int depth = 4;
  int width = 1;
  std::vector<int> hidden = {64};
};

struct OptimSection {
  int epochs = 100;
  std::size_t batch_size = 128;
  double lr = 0.1;
  std::vector<int> milestones = {40, 70, 90};
  double decay = 0.2;
  double momentum = 0.9;
  bool augment_flip = false;
  bool augment_crop = false;
};

struct SourceSection {
  std::string mode = "at";  // standard | at | at_fdm
  std::optional<double> lambda;
  std::optional<int> k;
  bool mean_penalty = false;
  AttackConfig attack;  // PGD-7, eps 8/255, alpha 2/255
  OptimSection optim;
};

struct TransferSection {
  std::string mode = "vanilla";  // vanilla | neft | lwf
  std::optional<int> k;
  double beta = 1.0;
  double lambda_d = 0.0;
  std::string bn_stats = "frozen";              // extractor running statistics: frozen | updating
  std::string bn_affine = "frozen";             // sub-model affine parameters: frozen | trainable
  std::string bn_submodel_stats = "updating";   // "frozen" is rejected
  bool reinit_head = true;
  int power_iters = 1;
  int warmup_iters = 5;
  int bake_iters = 100;
  OptimSection optim;
};

struct EvalSection {
  AttackConfig attack;  // PGD-100 by default
  std::size_t max_examples = 0;  // 0 = full test split
  std::size_t batch_size = 250;
};

struct SweepSection {
  std::string axis = "k";  // k | lambda_d | beta | fraction
  std::vector<double> values;
  std::vector<std::string> strategies;  // transfer modes; empty = transfer.mode
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  int workers = 1;
  DataSection data;
  ArchSection arch;
  SourceSection source;
  TransferSection transfer;
  EvalSection eval;
  SweepSection sweep;
  std::string output_dir = "runs/default";
};

/// Schema validation: unknown keys, wrong types and invalid values raise
/// ConfigError naming the offending path.
ExperimentConfig parse_config(const nlohmann::json& doc);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Fully resolved document (every default filled in); parse_config of the
/// result reproduces the same configuration.
nlohmann::json config_to_json(const ExperimentConfig& cfg);

nlohmann::json attack_to_json(const AttackConfig& a);
std::string mode_name(Mode m);

/// Accepts a number or a fraction string such as "8/255".
double parse_number(const nlohmann::json& v, const std::string& path);

}  // namespace rxf
