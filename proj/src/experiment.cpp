#include "rxf/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <thread>

#include "rxf/error.hpp"

namespace rxf {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kEvalStream = 0xE7A1;

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void write_text(const fs::path& path, const std::string& s) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << s;
}

void prepare_dir(const fs::path& out, const ExperimentConfig& cfg) {
  fs::create_directories(out);
  write_json(out / "config.resolved.json", config_to_json(cfg));
}

void write_manifest(const fs::path& out, const std::string& command, const ExperimentConfig& cfg,
                    const std::vector<std::string>& files, json extra = json::object()) {
  json m = {{"command", command},
            {"seed", cfg.seed},
            {"data_seed", cfg.data.seed},
            {"workers", cfg.workers},
            {"files", files},
            {"config", "config.resolved.json"}};
  for (auto& [k, v] : extra.items()) m[k] = v;
  write_json(out / "manifest.json", m);
}

TrainConfig make_train_config(const OptimSection& o, std::uint64_t seed) {
  TrainConfig t;
  t.epochs = o.epochs;
  t.batch_size = o.batch_size;
  t.schedule.base_lr = o.lr;
  t.schedule.milestones = o.milestones;
  t.schedule.decay = o.decay;
  t.schedule.total_epochs = std::max(o.epochs, 1);
  t.momentum = o.momentum;
  t.seed = seed;
  t.augment_flip = o.augment_flip;
  t.augment_crop = o.augment_crop;
  return t;
}

void add_epoch_rows(CsvTable& table, const std::string& run_id, const std::string& phase, const TrainResult& r) {
  for (const auto& m : r.epochs) {
    table.add_row({run_id, phase, std::to_string(m.epoch), fmt(m.lr), fmt(m.clean_loss), fmt(m.adv_loss),
                   fmt(m.fdm_penalty), fmt(m.clean_acc), fmt(m.adv_acc), fmt(m.feature_distance), fmt(m.seconds)});
  }
}

CsvTable epoch_table() {
  CsvTable t;
  t.header = epoch_metrics_header();
  return t;
}

Dataset take_prefix(const Dataset& ds, std::size_t n) {
  if (n == 0 || n >= ds.size()) return ds;
  Batch b = gather_range(ds, 0, n);
  Dataset out = ds;
  out.images = std::move(b.x);
  out.labels = std::move(b.y);
  return out;
}

bool extractor_unchanged(Network& before, Network& after, std::size_t split_index, bool stats_frozen) {
  for (std::size_t b = 0; b < split_index; ++b) {
    auto x = before.named_tensors_of_block(b);
    auto y = after.named_tensors_of_block(b);
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (!x[i].parameter && !stats_frozen) continue;
      if (!bit_equal(x[i].tensor, y[i].tensor)) return false;
    }
  }
  return true;
}

std::string source_label(const std::string& mode) {
  if (mode == "standard") return "ST";
  if (mode == "at") return "AT";
  if (mode == "at_fdm") return "AT+FDM";
  return mode;
}

std::string transfer_label(const std::string& mode) {
  if (mode == "vanilla") return "TL";
  if (mode == "neft") return "NEFT";
  if (mode == "lwf") return "LwF";
  return mode;
}

std::vector<std::string> eval_row(const std::string& run_id, const json& meta, const ExperimentConfig& cfg,
                                  const AccuracyReport& r, const std::string& frozen) {
  auto str = [&](const char* key, const std::string& fallback) {
    return meta.contains(key) ? (meta[key].is_string() ? meta[key].get<std::string>() : meta[key].dump()) : fallback;
  };
  return {run_id,
          str("source_mode", "none"),
          str("transfer_mode", "none"),
          str("k", ""),
          str("beta", ""),
          str("lambda_d", ""),
          str("fraction", ""),
          meta.contains("bn_policy") ? meta["bn_policy"]["extractor_stats"].get<std::string>() : "",
          meta.contains("bn_policy") ? meta["bn_policy"]["submodel_affine"].get<std::string>() : "",
          std::to_string(cfg.seed),
          fmt(cfg.eval.attack.epsilon),
          std::to_string(cfg.eval.attack.steps),
          std::to_string(r.examples),
          fmt(r.clean_accuracy),
          fmt(r.robust_accuracy),
          fmt(r.clean_loss),
          fmt(r.robust_loss),
          frozen};
}

}  // namespace

const std::vector<std::string>& eval_header() {
  static const std::vector<std::string> h = {"run_id",      "source_mode", "transfer_mode", "k",          "beta",
                                             "lambda_d",    "fraction",    "bn_stats",      "bn_affine",  "seed",
                                             "eps",         "steps",       "examples",      "clean_acc",  "robust_acc",
                                             "clean_loss",  "robust_loss", "frozen_unchanged"};
  return h;
}

const std::vector<std::string>& sweep_header() {
  static const std::vector<std::string> h = {"axis",      "value",      "strategy",   "k",           "beta",
                                             "lambda_d",  "fraction",   "seed",       "clean_acc",   "robust_acc",
                                             "clean_loss", "robust_loss", "frozen_unchanged"};
  return h;
}

DomainData load_domains(const ExperimentConfig& cfg) {
  const auto& d = cfg.data;
  Dataset train, test;
  if (d.format == "glyphs") {
    GlyphSpec g{d.per_class, d.size, d.noise, d.jitter, d.seed, "train"};
    train = synth_glyphs(g);
    g.per_class = d.test_per_class;
    g.split = "test";
    test = synth_glyphs(g);
  } else if (d.format == "blobs") {
    // One draw so both splits share the cluster centers; the first per_class
    // rows of every class form the training split.
    BlobSpec b{d.classes, d.per_class + d.test_per_class, d.dims, d.separation, d.noise, d.seed};
    const Dataset all = synth_blobs(b);
    const std::size_t cut = static_cast<std::size_t>(d.per_class) * d.classes;
    train = all;
    Batch tr = gather_range(all, 0, cut), te = gather_range(all, cut, all.size());
    train.images = std::move(tr.x);
    train.labels = std::move(tr.y);
    test = all;
    test.images = std::move(te.x);
    test.labels = std::move(te.y);
    test.split = "test";
  } else if (d.format == "idx") {
    train = load_idx(d.train_images, d.train_labels, d.classes);
    test = load_idx(d.test_images, d.test_labels, d.classes);
    test.split = "test";
  } else {
    train = load_cifar_binary(d.train_path, d.classes);
    test = load_cifar_binary(d.test_path, d.classes);
    test.split = "test";
  }
  DomainData out;
  out.source_train = select_classes(train, d.source_classes);
  out.source_test = select_classes(test, d.source_classes);
  out.target_train = select_classes(train, d.target_classes);
  out.target_test = select_classes(test, d.target_classes);
  if (d.fraction < 1.0) out.target_train = stratified_subset(out.target_train, d.fraction, d.seed);
  return out;
}

ArchSpec resolve_arch(const ExperimentConfig& cfg, const Dataset& source_train) {
  ArchSpec a;
  a.family = cfg.arch.family;
  a.depth = cfg.arch.depth;
  a.width = cfg.arch.width;
  a.hidden = cfg.arch.hidden;
  a.classes = source_train.num_classes;
  a.input = source_train.sample_shape();
  return a;
}

AccuracyReport evaluate(Network& net, const Dataset& test, const ExperimentConfig& cfg) {
  const Dataset ds = take_prefix(test, cfg.eval.max_examples);
  return robust_accuracy(net, ds, cfg.eval.attack, Rng(cfg.seed, kEvalStream), cfg.eval.batch_size, cfg.workers);
}

TransferConfig make_transfer_config(const ExperimentConfig& cfg, const json& source_meta, int blocks) {
  const auto& t = cfg.transfer;
  TransferConfig tc;
  tc.mode = transfer_mode_from_string(t.mode);
  if (tc.mode == TransferMode::lwf) {
    if (t.k && *t.k != blocks) {
      throw ConfigError("LwF fine-tunes all " + std::to_string(blocks) + " blocks; transfer.k=" +
                        std::to_string(*t.k) + " is not allowed");
    }
    tc.k = blocks;
  } else if (t.k) {
    tc.k = *t.k;
  } else if (source_meta.contains("k") && source_meta["k"].is_number_integer()) {
    tc.k = source_meta["k"].get<int>();
  } else {
    throw ConfigError("transfer.k is required (the source checkpoint records no split)");
  }
  if (tc.mode == TransferMode::neft && source_meta.contains("k") && source_meta["k"].is_number_integer() &&
      source_meta["k"].get<int>() != tc.k) {
    std::cerr << "warning: NEFT fine-tunes k=" << tc.k << " blocks but the source was trained with FDM at k="
              << source_meta["k"].get<int>() << "\n";
  }
  tc.beta = t.beta;
  tc.lambda_d = t.lambda_d;
  tc.bn.extractor_stats_frozen = t.bn_stats == "frozen";
  tc.bn.submodel_affine_frozen = t.bn_affine == "frozen";
  tc.bn.submodel_stats_frozen = t.bn_submodel_stats == "frozen";
  tc.train = make_train_config(t.optim, cfg.seed);
  tc.reinit_head = t.reinit_head;
  tc.power_iters_per_step = t.power_iters;
  tc.warmup_iters = t.warmup_iters;
  tc.bake_iters = t.bake_iters;
  return tc;
}

TransferOutcome run_transfer(const ExperimentConfig& cfg, const LoadedCheckpoint& source, const DomainData& data) {
  if (source.net.arch().input != data.target_train.sample_shape()) {
    throw ConfigError("checkpoint architecture expects input " + shape_str(source.net.arch().input) +
                      ", target data has " + shape_str(data.target_train.sample_shape()));
  }
  const TransferConfig tc = make_transfer_config(cfg, source.meta, static_cast<int>(source.net.num_blocks()));
  TransferOutcome o{transfer(source.net, data.target_train, tc), {}, false};
  Network before(source.net);
  o.frozen_unchanged =
      extractor_unchanged(before, o.result.net, o.result.split_index, o.result.applied_policy.extractor_stats_frozen);
  o.eval = evaluate(o.result.net, data.target_test, cfg);
  return o;
}

fs::path cmd_train_source(const ExperimentConfig& cfg, const fs::path& out) {
  prepare_dir(out, cfg);
  const DomainData data = load_domains(cfg);
  const ArchSpec arch = resolve_arch(cfg, data.source_train);
  Network net = build_network(arch, cfg.seed);
  const int blocks = static_cast<int>(net.num_blocks());
  TrainConfig tc = make_train_config(cfg.source.optim, cfg.seed);
  const std::string run_id = "source-" + cfg.source.mode + "-s" + std::to_string(cfg.seed);
  tc.on_epoch = [&](const EpochMetrics& m) {
    std::cerr << run_id << " epoch " << m.epoch << " lr " << fmt(m.lr) << " clean_acc " << fmt(m.clean_acc)
              << " adv_acc " << fmt(m.adv_acc) << " (" << fmt(m.seconds) << " s)\n";
  };
  TrainResult r;
  const auto& s = cfg.source;
  if (s.mode == "standard") {
    r = train_standard(net, data.source_train, tc);
  } else if (s.mode == "at") {
    r = train_adversarial(net, data.source_train, s.attack, tc);
  } else {
    if (*s.k < 1 || *s.k > blocks) {
      throw ConfigError("source.k=" + std::to_string(*s.k) + " outside 1.." + std::to_string(blocks));
    }
    r = train_source_fdm(net, data.source_train, s.attack, FdmConfig{*s.lambda, *s.k, s.mean_penalty}, tc);
  }
  json meta = {{"phase", "source"},
               {"source_mode", s.mode},
               {"seed", cfg.seed},
               {"blocks", blocks},
               {"attack", attack_to_json(s.attack)},
               {"epochs", s.optim.epochs},
               {"classes", cfg.data.source_classes}};
  if (s.lambda) meta["lambda"] = *s.lambda;
  if (s.k) meta["k"] = *s.k;
  const fs::path ckpt = out / "source.rxf";
  save_checkpoint(net, meta, ckpt);
  CsvTable metrics = epoch_table();
  add_epoch_rows(metrics, run_id, "source", r);
  write_csv(out / "metrics.csv", metrics);
  write_manifest(out, "train-source", cfg, {"source.rxf", "metrics.csv", "config.resolved.json"});
  return ckpt;
}

AccuracyReport cmd_transfer(const ExperimentConfig& cfg, const fs::path& source_ckpt, const fs::path& out) {
  prepare_dir(out, cfg);
  const LoadedCheckpoint source = load_checkpoint(source_ckpt);
  const DomainData data = load_domains(cfg);
  TransferOutcome o = run_transfer(cfg, source, data);
  const auto& t = cfg.transfer;
  json meta = {{"phase", "target"},
               {"source_mode", source.meta.value("source_mode", std::string("unknown"))},
               {"transfer_mode", t.mode},
               {"k", o.result.k},
               {"beta", t.beta},
               {"lambda_d", t.lambda_d},
               {"fraction", cfg.data.fraction},
               {"bn_policy", bn_policy_to_json(o.result.applied_policy)},
               {"seed", cfg.seed},
               {"classes", cfg.data.target_classes},
               {"source", source.meta}};
  save_checkpoint(o.result.net, meta, out / "target.rxf");

  const std::string run_id = source_label(meta["source_mode"]) + "+" + transfer_label(t.mode) + "-k" +
                             std::to_string(o.result.k) + "-s" + std::to_string(cfg.seed);
  CsvTable metrics = epoch_table();
  add_epoch_rows(metrics, run_id, "target", o.result.train);
  write_csv(out / "metrics.csv", metrics);

  CsvTable spectral;
  spectral.header = {"layer", "kind", "rows", "cols", "spectral_norm", "beta"};
  for (const auto& l : o.result.spectral_report) {
    spectral.add_row({l.name, l.kind, std::to_string(l.rows), std::to_string(l.cols), fmt(l.spectral_norm),
                      t.mode == "neft" ? fmt(t.beta) : ""});
  }
  write_csv(out / "spectral.csv", spectral);

  CsvTable ev;
  ev.header = eval_header();
  ev.add_row(eval_row(run_id, meta, cfg, o.eval, o.frozen_unchanged ? "true" : "false"));
  write_csv(out / "eval.csv", ev);
  if (!o.frozen_unchanged) std::cerr << "warning: frozen extractor tensors changed during fine-tuning\n";
  write_manifest(out, "transfer", cfg,
                 {"target.rxf", "metrics.csv", "spectral.csv", "eval.csv", "config.resolved.json"},
                 {{"source_checkpoint", source_ckpt.string()}});
  return o.eval;
}

AccuracyReport cmd_eval(const ExperimentConfig& cfg, const fs::path& ckpt_path, const fs::path& out) {
  prepare_dir(out, cfg);
  LoadedCheckpoint ckpt = load_checkpoint(ckpt_path);
  const DomainData data = load_domains(cfg);
  const bool target = ckpt.meta.value("phase", std::string("source")) == "target";
  const Dataset& test = target ? data.target_test : data.source_test;
  if (test.num_classes != ckpt.net.classes() || test.sample_shape() != ckpt.net.arch().input) {
    throw ConfigError("checkpoint does not match the configured " + std::string(target ? "target" : "source") +
                      " data (classes or input shape)");
  }
  const AccuracyReport r = evaluate(ckpt.net, test, cfg);
  CsvTable ev;
  ev.header = eval_header();
  ev.add_row(eval_row("eval-" + ckpt_path.stem().string() + "-s" + std::to_string(cfg.seed), ckpt.meta, cfg, r, ""));
  write_csv(out / "eval.csv", ev);
  write_manifest(out, "eval", cfg, {"eval.csv", "config.resolved.json"}, {{"checkpoint", ckpt_path.string()}});
  return r;
}

std::string sweep_plot(const CsvTable& sweep) {
  const int axis = sweep.column("axis");
  const std::string name = axis >= 0 && !sweep.rows.empty() ? sweep.rows.front()[axis] : "value";
  return render_svg_plot(sweep, "value", {{"clean_acc", "accuracy"}, {"robust_acc", "robustness"}},
                         "accuracy and robustness vs " + name, "strategy");
}

CsvTable cmd_sweep(const ExperimentConfig& cfg, const fs::path& source_ckpt, const fs::path& out) {
  prepare_dir(out, cfg);
  const LoadedCheckpoint source = load_checkpoint(source_ckpt);
  ExperimentConfig full = cfg;
  full.data.fraction = 1.0;
  const DomainData base = load_domains(full);
  const int blocks = static_cast<int>(source.net.num_blocks());

  std::vector<double> values = cfg.sweep.values;
  if (values.empty()) {
    if (cfg.sweep.axis != "k") throw ConfigError("sweep.values must list the " + cfg.sweep.axis + " values");
    for (int k = 1; k <= blocks; ++k) values.push_back(k);
  }
  std::vector<std::string> strategies = cfg.sweep.strategies;
  if (strategies.empty()) strategies.push_back(cfg.transfer.mode);

  struct Job {
    std::string strategy;
    double value;
    ExperimentConfig cfg;
  };
  std::vector<Job> jobs;
  for (const auto& s : strategies) {
    for (double v : values) {
      ExperimentConfig c = cfg;
      c.transfer.mode = s;
      if (cfg.sweep.axis == "k") {
        if (v != std::floor(v)) throw ConfigError("sweep: k values must be integers");
        c.transfer.k = static_cast<int>(v);
      } else if (cfg.sweep.axis == "lambda_d") {
        c.transfer.lambda_d = v;
      } else if (cfg.sweep.axis == "beta") {
        c.transfer.beta = v;
      } else {
        c.data.fraction = v;
      }
      if (s == "lwf") c.transfer.k.reset();
      jobs.push_back({s, v, std::move(c)});
    }
  }

  std::vector<std::optional<std::vector<std::string>>> rows(jobs.size());
  std::vector<std::optional<TrainResult>> trains(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  auto run = [&](std::size_t i) {
    try {
      const Job& job = jobs[i];
      DomainData data = base;
      if (cfg.sweep.axis == "fraction") {
        data.target_train = stratified_subset(base.target_train, job.value, cfg.data.seed);
      } else if (cfg.data.fraction < 1.0) {
        data.target_train = stratified_subset(base.target_train, cfg.data.fraction, cfg.data.seed);
      }
      ExperimentConfig c = job.cfg;
      c.workers = 1;
      TransferOutcome o = run_transfer(c, source, data);
      rows[i] = std::vector<std::string>{cfg.sweep.axis,
                                         fmt(job.value),
                                         job.strategy,
                                         std::to_string(o.result.k),
                                         fmt(c.transfer.beta),
                                         fmt(c.transfer.lambda_d),
                                         fmt(cfg.sweep.axis == "fraction" ? job.value : cfg.data.fraction),
                                         std::to_string(cfg.seed),
                                         fmt(o.eval.clean_accuracy),
                                         fmt(o.eval.robust_accuracy),
                                         fmt(o.eval.clean_loss),
                                         fmt(o.eval.robust_loss),
                                         o.frozen_unchanged ? "true" : "false"};
      trains[i] = std::move(o.result.train);
      // one write per line so parallel jobs do not interleave
      std::cerr << ("sweep " + cfg.sweep.axis + "=" + fmt(job.value) + " " + job.strategy + ": clean " +
                    fmt(o.eval.clean_accuracy) + " robust " + fmt(o.eval.robust_accuracy) + "\n");
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const auto threads = std::min<std::size_t>(static_cast<std::size_t>(cfg.workers), jobs.size());
  if (threads <= 1) {
    for (std::size_t i = 0; i < jobs.size(); ++i) run(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        for (std::size_t i = t; i < jobs.size(); i += threads) run(i);
      });
    }
    for (auto& th : pool) th.join();
  }

  CsvTable table;
  table.header = sweep_header();
  CsvTable metrics = epoch_table();
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (rows[i]) table.add_row(*rows[i]);
    if (trains[i]) add_epoch_rows(metrics, jobs[i].strategy + "-" + cfg.sweep.axis + "=" + fmt(jobs[i].value), "target", *trains[i]);
  }
  write_csv(out / "sweep.csv", table);
  write_csv(out / "metrics.csv", metrics);
  write_text(out / "sweep.svg", sweep_plot(read_csv(out / "sweep.csv")));
  write_manifest(out, "sweep", cfg, {"sweep.csv", "sweep.svg", "metrics.csv", "config.resolved.json"},
                 {{"source_checkpoint", source_ckpt.string()}, {"axis", cfg.sweep.axis}});
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return table;
}

CsvTable cmd_report(const fs::path& run_dir) {
  if (!fs::is_directory(run_dir)) throw DataError(run_dir.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(run_dir)) {
    if (entry.is_regular_file() && entry.path().filename() == "eval.csv") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError(run_dir.string() + ": no eval.csv metrics files found");

  struct Cell {
    std::vector<double> clean, robust;
  };
  std::map<std::pair<std::string, std::string>, Cell> grid;
  for (const auto& f : files) {
    const CsvTable t = read_csv(f);
    for (const char* col : {"source_mode", "transfer_mode", "clean_acc", "robust_acc"}) {
      if (t.column(col) < 0) throw DataError(f.string() + ": missing column " + col);
    }
    const int sm = t.column("source_mode"), tm = t.column("transfer_mode");
    const int ca = t.column("clean_acc"), ra = t.column("robust_acc");
    for (const auto& row : t.rows) {
      auto& cell = grid[{row[sm], row[tm]}];
      cell.clean.push_back(std::strtod(row[ca].c_str(), nullptr));
      cell.robust.push_back(std::strtod(row[ra].c_str(), nullptr));
    }
  }
  auto stats = [](const std::vector<double>& v) {
    double m = 0.0, s = 0.0;
    for (double x : v) m += x;
    m /= v.size();
    for (double x : v) s += (x - m) * (x - m);
    return std::pair{m, v.size() > 1 ? std::sqrt(s / (v.size() - 1)) : 0.0};
  };
  // Ablation order first, then anything else alphabetically.
  const std::vector<std::pair<std::string, std::string>> preferred = {
      {"at", "vanilla"}, {"at", "neft"}, {"at_fdm", "neft"}};
  std::vector<std::pair<std::string, std::string>> keys;
  for (const auto& k : preferred) {
    if (grid.count(k)) keys.push_back(k);
  }
  for (const auto& [k, _] : grid) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
  }
  CsvTable report;
  report.header = {"method", "source_mode", "transfer_mode", "runs", "clean_acc", "clean_std", "robust_acc", "robust_std"};
  for (const auto& k : keys) {
    const auto& cell = grid[k];
    const auto [cm, cs] = stats(cell.clean);
    const auto [rm, rs] = stats(cell.robust);
    report.add_row({source_label(k.first) + "+" + transfer_label(k.second), k.first, k.second,
                    std::to_string(cell.clean.size()), fmt(cm), fmt(cs), fmt(rm), fmt(rs)});
  }
  write_csv(run_dir / "report.csv", report);
  return report;
}

}  // namespace rxf
