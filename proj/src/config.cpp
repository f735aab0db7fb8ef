#include "rxf/config.hpp"

#include <fstream>
#include <set>

#include "rxf/error.hpp"

namespace rxf {

using nlohmann::json;

namespace {

/// Reads keys of one JSON object and rejects the ones nobody asked for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  void get(const std::string& key, T& out) {
    allowed_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where(key) + ": wrong type (" + j_.at(key).dump() + ")");
    }
  }

  template <typename T>
  void get_opt(const std::string& key, std::optional<T>& out) {
    allowed_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return;
    T v{};
    get(key, v);
    out = v;
  }

  void number(const std::string& key, double& out) {
    allowed_.insert(key);
    if (j_.contains(key)) out = parse_number(j_.at(key), where(key));
  }

  const json* child(const std::string& key) {
    allowed_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!allowed_.count(key)) throw ConfigError("unknown key '" + where(key) + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> allowed_;
};

void one_of(const std::string& value, std::initializer_list<const char*> options, const std::string& path) {
  std::string list;
  for (const char* o : options) {
    if (value == o) return;
    list += (list.empty() ? "" : " | ") + std::string(o);
  }
  throw ConfigError(path + ": '" + value + "' is not one of " + list);
}

Mode mode_from_name(const std::string& s, const std::string& path) {
  if (s == "inference") return Mode::inference;
  if (s == "batch_stats") return Mode::batch_stats;
  throw ConfigError(path + ": BN mode during attacks must be inference | batch_stats");
}

void read_attack(const json* j, const std::string& path, AttackConfig& a) {
  if (!j) return;
  Section s(*j, path);
  s.number("eps", a.epsilon);
  s.number("alpha", a.alpha);
  s.get("steps", a.steps);
  s.get("random_start", a.random_start);
  std::string bn = mode_name(a.bn_mode);
  s.get("bn_mode", bn);
  a.bn_mode = mode_from_name(bn, s.where("bn_mode"));
  s.finish();
  try {
    a.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void read_optim(const json* j, const std::string& path, OptimSection& o) {
  if (!j) return;
  Section s(*j, path);
  s.get("epochs", o.epochs);
  s.get("batch_size", o.batch_size);
  s.number("lr", o.lr);
  s.get("milestones", o.milestones);
  s.number("decay", o.decay);
  s.number("momentum", o.momentum);
  s.get("augment_flip", o.augment_flip);
  s.get("augment_crop", o.augment_crop);
  s.finish();
  if (o.epochs < 0) throw ConfigError(path + ".epochs must be >= 0");
  if (o.batch_size < 2) throw ConfigError(path + ".batch_size must be >= 2");
  if (!(o.lr > 0)) throw ConfigError(path + ".lr must be > 0");
  if (!(o.decay > 0 && o.decay <= 1)) throw ConfigError(path + ".decay must be in (0, 1]");
  if (!(o.momentum >= 0 && o.momentum < 1)) throw ConfigError(path + ".momentum must be in [0, 1)");
}

json optim_to_json(const OptimSection& o) {
  return {{"epochs", o.epochs},         {"batch_size", o.batch_size}, {"lr", o.lr},
          {"milestones", o.milestones}, {"decay", o.decay},           {"momentum", o.momentum},
          {"augment_flip", o.augment_flip}, {"augment_crop", o.augment_crop}};
}

}  // namespace

std::string mode_name(Mode m) {
  switch (m) {
    case Mode::train: return "train";
    case Mode::inference: return "inference";
    case Mode::batch_stats: return "batch_stats";
  }
  return "?";
}

double parse_number(const json& v, const std::string& path) {
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) {
    const std::string s = v.get<std::string>();
    try {
      std::size_t used = 0;
      const auto slash = s.find('/');
      if (slash == std::string::npos) {
        const double x = std::stod(s, &used);
        if (used == s.size()) return x;
      } else {
        const double a = std::stod(s.substr(0, slash), &used);
        if (used == slash) {
          const std::string rest = s.substr(slash + 1);
          const double b = std::stod(rest, &used);
          if (used == rest.size() && b != 0.0) return a / b;
        }
      }
    } catch (const std::exception&) {
    }
  }
  throw ConfigError(path + ": expected a number or a fraction like \"8/255\", got " + v.dump());
}

json attack_to_json(const AttackConfig& a) {
  return {{"eps", a.epsilon},
          {"alpha", a.alpha},
          {"steps", a.steps},
          {"random_start", a.random_start},
          {"bn_mode", mode_name(a.bn_mode)}};
}

ExperimentConfig parse_config(const json& doc) {
  ExperimentConfig c;
  c.eval.attack.steps = 100;
  Section root(doc, "");
  root.get("seed", c.seed);
  root.get("workers", c.workers);
  if (c.workers < 1) throw ConfigError("workers must be >= 1");

  if (const json* j = root.child("data")) {
    auto& d = c.data;
    Section s(*j, "data");
    s.get("format", d.format);
    s.get("seed", d.seed);
    s.get("per_class", d.per_class);
    s.get("test_per_class", d.test_per_class);
    s.get("size", d.size);
    s.number("noise", d.noise);
    s.number("jitter", d.jitter);
    s.get("dims", d.dims);
    s.number("separation", d.separation);
    s.get("classes", d.classes);
    s.get("train_images", d.train_images);
    s.get("train_labels", d.train_labels);
    s.get("test_images", d.test_images);
    s.get("test_labels", d.test_labels);
    s.get("train_path", d.train_path);
    s.get("test_path", d.test_path);
    s.get("source_classes", d.source_classes);
    s.get("target_classes", d.target_classes);
    s.number("fraction", d.fraction);
    s.finish();
    one_of(d.format, {"glyphs", "blobs", "idx", "cifar"}, "data.format");
    if (!(d.fraction > 0 && d.fraction <= 1)) throw ConfigError("data.fraction must be in (0, 1]");
    if (d.source_classes.empty() || d.target_classes.empty()) throw ConfigError("data: class lists must be non-empty");
    if (d.format == "idx" && (d.train_images.empty() || d.train_labels.empty() || d.test_images.empty() ||
                              d.test_labels.empty())) {
      throw ConfigError("data: idx format needs train_images, train_labels, test_images and test_labels");
    }
    if (d.format == "cifar" && (d.train_path.empty() || d.test_path.empty())) {
      throw ConfigError("data: cifar format needs train_path and test_path");
    }
  }

  if (const json* j = root.child("arch")) {
    Section s(*j, "arch");
    s.get("family", c.arch.family);
    s.get("depth", c.arch.depth);
    s.get("width", c.arch.width);
    s.get("hidden", c.arch.hidden);
    s.finish();
    one_of(c.arch.family, {"small-cnn", "mini-resnet", "mlp"}, "arch.family");
  }

  if (const json* j = root.child("source")) {
    auto& src = c.source;
    Section s(*j, "source");
    s.get("mode", src.mode);
    s.get_opt("lambda", src.lambda);
    s.get_opt("k", src.k);
    s.get("mean_penalty", src.mean_penalty);
    read_attack(s.child("attack"), "source.attack", src.attack);
    read_optim(s.child("optim"), "source.optim", src.optim);
    s.finish();
  }
  one_of(c.source.mode, {"standard", "at", "at_fdm"}, "source.mode");
  if (c.source.mode == "at_fdm") {
    if (!c.source.lambda) throw ConfigError("source.lambda is required when source.mode = at_fdm");
    if (!c.source.k) throw ConfigError("source.k is required when source.mode = at_fdm");
  }
  if (c.source.lambda && *c.source.lambda < 0) throw ConfigError("source.lambda must be >= 0");

  if (const json* j = root.child("transfer")) {
    auto& t = c.transfer;
    Section s(*j, "transfer");
    s.get("mode", t.mode);
    s.get_opt("k", t.k);
    s.number("beta", t.beta);
    s.number("lambda_d", t.lambda_d);
    s.get("bn_stats", t.bn_stats);
    s.get("bn_affine", t.bn_affine);
    s.get("bn_submodel_stats", t.bn_submodel_stats);
    s.get("reinit_head", t.reinit_head);
    s.get("power_iters", t.power_iters);
    s.get("warmup_iters", t.warmup_iters);
    s.get("bake_iters", t.bake_iters);
    read_optim(s.child("optim"), "transfer.optim", t.optim);
    s.finish();
  }
  {
    const auto& t = c.transfer;
    one_of(t.mode, {"vanilla", "neft", "lwf"}, "transfer.mode");
    one_of(t.bn_stats, {"frozen", "updating"}, "transfer.bn_stats");
    one_of(t.bn_affine, {"frozen", "trainable"}, "transfer.bn_affine");
    one_of(t.bn_submodel_stats, {"frozen", "updating"}, "transfer.bn_submodel_stats");
    if (!(t.beta > 0 && t.beta <= 1)) throw ConfigError("transfer.beta must be in (0, 1]");
    if (t.lambda_d < 0) throw ConfigError("transfer.lambda_d must be >= 0");
    if (t.power_iters < 1 || t.warmup_iters < 0 || t.bake_iters < 1) {
      throw ConfigError("transfer: power_iters and bake_iters must be >= 1, warmup_iters >= 0");
    }
  }

  if (const json* j = root.child("eval")) {
    Section s(*j, "eval");
    read_attack(s.child("attack"), "eval.attack", c.eval.attack);
    s.get("max_examples", c.eval.max_examples);
    s.get("batch_size", c.eval.batch_size);
    s.finish();
  }

  if (const json* j = root.child("sweep")) {
    Section s(*j, "sweep");
    s.get("axis", c.sweep.axis);
    if (const json* v = s.child("values")) {
      if (!v->is_array()) throw ConfigError("sweep.values: expected an array");
      for (std::size_t i = 0; i < v->size(); ++i) {
        c.sweep.values.push_back(parse_number((*v)[i], "sweep.values[" + std::to_string(i) + "]"));
      }
    }
    s.get("strategies", c.sweep.strategies);
    s.finish();
    one_of(c.sweep.axis, {"k", "lambda_d", "beta", "fraction"}, "sweep.axis");
    for (const auto& m : c.sweep.strategies) one_of(m, {"vanilla", "neft", "lwf"}, "sweep.strategies");
  }

  if (const json* j = root.child("output")) {
    Section s(*j, "output");
    s.get("dir", c.output_dir);
    s.finish();
  }
  root.finish();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(doc);
}

json config_to_json(const ExperimentConfig& c) {
  const auto& d = c.data;
  const auto& t = c.transfer;
  json src = {{"mode", c.source.mode},
              {"mean_penalty", c.source.mean_penalty},
              {"attack", attack_to_json(c.source.attack)},
              {"optim", optim_to_json(c.source.optim)}};
  if (c.source.lambda) src["lambda"] = *c.source.lambda;
  if (c.source.k) src["k"] = *c.source.k;
  json tr = {{"mode", t.mode},
             {"beta", t.beta},
             {"lambda_d", t.lambda_d},
             {"bn_stats", t.bn_stats},
             {"bn_affine", t.bn_affine},
             {"bn_submodel_stats", t.bn_submodel_stats},
             {"reinit_head", t.reinit_head},
             {"power_iters", t.power_iters},
             {"warmup_iters", t.warmup_iters},
             {"bake_iters", t.bake_iters},
             {"optim", optim_to_json(t.optim)}};
  if (t.k) tr["k"] = *t.k;
  return {
      {"seed", c.seed},
      {"workers", c.workers},
      {"data",
       {{"format", d.format}, {"seed", d.seed}, {"per_class", d.per_class}, {"test_per_class", d.test_per_class},
        {"size", d.size}, {"noise", d.noise}, {"jitter", d.jitter}, {"dims", d.dims}, {"separation", d.separation},
        {"classes", d.classes}, {"train_images", d.train_images}, {"train_labels", d.train_labels},
        {"test_images", d.test_images}, {"test_labels", d.test_labels}, {"train_path", d.train_path},
        {"test_path", d.test_path}, {"source_classes", d.source_classes}, {"target_classes", d.target_classes},
        {"fraction", d.fraction}}},
      {"arch", {{"family", c.arch.family}, {"depth", c.arch.depth}, {"width", c.arch.width}, {"hidden", c.arch.hidden}}},
      {"source", src},
      {"transfer", tr},
      {"eval",
       {{"attack", attack_to_json(c.eval.attack)}, {"max_examples", c.eval.max_examples},
        {"batch_size", c.eval.batch_size}}},
      {"sweep", {{"axis", c.sweep.axis}, {"values", c.sweep.values}, {"strategies", c.sweep.strategies}}},
      {"output", {{"dir", c.output_dir}}},
  };
}

}  // namespace rxf
