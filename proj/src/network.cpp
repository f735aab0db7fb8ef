#include "rxf/network.hpp"

#include <algorithm>

#include "rxf/error.hpp"

namespace rxf {

nlohmann::json arch_to_json(const ArchSpec& arch) {
  return nlohmann::json{{"family", arch.family}, {"depth", arch.depth},   {"width", arch.width},
                        {"classes", arch.classes}, {"input", arch.input}, {"hidden", arch.hidden}};
}

ArchSpec arch_from_json(const nlohmann::json& j) {
  ArchSpec a;
  a.family = j.at("family").get<std::string>();
  a.depth = j.at("depth").get<int>();
  a.width = j.at("width").get<int>();
  a.classes = j.at("classes").get<int>();
  a.input = j.at("input").get<Shape>();
  a.hidden = j.at("hidden").get<std::vector<int>>();
  return a;
}

Network::Network(ArchSpec arch, std::vector<std::unique_ptr<Layer>> blocks)
    : arch_(std::move(arch)), blocks_(std::move(blocks)) {
  if (blocks_.empty()) throw ConfigError("network needs at least one block");
  // Validates the shape arithmetic end to end.
  const Shape out = block_input_shape(blocks_.size());
  if (out != Shape{arch_.classes}) {
    throw ConfigError("network output shape " + shape_str(out) + " does not match " + std::to_string(arch_.classes) +
                      " classes");
  }
}

Network::Network(const Network& other) : arch_(other.arch_) {
  for (const auto& b : other.blocks_) blocks_.push_back(b->clone());
}

Network& Network::operator=(const Network& other) {
  if (this != &other) {
    Network copy(other);
    *this = std::move(copy);
  }
  return *this;
}

TensorF Network::forward_range(const TensorF& x, std::size_t begin, std::size_t end, Mode mode) {
  if (begin > end || end > blocks_.size()) throw ShapeError("forward_range: invalid block range");
  TensorF h = x;
  for (std::size_t i = begin; i < end; ++i) h = blocks_[i]->forward(h, mode);
  return h;
}

Shape Network::block_input_shape(std::size_t i) const {
  if (i > blocks_.size()) throw ShapeError("block index out of range");
  Shape s = arch_.input;
  for (std::size_t b = 0; b < i; ++b) s = blocks_[b]->output_shape(s);
  return s;
}

std::vector<NamedTensor> Network::named_tensors() {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i]->collect("b" + std::to_string(i) + ".", out);
  return out;
}

std::vector<NamedTensor> Network::named_tensors_of_block(std::size_t i) {
  std::vector<NamedTensor> out;
  blocks_.at(i)->collect("b" + std::to_string(i) + ".", out);
  return out;
}

std::vector<TensorF> Network::trainable_parameters() {
  std::vector<TensorF> out;
  for (auto& nt : named_tensors()) {
    if (nt.parameter && nt.tensor.requires_grad()) out.push_back(nt.tensor);
  }
  return out;
}

void Network::set_block_trainable(std::size_t i, bool trainable) {
  for (auto& nt : named_tensors_of_block(i)) {
    if (nt.parameter) nt.tensor.set_requires_grad(trainable);
  }
}

void Network::visit(const std::function<void(Layer&)>& fn) {
  for (auto& b : blocks_) b->visit(fn);
}

void Network::visit_block(std::size_t i, const std::function<void(Layer&)>& fn) { blocks_.at(i)->visit(fn); }

void Network::reset_head(int classes, Rng& rng) {
  Dense* head = nullptr;
  blocks_.back()->visit([&](Layer& l) {
    if (auto* d = dynamic_cast<Dense*>(&l)) head = d;
  });
  if (!head) throw ConfigError("network has no dense classifier in its last block");
  Dense fresh(head->weight.dim(1), classes, rng);
  head->weight = fresh.weight;
  head->bias = fresh.bias;
  head->spectral.reset();
  arch_.classes = classes;
}

std::vector<std::string> Network::block_aggregation() const {
  std::vector<std::string> out;
  for (const auto& b : blocks_) {
    const auto* r = dynamic_cast<const ResidualBlock*>(b.get());
    out.push_back(r && r->aggregation == ops::Aggregation::convex ? "convex" : "sum");
  }
  return out;
}

void Network::set_block_aggregation(const std::vector<std::string>& modes) {
  if (modes.size() != blocks_.size()) throw ConfigError("aggregation list length does not match block count");
  for (std::size_t i = 0; i < modes.size(); ++i) {
    if (modes[i] != "sum" && modes[i] != "convex") throw ConfigError("unknown aggregation mode " + modes[i]);
    if (auto* r = dynamic_cast<ResidualBlock*>(blocks_[i].get())) {
      r->aggregation = modes[i] == "convex" ? ops::Aggregation::convex : ops::Aggregation::sum;
    } else if (modes[i] == "convex") {
      throw ConfigError("block " + std::to_string(i) + " has no residual aggregation");
    }
  }
}

namespace {

std::unique_ptr<Sequential> seq() { return std::make_unique<Sequential>(); }

std::unique_ptr<Sequential> conv_bn_relu(std::int64_t cin, std::int64_t cout, int stride, Rng rng) {
  auto s = seq();
  s->layers.push_back(std::make_unique<Conv2D>(cin, cout, 3, stride, 1, rng));
  s->layers.push_back(std::make_unique<BatchNorm>(cout));
  s->layers.push_back(std::make_unique<ReLU>());
  return s;
}

std::vector<std::unique_ptr<Layer>> build_small_cnn(const ArchSpec& a, Rng& rng) {
  if (a.input.size() != 3) throw ConfigError("small-cnn needs a (C, H, W) input shape");
  if (a.depth < 1) throw ConfigError("small-cnn depth must be >= 1");
  std::vector<std::unique_ptr<Layer>> blocks;
  std::int64_t ch = a.input[0], h = a.input[1], w = a.input[2];
  for (int i = 0; i < a.depth; ++i) {
    const std::int64_t out = 8LL * a.width * (std::int64_t{1} << ((i + 1) / 2));
    auto b = conv_bn_relu(ch, out, 1, rng.fork(100 + i));
    ch = out;
    if (i % 2 == 1 && h >= 2 && w >= 2) {
      b->layers.push_back(std::make_unique<MaxPool>(2));
      h /= 2;
      w /= 2;
    }
    blocks.push_back(std::move(b));
  }
  const std::int64_t features = ch * h * w;
  const std::int64_t hidden = a.hidden.empty() ? 64LL * a.width : a.hidden.front();
  Rng r1 = rng.fork(200), r2 = rng.fork(201);
  auto fc = seq();
  fc->layers.push_back(std::make_unique<Flatten>());
  fc->layers.push_back(std::make_unique<Dense>(features, hidden, r1));
  fc->layers.push_back(std::make_unique<BatchNorm>(hidden));
  fc->layers.push_back(std::make_unique<ReLU>());
  blocks.push_back(std::move(fc));
  auto head = seq();
  head->layers.push_back(std::make_unique<Dense>(hidden, a.classes, r2));
  blocks.push_back(std::move(head));
  return blocks;
}

std::unique_ptr<ResidualBlock> basic_block(std::int64_t cin, std::int64_t cout, int stride, Rng rng) {
  Sequential main;
  main.layers.push_back(std::make_unique<Conv2D>(cin, cout, 3, stride, 1, rng));
  main.layers.push_back(std::make_unique<BatchNorm>(cout));
  main.layers.push_back(std::make_unique<ReLU>());
  main.layers.push_back(std::make_unique<Conv2D>(cout, cout, 3, 1, 1, rng));
  main.layers.push_back(std::make_unique<BatchNorm>(cout));
  Sequential shortcut;
  if (stride != 1 || cin != cout) {
    shortcut.layers.push_back(std::make_unique<Conv2D>(cin, cout, 1, stride, 0, rng));
    shortcut.layers.push_back(std::make_unique<BatchNorm>(cout));
  }
  return std::make_unique<ResidualBlock>(std::move(main), std::move(shortcut));
}

std::vector<std::unique_ptr<Layer>> build_mini_resnet(const ArchSpec& a, Rng& rng) {
  if (a.input.size() != 3) throw ConfigError("mini-resnet needs a (C, H, W) input shape");
  if (a.depth < 3) throw ConfigError("mini-resnet depth must be >= 3");
  std::vector<std::unique_ptr<Layer>> blocks;
  const std::int64_t base = 16LL * a.width;
  Rng stem_rng = rng.fork(100);
  blocks.push_back(conv_bn_relu(a.input[0], base, 1, stem_rng));
  const int residual = a.depth - 2;
  std::int64_t ch = base;
  int index = 0;
  for (int stage = 0; stage < 3; ++stage) {
    const int count = residual / 3 + (stage < residual % 3 ? 1 : 0);
    const std::int64_t out = base << stage;
    for (int j = 0; j < count; ++j) {
      const int stride = (stage > 0 && j == 0) ? 2 : 1;
      blocks.push_back(basic_block(ch, out, stride, rng.fork(300 + index++)));
      ch = out;
    }
  }
  Rng head_rng = rng.fork(400);
  auto head = seq();
  head->layers.push_back(std::make_unique<GlobalAvgPool>());
  head->layers.push_back(std::make_unique<Dense>(ch, a.classes, head_rng));
  blocks.push_back(std::move(head));
  return blocks;
}

std::vector<std::unique_ptr<Layer>> build_mlp(const ArchSpec& a, Rng& rng) {
  std::vector<std::unique_ptr<Layer>> blocks;
  std::int64_t in = shape_numel(a.input);
  for (std::size_t i = 0; i < a.hidden.size(); ++i) {
    Rng r = rng.fork(100 + i);
    auto b = seq();
    if (i == 0) b->layers.push_back(std::make_unique<Flatten>());
    b->layers.push_back(std::make_unique<Dense>(in, a.hidden[i], r));
    b->layers.push_back(std::make_unique<ReLU>());
    blocks.push_back(std::move(b));
    in = a.hidden[i];
  }
  Rng r = rng.fork(200);
  auto head = seq();
  if (a.hidden.empty()) head->layers.push_back(std::make_unique<Flatten>());
  head->layers.push_back(std::make_unique<Dense>(in, a.classes, r));
  blocks.push_back(std::move(head));
  return blocks;
}

}  // namespace

Network build_network(const ArchSpec& arch, std::uint64_t seed) {
  if (arch.classes < 1) throw ConfigError("class count must be >= 1");
  if (arch.width < 1) throw ConfigError("width must be >= 1");
  Rng rng(seed, 0xA5C4);
  std::vector<std::unique_ptr<Layer>> blocks;
  if (arch.family == "small-cnn") {
    blocks = build_small_cnn(arch, rng);
  } else if (arch.family == "mini-resnet") {
    blocks = build_mini_resnet(arch, rng);
  } else if (arch.family == "mlp") {
    blocks = build_mlp(arch, rng);
  } else {
    throw ConfigError("unknown architecture family '" + arch.family + "'");
  }
  try {
    return Network(arch, std::move(blocks));
  } catch (const ShapeError& e) {
    throw ConfigError(std::string("inconsistent shape arithmetic: ") + e.what());
  }
}

SplitView split(Network& net, int k) {
  const int blocks = static_cast<int>(net.num_blocks());
  if (k < 1 || k > blocks) {
    throw ConfigError("fine-tuned block count k=" + std::to_string(k) + " outside 1.." + std::to_string(blocks));
  }
  const std::size_t split_index = static_cast<std::size_t>(blocks - k);
  for (std::size_t i = 0; i < split_index; ++i) net.set_block_trainable(i, false);
  return SplitView(net, split_index);
}

bool bit_equal_parameters(Network& a, Network& b) {
  auto ta = a.named_tensors();
  auto tb = b.named_tensors();
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (ta[i].name != tb[i].name || !bit_equal(ta[i].tensor, tb[i].tensor)) return false;
  }
  return true;
}

}  // namespace rxf
