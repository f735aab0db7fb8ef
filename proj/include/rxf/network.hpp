#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "rxf/layers.hpp"

namespace rxf {

/// Architecture descriptor. Families:
///  small-cnn   `depth` conv+BN+relu blocks (max-pool after every second one),
///              a dense+BN+relu block and a dense classifier block; L = depth + 2.
///  mini-resnet conv stem, depth - 2 residual blocks over three stages, and a
///              global-pool + dense head; L = depth.
///  mlp         one dense+relu block per entry of `hidden`, then a dense
///              classifier block; L = hidden.size() + 1.
struct ArchSpec {
  std::string family = "small-cnn";
  int depth = 4;
  int width = 1;
  int classes = 10;
  Shape input = {1, 28, 28};
  std::vector<int> hidden = {64};
};

nlohmann::json arch_to_json(const ArchSpec& arch);
ArchSpec arch_from_json(const nlohmann::json& j);

/// Ordered block list f = f^L o ... o f^1; blocks are the fine-tune unit.
class Network {
 public:
  Network(ArchSpec arch, std::vector<std::unique_ptr<Layer>> blocks);
  Network(const Network& other);
  Network& operator=(const Network& other);
  Network(Network&&) = default;
  Network& operator=(Network&&) = default;

  const ArchSpec& arch() const { return arch_; }
  std::size_t num_blocks() const { return blocks_.size(); }
  Layer& block(std::size_t i) { return *blocks_.at(i); }
  const Layer& block(std::size_t i) const { return *blocks_.at(i); }
  int classes() const { return arch_.classes; }

  TensorF forward(const TensorF& x, Mode mode) { return forward_range(x, 0, blocks_.size(), mode); }
  /// Blocks [begin, end) applied in order.
  TensorF forward_range(const TensorF& x, std::size_t begin, std::size_t end, Mode mode);

  /// Per-sample input shape of block i (i == L gives the logits shape).
  Shape block_input_shape(std::size_t i) const;

  /// Parameters and buffers with stable hierarchical names ("b3.main.0.weight").
  std::vector<NamedTensor> named_tensors();
  std::vector<NamedTensor> named_tensors_of_block(std::size_t i);
  std::vector<TensorF> trainable_parameters();
  void set_block_trainable(std::size_t i, bool trainable);

  /// Visits every layer of every block.
  void visit(const std::function<void(Layer&)>& fn);
  void visit_block(std::size_t i, const std::function<void(Layer&)>& fn);

  /// Replaces the classifier (last dense layer) with a freshly initialized one.
  void reset_head(int classes, Rng& rng);

  /// Aggregation mode per block ("sum" for blocks without a residual).
  std::vector<std::string> block_aggregation() const;
  void set_block_aggregation(const std::vector<std::string>& modes);

 private:
  ArchSpec arch_;
  std::vector<std::unique_ptr<Layer>> blocks_;
};

/// Builds and initializes a registered family: Kaiming fan-in weights, zero
/// biases, BN scale 1 / shift 0 / mean 0 / var 1. Same seed, same parameters.
Network build_network(const ArchSpec& arch, std::uint64_t seed);

/// Extractor f^(L-k) (blocks [0, L-k)) and sub-model (blocks [L-k, L)) over a
/// shared network. Non-owning; the network must outlive the view.
class SplitView {
 public:
  SplitView(Network& net, std::size_t split_index) : net_(&net), split_(split_index) {}

  std::size_t split_index() const { return split_; }
  std::size_t k() const { return net_->num_blocks() - split_; }
  Network& network() const { return *net_; }

  TensorF extractor(const TensorF& x, Mode mode) const { return net_->forward_range(x, 0, split_, mode); }
  TensorF submodel(const TensorF& h, Mode mode) const {
    return net_->forward_range(h, split_, net_->num_blocks(), mode);
  }
  Shape feature_shape() const { return net_->block_input_shape(split_); }

 private:
  Network* net_;
  std::size_t split_;
};

/// Splits off the last k blocks for fine-tuning and marks every extractor
/// parameter non-trainable. k must be in 1..L.
SplitView split(Network& net, int k);

bool bit_equal_parameters(Network& a, Network& b);

}  // namespace rxf
