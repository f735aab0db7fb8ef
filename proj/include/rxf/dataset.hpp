#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rxf/tensor.hpp"

namespace rxf {

/// Labeled images, (N, C, H, W) or (N, D) for vector data, values in [0, 1].
struct Dataset {
  TensorF images;
  std::vector<int> labels;
  int num_classes = 0;
  std::string split = "train";
  nlohmann::json provenance = nlohmann::json::object();

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }
  /// Pixel range, label range and N > 0; throws DataError.
  void validate() const;
  std::vector<std::size_t> class_counts() const;
};

struct Batch {
  TensorF x;
  std::vector<int> y;
};

Batch gather(const Dataset& ds, std::span<const std::size_t> indices);
Batch gather_range(const Dataset& ds, std::size_t begin, std::size_t end);

/// Standard IDX pair (big-endian magic 0x00000803 images / 0x00000801 labels,
/// unsigned bytes). Pixels scale by 1/255; a channel axis of 1 is inserted.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, int num_classes = 10);

/// CIFAR binary batch: records of 1 label byte + 3072 pixel bytes (R, G, B planes).
Dataset load_cifar_binary(const std::filesystem::path& path, int num_classes = 10);

struct BlobSpec {
  int classes = 2;
  int per_class = 100;
  int dims = 2;
  double separation = 0.5;  // distance between neighbouring class centers
  double noise = 0.05;      // per-coordinate Gaussian std
  std::uint64_t seed = 0;
};

/// Gaussian clusters around seeded centers, clipped to [0, 1]. Provenance
/// records the centers, the minimum center distance and the half-gap margin.
Dataset synth_blobs(const BlobSpec& spec);

struct GlyphSpec {
  int per_class = 200;
  int size = 16;
  double noise = 0.08;  // additive pixel noise std
  double jitter = 1.0;  // scales the random affine distortion
  std::uint64_t seed = 0;
  std::string split = "train";
};

/// Ten-class procedural digit images (one channel, size x size): a 5x7 glyph
/// per digit rendered under random scale, shear, rotation, translation,
/// stroke weight, contrast and noise.
Dataset synth_glyphs(const GlyphSpec& spec);

/// Equal per-class sample: floor(fraction * N / C) examples of every class,
/// drawn without replacement, shuffled.
Dataset stratified_subset(const Dataset& ds, double fraction, std::uint64_t seed);

/// Keeps only the listed classes, relabelled to their position in the list.
Dataset select_classes(const Dataset& ds, const std::vector<int>& classes);

}  // namespace rxf
