#include "rxf/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>

#include "rxf/error.hpp"
#include "rxf/rng.hpp"

namespace rxf {

namespace {

std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) | (std::uint32_t(b[off + 2]) << 8) |
         std::uint32_t(b[off + 3]);
}

struct IdxFile {
  std::vector<std::uint32_t> dims;
  std::size_t payload_offset = 0;
  std::vector<unsigned char> bytes;
};

IdxFile parse_idx(const std::filesystem::path& path, std::uint32_t ndim) {
  IdxFile f;
  f.bytes = read_bytes(path);
  const std::size_t header = 4 + 4 * std::size_t{ndim};
  if (f.bytes.size() < 4) throw DataError(path.string() + ": truncated IDX header");
  const std::uint32_t magic = be32(f.bytes, 0);
  const std::uint32_t want = 0x00000800u | ndim;
  if (magic != want) {
    char buf[96];
    std::snprintf(buf, sizeof buf, ": bad IDX magic 0x%08x (expected 0x%08x)", magic, want);
    throw DataError(path.string() + buf);
  }
  if (f.bytes.size() < header) {
    throw DataError(path.string() + ": truncated IDX header, expected " + std::to_string(header) + " bytes, got " +
                    std::to_string(f.bytes.size()));
  }
  std::size_t payload = 1;
  for (std::uint32_t d = 0; d < ndim; ++d) {
    f.dims.push_back(be32(f.bytes, 4 + 4 * d));
    payload *= f.dims.back();
  }
  const std::size_t expected = header + payload;
  if (f.bytes.size() != expected) {
    throw DataError(path.string() + ": expected " + std::to_string(expected) + " bytes, got " +
                    std::to_string(f.bytes.size()));
  }
  f.payload_offset = header;
  return f;
}

// 5x7 bitmap digits, one string per row, '#' = ink.
constexpr std::array<std::array<const char*, 7>, 10> kFont = {{
    {".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."},
    {"..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."},
    {".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"},
    {"#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."},
    {"...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."},
    {"#####", "#....", "####.", "....#", "....#", "#...#", ".###."},
    {"..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."},
    {"#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."},
    {".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."},
    {".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."},
}};

double glyph_at(int digit, int gx, int gy) {
  if (gx < 0 || gx >= 5 || gy < 0 || gy >= 7) return 0.0;
  return kFont[digit][gy][gx] == '#' ? 1.0 : 0.0;
}

double glyph_bilinear(int digit, double x, double y) {
  const double fx = std::floor(x), fy = std::floor(y);
  const int ix = static_cast<int>(fx), iy = static_cast<int>(fy);
  const double tx = x - fx, ty = y - fy;
  return (1 - tx) * (1 - ty) * glyph_at(digit, ix, iy) + tx * (1 - ty) * glyph_at(digit, ix + 1, iy) +
         (1 - tx) * ty * glyph_at(digit, ix, iy + 1) + tx * ty * glyph_at(digit, ix + 1, iy + 1);
}

}  // namespace

void Dataset::validate() const {
  if (labels.empty()) throw DataError("dataset is empty");
  if (!images.defined() || images.rank() < 2 || images.dim(0) != static_cast<std::int64_t>(labels.size())) {
    throw DataError("image/label count mismatch");
  }
  if (num_classes < 1) throw DataError("dataset class count must be >= 1");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw DataError("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) + " outside 0.." +
                      std::to_string(num_classes - 1));
    }
  }
  for (float v : images.data()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw DataError("pixel value outside [0, 1]");
  }
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(static_cast<std::size_t>(std::max(num_classes, 0)), 0);
  for (int y : labels) {
    if (y >= 0 && y < num_classes) ++counts[static_cast<std::size_t>(y)];
  }
  return counts;
}

Batch gather(const Dataset& ds, std::span<const std::size_t> indices) {
  const std::size_t per = ds.images.numel() / ds.size();
  Shape shape = ds.images.shape();
  shape[0] = static_cast<std::int64_t>(indices.size());
  Batch b{TensorF(shape), {}};
  b.y.reserve(indices.size());
  const float* src = ds.images.ptr();
  float* dst = b.x.ptr();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(src + indices[i] * per, per, dst + i * per);
    b.y.push_back(ds.labels[indices[i]]);
  }
  return b;
}

Batch gather_range(const Dataset& ds, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx(end - begin);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
  return gather(ds, idx);
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, int num_classes) {
  const IdxFile img = parse_idx(images, 3);
  const IdxFile lab = parse_idx(labels, 1);
  if (img.dims[0] != lab.dims[0]) {
    throw DataError("image/label count mismatch: " + std::to_string(img.dims[0]) + " images, " +
                    std::to_string(lab.dims[0]) + " labels");
  }
  Dataset ds;
  const std::int64_t n = img.dims[0], h = img.dims[1], w = img.dims[2];
  ds.images = TensorF(Shape{n, 1, h, w});
  for (std::size_t i = 0; i < ds.images.numel(); ++i) {
    ds.images[i] = static_cast<float>(img.bytes[img.payload_offset + i]) / 255.0f;
  }
  for (std::int64_t i = 0; i < n; ++i) ds.labels.push_back(lab.bytes[lab.payload_offset + i]);
  ds.num_classes = num_classes;
  ds.provenance = {{"format", "idx"}, {"images", images.string()}, {"labels", labels.string()}};
  ds.validate();
  return ds;
}

Dataset load_cifar_binary(const std::filesystem::path& path, int num_classes) {
  constexpr std::size_t kRecord = 3073;
  const auto bytes = read_bytes(path);
  if (bytes.empty() || bytes.size() % kRecord != 0) {
    throw DataError(path.string() + ": length " + std::to_string(bytes.size()) + " is not a multiple of " +
                    std::to_string(kRecord) + "-byte records");
  }
  const std::size_t n = bytes.size() / kRecord;
  Dataset ds;
  ds.images = TensorF(Shape{static_cast<std::int64_t>(n), 3, 32, 32});
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels.push_back(bytes[i * kRecord]);
    for (std::size_t p = 0; p < kRecord - 1; ++p) {
      ds.images[i * (kRecord - 1) + p] = static_cast<float>(bytes[i * kRecord + 1 + p]) / 255.0f;
    }
  }
  ds.num_classes = num_classes;
  ds.provenance = {{"format", "cifar-binary"}, {"path", path.string()}};
  ds.validate();
  return ds;
}

Dataset synth_blobs(const BlobSpec& spec) {
  if (spec.classes < 2) throw DataError("synth_blobs needs at least 2 classes");
  if (spec.per_class < 1) throw DataError("synth_blobs: per_class must be >= 1");
  if (spec.dims < 1) throw DataError("synth_blobs: dims must be >= 1");
  if (!(spec.separation > 0.0)) throw DataError("synth_blobs: separation must be > 0");
  Rng rng(spec.seed, 0xB10B);
  const auto d = static_cast<std::size_t>(spec.dims);
  std::vector<std::vector<double>> centers;
  if (spec.classes == 2) {
    std::vector<double> dir(d);
    double norm = 0.0;
    for (auto& v : dir) {
      v = rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (int s : {-1, 1}) {
      std::vector<double> c(d);
      for (std::size_t j = 0; j < d; ++j) c[j] = 0.5 + s * 0.5 * spec.separation * dir[j] / norm;
      centers.push_back(c);
    }
  } else {
    int tries = 0;
    while (static_cast<int>(centers.size()) < spec.classes) {
      if (++tries > 100000) throw DataError("synth_blobs: cannot place centers at the requested separation");
      std::vector<double> c(d);
      for (auto& v : c) v = rng.uniform(0.15, 0.85);
      bool ok = true;
      for (const auto& o : centers) {
        double dist = 0.0;
        for (std::size_t j = 0; j < d; ++j) dist += (c[j] - o[j]) * (c[j] - o[j]);
        ok = ok && std::sqrt(dist) >= spec.separation;
      }
      if (ok) centers.push_back(std::move(c));
    }
  }
  double min_dist = INFINITY;
  for (std::size_t a = 0; a < centers.size(); ++a) {
    for (std::size_t b = a + 1; b < centers.size(); ++b) {
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) dist += (centers[a][j] - centers[b][j]) * (centers[a][j] - centers[b][j]);
      min_dist = std::min(min_dist, std::sqrt(dist));
    }
  }
  const std::size_t n = static_cast<std::size_t>(spec.classes) * spec.per_class;
  Dataset ds;
  ds.images = TensorF(Shape{static_cast<std::int64_t>(n), spec.dims});
  std::size_t row = 0;
  for (int i = 0; i < spec.per_class; ++i) {
    for (int c = 0; c < spec.classes; ++c, ++row) {
      for (std::size_t j = 0; j < d; ++j) {
        const double v = centers[c][j] + spec.noise * rng.normal();
        ds.images[row * d + j] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
      ds.labels.push_back(c);
    }
  }
  ds.num_classes = spec.classes;
  ds.provenance = {{"format", "synth-blobs"}, {"seed", spec.seed},         {"separation", spec.separation},
                   {"noise", spec.noise},     {"centers", centers},        {"min_center_distance", min_dist},
                   {"margin", min_dist / 2}};
  ds.validate();
  return ds;
}

Dataset synth_glyphs(const GlyphSpec& spec) {
  if (spec.per_class < 1) throw DataError("synth_glyphs: per_class must be >= 1");
  if (spec.size < 8) throw DataError("synth_glyphs: size must be >= 8");
  Rng rng(spec.seed, spec.split == "test" ? 0x6E57 : 0x6E51);
  const std::int64_t s = spec.size;
  const std::size_t n = static_cast<std::size_t>(spec.per_class) * 10;
  Dataset ds;
  ds.images = TensorF(Shape{static_cast<std::int64_t>(n), 1, s, s});
  const double j = spec.jitter;
  std::size_t idx = 0;
  for (int i = 0; i < spec.per_class; ++i) {
    for (int digit = 0; digit < 10; ++digit, ++idx) {
      const double angle = 0.18 * j * rng.normal();
      const double shear = 0.15 * j * rng.normal();
      const double sx = 1.0 + 0.12 * j * rng.uniform(-1.0, 1.0);
      const double sy = 1.0 + 0.12 * j * rng.uniform(-1.0, 1.0);
      const double tx = 0.08 * j * rng.uniform(-1.0, 1.0);
      const double ty = 0.08 * j * rng.uniform(-1.0, 1.0);
      const double gamma = std::exp(0.4 * j * rng.normal());  // stroke weight
      const double lo = rng.uniform(0.0, 0.2);
      const double hi = rng.uniform(0.65, 1.0);
      const double ca = std::cos(angle), sa = std::sin(angle);
      float* out = ds.images.ptr() + idx * s * s;
      for (std::int64_t py = 0; py < s; ++py) {
        for (std::int64_t px = 0; px < s; ++px) {
          // Output pixel -> glyph coordinates through the inverse distortion.
          double cx = (px + 0.5) / s - 0.5 - tx;
          double cy = (py + 0.5) / s - 0.5 - ty;
          const double rx = ca * cx + sa * cy;
          const double ry = -sa * cx + ca * cy;
          const double qx = (rx - shear * ry) / sx;
          const double qy = ry / sy;
          const double gx = (qx / 0.55 + 0.5) * 5.0 - 0.5;
          const double gy = (qy / 0.75 + 0.5) * 7.0 - 0.5;
          const double ink = std::pow(glyph_bilinear(digit, gx, gy), gamma);
          const double v = lo + (hi - lo) * ink + spec.noise * rng.normal();
          out[py * s + px] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
      ds.labels.push_back(digit);
    }
  }
  ds.num_classes = 10;
  ds.split = spec.split;
  ds.provenance = {{"format", "synth-glyphs"}, {"seed", spec.seed},   {"per_class", spec.per_class},
                   {"size", spec.size},        {"noise", spec.noise}, {"jitter", spec.jitter}};
  ds.validate();
  return ds;
}

Dataset stratified_subset(const Dataset& ds, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw DataError("subset fraction must be in (0, 1]");
  ds.validate();
  const auto per_class =
      static_cast<std::size_t>(std::floor(fraction * static_cast<double>(ds.size()) / ds.num_classes + 1e-9));
  if (per_class == 0) throw DataError("subset fraction leaves no example per class");
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(ds.num_classes));
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);
  Rng rng(seed, 0x5B5E7);
  std::vector<std::size_t> chosen;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (by_class[c].size() < per_class) {
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(by_class[c].size()) +
                      " examples, subset needs " + std::to_string(per_class));
    }
    const auto perm = rng.permutation(by_class[c].size());
    for (std::size_t i = 0; i < per_class; ++i) chosen.push_back(by_class[c][perm[i]]);
  }
  const auto order = rng.permutation(chosen.size());
  std::vector<std::size_t> idx(chosen.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = chosen[order[i]];
  Batch b = gather(ds, idx);
  Dataset out;
  out.images = std::move(b.x);
  out.labels = std::move(b.y);
  out.num_classes = ds.num_classes;
  out.split = ds.split;
  out.provenance = ds.provenance;
  out.provenance["subset"] = {{"fraction", fraction}, {"seed", seed}, {"per_class", per_class}};
  return out;
}

Dataset select_classes(const Dataset& ds, const std::vector<int>& classes) {
  if (classes.empty()) throw DataError("select_classes: empty class list");
  std::vector<int> remap(static_cast<std::size_t>(ds.num_classes), -1);
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i] < 0 || classes[i] >= ds.num_classes) {
      throw DataError("select_classes: class " + std::to_string(classes[i]) + " not in dataset");
    }
    remap[classes[i]] = static_cast<int>(i);
  }
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (remap[ds.labels[i]] >= 0) idx.push_back(i);
  }
  if (idx.empty()) throw DataError("select_classes: no examples of the requested classes");
  Batch b = gather(ds, idx);
  Dataset out;
  out.images = std::move(b.x);
  out.labels = std::move(b.y);
  for (auto& y : out.labels) y = remap[y];
  out.num_classes = static_cast<int>(classes.size());
  out.split = ds.split;
  out.provenance = ds.provenance;
  out.provenance["classes"] = classes;
  return out;
}

}  // namespace rxf
