#include "rxf/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include <zlib.h>

#include "rxf/error.hpp"

namespace rxf {

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    out_.insert(out_.end(), c, c + n);
  }
  template <typename U>
  void le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
  }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    le(bits);
  }
  std::size_t size() const { return out_.size(); }
  std::vector<unsigned char>& data() { return out_; }

 private:
  std::vector<unsigned char> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<unsigned char>& b) : b_(b) {}
  void need(std::size_t n, const char* what) const {
    if (pos_ + n > b_.size()) {
      throw DataError(std::string("checkpoint truncated while reading ") + what + ": need " + std::to_string(n) +
                      " bytes at offset " + std::to_string(pos_) + ", file has " + std::to_string(b_.size()));
    }
  }
  template <typename U>
  U le(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(b_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  float f32() {
    const auto bits = le<std::uint32_t>("tensor values");
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<unsigned char>& b_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(const unsigned char* p, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::vector<unsigned char> serialize_checkpoint(Network& net, const nlohmann::json& meta) {
  bool spectral = false;
  net.visit([&](Layer& l) {
    if (auto* w = dynamic_cast<WeightedLayer*>(&l)) spectral = spectral || w->spectral.has_value();
  });
  if (spectral) throw ConfigError("checkpoint: bake spectral normalization before saving");
  nlohmann::json m = meta.is_null() ? nlohmann::json::object() : meta;
  m["arch"] = arch_to_json(net.arch());
  m["aggregation"] = net.block_aggregation();
  const std::string doc = m.dump();

  Writer w;
  w.bytes("RXF1", 4);
  w.le<std::uint32_t>(kCheckpointVersion);
  w.le<std::uint64_t>(doc.size());
  w.bytes(doc.data(), doc.size());
  const std::size_t table_begin = w.size();
  const auto tensors = net.named_tensors();
  w.le<std::uint64_t>(tensors.size());
  for (const auto& nt : tensors) {
    w.le<std::uint32_t>(static_cast<std::uint32_t>(nt.name.size()));
    w.bytes(nt.name.data(), nt.name.size());
    w.le<std::uint8_t>(1);
    w.le<std::uint32_t>(static_cast<std::uint32_t>(nt.tensor.rank()));
    for (auto d : nt.tensor.shape()) w.le<std::uint64_t>(static_cast<std::uint64_t>(d));
    for (float v : nt.tensor.data()) w.f32(v);
  }
  const std::uint32_t crc = crc32_of(w.data().data() + table_begin, w.size() - table_begin);
  w.le<std::uint32_t>(crc);
  return std::move(w.data());
}

LoadedCheckpoint deserialize_checkpoint(const std::vector<unsigned char>& bytes) {
  Reader r(bytes);
  if (r.str(4, "magic") != "RXF1") throw DataError("checkpoint: bad magic (expected RXF1)");
  const auto version = r.le<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported format version " + std::to_string(version));
  }
  const auto doc_len = r.le<std::uint64_t>("metadata length");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.str(doc_len, "metadata"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: malformed metadata: ") + e.what());
  }
  const std::size_t table_begin = r.pos();
  if (bytes.size() < table_begin + 4) throw DataError("checkpoint truncated: missing checksum");
  const std::size_t table_end = bytes.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= std::uint32_t(bytes[table_end + i]) << (8 * i);
  if (crc32_of(bytes.data() + table_begin, table_end - table_begin) != stored) {
    throw DataError("checkpoint: CRC32 checksum mismatch (file corrupted)");
  }

  std::map<std::string, TensorF> stored_tensors;
  std::vector<std::string> order;
  const auto count = r.le<std::uint64_t>("tensor count");
  for (std::uint64_t t = 0; t < count; ++t) {
    const auto name_len = r.le<std::uint32_t>("tensor name length");
    std::string name = r.str(name_len, "tensor name");
    const auto dtype = r.le<std::uint8_t>("dtype");
    if (dtype != 1) throw DataError("checkpoint: tensor " + name + " has unsupported dtype " + std::to_string(dtype));
    const auto rank = r.le<std::uint32_t>("rank");
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::int64_t>(r.le<std::uint64_t>("dims")));
    std::int64_t numel = 1;
    for (auto d : shape) {
      if (d <= 0) throw DataError("checkpoint: tensor " + name + " has a non-positive dimension");
      numel *= d;
    }
    r.need(static_cast<std::size_t>(numel) * 4, "tensor values");
    std::vector<float> values(static_cast<std::size_t>(numel));
    for (auto& v : values) v = r.f32();
    stored_tensors.emplace(name, TensorF(shape, std::move(values)));
    order.push_back(std::move(name));
  }
  if (r.pos() != table_end) throw DataError("checkpoint: trailing bytes after the tensor table");

  ArchSpec arch;
  try {
    arch = arch_from_json(meta.at("arch"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: bad architecture metadata: ") + e.what());
  }
  Network net = build_network(arch, 0);
  if (meta.contains("aggregation")) net.set_block_aggregation(meta["aggregation"].get<std::vector<std::string>>());
  auto targets = net.named_tensors();
  if (targets.size() != stored_tensors.size()) {
    throw DataError("checkpoint: " + std::to_string(stored_tensors.size()) + " tensors stored, architecture expects " +
                    std::to_string(targets.size()));
  }
  for (auto& nt : targets) {
    auto it = stored_tensors.find(nt.name);
    if (it == stored_tensors.end()) throw DataError("checkpoint: missing tensor " + nt.name);
    if (it->second.shape() != nt.tensor.shape()) {
      throw DataError("checkpoint: tensor " + nt.name + " has shape " + shape_str(it->second.shape()) +
                      ", architecture expects " + shape_str(nt.tensor.shape()));
    }
    std::copy(it->second.data().begin(), it->second.data().end(), nt.tensor.data().begin());
  }
  return {std::move(net), std::move(meta)};
}

void save_checkpoint(Network& net, const nlohmann::json& meta, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(net, meta);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return deserialize_checkpoint(bytes);
}

}  // namespace rxf
