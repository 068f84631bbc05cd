#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "reet/model.hpp"

namespace reet {

static_assert(std::endian::native == std::endian::little, "weight files assume a little-endian host");

namespace {

constexpr char kMagic[4] = {'R', 'E', 'E', 'T'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n)
      throw WeightsTruncatedError(std::string("weight file truncated while reading ") + what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32(const char* what) {
    auto s = take(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(s[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    auto s = take(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(s[i]) << (8 * i);
    return v;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::span<const std::uint8_t> float_bytes(const Tensor& t) {
  return {reinterpret_cast<const std::uint8_t*>(t.ptr()), t.numel() * sizeof(float)};
}

}  // namespace

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t hash) {
  for (std::uint8_t b : bytes) {
    hash ^= b;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

std::uint64_t weights_digest(const ModelWeights& w) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Tensor& t : w.tensors) h = fnv1a64(float_bytes(t), h);
  return h;
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

std::vector<std::uint8_t> serialize_weights(const ModelWeights& w) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u32(out, kWeightsVersion);
  put_u32(out, static_cast<std::uint32_t>(w.tensors.size()));
  for (const Tensor& t : w.tensors) {
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  }
  for (const Tensor& t : w.tensors) {
    auto b = float_bytes(t);
    out.insert(out.end(), b.begin(), b.end());
  }
  put_u64(out, weights_digest(w));
  return out;
}

ModelWeights deserialize_weights(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0)
    throw WeightsFormatError("not a weight file: expected magic bytes \"REET\"");
  const std::uint32_t version = r.u32("version");
  if (version != kWeightsVersion)
    throw WeightsFormatError("unsupported weight file version " + std::to_string(version) + " (expected " +
                             std::to_string(kWeightsVersion) + ")");
  const std::uint32_t count = r.u32("tensor count");
  if (count > 1024) throw WeightsFormatError("implausible tensor count " + std::to_string(count));
  std::vector<Shape> shapes;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t rank = r.u32("tensor rank");
    if (rank == 0 || rank > 8) throw WeightsFormatError("implausible tensor rank " + std::to_string(rank));
    Shape s;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const std::uint32_t d = r.u32("tensor dimension");
      if (d == 0 || d > (1u << 24)) throw WeightsFormatError("implausible tensor dimension " + std::to_string(d));
      s.push_back(static_cast<int>(d));
    }
    shapes.push_back(std::move(s));
  }
  ModelWeights w;
  for (Shape& s : shapes) {
    Tensor t(std::move(s));
    auto b = r.take(t.numel() * sizeof(float), "payload");
    std::memcpy(t.ptr(), b.data(), b.size());
    w.tensors.push_back(std::move(t));
  }
  const std::uint64_t stored = r.u64("digest");
  if (r.remaining() != 0) throw WeightsFormatError("trailing bytes after the digest");
  const std::uint64_t actual = weights_digest(w);
  if (stored != actual)
    throw WeightsDigestError("weight payload digest mismatch: stored " + hex64(stored) + ", computed " + hex64(actual));
  return w;
}

void save_weights(const ModelWeights& w, const std::filesystem::path& path) {
  const auto bytes = serialize_weights(w);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

ModelWeights load_weights(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open weight file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_weights(bytes);
}

}  // namespace reet
