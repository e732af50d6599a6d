// SPDX-License-Identifier: Apache-2.0

#include "cladapter/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace cladapter {

namespace {

constexpr char kMagic[4] = {'C', 'L', 'A', 'D'};
constexpr char kEndMarker[4] = {'D', 'A', 'L', 'C'};
constexpr std::size_t kHeaderBytes = 4 + 6 * 4;

class Writer {
 public:
  void raw(const char* bytes, std::size_t n) { out_.append(bytes, n); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  void f64(double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
  }
  template <typename Derived>
  void array(const Eigen::DenseBase<Derived>& a) {
    for (Index i = 0; i < a.size(); ++i) f64(a.derived().data()[i]);
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= std::uint64_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(bits);
  }
  template <typename Derived>
  void array(Eigen::DenseBase<Derived>& a) {
    for (Index i = 0; i < a.size(); ++i) a.derived().data()[i] = f64();
  }
  std::uint32_t peek_u32(std::size_t ahead) {
    const std::size_t saved = pos_;
    pos_ += ahead;
    const std::uint32_t v = u32();
    pos_ = saved;
    return v;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw IoError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t to_u32(Index v, const char* what) {
  if (v < 0 || v > Index(UINT32_MAX)) throw FormatError(std::string("checkpoint: ") + what + " out of range");
  return static_cast<std::uint32_t>(v);
}

// Number of f64 values the arrays of a given header occupy (backbone excluded).
std::uint64_t payload_values(const CheckpointHeader& h) {
  const std::uint64_t d = h.dim, k = h.clusters, r = h.ratio, c = h.classes;
  std::uint64_t n = d * c + c;
  if (!(h.flags & kHeadOnly)) n += static_cast<std::uint64_t>(adapter_param_count(d, k, r));
  return n;
}

}  // namespace

std::string encode_checkpoint(const Model& model, bool include_backbone) {
  Writer w;
  w.raw(kMagic, 4);
  w.u32(kCheckpointVersion);
  const Index d = model.head.dim();
  if (model.adapter) {
    model.adapter->validate();
    if (model.adapter->dim() != d) throw ShapeError("checkpoint: adapter D != head D");
  }
  w.u32(to_u32(d, "D"));
  w.u32(model.adapter ? to_u32(model.adapter->clusters(), "K") : 0);
  w.u32(model.adapter ? to_u32(model.adapter->ratio, "ratio") : 0);
  w.u32(to_u32(model.head.classes(), "C"));
  w.u32((model.adapter ? 0u : kHeadOnly) | (include_backbone ? kHasBackbone : 0u));

  if (model.adapter) model.adapter->for_each_tensor([&](std::string_view, const auto& v) { w.array(v); });
  w.array(model.head.weight);
  w.array(model.head.bias);
  if (include_backbone) {
    const auto& bb = model.backbone;
    if (bb.dim() != d) throw ShapeError("checkpoint: backbone D != head D");
    w.u32(to_u32(bb.input_dim(), "input_dim"));
    w.u32(static_cast<std::uint32_t>(bb.kind));
    w.u32(to_u32(bb.frames, "frames"));
    w.array(bb.projection);
  }
  w.raw(kEndMarker, 4);
  return w.take();
}

Model decode_checkpoint(const std::string& bytes, CheckpointHeader* header_out) {
  if (bytes.size() < kHeaderBytes) {
    throw IoError("checkpoint truncated: " + std::to_string(bytes.size()) + " bytes is shorter than the header");
  }
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("checkpoint: bad magic, expected \"CLAD\"");
  if (bytes.size() < kHeaderBytes + 4 || std::memcmp(bytes.data() + bytes.size() - 4, kEndMarker, 4) != 0) {
    throw IoError("checkpoint truncated: end marker missing");
  }
  const std::string body = bytes.substr(4, bytes.size() - 8);
  Reader r(body);
  CheckpointHeader h;
  h.version = r.u32();
  if (h.version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported format version " + std::to_string(h.version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  h.dim = r.u32();
  h.clusters = r.u32();
  h.ratio = r.u32();
  h.classes = r.u32();
  h.flags = r.u32();
  if (h.flags & ~std::uint32_t(kHeadOnly | kHasBackbone)) throw FormatError("checkpoint: unknown flag bits");
  const bool head_only = h.flags & kHeadOnly;
  if (h.dim < 1 || h.classes < 1 || (!head_only && (h.clusters < 1 || h.ratio < 1)) ||
      (head_only && (h.clusters != 0 || h.ratio != 0))) {
    throw DimensionError("checkpoint: invalid header dims D=" + std::to_string(h.dim) + " K=" +
                         std::to_string(h.clusters) + " ratio=" + std::to_string(h.ratio) + " C=" +
                         std::to_string(h.classes));
  }

  // Check the arrays fit exactly before allocating anything sized by the header.
  const long double rough = static_cast<long double>(h.dim) * h.dim * (h.clusters + 2.0L * h.ratio) +
                            static_cast<long double>(h.dim) * h.classes;
  if (rough * 8 > static_cast<long double>(r.remaining())) {
    throw DimensionError("checkpoint: header dims D=" + std::to_string(h.dim) + " K=" + std::to_string(h.clusters) +
                         " ratio=" + std::to_string(h.ratio) + " C=" + std::to_string(h.classes) +
                         " need more data than the file holds");
  }
  const std::uint64_t values = payload_values(h);
  std::uint64_t expected = values * 8;
  if (h.flags & kHasBackbone) {
    // The backbone section sits right after the arrays; its projection size must close the file exactly.
    const std::uint64_t input_dim = values * 8 + 12 <= r.remaining() ? r.peek_u32(values * 8) : 0;
    expected += 12 + input_dim * h.dim * 8;
    if (input_dim < 1 || r.remaining() != expected) {
      throw DimensionError("checkpoint: header dims D=" + std::to_string(h.dim) + " K=" + std::to_string(h.clusters) +
                           " ratio=" + std::to_string(h.ratio) + " C=" + std::to_string(h.classes) +
                           " do not match the " + std::to_string(r.remaining()) + " payload bytes");
    }
  } else if (r.remaining() != expected) {
    throw DimensionError("checkpoint: header dims imply " + std::to_string(expected) + " payload bytes, file holds " +
                         std::to_string(r.remaining()));
  }

  Model model;
  if (!head_only) {
    AdapterParamsd p = init_adapter(h.dim, h.clusters, h.ratio, 0, 0.0);
    p.for_each_tensor([&](std::string_view, auto v) { r.array(v); });
    model.adapter = std::move(p);
  }
  model.head.weight.resize(h.dim, h.classes);
  model.head.bias.resize(h.classes);
  r.array(model.head.weight);
  r.array(model.head.bias);

  if (h.flags & kHasBackbone) {
    const std::uint32_t input_dim = r.u32();
    const std::uint32_t kind = r.u32();
    const std::uint32_t frames = r.u32();
    if (kind > static_cast<std::uint32_t>(TensorKind::VideoClip)) throw FormatError("checkpoint: unknown backbone kind");
    model.backbone.kind = static_cast<TensorKind>(kind);
    model.backbone.frames = frames;
    model.backbone.projection.resize(input_dim, h.dim);
    r.array(model.backbone.projection);
  }
  if (header_out) *header_out = h;
  return model;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, bool include_backbone) {
  const std::string bytes = encode_checkpoint(model, include_backbone);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path, CheckpointHeader* header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, header);
}

}  // namespace cladapter
