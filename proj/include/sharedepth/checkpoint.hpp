#pragma once

// Versioned little-endian binary containers for model specs, parameter
// vectors and plain double arrays. Round trips are bit-exact.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "sharedepth/error.hpp"
#include "sharedepth/nn.hpp"

namespace sharedepth {

namespace binio {

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_f64(std::string& buf, double v) { put_u64(buf, std::bit_cast<std::uint64_t>(v)); }

class Reader {
 public:
  Reader(std::string data, std::string source) : data_(std::move(data)), source_(std::move(source)) {}

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  double f64() { return std::bit_cast<double>(u64()); }

  void expect_magic(std::string_view magic) {
    need(magic.size());
    if (std::string_view(data_).substr(pos_, magic.size()) != magic)
      throw StructuralError(source_ + ": bad format tag (expected " + std::string(magic) + ")");
    pos_ += magic.size();
  }

  bool at_end() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw StructuralError(source_ + ": truncated file");
  }
  std::string data_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw MissingArtifactError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline void put_spec(std::string& buf, const ModelSpec& spec) {
  put_u32(buf, static_cast<std::uint32_t>(spec.input_dim));
  put_u32(buf, static_cast<std::uint32_t>(spec.depth()));
  for (int w : spec.trunk_widths) put_u32(buf, static_cast<std::uint32_t>(w));
  put_u32(buf, static_cast<std::uint32_t>(spec.activation));
  put_u32(buf, static_cast<std::uint32_t>(spec.head_dims[0]));
  put_u32(buf, static_cast<std::uint32_t>(spec.head_dims[1]));
}

inline ModelSpec get_spec(Reader& r) {
  ModelSpec spec;
  spec.input_dim = static_cast<int>(r.u32());
  const auto depth = r.u32();
  if (depth > 4096) throw StructuralError("implausible trunk depth in checkpoint");
  spec.trunk_widths.resize(depth);
  for (auto& w : spec.trunk_widths) w = static_cast<int>(r.u32());
  const auto act = r.u32();
  if (act > 2) throw StructuralError("unknown activation code in checkpoint");
  spec.activation = static_cast<Activation>(act);
  spec.head_dims[0] = static_cast<int>(r.u32());
  spec.head_dims[1] = static_cast<int>(r.u32());
  spec.validate();
  return spec;
}

inline void put_doubles(std::string& buf, const std::vector<double>& v) {
  put_u64(buf, v.size());
  for (double x : v) put_f64(buf, x);
}

inline std::vector<double> get_doubles(Reader& r) {
  const auto n = r.u64();
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(n, 1u << 26)));
  for (std::uint64_t i = 0; i < n; ++i) v.push_back(r.f64());
  return v;
}

}  // namespace binio

inline constexpr std::string_view kCheckpointMagic = "SDCKPT01";
inline constexpr std::string_view kArrayMagic = "SDARRY01";

struct Checkpoint {
  ModelSpec spec;
  ParamVector params;
};

inline std::string encode_checkpoint(const ModelSpec& spec, const ParamVector& params) {
  std::string buf(kCheckpointMagic);
  binio::put_spec(buf, spec);
  binio::put_doubles(buf, params.values());
  return buf;
}

inline Checkpoint decode_checkpoint(std::string bytes, const std::string& source = "checkpoint") {
  binio::Reader r(std::move(bytes), source);
  r.expect_magic(kCheckpointMagic);
  Checkpoint ck;
  ck.spec = binio::get_spec(r);
  ck.params = ParamVector(ck.spec);
  auto values = binio::get_doubles(r);
  if (values.size() != ck.params.size()) throw StructuralError(source + ": parameter count does not match spec");
  ck.params.values() = std::move(values);
  if (!r.at_end()) throw StructuralError(source + ": trailing bytes");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelSpec& spec, const ParamVector& params) {
  binio::write_file(path, encode_checkpoint(spec, params));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(binio::read_file(path), path.string());
}

inline void save_array(const std::filesystem::path& path, const std::vector<double>& values) {
  std::string buf(kArrayMagic);
  binio::put_doubles(buf, values);
  binio::write_file(path, buf);
}

inline std::vector<double> load_array(const std::filesystem::path& path) {
  binio::Reader r(binio::read_file(path), path.string());
  r.expect_magic(kArrayMagic);
  auto v = binio::get_doubles(r);
  if (!r.at_end()) throw StructuralError(path.string() + ": trailing bytes");
  return v;
}

}  // namespace sharedepth
