#pragma once

// Layout (all integers and reals little-endian):
//   "DSTM"  u32 version
//   u64 feature_dim d_model heads blocks ffn_multiplier classes max_length
//   u8 variant kind, f64 variant fraction, f64 dropout, f64 decision_init_scale
//   u8 positional_encoding, u8 weight_values
//   u64 scalar count, then f64 parameters in visit_params order

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dst/model/model.hpp"

namespace dst::model {

inline constexpr std::array<char, 4> kCheckpointMagic{'D', 'S', 'T', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class Writer {
 public:
  template <typename T>
  void put(T v) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
    U u = std::bit_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
  }
  std::vector<char> bytes;
};

class Reader {
 public:
  Reader(std::vector<char> data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}

  template <typename T>
  T get() {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
    if (pos_ + sizeof(U) > data_.size()) throw LoadError("checkpoint " + path_ + ": truncated");
    U u = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      u |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return std::bit_cast<T>(u);
  }

  void expect_magic() {
    if (data_.size() < 4 || std::memcmp(data_.data(), kCheckpointMagic.data(), 4) != 0) {
      throw LoadError("checkpoint " + path_ + ": bad magic (not a DSTM file)");
    }
    pos_ = 4;
  }

  bool done() const { return pos_ == data_.size(); }

 private:
  std::vector<char> data_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<char> serialize(const DstModel& m) {
  detail::Writer w;
  w.bytes.insert(w.bytes.end(), kCheckpointMagic.begin(), kCheckpointMagic.end());
  w.put<std::uint32_t>(kCheckpointVersion);
  const ModelConfig& c = m.config;
  for (std::size_t v : {c.feature_dim, c.d_model, c.heads, c.blocks, c.ffn_multiplier, c.classes, c.max_length})
    w.put<std::uint64_t>(v);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(c.variant.kind()));
  w.put<double>(c.variant.fraction());
  w.put<double>(c.dropout);
  w.put<double>(c.decision_init_scale);
  w.put<std::uint8_t>(c.positional_encoding ? 1 : 0);
  w.put<std::uint8_t>(c.weight_values ? 1 : 0);
  w.put<std::uint64_t>(parameter_count(m));
  visit_params(m, [&](const std::string&, const Tensor& t, ParamKind) {
    for (double x : t.values()) w.put<double>(x);
  });
  return w.bytes;
}

inline DstModel deserialize(std::vector<char> bytes, const std::string& origin = "<memory>") {
  detail::Reader r(std::move(bytes), origin);
  r.expect_magic();
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw LoadError("checkpoint " + origin + ": unsupported version " + std::to_string(version));
  }
  ModelConfig c;
  c.feature_dim = r.get<std::uint64_t>();
  c.d_model = r.get<std::uint64_t>();
  c.heads = r.get<std::uint64_t>();
  c.blocks = r.get<std::uint64_t>();
  c.ffn_multiplier = r.get<std::uint64_t>();
  c.classes = r.get<std::uint64_t>();
  c.max_length = r.get<std::uint64_t>();
  const auto kind = r.get<std::uint8_t>();
  const double fraction = r.get<double>();
  if (kind > static_cast<std::uint8_t>(attn::AttentionKind::DeformableZeroOffset)) {
    throw LoadError("checkpoint " + origin + ": unknown attention kind " + std::to_string(kind));
  }
  c.variant = AttentionVariant(static_cast<attn::AttentionKind>(kind), fraction);
  c.dropout = r.get<double>();
  c.decision_init_scale = r.get<double>();
  c.positional_encoding = r.get<std::uint8_t>() != 0;
  c.weight_values = r.get<std::uint8_t>() != 0;
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw LoadError("checkpoint " + origin + ": " + e.what());
  }
  DstModel m = init(c, 0);
  const auto count = r.get<std::uint64_t>();
  if (count != parameter_count(m)) {
    throw LoadError("checkpoint " + origin + ": holds " + std::to_string(count) + " parameters, config implies " +
                    std::to_string(parameter_count(m)));
  }
  visit_params(m, [&](const std::string&, Tensor& t, ParamKind) {
    for (double& x : t.storage()) x = r.get<double>();
  });
  if (!r.done()) throw LoadError("checkpoint " + origin + ": trailing bytes");
  return m;
}

inline void save(const std::filesystem::path& path, const DstModel& m) {
  const auto bytes = serialize(m);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw LoadError("failed writing checkpoint " + path.string());
}

inline DstModel load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(std::move(bytes), path.string());
}

}  // namespace dst::model
