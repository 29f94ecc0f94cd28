#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "joformer/model.hpp"

namespace joformer {

// Checkpoint layout: magic "JFRM", format version u32, serialized ModelConfig
// (variant u32, n_layers u32, d_model u32, ffn_mult u32, context_len u32,
// vocab_size u32, rope_base f64, layer_norm_eps f64, angle_init_rope u8),
// parameter count u32, then each parameter in enumeration order as
// (name length u32, name bytes, rank u32, dims u64 each, ieee-32 payload).
// All integers and floats little-endian. Round-trips are bit-exact.

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) {
  char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
               static_cast<char>(v >> 24)};
  os.write(b, 4);
}

inline void put_u64(std::ostream& os, uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>(v >> (8 * i));
  os.write(b, 8);
}

inline void put_f64(std::ostream& os, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(os, bits);
}

inline void put_f32(std::ostream& os, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(os, bits);
}

inline uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw ParseError("checkpoint truncated while reading u32");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw ParseError("checkpoint truncated while reading u64");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

inline double get_f64(std::istream& is) {
  const uint64_t bits = get_u64(is);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

inline float get_f32(std::istream& is) {
  const uint32_t bits = get_u32(is);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace detail

inline constexpr uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const ModelConfig& cfg, Parameters<float>& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path);
  os.write("JFRM", 4);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u32(os, static_cast<uint32_t>(cfg.variant));
  detail::put_u32(os, static_cast<uint32_t>(cfg.n_layers));
  detail::put_u32(os, static_cast<uint32_t>(cfg.d_model));
  detail::put_u32(os, static_cast<uint32_t>(cfg.ffn_mult));
  detail::put_u32(os, static_cast<uint32_t>(cfg.context_len));
  detail::put_u32(os, static_cast<uint32_t>(cfg.vocab_size));
  detail::put_f64(os, cfg.rope_base);
  detail::put_f64(os, cfg.layer_norm_eps);
  os.put(cfg.angle_init_rope ? 1 : 0);

  const auto named = params.named_tensors();
  detail::put_u32(os, static_cast<uint32_t>(named.size()));
  for (const auto& [name, tensor] : named) {
    detail::put_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(os, static_cast<uint32_t>(tensor->rank()));
    for (int i = 0; i < tensor->rank(); ++i) detail::put_u64(os, static_cast<uint64_t>(tensor->dim(i)));
    for (int64_t i = 0; i < tensor->numel(); ++i) detail::put_f32(os, tensor->data()[i]);
  }
  if (!os) throw IoError("write failure while saving checkpoint: " + path);
}

inline std::pair<ModelConfig, Parameters<float>> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "JFRM") {
    throw ParseError("not a checkpoint file (bad magic): " + path);
  }
  const uint32_t version = detail::get_u32(is);
  if (version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version) + " in " + path);
  }
  ModelConfig cfg;
  const uint32_t variant = detail::get_u32(is);
  if (variant > 2) throw ParseError("invalid variant code " + std::to_string(variant) + " in " + path);
  cfg.variant = static_cast<Variant>(variant);
  cfg.n_layers = detail::get_u32(is);
  cfg.d_model = detail::get_u32(is);
  cfg.ffn_mult = detail::get_u32(is);
  cfg.context_len = detail::get_u32(is);
  cfg.vocab_size = detail::get_u32(is);
  cfg.rope_base = detail::get_f64(is);
  cfg.layer_norm_eps = detail::get_f64(is);
  cfg.angle_init_rope = is.get() != 0;
  cfg.validate();

  Parameters<float> params(cfg);
  const auto named = params.named_tensors();
  const uint32_t count = detail::get_u32(is);
  if (count != named.size()) {
    throw ParseError("checkpoint has " + std::to_string(count) + " parameters, expected " +
                     std::to_string(named.size()));
  }
  for (const auto& [name, tensor] : named) {
    const uint32_t name_len = detail::get_u32(is);
    std::string stored(name_len, '\0');
    is.read(stored.data(), name_len);
    if (!is || stored != name) {
      throw ParseError("checkpoint parameter '" + stored + "' does not match expected '" + name + "'");
    }
    const uint32_t rank = detail::get_u32(is);
    if (rank != static_cast<uint32_t>(tensor->rank())) {
      throw ParseError("parameter '" + name + "' has rank " + std::to_string(rank) + ", expected " +
                       std::to_string(tensor->rank()));
    }
    for (int i = 0; i < tensor->rank(); ++i) {
      const uint64_t dim = detail::get_u64(is);
      if (dim != static_cast<uint64_t>(tensor->dim(i))) {
        throw ParseError("parameter '" + name + "' dim " + std::to_string(i) + " is " + std::to_string(dim) +
                         ", expected " + std::to_string(tensor->dim(i)));
      }
    }
    for (int64_t i = 0; i < tensor->numel(); ++i) tensor->data()[i] = detail::get_f32(is);
  }
  return {cfg, std::move(params)};
}

}  // namespace joformer
