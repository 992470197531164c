#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "fiwhn/config.hpp"
#include "fiwhn/nn.hpp"

// Checkpoint archive, all integers little-endian:
//
//   magic     8 bytes  "FIWHNCK1"
//   u64       length of the config text
//   bytes     config record (JSON text)
//   u64       number of arrays
//   per array:
//     u32     name length, then the name bytes (UTF-8 parameter path)
//     u32     rank, then rank x u64 dims
//     f32     prod(dims) values, little-endian IEEE-754
//
// Model parameters use their dotted module paths ("fswg.0.wdib.1.wirw.body.up.weight_v").
// Optimizer state, when present, is stored under "optim.m.<path>" and
// "optim.v.<path>" and is excluded from the model parameter count.
namespace fiwhn {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  nlohmann::json config;
  std::map<std::string, Tensor<float>> arrays;

  static bool is_optimizer_key(const std::string& key) { return key.rfind("optim.", 0) == 0; }

  std::uint64_t model_elements() const {
    std::uint64_t n = 0;
    for (const auto& [k, v] : arrays)
      if (!is_optimizer_key(k)) n += v.size();
    return n;
  }
};

namespace detail {

template <typename U>
void write_le(std::ostream& os, U v) {
  static_assert(std::is_integral_v<U> || std::is_floating_point_v<U>);
  unsigned char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U read_le(std::istream& is) {
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) throw CheckpointError("checkpoint truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
  U v;
  std::memcpy(&v, buf, sizeof(U));
  return v;
}

inline constexpr char kMagic[8] = {'F', 'I', 'W', 'H', 'N', 'C', 'K', '1'};

}  // namespace detail

/// Writes to `<path>.tmp` and renames over `path`.
inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write " + tmp.string());
    os.write(detail::kMagic, sizeof(detail::kMagic));
    const std::string text = ck.config.dump(2);
    detail::write_le<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    detail::write_le<std::uint64_t>(os, ck.arrays.size());
    for (const auto& [name, t] : ck.arrays) {
      detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
      for (auto d : t.shape()) detail::write_le<std::uint64_t>(os, d);
      for (float v : t.values()) detail::write_le<float>(os, v);
    }
    if (!os.flush()) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, detail::kMagic, 8) != 0)
    throw CheckpointError(path.string() + " is not a checkpoint archive");
  Checkpoint ck;
  const auto text_len = detail::read_le<std::uint64_t>(is);
  std::string text(text_len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(text_len))) throw CheckpointError("checkpoint truncated");
  try {
    ck.config = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointError(std::string("checkpoint config: ") + e.what());
  }
  const auto count = detail::read_le<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = detail::read_le<std::uint32_t>(is);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw CheckpointError("checkpoint truncated");
    const auto rank = detail::read_le<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = detail::read_le<std::uint64_t>(is);
    Tensor<float> t(shape);
    for (auto& v : t.values()) v = detail::read_le<float>(is);
    ck.arrays.emplace(std::move(name), std::move(t));
  }
  return ck;
}

template <typename T>
void store_parameters(const ParamList<T>& params, Checkpoint& ck, const std::string& prefix = "") {
  for (const auto& p : params) ck.arrays[prefix + p.name] = p.var.value().template cast<float>();
}

/// Copies arrays into the matching parameters; every parameter must be
/// present with the same shape.
template <typename T>
void restore_parameters(const ParamList<T>& params, const Checkpoint& ck, const std::string& prefix = "") {
  for (const auto& p : params) {
    const auto it = ck.arrays.find(prefix + p.name);
    if (it == ck.arrays.end()) throw CheckpointError("checkpoint lacks array '" + prefix + p.name + "'");
    if (it->second.shape() != p.var.shape())
      throw CheckpointError("array '" + p.name + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                            shape_str(p.var.shape()));
    Var<T> v = p.var;
    v.mutable_value() = it->second.template cast<T>();
  }
}

/// Archive holding the model config under "model" and every parameter.
template <typename T>
Checkpoint model_checkpoint(const Model<T>& model) {
  Checkpoint ck;
  ck.config = {{"model", to_json(model.config())}};
  store_parameters(model.parameters(), ck);
  return ck;
}

template <typename T>
Model<T> model_from_checkpoint(const Checkpoint& ck) {
  if (!ck.config.contains("model")) throw CheckpointError("checkpoint config has no model record");
  Model<T> model(model_config_from_json(ck.config.at("model")));
  restore_parameters(model.parameters(), ck);
  return model;
}

}  // namespace fiwhn
