#pragma once

// Checkpoint directory: header.json (config + tensor table) and params.bin
// (little-endian raw tensors concatenated in header order).

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "romlab/errors.hpp"
#include "romlab/model.hpp"

namespace romlab {

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::ordered_json model_config_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["layers"] = c.layers;
  j["heads"] = c.heads;
  j["hidden"] = c.hidden;
  j["ffn"] = c.ffn;
  j["vocab_size"] = c.vocab_size;
  j["max_seq_len"] = c.max_seq_len;
  j["dropout"] = c.dropout;
  j["precision"] = precision_name(c.precision);
  j["init_std"] = c.init_std;
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.layers = j.at("layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.hidden = j.at("hidden").get<int>();
    c.ffn = j.at("ffn").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.dropout = j.value("dropout", 0.0);
    c.precision = parse_precision(j.value("precision", std::string("fast32")));
    c.init_std = j.value("init_std", 0.02);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(std::string("bad model config: ") + e.what());
  }
  return c;
}

namespace detail {

template <class T>
void write_le(std::ofstream& out, const T* data, std::size_t count) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(T)));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      char bytes[sizeof(T)];
      std::memcpy(bytes, data + i, sizeof(T));
      for (std::size_t b = 0; b < sizeof(T) / 2; ++b) std::swap(bytes[b], bytes[sizeof(T) - 1 - b]);
      out.write(bytes, sizeof(T));
    }
  }
}

template <class T>
void from_le(const char* src, T* dst, std::size_t count) {
  std::memcpy(dst, src, count * sizeof(T));
  if constexpr (std::endian::native != std::endian::little) {
    for (std::size_t i = 0; i < count; ++i) {
      auto* bytes = reinterpret_cast<char*>(dst + i);
      for (std::size_t b = 0; b < sizeof(T) / 2; ++b) std::swap(bytes[b], bytes[sizeof(T) - 1 - b]);
    }
  }
}

}  // namespace detail

// Tensors are stored at their native precision: "f32" for fast32 models and
// "f64" for check64 models, so round trips are bitwise in both modes.
template <class T>
void save_checkpoint(const Parameters<T>& params, const std::filesystem::path& dir) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  std::filesystem::create_directories(dir);
  const char* dtype = std::is_same_v<T, float> ? "f32" : "f64";

  nlohmann::ordered_json header;
  header["format"] = "romlab-checkpoint";
  header["version"] = kCheckpointVersion;
  header["config"] = model_config_json(params.config);
  auto tensors = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    nlohmann::ordered_json e;
    e["name"] = params.names[t];
    e["shape"] = {params.tensors[t].rows(), params.tensors[t].cols()};
    e["dtype"] = dtype;
    e["byte_offset"] = offset;
    tensors.push_back(e);
    offset += static_cast<std::uint64_t>(params.tensors[t].size()) * sizeof(T);
  }
  header["tensors"] = tensors;
  header["total_bytes"] = offset;

  {
    std::ofstream out(dir / "header.json", std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / "header.json").string());
    out << header.dump(2) << '\n';
  }
  std::ofstream bin(dir / "params.bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw IoError("cannot write " + (dir / "params.bin").string());
  for (const auto& t : params.tensors) detail::write_le(bin, t.data(), static_cast<std::size_t>(t.size()));
  if (!bin) throw IoError("failed writing " + (dir / "params.bin").string());
}

inline ModelConfig read_checkpoint_config(const std::filesystem::path& dir) {
  std::ifstream in(dir / "header.json", std::ios::binary);
  if (!in) throw MissingInput("cannot open " + (dir / "header.json").string());
  try {
    const auto header = nlohmann::json::parse(in);
    return model_config_from_json(header.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(std::string("unreadable header: ") + e.what());
  }
}

// Validates the whole header against the config-derived layout before any tensor is read.
template <class T>
Parameters<T> load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream hin(dir / "header.json", std::ios::binary);
  if (!hin) throw MissingInput("cannot open " + (dir / "header.json").string());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hin);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(std::string("unreadable header: ") + e.what());
  }
  if (!header.is_object() || !header.contains("version") || !header["version"].is_number_integer())
    throw VersionError("checkpoint header has no integer version field");
  if (header["version"].get<int>() != kCheckpointVersion)
    throw VersionError("unsupported checkpoint version " + header["version"].dump());
  if (!header.contains("config") || !header.contains("tensors") || !header["tensors"].is_array())
    throw CorruptCheckpoint("header lacks config or tensor table");

  ModelConfig config = model_config_from_json(header["config"]);
  try {
    config.validate();
  } catch (const Error& e) {
    throw CorruptCheckpoint(std::string("invalid config in header: ") + e.what());
  }
  const auto specs = tensor_specs(config);
  const auto& table = header["tensors"];
  if (table.size() != specs.size())
    throw CorruptCheckpoint("expected " + std::to_string(specs.size()) + " tensors, header lists " +
                            std::to_string(table.size()));

  struct Entry {
    bool f64;
    std::uint64_t offset;
    std::uint64_t bytes;
  };
  std::vector<Entry> entries;
  std::uint64_t expected_offset = 0;
  for (std::size_t t = 0; t < specs.size(); ++t) {
    const auto& e = table[t];
    try {
      const auto name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<std::vector<long long>>();
      const auto dtype = e.at("dtype").get<std::string>();
      const auto offset = e.at("byte_offset").get<std::uint64_t>();
      if (name != specs[t].name) throw CorruptCheckpoint("tensor " + std::to_string(t) + " is '" + name + "', expected '" + specs[t].name + "'");
      if (shape.size() != 2 || shape[0] != specs[t].rows || shape[1] != specs[t].cols)
        throw CorruptCheckpoint("tensor '" + name + "' has shape " + e.at("shape").dump() + ", expected [" +
                                std::to_string(specs[t].rows) + "," + std::to_string(specs[t].cols) + "]");
      if (dtype != "f32" && dtype != "f64") throw CorruptCheckpoint("tensor '" + name + "' has unknown dtype " + dtype);
      if (offset != expected_offset) throw CorruptCheckpoint("tensor '" + name + "' has byte_offset " + std::to_string(offset) + ", expected " + std::to_string(expected_offset));
      const std::uint64_t elem = dtype == "f64" ? 8 : 4;
      const std::uint64_t bytes = static_cast<std::uint64_t>(specs[t].rows * specs[t].cols) * elem;
      entries.push_back({dtype == "f64", offset, bytes});
      expected_offset += bytes;
    } catch (const nlohmann::json::exception& ex) {
      throw CorruptCheckpoint("malformed tensor entry " + std::to_string(t) + ": " + ex.what());
    }
  }

  const auto bin_path = dir / "params.bin";
  std::error_code ec;
  const auto file_size = std::filesystem::file_size(bin_path, ec);
  if (ec) throw CorruptCheckpoint("cannot stat " + bin_path.string());
  if (file_size != expected_offset)
    throw CorruptCheckpoint("params.bin has " + std::to_string(file_size) + " bytes, header implies " +
                            std::to_string(expected_offset));

  std::ifstream bin(bin_path, std::ios::binary);
  std::vector<char> blob(static_cast<std::size_t>(file_size));
  bin.read(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!bin) throw CorruptCheckpoint("short read on " + bin_path.string());

  Parameters<T> params = Parameters<T>::zeros(config);
  params.config.precision = std::is_same_v<T, double> ? Precision::check64 : Precision::fast32;
  for (std::size_t t = 0; t < specs.size(); ++t) {
    auto& dst = params.tensors[t];
    const auto count = static_cast<std::size_t>(dst.size());
    const char* src = blob.data() + entries[t].offset;
    if (entries[t].f64) {
      std::vector<double> tmp(count);
      detail::from_le(src, tmp.data(), count);
      for (std::size_t i = 0; i < count; ++i) dst.data()[i] = static_cast<T>(tmp[i]);
    } else {
      std::vector<float> tmp(count);
      detail::from_le(src, tmp.data(), count);
      for (std::size_t i = 0; i < count; ++i) dst.data()[i] = static_cast<T>(tmp[i]);
    }
  }
  if (!params.all_finite()) throw CorruptCheckpoint("checkpoint contains non-finite values");
  return params;
}

}  // namespace romlab
