#include "pop/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include <json.hpp>

#include "pop/errors.hpp"

namespace pop {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void save_checkpoint(const ModelWeights& weights, const std::filesystem::path& path) {
  weights.validate();
  nlohmann::json header = to_json(weights.config);
  header["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : weights.named()) {
    header["tensors"].push_back({{"name", name}, {"shape", t->shape()}, {"offset", offset}, {"count", t->numel()}});
    offset += t->numel() * sizeof(double);
  }
  const std::string text = header.dump();
  const auto header_len = static_cast<std::uint32_t>(text.size());

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FileError("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  unsigned char len_bytes[4];
  for (int i = 0; i < 4; ++i) len_bytes[i] = static_cast<unsigned char>((header_len >> (8 * i)) & 0xffu);
  out.write(reinterpret_cast<const char*>(len_bytes), 4);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : weights.named()) {
    out.write(reinterpret_cast<const char*>(t->ptr()), static_cast<std::streamsize>(t->numel() * sizeof(double)));
  }
  if (!out) throw FileError("failed writing checkpoint " + path.string());
}

ModelWeights load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw FormatError("checkpoint " + path.string() + ": bad magic");
  }
  std::uint32_t header_len = 0;
  for (int i = 0; i < 4; ++i) {
    header_len |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  }
  if (12 + static_cast<std::size_t>(header_len) > bytes.size()) {
    throw FormatError("checkpoint " + path.string() + ": truncated header");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(12, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint " + path.string() + ": header is not valid JSON: " + e.what());
  }
  ModelConfig config;
  try {
    config = config_from_json(header);
    config.validate();
  } catch (const ConfigError& e) {
    throw FormatError("checkpoint " + path.string() + ": " + e.what());
  }

  const std::size_t data_start = 12 + header_len;
  const std::size_t data_size = bytes.size() - data_start;

  std::map<std::string, Tensor> loaded;
  if (!header.contains("tensors") || !header["tensors"].is_array()) {
    throw FormatError("checkpoint " + path.string() + ": missing tensor manifest");
  }
  for (const auto& entry : header["tensors"]) {
    std::string name;
    Shape shape;
    std::size_t offset = 0, count = 0;
    try {
      name = entry.at("name").get<std::string>();
      shape = entry.at("shape").get<Shape>();
      offset = entry.at("offset").get<std::size_t>();
      count = entry.at("count").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("checkpoint " + path.string() + ": malformed manifest entry " + (name.empty() ? "" : name) +
                        ": " + e.what());
    }
    if (shape_numel(shape) != count) {
      throw FormatError("tensor " + name + ": shape " + shape_str(shape) + " does not match count " +
                        std::to_string(count));
    }
    Shape want;
    try {
      want = expected_shape(config, name);
    } catch (const ConfigError&) {
      throw FormatError("tensor " + name + ": unknown tensor name");
    }
    if (shape != want) {
      throw FormatError("tensor " + name + ": shape " + shape_str(shape) + " disagrees with config " + shape_str(want));
    }
    if (offset % sizeof(double) != 0 || offset > data_size || count * sizeof(double) > data_size - offset) {
      throw FormatError("tensor " + name + ": data truncated or out of range");
    }
    Buffer data(count);
    std::memcpy(data.data(), bytes.data() + data_start + offset, count * sizeof(double));
    loaded.emplace(name, Tensor(std::move(shape), std::move(data)));
  }

  ModelWeights w;
  w.config = config;
  w.layers.resize(config.num_layers);
  for (auto& [name, slot] : w.named_mutable()) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw FormatError("tensor " + name + ": missing from checkpoint");
    *slot = it->second;
  }
  return w;
}

}  // namespace pop
