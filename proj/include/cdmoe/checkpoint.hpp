// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdmoe/error.hpp"
#include "cdmoe/model.hpp"
#include "cdmoe/params.hpp"
#include "cdmoe/rng.hpp"

namespace cdmoe {

constexpr int kCheckpointFormatVersion = 1;

namespace detail {

inline void write_le_floats(std::vector<unsigned char>& out,
                            const std::vector<float>& values) {
  for (float v : values) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    out.push_back((unsigned char)(bits & 0xff));
    out.push_back((unsigned char)((bits >> 8) & 0xff));
    out.push_back((unsigned char)((bits >> 16) & 0xff));
    out.push_back((unsigned char)((bits >> 24) & 0xff));
  }
}

inline float read_le_float(const unsigned char* p) {
  const std::uint32_t bits = (std::uint32_t)p[0] | ((std::uint32_t)p[1] << 8) |
                             ((std::uint32_t)p[2] << 16) |
                             ((std::uint32_t)p[3] << 24);
  return std::bit_cast<float>(bits);
}

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)h);
  return buf;
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"vocab_size", c.vocab_size},
                        {"hidden_size", c.hidden_size},
                        {"expert_inner", c.expert_inner},
                        {"num_blocks", c.num_blocks},
                        {"num_routing_experts", c.num_routing_experts},
                        {"num_shared_experts", c.num_shared_experts},
                        {"k_active", c.k_active},
                        {"max_seq_len", c.max_seq_len},
                        {"attention_enabled", c.attention_enabled},
                        {"renormalize_gates", c.renormalize_gates}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.hidden_size = j.at("hidden_size").get<int>();
  c.expert_inner = j.at("expert_inner").get<int>();
  c.num_blocks = j.at("num_blocks").get<int>();
  c.num_routing_experts = j.at("num_routing_experts").get<int>();
  c.num_shared_experts = j.at("num_shared_experts").get<int>();
  c.k_active = j.at("k_active").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.attention_enabled = j.at("attention_enabled").get<bool>();
  c.renormalize_gates = j.at("renormalize_gates").get<bool>();
  return c;
}

inline std::string blob_path_for(const std::string& base) {
  return base + ".bin";
}
inline std::string manifest_path_for(const std::string& base) {
  return base + ".json";
}

} // namespace detail

/// Writes `<base>.json` (manifest) and `<base>.bin` (raw little-endian
/// float32 values in manifest order). The manifest records the config,
/// each block's layer kind with kept-expert indices, every tensor's
/// shape/offset/length, and an FNV-1a hash of the blob bytes.
inline void save_checkpoint(const MoEModel& model, const std::string& base) {
  std::vector<unsigned char> blob;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& ref : named_params(model)) {
    nlohmann::json entry;
    entry["name"] = ref.name;
    entry["shape"] = ref.tensor->shape;
    entry["offset"] = blob.size();
    entry["length"] = ref.tensor->numel() * sizeof(float);
    tensors.push_back(std::move(entry));
    detail::write_le_floats(blob, ref.tensor->data);
  }

  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& block : model.blocks) {
    nlohmann::json entry;
    if (is_routed(block.layer)) {
      entry["layer_kind"] = "routed";
    } else {
      const auto& cl = std::get<CondensedLayer>(block.layer);
      entry["layer_kind"] = "condensed";
      entry["kept_indices"] = cl.kept_indices;
      entry["origin"] = cl.origin;
    }
    blocks.push_back(std::move(entry));
  }

  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["config"] = detail::config_to_json(model.config);
  manifest["blocks"] = std::move(blocks);
  manifest["tensors"] = std::move(tensors);
  manifest["content_hash"] = detail::hex64(fnv1a64(blob.data(), blob.size()));

  {
    std::ofstream out(detail::blob_path_for(base), std::ios::binary);
    if (!out)
      throw IoError("save_checkpoint: cannot open " +
                    detail::blob_path_for(base));
    out.write((const char*)blob.data(), (std::streamsize)blob.size());
    if (!out)
      throw IoError("save_checkpoint: write failed for " +
                    detail::blob_path_for(base));
  }
  {
    std::ofstream out(detail::manifest_path_for(base), std::ios::binary);
    if (!out)
      throw IoError("save_checkpoint: cannot open " +
                    detail::manifest_path_for(base));
    out << manifest.dump(2) << "\n";
    if (!out)
      throw IoError("save_checkpoint: write failed for " +
                    detail::manifest_path_for(base));
  }
}

/// Rebuilds a model from `<base>.json` + `<base>.bin`. The blob is
/// validated against the manifest hash before any tensor is accepted;
/// truncation, reordering or edits surface as CorruptionError.
inline MoEModel load_checkpoint(const std::string& base) {
  std::ifstream manifest_in(detail::manifest_path_for(base),
                            std::ios::binary);
  if (!manifest_in)
    throw IoError("load_checkpoint: cannot open " +
                  detail::manifest_path_for(base));
  nlohmann::json manifest;
  try {
    manifest_in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("load_checkpoint: bad manifest: ") +
                          e.what());
  }
  if (!manifest.contains("format_version") ||
      manifest["format_version"].get<int>() != kCheckpointFormatVersion)
    throw VersionError("load_checkpoint: unsupported manifest version");

  std::ifstream blob_in(detail::blob_path_for(base),
                        std::ios::binary | std::ios::ate);
  if (!blob_in)
    throw IoError("load_checkpoint: cannot open " +
                  detail::blob_path_for(base));
  const std::size_t blob_size = (std::size_t)blob_in.tellg();
  blob_in.seekg(0);
  std::vector<unsigned char> blob(blob_size);
  blob_in.read((char*)blob.data(), (std::streamsize)blob_size);
  if (!blob_in)
    throw CorruptionError("load_checkpoint: blob read failed");

  const ModelConfig config = detail::config_from_json(manifest.at("config"));
  config.validate();

  // hash the bytes in manifest order: any offset shuffle or truncation
  // changes the digest
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& entry : manifest.at("tensors")) {
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    const std::size_t length = entry.at("length").get<std::size_t>();
    if (offset + length > blob_size)
      throw CorruptionError("load_checkpoint: blob truncated (tensor " +
                            entry.at("name").get<std::string>() +
                            " out of range)");
    h = fnv1a64(blob.data() + offset, length, h);
  }
  if (detail::hex64(h) != manifest.at("content_hash").get<std::string>())
    throw CorruptionError("load_checkpoint: content hash mismatch");

  // skeleton with the manifest's layer kinds
  MoEModel model = init_model(config, 0);
  const auto& blocks = manifest.at("blocks");
  if (blocks.size() != model.blocks.size())
    throw CorruptionError("load_checkpoint: block count mismatch");
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const std::string kind = blocks[b].at("layer_kind").get<std::string>();
    if (kind == "routed") continue;
    if (kind != "condensed")
      throw CorruptionError("load_checkpoint: unknown layer kind " + kind);
    CondensedLayer cl;
    cl.origin = blocks[b].at("origin").get<int>();
    cl.kept_indices = blocks[b].at("kept_indices").get<std::vector<int>>();
    const auto& routed = std::get<RoutedMoELayer>(model.blocks[b].layer);
    for (int idx : cl.kept_indices) {
      if (idx < 0 || (std::size_t)idx >= routed.experts.size())
        throw CorruptionError("load_checkpoint: kept index out of range");
      cl.kept_experts.push_back(routed.experts[(std::size_t)idx]);
    }
    cl.kept_gates = Tensor::zeros({cl.kept_indices.size()});
    cl.shared = routed.shared;
    model.blocks[b].layer = std::move(cl);
  }

  // fill tensors by name
  auto refs = named_params(model);
  std::size_t cursor = 0;
  for (const auto& entry : manifest.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    if (cursor >= refs.size() || refs[cursor].name != name)
      throw CorruptionError("load_checkpoint: unexpected tensor " + name);
    Tensor* t = refs[cursor].tensor;
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    if (shape != t->shape)
      throw CorruptionError("load_checkpoint: shape mismatch for " + name);
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    const std::size_t length = entry.at("length").get<std::size_t>();
    if (length != t->numel() * sizeof(float))
      throw CorruptionError("load_checkpoint: length mismatch for " + name);
    for (std::size_t i = 0; i < t->numel(); ++i)
      t->data[i] = detail::read_le_float(blob.data() + offset + i * 4);
    ++cursor;
  }
  if (cursor != refs.size())
    throw CorruptionError("load_checkpoint: manifest lists " +
                          std::to_string(cursor) + " tensors, model needs " +
                          std::to_string(refs.size()));
  return model;
}

} // namespace cdmoe
