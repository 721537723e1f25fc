#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "geoformer/tensor.hpp"

namespace geoformer::diff {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Flat parameter file: 8-byte little-endian header length, JSON header
/// (entry names, shapes, precision, byte offsets, payload checksum), then the
/// raw little-endian IEEE-754 payload.
void write_params(const std::string& path, const NamedTensors& tensors,
                  const nlohmann::json& meta = nlohmann::json::object());

struct ParamFile {
  NamedTensors tensors;
  nlohmann::json meta;

  const Tensor& find(const std::string& name) const;
  bool has(const std::string& name) const;
};

ParamFile read_params(const std::string& path);

uint64_t fnv1a64(const void* data, size_t n, uint64_t seed = 1469598103934665603ull);

}  // namespace geoformer::diff
