#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "geoformer/autodiff.hpp"
#include "geoformer/checkpoint.hpp"
#include "geoformer/dataset.hpp"

namespace geoformer::model {

enum class Variant { geoformer, cnn_baseline };

const char* variant_name(Variant v);
Variant variant_from_name(const std::string& s);

struct ModelConfig {
  size_t k = 5;               // context cells per side (odd)
  size_t patch_px = 10;
  size_t in_channels = 8;     // 7 data channels + validity mask
  size_t embed_dim = 32;      // D (before capacity scaling)
  size_t n_heads = 4;
  size_t n_blocks = 2;        // attention blocks; each = plain unit + shifted unit
  size_t window = 5;          // w; must divide k
  size_t mlp_ratio = 4;
  size_t head_hidden = 16;
  Variant variant = Variant::geoformer;
  size_t capacity_scale = 1;  // 2 doubles embed_dim and depth (Enlarged)

  size_t dim() const { return embed_dim * capacity_scale; }
  size_t blocks() const { return n_blocks * capacity_scale; }
  size_t win() const { return std::min(window, k); }
  size_t shift() const { return win() / 2; }

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  uint64_t hash() const;

  /// Largest divisor of k not exceeding 5 (window tiling must be exact).
  static size_t default_window(size_t k);
};

using ParamMap = diff::NamedTensors;

/// Deterministic parameter initialization (trunc-free normal 0.02 weights,
/// zero biases, unit LN scales).
ParamMap init_params(const ModelConfig& cfg, uint64_t seed);
size_t param_count(const ParamMap& params);

/// Parameters bound onto a tape as (optionally trainable) leaves.
struct BoundParams {
  std::map<std::string, diff::Var> vars;
  diff::Var at(const std::string& name) const;
};
BoundParams bind_params(diff::Tape& tape, const ParamMap& params, bool trainable);

struct Predictions {
  diff::Var bh;  // [B], >= 0 (ReLU head)
  diff::Var bf;  // [B], in (0,1) (sigmoid head)
};

/// Batched forward pass. Dispatches on cfg.variant; inputs must match cfg.k
/// (the CNN baseline accepts k = 1 only).
Predictions forward_batch(diff::Tape& tape, const ModelConfig& cfg, const BoundParams& params,
                          const std::vector<const data::ContextTensor*>& batch);

/// Convenience: single-sample inference returning plain doubles.
std::pair<double, double> predict(const ModelConfig& cfg, const ParamMap& params,
                                  const data::ContextTensor& input);

// Window-partition bookkeeping shared by the model and its tests: row indices
// into a [B*k*k, D] token matrix for each (batch, window, in-window) slot,
// applying a cyclic shift of `shift` cells when building shifted windows.
std::vector<size_t> window_gather_indices(size_t batch, size_t k, size_t w, size_t shift);
std::vector<size_t> inverse_permutation(const std::vector<size_t>& perm);

/// Additive attention mask for shifted windows: 0 within a pre-shift region,
/// -1e9 across the wrap boundary. Shape [nw, w*w, w*w].
diff::Tensor shifted_window_mask(size_t k, size_t w, size_t shift);

void save_model(const std::string& path, const ModelConfig& cfg, const ParamMap& params,
                const nlohmann::json& extra_meta = nlohmann::json::object());

struct LoadedModel {
  ModelConfig config;
  ParamMap params;
  nlohmann::json meta;
};
LoadedModel load_model(const std::string& path);

}  // namespace geoformer::model
