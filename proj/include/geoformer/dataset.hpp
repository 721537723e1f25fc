#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "geoformer/grid_labeling.hpp"
#include "geoformer/tensor.hpp"

namespace geoformer::data {

inline constexpr size_t kNumChannels = 7;  // explanatory rasters at 10 m
inline constexpr size_t kPatchPx = 10;     // pixels per 100 m cell side
inline const std::array<const char*, kNumChannels> kChannelNames = {
    "VV", "VH", "B2", "B3", "B4", "B8", "DEM"};

size_t channel_index(const std::string& name);

enum class Split : uint8_t { train = 0, val = 1, test = 2, purged = 3 };
const char* split_name(Split s);
Split split_from_name(const std::string& s);

/// One 100 m cell that passed the plausibility filter.
struct Sample {
  std::string city;
  size_t row = 0;
  size_t col = 0;
  double h_ave = 0.0;
  double lambda_p = 0.0;
  Split split = Split::train;
};

/// Per-city aligned raster stack: 7 channels at 10 m pitch plus BH/BF label
/// grids at 100 m. Channel rasters are (10*rows) x (10*cols), row-major.
struct CityStack {
  std::string city;
  int year = 0;
  grid::FishnetGrid grid;
  std::array<std::vector<float>, kNumChannels> channels;
  std::vector<float> bh;           // rows*cols, NaN where no label
  std::vector<float> bf;           // rows*cols
  std::vector<uint8_t> valid;      // rows*cols, 1 where a kept sample exists

  size_t rows() const { return grid.rows; }
  size_t cols() const { return grid.cols; }
  size_t px_rows() const { return grid.rows * kPatchPx; }
  size_t px_cols() const { return grid.cols * kPatchPx; }
  void validate() const;
};

// ----- container ----------------------------------------------------------
// A container is a directory: manifest.json, samples.csv, and one raw blob
// per city holding 7 channel arrays + BH + BF as little-endian float32 in C
// row-major order, at the byte offsets declared in the manifest.

void write_container(const std::vector<CityStack>& stacks, const std::vector<Sample>& samples,
                     const std::string& path);

struct Container {
  std::vector<CityStack> stacks;
  std::vector<Sample> samples;

  const CityStack& stack(const std::string& city) const;
};

Container read_container(const std::string& path);

void write_samples_csv(const std::string& path, const std::vector<Sample>& samples);
std::vector<Sample> read_samples_csv(const std::string& path);

// ----- context assembly ----------------------------------------------------

/// Per-channel standardization statistics, computed on the training split only.
struct NormStats {
  std::array<double, kNumChannels> mean{};
  std::array<double, kNumChannels> stdev{};
};

NormStats compute_norm_stats(const std::vector<CityStack>& stacks,
                             const std::vector<Sample>& samples);

/// Model input: 8 channels x (10k) x (10k); channel 7 is the binary validity
/// mask, 1 exactly on the central 10x10 patch.
struct ContextTensor {
  size_t k = 1;
  size_t row = 0;
  size_t col = 0;
  diff::Tensor data;  // [8, 10k, 10k]
};

/// channel_mask: per-channel keep flag (ablations zero dropped channels).
ContextTensor assemble_context(const CityStack& stack, const Sample& sample, size_t k,
                               const NormStats& stats,
                               const std::array<bool, kNumChannels>& channel_mask = {
                                   true, true, true, true, true, true, true});

// ----- synthetic generator -------------------------------------------------

struct SynthParams {
  double core_bh = 10.4;        // metres, calibrated to ring-statistics targets
  double core_bf = 0.208;
  double decay_m = 20000.0;     // e-folding distance of the radial profile
  double label_noise_bh = 0.3;  // metres
  double label_noise_bf = 0.008;
  double optical_noise = 0.02;  // per-pixel, after unit-scale signal
  double sar_noise = 0.6;
  double dem_base = 100.0;
  double dem_amp = 30.0;
};

struct SynthCity {
  CityStack stack;
  grid::LabelGrid labels;
  size_t center_row = 0;
  size_t center_col = 0;
};

/// Deterministic synthetic city: BH/BF decay radially from the center and
/// depend on the 3x3-neighborhood mean of a latent urbanization field that
/// the optical channels expose, so context-aware models hold an advantage.
SynthCity synth_city(uint64_t seed, size_t rows, size_t cols,
                     const SynthParams& params = SynthParams{});

/// Derives samples from a synthetic (or ingested) stack by running the
/// plausibility filter over its label grid.
std::vector<Sample> samples_from_labels(const CityStack& stack, const grid::LabelGrid& labels);

/// Stable 64-bit hash for deriving purpose-specific seeds from one master seed.
uint64_t derive_seed(uint64_t master, const std::string& purpose);

}  // namespace geoformer::data
