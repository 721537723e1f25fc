#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "geoformer/dataset.hpp"

namespace geoformer::split {

inline constexpr int kNumSectors = 10;  // equal-angle radial sectors of 36 degrees

struct SectorAssignment {
  std::string city;
  int sector = 0;
  double theta_lo_deg = 0.0;  // span [lo, lo+36)
  double theta_hi_deg = 0.0;
  data::Split split = data::Split::train;
  size_t count = 0;
};

struct CellCenter {
  double row = 0.0;
  double col = 0.0;
};

/// lambda_p-weighted centroid of a city's valid samples (the urban core).
CellCenter find_core(const std::vector<data::Sample>& city_samples);

/// Sector id (0..9) of a cell relative to the core; angles measured from the
/// +col axis, counter-clockwise in (row, col) space.
int sector_of(double row, double col, const CellCenter& core);

/// Greedy sector-to-split assignment approximating the given ratios. Sectors
/// are processed by descending sample count, each going to the split with the
/// largest remaining deficit; split tags are written back into `samples`.
/// Throws if fewer than 3 sectors are non-empty.
std::vector<SectorAssignment> split_city(std::vector<data::Sample>& samples,
                                         const CellCenter& core,
                                         std::array<double, 3> ratios = {0.8, 0.1, 0.1},
                                         uint64_t seed = 0);

/// Re-tags as purged any training sample whose k x k context window contains
/// an in-grid cell lying in a val/test sector. Returns the number purged.
size_t purge_boundary(std::vector<data::Sample>& samples, size_t k, size_t rows, size_t cols,
                      const CellCenter& core,
                      const std::array<data::Split, kNumSectors>& sector_split);

std::array<data::Split, kNumSectors> sector_split_map(
    const std::vector<SectorAssignment>& assignments);

struct RingStats {
  double radius_lo_m = 0.0;
  double radius_hi_m = 0.0;
  double bh_mean = 0.0, bh_std = 0.0;
  double bf_mean = 0.0, bf_std = 0.0;
  size_t count = 0;
};

std::vector<RingStats> ring_stats(const std::vector<data::Sample>& samples,
                                  const CellCenter& core, double band_m = 1000.0,
                                  size_t n_bands = 5);

/// Runs find_core + split_city + purge_boundary per city, mutating the
/// samples' split tags in place. Purge is applied only for k > 1.
std::vector<SectorAssignment> apply_geosplit(data::Container& container, size_t k,
                                             std::array<double, 3> ratios = {0.8, 0.1, 0.1},
                                             uint64_t seed = 0);

/// Split manifest CSV: city,row,col,sector,split (stable ordering).
void write_split_manifest(const std::string& path, const std::vector<data::Sample>& samples,
                          const std::vector<std::pair<std::string, CellCenter>>& cores);

}  // namespace geoformer::split
