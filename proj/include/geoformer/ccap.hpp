#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace geoformer::ccap {

struct CcapConfig {
  double lambda_lo = 0.005;
  double lambda_hi = 0.15;
  size_t n_steps = 30;
  double bh_floor = 5.0;      // metres
  double penalty = 0.0;       // score = entropy - penalty * mask_fraction
  bool count_uniform = false; // entropy over the histogram of distinct sizes
                              // instead of cluster area mass

  void validate() const;
};

struct Candidate {
  double lambda = 0.0;
  double entropy = 0.0;
  double mask_fraction = 0.0;
  size_t n_clusters = 0;
  double score = 0.0;
};

struct CcapResult {
  double lambda_star = 0.0;
  std::vector<Candidate> candidates;
  std::vector<uint8_t> mask;          // rows*cols, 1 inside the urban mask
  size_t rows = 0, cols = 0;
  std::vector<size_t> cluster_sizes;  // at lambda_star, unordered
};

/// 4-connected component labeling of a binary grid. Returns per-cell labels
/// (-1 outside the mask) and fills sizes per label.
std::vector<int> label_components(const std::vector<uint8_t>& mask, size_t rows, size_t cols,
                                  std::vector<size_t>& sizes);

/// Shannon entropy (natural log) of the cluster size distribution.
double size_entropy(const std::vector<size_t>& sizes, bool count_uniform = false);

/// Scans n_steps uniform thresholds over [lambda_lo, lambda_hi]; for each,
/// masks cells with BF >= lambda and BH >= bh_floor, labels 4-connected
/// clusters and scores entropy - penalty*mask_fraction. Highest score wins,
/// ties going to the smallest lambda.
CcapResult select_threshold(const std::vector<double>& bf, const std::vector<double>& bh,
                            size_t rows, size_t cols, const CcapConfig& cfg = CcapConfig{});

struct EventGrids {
  std::vector<double> bf, bh;
  size_t rows = 0, cols = 0;
};

struct EventRow {
  std::string name;
  double bf_pre = 0.0, bf_post = 0.0;
  double bh_pre = 0.0, bh_post = 0.0;
  size_t n_pre = 0, n_post = 0;
};

/// Masks each epoch with its own CCAP threshold, then means BF/BH over masked
/// cells within radius_m of (center_row, center_col), on a 100 m cell pitch.
EventRow event_compare(const std::string& name, const EventGrids& pre, const EventGrids& post,
                       double center_row, double center_col, double radius_m,
                       const CcapConfig& cfg = CcapConfig{});

/// CSV in the pre/post means layout, with a count-weighted overall row when
/// more than one city is given.
std::string event_table_csv(const std::vector<EventRow>& rows);

/// Binary PGM (P5, maxval 255) raster of the mask.
void write_mask_pgm(const std::string& path, const std::vector<uint8_t>& mask, size_t rows,
                    size_t cols);

}  // namespace geoformer::ccap
