#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace geoformer::eval {

/// Six-metric regression report. Residual convention is pred - target.
struct MetricReport {
  double rmse = 0.0;
  double mae = 0.0;
  double me = 0.0;
  double nmad = 0.0;
  double cc = 0.0;   // Pearson correlation
  double r2 = 0.0;
  size_t n = 0;
  bool degenerate = false;  // zero target variance: cc and r2 reported NaN
};

MetricReport metrics(const std::vector<double>& preds, const std::vector<double>& targets);

struct StratumReport {
  size_t h_bin = 0;       // index into h_edges intervals
  size_t l_bin = 0;       // index into lambda_edges intervals
  double h_lo = 0, h_hi = 0;
  double l_lo = 0, l_hi = 0;
  MetricReport report;
  bool sparse = false;    // n < n_min
};

/// Per-(height bin x density bin) RMSE/ME/NMAD panels. Samples falling
/// outside every bin are ignored.
std::vector<StratumReport> stratified(const std::vector<double>& preds,
                                      const std::vector<double>& targets,
                                      const std::vector<double>& h_ave,
                                      const std::vector<double>& lambda_p,
                                      const std::vector<double>& h_edges,
                                      const std::vector<double>& lambda_edges,
                                      size_t n_min = 30);

// Default bin edges (upper bound open; last height bin extends to infinity).
std::vector<double> default_height_edges();   // {0,10,20,30,50,inf}
std::vector<double> default_lambda_edges();   // {0,0.1,0.25,0.5,0.7,1.0}

struct TrimResult {
  std::vector<size_t> kept;    // indices into the input
  size_t n_dropped = 0;
  MetricReport before;
  MetricReport after;
};

/// Drops the ceil(q*n) samples with the largest |residual|.
TrimResult trim_outliers(const std::vector<double>& preds, const std::vector<double>& targets,
                         double q = 0.001);

std::string metric_csv_header();
std::string metric_csv_row(const std::string& model_id, const std::string& task,
                           const std::string& stratum, const MetricReport& r);

}  // namespace geoformer::eval
