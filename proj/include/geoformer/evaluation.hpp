#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "geoformer/metrics.hpp"
#include "geoformer/trainer.hpp"

namespace geoformer::eval {

struct AblationSpec {
  std::string name;  // full, enlarged, no_dem, no_sar, no_optical
  train::ChannelMask mask = train::kAllChannels;
  size_t capacity_scale = 1;

  void validate() const;  // name and mask must agree
};

AblationSpec ablation_by_name(const std::string& name);
std::vector<AblationSpec> standard_ablations();

struct TaskEval {
  MetricReport train_m;
  MetricReport test_m;
  double gap_rmse = 0.0;  // test - train
};

struct AblationResult {
  AblationSpec spec;
  TaskEval bh, bf;
  size_t best_epoch = 0;
  size_t epochs_run = 0;
};

/// Trains the configured variant with the spec's channel mask and capacity,
/// then reports train-split and test-split metrics plus their RMSE gap.
AblationResult run_ablation(const AblationSpec& spec, const model::ModelConfig& base_cfg,
                            const train::TrainConfig& tcfg, const data::Container& container,
                            const std::string& out_dir);

/// Structural (capacity) and modality tables, as one CSV each.
void write_ablation_tables(const std::string& out_dir, const std::vector<AblationResult>& runs);

nlohmann::json report_json(const MetricReport& r);

/// metrics.csv (global + trimmed), stratified_{bh,bf}.csv, trim.json.
void write_eval_reports(const std::string& out_dir, const std::string& model_id,
                        const train::SplitPredictions& preds);

/// One row per run in the layout of a model-comparison table: both tasks'
/// six metrics side by side.
std::string rollup_table(
    const std::vector<std::pair<std::string, std::pair<MetricReport, MetricReport>>>& rows);

}  // namespace geoformer::eval
