#pragma once

#include <array>
#include <string>
#include <vector>

#include <json.hpp>

#include "geoformer/dataset.hpp"
#include "geoformer/losses.hpp"
#include "geoformer/model.hpp"

namespace geoformer::train {

struct TrainConfig {
  double lr0 = 1e-4;
  double weight_decay = 1e-2;
  size_t batch = 64;
  size_t max_epochs = 150;
  size_t warmup_epochs = 5;
  size_t patience = 10;
  uint64_t seed = 0;
  double grad_clip = 0.0;  // global-norm clip; 0 disables

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Linear warmup to lr0 over warmup_epochs, then cosine decay to 0 at
/// max_epochs. lr(0) = 0 when warmup > 0.
double lr_schedule(const TrainConfig& cfg, size_t epoch);

struct EpochLog {
  size_t epoch = 0;
  double train_loss = 0.0;
  double val_mae_bh = 0.0, val_mae_bf = 0.0;
  double val_r2_bh = 0.0, val_r2_bf = 0.0;
  double score = 0.0;  // mean of the two validation R^2 (early-stop criterion)
  double lr = 0.0;
  double delta_bh = 0.0, delta_bf = 0.0;
  double sigma_bh = 0.0, sigma_bf = 0.0;

  nlohmann::json to_json() const;
  static EpochLog from_json(const nlohmann::json& j);
};

using TrainLog = std::vector<EpochLog>;
void write_trainlog_csv(const std::string& path, const TrainLog& log);

/// Decoupled-weight-decay adaptive-moment optimizer. Decay shrinks the weight
/// by exactly lr*wd*w per step before the moment update.
class AdamW {
 public:
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  size_t t = 0;
  std::vector<diff::Tensor> m, v;

  void init(const model::ParamMap& params);
  void step(model::ParamMap& params, const std::vector<diff::Tensor>& grads, double lr,
            double weight_decay, const std::vector<bool>& decay_mask);
};

using ChannelMask = std::array<bool, data::kNumChannels>;
inline constexpr ChannelMask kAllChannels = {true, true, true, true, true, true, true};

struct SplitPredictions {
  std::vector<double> bh_pred, bh_true;
  std::vector<double> bf_pred, bf_true;
  std::vector<double> h_ave, lambda_p;  // copies of the targets, for stratification
};

SplitPredictions predict_split(const model::ModelConfig& cfg, const model::ParamMap& params,
                               const data::Container& container, const data::NormStats& stats,
                               const ChannelMask& mask, data::Split split, size_t batch = 64);

struct TrainResult {
  model::ParamMap best_params;
  loss::LossState best_loss_state;
  data::NormStats stats;
  TrainLog log;
  size_t best_epoch = 0;
  double best_score = 0.0;
  size_t epochs_run = 0;
};

/// Full optimization loop. Writes best.ckpt, last.ckpt and trainlog.csv into
/// out_dir. Deterministic for a given seed under one thread. epoch_limit > 0
/// caps the epochs executed by this invocation (the schedule still follows
/// max_epochs), leaving a last.ckpt that resume() can pick up.
TrainResult train(const model::ModelConfig& mcfg, const TrainConfig& tcfg,
                  const data::Container& container, const ChannelMask& channel_mask,
                  const std::string& out_dir, size_t epoch_limit = 0);

/// Continues from a last.ckpt written by train(); bit-identical to an
/// uninterrupted run under one thread.
TrainResult resume(const std::string& last_checkpoint, const data::Container& container,
                   const std::string& out_dir, size_t epoch_limit = 0);

}  // namespace geoformer::train
