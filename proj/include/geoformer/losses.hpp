#pragma once

#include <vector>

#include "geoformer/autodiff.hpp"

namespace geoformer::loss {

/// Learnable homoscedastic-uncertainty weights (as log sigma for positivity)
/// plus the per-task Huber transition deltas, updated once per epoch.
struct LossState {
  double log_sigma_bh = 0.0;
  double log_sigma_bf = 0.0;
  double delta_bh = 1.0;
  double delta_bf = 0.05;
  double delta_min_bh = 0.1, delta_max_bh = 10.0;
  double delta_min_bf = 0.1, delta_max_bf = 10.0;
};

/// Scalar Huber: |e| < delta -> e^2/(2 delta), else |e| - delta/2.
double huber_value(double pred, double target, double delta);

/// L_total = L_bh/(2 sigma_bh^2) + L_bf/(2 sigma_bf^2) + log sigma_bh + log sigma_bf,
/// with each sigma parameterized as exp(log_sigma). All inputs are scalars.
diff::Var total_loss(diff::Var l_bh, diff::Var l_bf, diff::Var log_sigma_bh,
                     diff::Var log_sigma_bf);

double mae(const std::vector<double>& residuals);

/// Sets the initial deltas (and their clamp ranges [0.1, 10*delta0]) from
/// residuals of the untrained model over the training set.
void init_delta(LossState& state, const std::vector<double>& residuals_bh,
                const std::vector<double>& residuals_bf);

/// Per-epoch delta adaptation: delta <- clamp(MAE of epoch residuals).
void update_delta(LossState& state, const std::vector<double>& residuals_bh,
                  const std::vector<double>& residuals_bf);

}  // namespace geoformer::loss
