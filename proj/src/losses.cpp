#include "geoformer/losses.hpp"

#include <algorithm>
#include <cmath>

#include "geoformer/errors.hpp"

namespace geoformer::loss {

double huber_value(double pred, double target, double delta) {
  if (delta <= 0.0) throw usage_error("huber: delta must be > 0");
  const double e = pred - target;
  return std::abs(e) < delta ? e * e / (2.0 * delta) : std::abs(e) - delta / 2.0;
}

diff::Var total_loss(diff::Var l_bh, diff::Var l_bf, diff::Var log_sigma_bh,
                     diff::Var log_sigma_bf) {
  using namespace diff;
  // 1/(2 sigma^2) = 0.5 * exp(-2 log_sigma)
  Var w_bh = scalar_mul(exp_op(scalar_mul(log_sigma_bh, -2.0)), 0.5);
  Var w_bf = scalar_mul(exp_op(scalar_mul(log_sigma_bf, -2.0)), 0.5);
  Var weighted = add(mul(w_bh, l_bh), mul(w_bf, l_bf));
  return add(add(weighted, log_sigma_bh), log_sigma_bf);
}

double mae(const std::vector<double>& residuals) {
  if (residuals.empty()) throw usage_error("mae: empty residuals");
  double s = 0.0;
  for (double r : residuals) s += std::abs(r);
  return s / (double)residuals.size();
}

void init_delta(LossState& state, const std::vector<double>& residuals_bh,
                const std::vector<double>& residuals_bf) {
  const double d0_bh = mae(residuals_bh);
  const double d0_bf = mae(residuals_bf);
  state.delta_min_bh = 0.1;
  state.delta_max_bh = std::max(10.0 * d0_bh, state.delta_min_bh);
  state.delta_min_bf = 0.1;
  state.delta_max_bf = std::max(10.0 * d0_bf, state.delta_min_bf);
  state.delta_bh = std::clamp(d0_bh, state.delta_min_bh, state.delta_max_bh);
  state.delta_bf = std::clamp(d0_bf, state.delta_min_bf, state.delta_max_bf);
}

void update_delta(LossState& state, const std::vector<double>& residuals_bh,
                  const std::vector<double>& residuals_bf) {
  state.delta_bh = std::clamp(mae(residuals_bh), state.delta_min_bh, state.delta_max_bh);
  state.delta_bf = std::clamp(mae(residuals_bf), state.delta_min_bf, state.delta_max_bf);
}

}  // namespace geoformer::loss
