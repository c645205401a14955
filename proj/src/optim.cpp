#include "erp/optim.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "erp/errors.hpp"

namespace erp {

void adamax_step(std::span<const std::span<double>> params,
                 std::span<const std::span<const double>> grads, AdamaxState& state, double lr) {
  if (params.size() != grads.size()) {
    throw DimensionError("adamax_step: " + std::to_string(params.size()) + " parameters but " +
                         std::to_string(grads.size()) + " gradients");
  }
  if (lr < 0.0) throw ContractError("adamax_step: negative learning rate");
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.size(), 0.0);
      state.inf_norm.emplace_back(p.size(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw DimensionError("adamax_step: optimizer state tracks " +
                         std::to_string(state.first_moment.size()) + " parameters, got " +
                         std::to_string(params.size()));
  }

  state.step_count += 1;
  const double correction = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
  const double step_size = lr / correction;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i];
    auto g = grads[i];
    auto& m = state.first_moment[i];
    auto& u = state.inf_norm[i];
    if (theta.size() != m.size() || (!g.empty() && g.size() != theta.size())) {
      throw DimensionError("adamax_step: parameter " + std::to_string(i) + " is not congruent with its state");
    }
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j];
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
      u[j] = std::max(state.beta2 * u[j], std::abs(gj));
      theta[j] -= step_size * m[j] / (u[j] + state.epsilon);
    }
  }
}

void adamax_step(std::span<Tensor> params, AdamaxState& state, double lr) {
  std::vector<std::span<double>> values;
  std::vector<std::span<const double>> grads;
  values.reserve(params.size());
  grads.reserve(params.size());
  for (auto& p : params) {
    values.push_back(p.mutable_data());
    grads.push_back(p.has_grad() ? p.grad() : std::span<const double>{});
  }
  adamax_step(values, grads, state, lr);
}

double global_grad_norm(std::span<const Tensor> params) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (!(norm > max_norm)) return 1.0;
  const double factor = max_norm / norm;
  for (auto& p : params) {
    if (!p.has_grad()) continue;
    for (double& g : p.mutable_grad()) g *= factor;
  }
  return factor;
}

void zero_grads(std::span<Tensor> params) {
  for (auto& p : params) p.zero_grad();
}

std::uint64_t ScheduleConfig::warmup_steps() const {
  if (total_steps == 0) throw ContractError("schedule: total_steps must be positive");
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) {
    throw ContractError("schedule: warmup_fraction must lie in (0,1)");
  }
  const double raw = warmup_fraction * static_cast<double>(total_steps);
  // Guard against 0.1 * 1000 landing a hair above an integer.
  const auto w = static_cast<std::uint64_t>(std::ceil(raw - 1e-9));
  if (raw < 1.0 - 1e-9 || w >= total_steps) {
    throw ContractError("schedule: warm-up of " + std::to_string(raw) + " steps is invalid for " +
                        std::to_string(total_steps) + " total steps");
  }
  return w;
}

double lr_at(std::uint64_t step, const ScheduleConfig& cfg) {
  const std::uint64_t warm = cfg.warmup_steps();
  if (step > cfg.total_steps) {
    throw ContractError("lr_at: step " + std::to_string(step) + " beyond total " +
                        std::to_string(cfg.total_steps));
  }
  if (step < warm) return cfg.base_lr * (static_cast<double>(step) / static_cast<double>(warm));
  return cfg.base_lr *
         (static_cast<double>(cfg.total_steps - step) / static_cast<double>(cfg.total_steps - warm));
}

}  // namespace erp
