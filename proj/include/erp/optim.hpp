#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "erp/tensor.hpp"

namespace erp {

// Adamax: Adam with the second moment replaced by an exponentially
// weighted infinity norm. Bias correction applies to the first moment only.
struct AdamaxState {
  std::uint64_t step_count = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> inf_norm;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// One update over every parameter. Gradients are read from params[i].grad()
// (absent gradients count as zero). Buffers are allocated on first use.
void adamax_step(std::span<Tensor> params, AdamaxState& state, double lr);

// Raw-buffer form: grads[i] pairs with params[i].
void adamax_step(std::span<const std::span<double>> params,
                 std::span<const std::span<const double>> grads, AdamaxState& state, double lr);

// Rescales all gradients jointly when their global L2 norm exceeds max_norm.
// Returns the factor applied (1.0 when untouched).
double clip_grad_norm(std::span<Tensor> params, double max_norm);

double global_grad_norm(std::span<const Tensor> params);

void zero_grads(std::span<Tensor> params);

struct ScheduleConfig {
  double base_lr = 5e-5;
  double warmup_fraction = 0.1;
  std::uint64_t total_steps = 1;

  // ceil(warmup_fraction * total_steps); validated to lie in [1, total_steps).
  std::uint64_t warmup_steps() const;
};

// Linear warm-up from 0 to base_lr, then linear decay to 0 at total_steps.
double lr_at(std::uint64_t step, const ScheduleConfig& cfg);

}  // namespace erp
