#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "prunefuse/tensor.hpp"

namespace prunefuse {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment buffers for a fixed list of parameters. The list order is the
/// binding: step() must always receive the same parameters in the same order.
class AdamState {
 public:
  AdamState() = default;
  explicit AdamState(AdamConfig cfg) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr);
  std::int64_t steps() const { return t_; }

  // Applies one bias-corrected Adam update using each parameter's grad.
  // Throws before touching anything if a gradient is non-finite.
  void step(std::span<Parameter* const> params);

 private:
  AdamConfig cfg_;
  std::int64_t t_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

}  // namespace prunefuse
