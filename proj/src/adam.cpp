#include "prunefuse/adam.hpp"

#include <cmath>

#include "prunefuse/error.hpp"

namespace prunefuse {

void AdamState::set_lr(double lr) {
  require(lr >= 0.0, ErrorKind::kInvalidArgument, "adam: learning rate must be non-negative");
  cfg_.lr = lr;
}

void AdamState::step(std::span<Parameter* const> params) {
  require(cfg_.lr >= 0.0, ErrorKind::kInvalidArgument, "adam: learning rate must be non-negative");
  if (m_.empty()) {
    for (const Parameter* p : params) {
      m_.emplace_back(p->value.shape);
      v_.emplace_back(p->value.shape);
    }
  }
  require(m_.size() == params.size(), ErrorKind::kState, "adam: parameter list changed between steps");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter& p = *params[i];
    require(p.grad.shape == m_[i].shape && p.value.shape == m_[i].shape, ErrorKind::kShape,
            "adam: parameter '" + p.name + "' does not match its moment buffers");
    require(p.grad.all_finite(), ErrorKind::kNonFinite, "adam: gradient of '" + p.name + "' is not finite");
  }

  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      p.value[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

}  // namespace prunefuse
