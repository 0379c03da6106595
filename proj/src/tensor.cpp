#include "prunefuse/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "prunefuse/error.hpp"
#include "prunefuse/kernels.hpp"

namespace prunefuse {

namespace {
#if defined(__GLIBC__)
// Graphs are rebuilt per batch, so attention-sized buffers (about 1 MB) are
// freed and reallocated constantly. Above the default mmap threshold every
// one of them costs fresh page faults; keep them on the heap instead.
const bool kMallocTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  return true;
}();
#endif
}  // namespace

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kShape: return "shape error";
    case ErrorKind::kNonFinite: return "non-finite value";
    case ErrorKind::kState: return "invalid state";
    case ErrorKind::kInvalidArgument: return "invalid argument";
    case ErrorKind::kIo: return "i/o error";
    case ErrorKind::kConfig: return "config error";
  }
  return "error";
}

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(numel(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(values.begin(), values.end()) {
  require(numel(shape) == data.size(), ErrorKind::kShape,
          "tensor of shape " + to_string(shape) + " given " + std::to_string(data.size()) + " values");
}

Tensor Tensor::uninitialized(Shape s) {
  Tensor t;
  t.data.resize(numel(s));
  t.shape = std::move(s);
  return t;
}

void Tensor::fill(double v) { std::fill(data.begin(), data.end(), v); }

bool Tensor::all_finite() const {
  // x * 0 is NaN exactly for inf/NaN inputs; the vectorized sum tells us
  // quickly whether any element is non-finite.
  if (std::isfinite(kernels::active().sum_zeroed(data.size(), data.data()))) return true;
  return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace prunefuse
