#include "prunefuse/graph.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "prunefuse/error.hpp"
#include "prunefuse/kernels.hpp"

namespace prunefuse {

const char* to_string(OpKind kind) {
  switch (kind) {
    case OpKind::kConstant: return "constant";
    case OpKind::kPlaceholder: return "placeholder";
    case OpKind::kParameter: return "parameter";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kAddBias: return "add_bias";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLayerNorm: return "layernorm";
    case OpKind::kGelu: return "gelu";
    case OpKind::kTanh: return "tanh";
    case OpKind::kEmbedding: return "embedding";
    case OpKind::kCrossEntropy: return "cross_entropy";
    case OpKind::kKlDivergence: return "kl_divergence";
    case OpKind::kReshape: return "reshape";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kGatherRows: return "gather_rows";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
  }
  return "?";
}

namespace {

[[noreturn]] void shape_fail(OpKind op, const std::string& detail) {
  fail(ErrorKind::kShape, std::string(to_string(op)) + ": " + detail);
}

std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

// log-softmax of one row into out; returns nothing, out may alias nothing.
void log_softmax_row(const double* z, std::size_t n, double inv_t, double* out) {
  double mx = -INFINITY;
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, z[j] * inv_t);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) s += std::exp(z[j] * inv_t - mx);
  const double lse = mx + std::log(s);
  for (std::size_t j = 0; j < n; ++j) out[j] = z[j] * inv_t - lse;
}

constexpr double kSqrt2OverPi = 0.7978845608028654;
constexpr double kGeluCoeff = 0.044715;

}  // namespace

Var Graph::push(Node node) {
  for (int in : node.inputs) node.needs_grad = node.needs_grad || nodes_[in].needs_grad;
  nodes_.push_back(std::move(node));
  evaluated_ = false;
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Graph::Node& Graph::at(Var v) {
  require(v.id >= 0 && static_cast<std::size_t>(v.id) < nodes_.size(), ErrorKind::kInvalidArgument,
          "unknown graph node " + std::to_string(v.id));
  return nodes_[v.id];
}

const Graph::Node& Graph::at(Var v) const {
  require(v.id >= 0 && static_cast<std::size_t>(v.id) < nodes_.size(), ErrorKind::kInvalidArgument,
          "unknown graph node " + std::to_string(v.id));
  return nodes_[v.id];
}

Tensor* Graph::input_grad(const Node& n, std::size_t i) {
  Node& in = nodes_[n.inputs[i]];
  return in.needs_grad ? &in.grad : nullptr;
}

const Tensor& Graph::value(Var v) const {
  require(evaluated_, ErrorKind::kState, "value() requested before forward()");
  const Node& n = at(v);
  require(!n.released, ErrorKind::kState, "value of node " + std::to_string(v.id) + " was released after its last use");
  return n.value;
}

const Tensor& Graph::grad(Var v) const { return at(v).grad; }
const Shape& Graph::shape(Var v) const { return at(v).shape; }
OpKind Graph::kind(Var v) const { return at(v).kind; }

// ---------------------------------------------------------------------------
// Leaves

Var Graph::constant(Tensor value) {
  Node n{.kind = OpKind::kConstant};
  n.shape = value.shape;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Graph::placeholder(std::string name, Shape shape) {
  Node n{.kind = OpKind::kPlaceholder};
  n.shape = std::move(shape);
  n.name = std::move(name);
  return push(std::move(n));
}

Var Graph::parameter(Parameter& p) {
  Node n{.kind = OpKind::kParameter};
  n.shape = p.value.shape;
  n.name = p.name;
  n.param = &p;
  n.needs_grad = true;
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Linear algebra

Var Graph::matmul(Var a, Var b, bool transpose_b) {
  const Shape& sa = at(a).shape;
  const Shape& sb = at(b).shape;
  if (sa.size() < 2 || sb.size() < 2) shape_fail(OpKind::kMatmul, "operands must be at least 2-D, got " + to_string(sa) + " and " + to_string(sb));
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa.back();
  const std::size_t kb = transpose_b ? sb.back() : sb[sb.size() - 2];
  const std::size_t nb = transpose_b ? sb[sb.size() - 2] : sb.back();
  if (k != kb)
    shape_fail(OpKind::kMatmul, "inner dimensions differ: " + std::to_string(k) + " vs " + std::to_string(kb) + " (" + to_string(sa) + " x " + to_string(sb) + ")");
  std::size_t batch = 1;
  bool shared_b = sb.size() == 2;
  if (!shared_b) {
    if (sb.size() != sa.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin()))
      shape_fail(OpKind::kMatmul, "batch dimensions differ: " + to_string(sa) + " vs " + to_string(sb));
    for (std::size_t i = 0; i + 2 < sa.size(); ++i) batch *= sa[i];
  }
  // With a shared right operand every leading dim of a folds into rows.
  const std::size_t rows = shared_b ? numel(sa) / k : m;
  if (shared_b) batch = 1;

  Node n{.kind = OpKind::kMatmul};
  n.inputs = {a.id, b.id};
  n.shape = sa;
  n.shape.back() = nb;
  n.forward = [=](Graph& g, Node& self) {
    const auto& K = kernels::active();
    const Tensor& A = g.input_value(self, 0);
    const Tensor& B = g.input_value(self, 1);
    self.value = Tensor(self.shape);
    for (std::size_t t = 0; t < batch; ++t) {
      const double* pa = A.data.data() + t * rows * k;
      const double* pb = B.data.data() + (shared_b ? 0 : t * k * nb);
      double* pc = self.value.data.data() + t * rows * nb;
      if (transpose_b) K.gemm_nt(rows, nb, k, pa, pb, pc);
      else K.gemm_nn(rows, nb, k, pa, pb, pc);
    }
  };
  n.backward = [=](Graph& g, Node& self) {
    const auto& K = kernels::active();
    const Tensor& A = g.input_value(self, 0);
    const Tensor& B = g.input_value(self, 1);
    Tensor* dA = g.input_grad(self, 0);
    Tensor* dB = g.input_grad(self, 1);
    for (std::size_t t = 0; t < batch; ++t) {
      const double* pa = A.data.data() + t * rows * k;
      const std::size_t boff = shared_b ? 0 : t * k * nb;
      const double* pb = B.data.data() + boff;
      const double* pdc = self.grad.data.data() + t * rows * nb;
      if (dA) {
        double* pda = dA->data.data() + t * rows * k;
        if (transpose_b) K.gemm_nn(rows, k, nb, pdc, pb, pda);
        else K.gemm_nt(rows, k, nb, pdc, pb, pda);
      }
      if (dB) {
        double* pdb = dB->data.data() + boff;
        if (transpose_b) K.gemm_tn(nb, k, rows, pdc, pa, pdb);
        else K.gemm_tn(k, nb, rows, pa, pdc, pdb);
      }
    }
  };
  return push(std::move(n));
}

Var Graph::add(Var a, Var b) {
  if (at(a).shape != at(b).shape)
    shape_fail(OpKind::kAdd, "operands differ: " + to_string(at(a).shape) + " vs " + to_string(at(b).shape));
  Node n{.kind = OpKind::kAdd};
  n.inputs = {a.id, b.id};
  n.shape = at(a).shape;
  n.forward = [](Graph& g, Node& self) {
    self.value = g.input_value(self, 0);
    const Tensor& B = g.input_value(self, 1);
    for (std::size_t i = 0; i < B.size(); ++i) self.value[i] += B[i];
  };
  n.backward = [](Graph& g, Node& self) {
    for (std::size_t in = 0; in < 2; ++in)
      if (Tensor* d = g.input_grad(self, in))
        for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += self.grad[i];
  };
  return push(std::move(n));
}

Var Graph::add_bias(Var x, Var bias) {
  const Shape& sx = at(x).shape;
  const Shape& sb = at(bias).shape;
  if (sb.size() != 1 || sb[0] != last_dim(sx))
    shape_fail(OpKind::kAddBias, "bias " + to_string(sb) + " does not match last dim of " + to_string(sx));
  const std::size_t width = sb[0];
  Node n{.kind = OpKind::kAddBias};
  n.inputs = {x.id, bias.id};
  n.shape = sx;
  n.forward = [width](Graph& g, Node& self) {
    self.value = g.input_value(self, 0);
    const Tensor& b = g.input_value(self, 1);
    const std::size_t rows = self.value.size() / width;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < width; ++j) self.value[r * width + j] += b[j];
  };
  n.backward = [width](Graph& g, Node& self) {
    if (Tensor* dx = g.input_grad(self, 0))
      for (std::size_t i = 0; i < dx->size(); ++i) (*dx)[i] += self.grad[i];
    if (Tensor* db = g.input_grad(self, 1)) {
      const std::size_t rows = self.grad.size() / width;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < width; ++j) (*db)[j] += self.grad[r * width + j];
    }
  };
  return push(std::move(n));
}

Var Graph::mul(Var a, Var b) {
  if (at(a).shape != at(b).shape)
    shape_fail(OpKind::kMul, "operands differ: " + to_string(at(a).shape) + " vs " + to_string(at(b).shape));
  Node n{.kind = OpKind::kMul};
  n.inputs = {a.id, b.id};
  n.shape = at(a).shape;
  n.forward = [](Graph& g, Node& self) {
    self.value = g.input_value(self, 0);
    const Tensor& B = g.input_value(self, 1);
    for (std::size_t i = 0; i < B.size(); ++i) self.value[i] *= B[i];
  };
  n.backward = [](Graph& g, Node& self) {
    const Tensor& A = g.input_value(self, 0);
    const Tensor& B = g.input_value(self, 1);
    if (Tensor* da = g.input_grad(self, 0))
      for (std::size_t i = 0; i < da->size(); ++i) (*da)[i] += self.grad[i] * B[i];
    if (Tensor* db = g.input_grad(self, 1))
      for (std::size_t i = 0; i < db->size(); ++i) (*db)[i] += self.grad[i] * A[i];
  };
  return push(std::move(n));
}

Var Graph::scale(Var x, double s) {
  Node n{.kind = OpKind::kScale};
  n.inputs = {x.id};
  n.shape = at(x).shape;
  n.forward = [s](Graph& g, Node& self) {
    self.value = g.input_value(self, 0);
    for (double& v : self.value.data) v *= s;
  };
  n.backward = [s](Graph& g, Node& self) {
    if (Tensor* dx = g.input_grad(self, 0))
      for (std::size_t i = 0; i < dx->size(); ++i) (*dx)[i] += s * self.grad[i];
  };
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Normalizations and nonlinearities

namespace {

// Backward of a row softmax: dx = y * (dy - <dy, y>).
void softmax_row_backward(const double* y, const double* dy, double* dx, std::size_t n) {
  double dot = 0.0;
  for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
  for (std::size_t j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
}

}  // namespace

Var Graph::softmax(Var x) {
  const Shape& sx = at(x).shape;
  if (sx.empty()) shape_fail(OpKind::kSoftmax, "input must have at least one axis");
  const std::size_t width = sx.back();
  Node n{.kind = OpKind::kSoftmax};
  n.inputs = {x.id};
  n.shape = sx;
  n.forward = [width](Graph& g, Node& self) {
    const Tensor& X = g.input_value(self, 0);
    self.value = Tensor::uninitialized(self.shape);
    const std::size_t rows = X.size() / width;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = X.data.data() + r * width;
      double* yr = self.value.data.data() + r * width;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < width; ++j) mx = std::max(mx, xr[j]);
      double s = 0.0;
      for (std::size_t j = 0; j < width; ++j) s += (yr[j] = std::exp(xr[j] - mx));
      for (std::size_t j = 0; j < width; ++j) yr[j] /= s;
    }
  };
  n.backward = [width](Graph& g, Node& self) {
    if (Tensor* dx = g.input_grad(self, 0)) {
      const std::size_t rows = self.value.size() / width;
      for (std::size_t r = 0; r < rows; ++r)
        softmax_row_backward(self.value.data.data() + r * width, self.grad.data.data() + r * width,
                             dx->data.data() + r * width, width);
    }
  };
  return push(std::move(n));
}

Var Graph::masked_softmax(Var x, Var key_mask) {
  const Shape& sx = at(x).shape;
  const Shape& sm = at(key_mask).shape;
  if (sx.size() != 4) shape_fail(OpKind::kSoftmax, "masked input must be [B, H, Q, K], got " + to_string(sx));
  if (sm.size() != 2 || sm[0] != sx[0] || sm[1] != sx[3])
    shape_fail(OpKind::kSoftmax, "key mask " + to_string(sm) + " does not match scores " + to_string(sx));
  const std::size_t B = sx[0], H = sx[1], Q = sx[2], K = sx[3];
  Node n{.kind = OpKind::kSoftmax};
  n.inputs = {x.id, key_mask.id};
  n.shape = sx;
  n.forward = [=](Graph& g, Node& self) {
    const Tensor& X = g.input_value(self, 0);
    const Tensor& M = g.input_value(self, 1);
    self.value = Tensor::uninitialized(self.shape);
    for (std::size_t b = 0; b < B; ++b) {
      const double* mb = M.data.data() + b * K;
      for (std::size_t r = 0; r < H * Q; ++r) {
        const std::size_t off = (b * H * Q + r) * K;
        const double* xr = X.data.data() + off;
        double* yr = self.value.data.data() + off;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < K; ++j)
          if (mb[j] != 0.0) mx = std::max(mx, xr[j]);
        if (mx == -INFINITY) {  // no valid key: all-zero row
          std::fill_n(yr, K, 0.0);
          continue;
        }
        double s = 0.0;
        for (std::size_t j = 0; j < K; ++j) {
          yr[j] = mb[j] != 0.0 ? std::exp(xr[j] - mx) : 0.0;
          s += yr[j];
        }
        const double inv = 1.0 / s;
        for (std::size_t j = 0; j < K; ++j) yr[j] *= inv;
      }
    }
  };
  n.backward = [=](Graph& g, Node& self) {
    if (Tensor* dx = g.input_grad(self, 0)) {
      const std::size_t rows = B * H * Q;
      for (std::size_t r = 0; r < rows; ++r)
        softmax_row_backward(self.value.data.data() + r * K, self.grad.data.data() + r * K,
                             dx->data.data() + r * K, K);
    }
  };
  return push(std::move(n));
}

Var Graph::layernorm(Var x, Var gamma, Var beta, double eps) {
  const Shape& sx = at(x).shape;
  const std::size_t width = last_dim(sx);
  if (at(gamma).shape != Shape{width} || at(beta).shape != Shape{width})
    shape_fail(OpKind::kLayerNorm, "affine params " + to_string(at(gamma).shape) + "/" +
                                       to_string(at(beta).shape) + " do not match last dim of " + to_string(sx));
  const std::size_t rows = numel(sx) / width;
  // Per-row normalized values and inverse std, kept for the backward pass.
  auto xhat = std::make_shared<std::vector<double>>();
  auto inv_std = std::make_shared<std::vector<double>>();
  Node n{.kind = OpKind::kLayerNorm};
  n.inputs = {x.id, gamma.id, beta.id};
  n.shape = sx;
  n.forward = [=](Graph& g, Node& self) {
    const Tensor& X = g.input_value(self, 0);
    const Tensor& G = g.input_value(self, 1);
    const Tensor& Bt = g.input_value(self, 2);
    self.value = Tensor::uninitialized(self.shape);
    xhat->assign(X.size(), 0.0);
    inv_std->assign(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = X.data.data() + r * width;
      double mu = 0.0;
      for (std::size_t j = 0; j < width; ++j) mu += xr[j];
      mu /= static_cast<double>(width);
      double var = 0.0;
      for (std::size_t j = 0; j < width; ++j) var += (xr[j] - mu) * (xr[j] - mu);
      var /= static_cast<double>(width);
      const double is = 1.0 / std::sqrt(var + eps);
      (*inv_std)[r] = is;
      for (std::size_t j = 0; j < width; ++j) {
        const double h = (xr[j] - mu) * is;
        (*xhat)[r * width + j] = h;
        self.value[r * width + j] = h * G[j] + Bt[j];
      }
    }
  };
  n.backward = [=](Graph& g, Node& self) {
    const Tensor& G = g.input_value(self, 1);
    Tensor* dx = g.input_grad(self, 0);
    Tensor* dg = g.input_grad(self, 1);
    Tensor* db = g.input_grad(self, 2);
    const double inv_w = 1.0 / static_cast<double>(width);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* dy = self.grad.data.data() + r * width;
      const double* h = xhat->data() + r * width;
      if (dg)
        for (std::size_t j = 0; j < width; ++j) (*dg)[j] += dy[j] * h[j];
      if (db)
        for (std::size_t j = 0; j < width; ++j) (*db)[j] += dy[j];
      if (dx) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < width; ++j) {
          const double dh = dy[j] * G[j];
          m1 += dh;
          m2 += dh * h[j];
        }
        m1 *= inv_w;
        m2 *= inv_w;
        double* dxr = dx->data.data() + r * width;
        for (std::size_t j = 0; j < width; ++j)
          dxr[j] += (*inv_std)[r] * (dy[j] * G[j] - m1 - h[j] * m2);
      }
    }
  };
  return push(std::move(n));
}

Var Graph::gelu(Var x) {
  Node n{.kind = OpKind::kGelu};
  n.inputs = {x.id};
  n.shape = at(x).shape;
  n.forward = [](Graph& g, Node& self) {
    self.value = g.input_value(self, 0);
    for (double& v : self.value.data)
      v = 0.5 * v * (1.0 + std::tanh(kSqrt2OverPi * (v + kGeluCoeff * v * v * v)));
  };
  n.backward = [](Graph& g, Node& self) {
    Tensor* dx = g.input_grad(self, 0);
    if (!dx) return;
    const Tensor& X = g.input_value(self, 0);
    for (std::size_t i = 0; i < X.size(); ++i) {
      const double v = X[i];
      const double t = std::tanh(kSqrt2OverPi * (v + kGeluCoeff * v * v * v));
      const double dt = (1.0 - t * t) * kSqrt2OverPi * (1.0 + 3.0 * kGeluCoeff * v * v);
      (*dx)[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
    }
  };
  return push(std::move(n));
}

Var Graph::tanh(Var x) {
  Node n{.kind = OpKind::kTanh};
  n.inputs = {x.id};
  n.shape = at(x).shape;
  n.forward = [](Graph& g, Node& self) {
    self.value = g.input_value(self, 0);
    for (double& v : self.value.data) v = std::tanh(v);
  };
  n.backward = [](Graph& g, Node& self) {
    if (Tensor* dx = g.input_grad(self, 0))
      for (std::size_t i = 0; i < dx->size(); ++i)
        (*dx)[i] += self.grad[i] * (1.0 - self.value[i] * self.value[i]);
  };
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Lookups and losses

Var Graph::embedding(Var table, Var ids) {
  const Shape& st = at(table).shape;
  const Shape& si = at(ids).shape;
  if (st.size() != 2) shape_fail(OpKind::kEmbedding, "table must be [V, d], got " + to_string(st));
  if (si.size() != 1) shape_fail(OpKind::kEmbedding, "ids must be 1-D, got " + to_string(si));
  const std::size_t vocab = st[0], width = st[1], count = si[0];
  Node n{.kind = OpKind::kEmbedding};
  n.inputs = {table.id, ids.id};
  n.shape = {count, width};
  n.forward = [=](Graph& g, Node& self) {
    const Tensor& T = g.input_value(self, 0);
    const Tensor& I = g.input_value(self, 1);
    self.value = Tensor::uninitialized(self.shape);
    for (std::size_t r = 0; r < count; ++r) {
      const double id = I[r];
      if (!(id >= 0.0 && id < static_cast<double>(vocab)) || id != std::floor(id))
        fail(ErrorKind::kInvalidArgument, "embedding: token id " + std::to_string(id) +
                                              " out of range for vocabulary of " + std::to_string(vocab));
      std::copy_n(T.data.data() + static_cast<std::size_t>(id) * width, width,
                  self.value.data.data() + r * width);
    }
  };
  n.backward = [=](Graph& g, Node& self) {
    Tensor* dt = g.input_grad(self, 0);
    if (!dt) return;
    const Tensor& I = g.input_value(self, 1);
    for (std::size_t r = 0; r < count; ++r) {
      double* row = dt->data.data() + static_cast<std::size_t>(I[r]) * width;
      for (std::size_t j = 0; j < width; ++j) row[j] += self.grad[r * width + j];
    }
  };
  return push(std::move(n));
}

Var Graph::cross_entropy(Var logits, Var labels) {
  const Shape& sl = at(logits).shape;
  const Shape& sy = at(labels).shape;
  if (sl.size() != 2) shape_fail(OpKind::kCrossEntropy, "logits must be [B, C], got " + to_string(sl));
  if (sy != Shape{sl[0]}) shape_fail(OpKind::kCrossEntropy, "labels " + to_string(sy) + " do not match logits " + to_string(sl));
  const std::size_t B = sl[0], C = sl[1];
  if (B == 0) shape_fail(OpKind::kCrossEntropy, "empty batch");
  auto logp = std::make_shared<std::vector<double>>();
  Node n{.kind = OpKind::kCrossEntropy};
  n.inputs = {logits.id, labels.id};
  n.shape = {1};
  n.forward = [=](Graph& g, Node& self) {
    const Tensor& Z = g.input_value(self, 0);
    const Tensor& Y = g.input_value(self, 1);
    logp->assign(B * C, 0.0);
    double total = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const double y = Y[b];
      if (!(y >= 0.0 && y < static_cast<double>(C)) || y != std::floor(y))
        fail(ErrorKind::kInvalidArgument, "cross_entropy: label " + std::to_string(y) + " out of range for " + std::to_string(C) + " classes");
      log_softmax_row(Z.data.data() + b * C, C, 1.0, logp->data() + b * C);
      total -= (*logp)[b * C + static_cast<std::size_t>(y)];
    }
    self.value = Tensor::scalar(total / static_cast<double>(B));
  };
  n.backward = [=](Graph& g, Node& self) {
    Tensor* dz = g.input_grad(self, 0);
    if (!dz) return;
    const Tensor& Y = g.input_value(self, 1);
    const double s = self.grad[0] / static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const double onehot = (static_cast<std::size_t>(Y[b]) == c) ? 1.0 : 0.0;
        (*dz)[b * C + c] += s * (std::exp((*logp)[b * C + c]) - onehot);
      }
  };
  return push(std::move(n));
}

Var Graph::kl_divergence(Var teacher_logits, Var student_logits, double temperature) {
  const Shape& st = at(teacher_logits).shape;
  const Shape& ss = at(student_logits).shape;
  if (st != ss || st.size() != 2)
    shape_fail(OpKind::kKlDivergence, "teacher " + to_string(st) + " and student " + to_string(ss) + " must both be [B, C]");
  require(temperature > 0.0, ErrorKind::kInvalidArgument, "kl_divergence: temperature must be positive");
  const std::size_t B = st[0], C = st[1];
  if (B == 0) shape_fail(OpKind::kKlDivergence, "empty batch");
  const double inv_t = 1.0 / temperature;
  auto logp = std::make_shared<std::vector<double>>();
  auto logq = std::make_shared<std::vector<double>>();
  Node n{.kind = OpKind::kKlDivergence};
  n.inputs = {teacher_logits.id, student_logits.id};
  n.shape = {1};
  n.forward = [=](Graph& g, Node& self) {
    const Tensor& Zt = g.input_value(self, 0);
    const Tensor& Zs = g.input_value(self, 1);
    logp->assign(B * C, 0.0);
    logq->assign(B * C, 0.0);
    double total = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      log_softmax_row(Zt.data.data() + b * C, C, inv_t, logp->data() + b * C);
      log_softmax_row(Zs.data.data() + b * C, C, inv_t, logq->data() + b * C);
      for (std::size_t c = 0; c < C; ++c) {
        const double lp = (*logp)[b * C + c];
        const double p = std::exp(lp);
        if (p > 0.0) total += p * (lp - (*logq)[b * C + c]);
      }
    }
    self.value = Tensor::scalar(total / static_cast<double>(B));
  };
  n.backward = [=](Graph& g, Node& self) {
    Tensor* dzs = g.input_grad(self, 1);
    if (!dzs) return;
    const double s = self.grad[0] * inv_t / static_cast<double>(B);
    for (std::size_t i = 0; i < B * C; ++i)
      (*dzs)[i] += s * (std::exp((*logq)[i]) - std::exp((*logp)[i]));
  };
  Var v = push(std::move(n));
  // The teacher side never receives gradient, even if it is trainable.
  nodes_[v.id].needs_grad = at(student_logits).needs_grad;
  return v;
}

// ---------------------------------------------------------------------------
// Shape manipulation and reductions

Var Graph::reshape(Var x, Shape shape) {
  if (numel(shape) != numel(at(x).shape))
    shape_fail(OpKind::kReshape, "cannot reshape " + to_string(at(x).shape) + " to " + to_string(shape));
  Node n{.kind = OpKind::kReshape};
  n.inputs = {x.id};
  n.shape = std::move(shape);
  n.forward = [](Graph& g, Node& self) {
    self.value.shape = self.shape;
    self.value.data = g.input_value(self, 0).data;
  };
  n.backward = [](Graph& g, Node& self) {
    if (Tensor* dx = g.input_grad(self, 0))
      for (std::size_t i = 0; i < dx->size(); ++i) (*dx)[i] += self.grad[i];
  };
  return push(std::move(n));
}

Var Graph::transpose(Var x, std::vector<std::size_t> perm) {
  const Shape& sx = at(x).shape;
  const std::size_t r = sx.size();
  std::vector<std::size_t> check = perm;
  std::sort(check.begin(), check.end());
  bool ok = perm.size() == r;
  for (std::size_t i = 0; ok && i < r; ++i) ok = check[i] == i;
  if (!ok) shape_fail(OpKind::kTranspose, "permutation does not match rank of " + to_string(sx));
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) out[i] = sx[perm[i]];
  // src_stride_for_out[i]: stride in the source of the i-th output axis.
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * sx[i];
  std::vector<std::size_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) stride[i] = in_stride[perm[i]];

  // Maps each output flat index to its source flat index.
  auto index_map = std::make_shared<std::vector<std::size_t>>(numel(out));
  {
    std::vector<std::size_t> idx(r, 0);
    std::size_t src = 0;
    for (std::size_t o = 0; o < index_map->size(); ++o) {
      (*index_map)[o] = src;
      for (std::size_t ax = r; ax-- > 0;) {
        ++idx[ax];
        src += stride[ax];
        if (idx[ax] < out[ax]) break;
        src -= stride[ax] * idx[ax];
        idx[ax] = 0;
      }
    }
  }
  Node n{.kind = OpKind::kTranspose};
  n.inputs = {x.id};
  n.shape = out;
  n.forward = [index_map](Graph& g, Node& self) {
    const Tensor& X = g.input_value(self, 0);
    self.value = Tensor::uninitialized(self.shape);
    for (std::size_t o = 0; o < index_map->size(); ++o) self.value[o] = X[(*index_map)[o]];
  };
  n.backward = [index_map](Graph& g, Node& self) {
    if (Tensor* dx = g.input_grad(self, 0))
      for (std::size_t o = 0; o < index_map->size(); ++o) (*dx)[(*index_map)[o]] += self.grad[o];
  };
  return push(std::move(n));
}

Var Graph::gather_rows(Var x, std::vector<std::size_t> rows) {
  const Shape& sx = at(x).shape;
  if (sx.size() != 2) shape_fail(OpKind::kGatherRows, "input must be [N, d], got " + to_string(sx));
  for (std::size_t r : rows)
    if (r >= sx[0]) shape_fail(OpKind::kGatherRows, "row " + std::to_string(r) + " out of range for " + to_string(sx));
  const std::size_t width = sx[1];
  Node n{.kind = OpKind::kGatherRows};
  n.inputs = {x.id};
  n.shape = {rows.size(), width};
  n.forward = [rows, width](Graph& g, Node& self) {
    const Tensor& X = g.input_value(self, 0);
    self.value = Tensor::uninitialized(self.shape);
    for (std::size_t i = 0; i < rows.size(); ++i)
      std::copy_n(X.data.data() + rows[i] * width, width, self.value.data.data() + i * width);
  };
  n.backward = [rows, width](Graph& g, Node& self) {
    if (Tensor* dx = g.input_grad(self, 0))
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < width; ++j) (*dx)[rows[i] * width + j] += self.grad[i * width + j];
  };
  return push(std::move(n));
}

Var Graph::sum(Var x) {
  Node n{.kind = OpKind::kSum};
  n.inputs = {x.id};
  n.shape = {1};
  n.forward = [](Graph& g, Node& self) {
    const Tensor& X = g.input_value(self, 0);
    self.value = Tensor::scalar(kernels::active().sum(X.size(), X.data.data()));
  };
  n.backward = [](Graph& g, Node& self) {
    if (Tensor* dx = g.input_grad(self, 0))
      for (double& v : dx->data) v += self.grad[0];
  };
  return push(std::move(n));
}

Var Graph::mean(Var x) {
  const double count = static_cast<double>(numel(at(x).shape));
  if (count == 0) shape_fail(OpKind::kMean, "mean of an empty tensor");
  Node n{.kind = OpKind::kMean};
  n.inputs = {x.id};
  n.shape = {1};
  n.forward = [count](Graph& g, Node& self) {
    const Tensor& X = g.input_value(self, 0);
    self.value = Tensor::scalar(kernels::active().sum(X.size(), X.data.data()) / count);
  };
  n.backward = [count](Graph& g, Node& self) {
    if (Tensor* dx = g.input_grad(self, 0))
      for (double& v : dx->data) v += self.grad[0] / count;
  };
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Evaluation

void Graph::retain(Var v) { at(v).retained = true; }

void Graph::forward(const std::map<std::string, Tensor>& inputs) {
  std::vector<std::size_t> last_use;
  if (release_) {
    last_use.assign(nodes_.size(), 0);
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      for (int in : nodes_[i].inputs) last_use[in] = i;
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    n.released = false;
    switch (n.kind) {
      case OpKind::kConstant:
        break;
      case OpKind::kPlaceholder: {
        auto it = inputs.find(n.name);
        require(it != inputs.end(), ErrorKind::kInvalidArgument, "placeholder '" + n.name + "' is not bound");
        require(it->second.shape == n.shape, ErrorKind::kShape,
                "placeholder '" + n.name + "' declared " + to_string(n.shape) + " but bound to " + to_string(it->second.shape));
        n.value = it->second;
        break;
      }
      case OpKind::kParameter:
        n.value = n.param->value;
        break;
      default:
        n.forward(*this, n);
        break;
    }
    if (!n.value.all_finite())
      fail(ErrorKind::kNonFinite, "node " + std::to_string(i) + " (" + to_string(n.kind) +
                                      (n.name.empty() ? "" : " '" + n.name + "'") + ") holds a non-finite value");
    if (release_) {
      for (int in : n.inputs) {
        Node& src = nodes_[in];
        if (last_use[in] == i && !src.retained && src.kind != OpKind::kConstant) {
          src.value = Tensor();
          src.released = true;
        }
      }
    }
  }
  evaluated_ = true;
}

void Graph::backward(Var loss) {
  require(evaluated_, ErrorKind::kState, "backward() called before forward()");
  require(!release_, ErrorKind::kState, "backward() on a graph evaluated with released intermediates");
  Node& root = at(loss);
  require(root.value.size() == 1, ErrorKind::kShape, "backward() needs a scalar loss, got " + to_string(root.shape));
  for (Node& n : nodes_)
    if (n.needs_grad) n.grad = Tensor(n.shape);
  if (!root.needs_grad) return;
  root.grad[0] = 1.0;
  for (std::size_t i = static_cast<std::size_t>(loss.id) + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad) continue;
    if (n.kind == OpKind::kParameter) {
      Tensor& acc = n.param->grad;
      if (acc.shape != n.shape) acc = Tensor(n.shape);
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += n.grad[j];
    } else if (n.backward) {
      n.backward(*this, n);
    }
  }
}

}  // namespace prunefuse
