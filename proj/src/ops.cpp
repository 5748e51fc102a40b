#include "forge/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "forge/error.hpp"

namespace forge {

namespace {

bool recording(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void check_finite(const Tensor& t, const char* op) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op + " (output shape " +
                         shape_string(t.shape()) + ")");
    }
  }
}

template <typename Rule>
void record(Tensor& out, Rule rule) {
  out.set_requires_grad(true);
  Tape::active()->record(std::move(rule));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + " expects rank " + std::to_string(rank) + ", got " +
                         shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                         shape_string(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// C[m x n] += A[m x k] * B[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av != 0.0) axpy(av, b + p * n, crow, n);
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] += dot(arow, b + j * k, k);
  }
}

// C[k x n] += A[m x k]^T * B[m x n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av != 0.0) axpy(av, brow, c + p * n, n);
    }
  }
}

template <typename Forward, typename Derivative>
Tensor unary(const Tensor& x, const char* op, Forward f, Derivative df) {
  Tensor out(x.shape());
  auto xs = x.data();
  auto ys = out.mutable_data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = f(xs[i]);
  check_finite(out, op);
  if (recording({&x})) {
    record(out, [x, out, df]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto xv = x.data();
      auto yv = out.data();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
    });
  }
  return out;
}

}  // namespace

// ---- products ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Tensor out(Shape{m, n});
  gemm_nn(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, n);
  check_finite(out, "matmul");
  if (recording({&a, &b})) {
    record(out, [a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      if (a.requires_grad()) gemm_nt(g, b.data().data(), a.mutable_grad().data(), m, n, k);
      if (b.requires_grad()) gemm_tn(a.data().data(), g, b.mutable_grad().data(), m, k, n);
    });
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: inner extents differ, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()) + "^T");
  }
  Tensor out(Shape{m, n});
  gemm_nt(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, n);
  check_finite(out, "matmul_nt");
  if (recording({&a, &b})) {
    record(out, [a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      if (a.requires_grad()) gemm_nn(g, b.data().data(), a.mutable_grad().data(), m, n, k);
      if (b.requires_grad()) gemm_tn(g, a.data().data(), b.mutable_grad().data(), m, n, k);
    });
  }
  return out;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  require_rank(a, 3, "bmm");
  require_rank(b, 3, "bmm");
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (b.dim(0) != batch || b.dim(1) != k) {
    throw DimensionError("bmm: incompatible shapes " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Tensor out(Shape{batch, m, n});
  for (std::size_t i = 0; i < batch; ++i) {
    gemm_nn(a.data().data() + i * m * k, b.data().data() + i * k * n,
            out.mutable_data().data() + i * m * n, m, k, n);
  }
  check_finite(out, "bmm");
  if (recording({&a, &b})) {
    record(out, [a, b, out, batch, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      for (std::size_t i = 0; i < batch; ++i) {
        if (a.requires_grad()) {
          gemm_nt(g + i * m * n, b.data().data() + i * k * n, a.mutable_grad().data() + i * m * k,
                  m, n, k);
        }
        if (b.requires_grad()) {
          gemm_tn(a.data().data() + i * m * k, g + i * m * n, b.mutable_grad().data() + i * k * n,
                  m, k, n);
        }
      }
    });
  }
  return out;
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 3, "bmm_nt");
  require_rank(b, 3, "bmm_nt");
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  if (b.dim(0) != batch || b.dim(2) != k) {
    throw DimensionError("bmm_nt: incompatible shapes " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()) + "^T");
  }
  Tensor out(Shape{batch, m, n});
  for (std::size_t i = 0; i < batch; ++i) {
    gemm_nt(a.data().data() + i * m * k, b.data().data() + i * n * k,
            out.mutable_data().data() + i * m * n, m, k, n);
  }
  check_finite(out, "bmm_nt");
  if (recording({&a, &b})) {
    record(out, [a, b, out, batch, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      for (std::size_t i = 0; i < batch; ++i) {
        if (a.requires_grad()) {
          gemm_nn(g + i * m * n, b.data().data() + i * n * k, a.mutable_grad().data() + i * m * k,
                  m, n, k);
        }
        if (b.requires_grad()) {
          gemm_tn(g + i * m * n, a.data().data() + i * m * k, b.mutable_grad().data() + i * n * k,
                  m, n, k);
        }
      }
    });
  }
  return out;
}

namespace {

Tensor linear_impl(const Tensor& x, const Tensor& weight, const Tensor* bias) {
  require_rank(weight, 2, "linear");
  if (x.rank() == 0) throw DimensionError("linear: scalar input");
  const std::size_t in = weight.dim(1), out_width = weight.dim(0);
  if (x.shape().back() != in) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " does not match weight " +
                         shape_string(weight.shape()));
  }
  if (bias != nullptr && (bias->rank() != 1 || bias->dim(0) != out_width)) {
    throw DimensionError("linear: bias " + shape_string(bias->shape()) + " does not match weight " +
                         shape_string(weight.shape()));
  }
  const std::size_t rows = x.size() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_width;
  Tensor out(out_shape);
  double* o = out.mutable_data().data();
  if (bias != nullptr) {
    const double* bv = bias->data().data();
    for (std::size_t r = 0; r < rows; ++r) std::copy(bv, bv + out_width, o + r * out_width);
  }
  gemm_nt(x.data().data(), weight.data().data(), o, rows, in, out_width);
  check_finite(out, "linear");
  const bool with_bias = bias != nullptr;
  Tensor b = with_bias ? *bias : Tensor();
  if (recording({&x, &weight}) || (with_bias && recording({bias}))) {
    record(out, [x, weight, b, out, rows, in, out_width, with_bias]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      if (x.requires_grad()) {
        gemm_nn(g, weight.data().data(), x.mutable_grad().data(), rows, out_width, in);
      }
      if (weight.requires_grad()) {
        gemm_tn(g, x.data().data(), weight.mutable_grad().data(), rows, out_width, in);
      }
      if (with_bias && b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < out_width; ++j) gb[j] += g[r * out_width + j];
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor linear(const Tensor& x, const Tensor& weight) { return linear_impl(x, weight, nullptr); }

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return linear_impl(x, weight, &bias);
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out(Shape{n, m});
  auto src = a.data();
  auto dst = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  if (recording({&a})) {
    record(out, [a, out, m, n]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
  }
  return out;
}

// ---- pointwise ---------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  auto x = a.data(), y = b.data();
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  check_finite(out, "add");
  if (recording({&a, &b})) {
    record(out, [a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  auto x = a.data(), y = b.data();
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
  check_finite(out, "sub");
  if (recording({&a, &b})) {
    record(out, [a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  auto x = a.data(), y = b.data();
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  check_finite(out, "mul");
  if (recording({&a, &b})) {
    record(out, [a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto x = a.data(), y = b.data();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, "scale", [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(
      x, "add_scalar", [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank(bias, 1, "add_bias");
  if (x.rank() == 0 || x.shape().back() != bias.dim(0)) {
    throw DimensionError("add_bias: " + shape_string(x.shape()) + " vs bias " +
                         shape_string(bias.shape()));
  }
  const std::size_t n = bias.dim(0);
  const std::size_t rows = n ? x.size() / n : 0;
  Tensor out(x.shape());
  auto xv = x.data(), bv = bias.data();
  auto o = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) o[r * n + j] = xv[r * n + j] + bv[j];
  check_finite(out, "add_bias");
  if (recording({&x, &bias})) {
    record(out, [x, bias, out, rows, n]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (x.requires_grad()) {
        auto gx = x.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
      }
    });
  }
  return out;
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, "tanh", [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor glu(const Tensor& x) {
  if (x.rank() == 0 || x.shape().back() % 2 != 0) {
    throw DimensionError("glu needs an even last extent, got " + shape_string(x.shape()));
  }
  const std::size_t width = x.shape().back();
  const std::size_t half = width / 2;
  const std::size_t rows = width ? x.size() / width : 0;
  Shape out_shape = x.shape();
  out_shape.back() = half;
  Tensor out(out_shape);
  std::vector<double> gates(rows * half);
  auto xv = x.data();
  auto o = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < half; ++j) {
      const double b = xv[r * width + half + j];
      const double s = b >= 0.0 ? 1.0 / (1.0 + std::exp(-b)) : std::exp(b) / (1.0 + std::exp(b));
      gates[r * half + j] = s;
      o[r * half + j] = xv[r * width + j] * s;
    }
  }
  check_finite(out, "glu");
  if (recording({&x})) {
    record(out, [x, out, gates = std::move(gates), rows, half, width]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto xv = x.data();
      auto gx = x.mutable_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < half; ++j) {
          const double s = gates[r * half + j];
          const double gr = g[r * half + j];
          gx[r * width + j] += gr * s;
          gx[r * width + half + j] += gr * xv[r * width + j] * s * (1.0 - s);
        }
      }
    });
  }
  return out;
}

// ---- reductions and layout ---------------------------------------------

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  Tensor out = Tensor::scalar(total);
  check_finite(out, "sum");
  if (recording({&x})) {
    record(out, [x, out]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0];
      for (double& v : x.mutable_grad()) v += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor sum(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_at(x.shape(), axis, "sum");
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(out_shape);
  auto xv = x.data();
  auto o = out.mutable_data();
  for (std::size_t a = 0; a < s.outer; ++a)
    for (std::size_t k = 0; k < s.extent; ++k)
      for (std::size_t i = 0; i < s.inner; ++i)
        o[a * s.inner + i] += xv[(a * s.extent + k) * s.inner + i];
  check_finite(out, "sum");
  if (recording({&x})) {
    record(out, [x, out, s]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t a = 0; a < s.outer; ++a)
        for (std::size_t k = 0; k < s.extent; ++k)
          for (std::size_t i = 0; i < s.inner; ++i)
            gx[(a * s.extent + k) * s.inner + i] += g[a * s.inner + i];
    });
  }
  return out;
}

Tensor mean(const Tensor& x, std::size_t axis) {
  const std::size_t n = x.dim(axis);
  if (n == 0) throw DimensionError("mean over an empty axis");
  return scale(sum(x, axis), 1.0 / static_cast<double>(n));
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) {
      throw DimensionError("concat: " + shape_string(s) + " does not match " +
                           shape_string(first) + " off axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
  }
  Tensor out(out_shape);
  const AxisSplit total = split_at(out_shape, axis, "concat");
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  auto o = out.mutable_data();
  for (const auto& p : parts) {
    const std::size_t ext = p.shape()[axis];
    auto pv = p.data();
    for (std::size_t a = 0; a < total.outer; ++a) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(a * ext * total.inner), ext * total.inner,
                  o.begin() + static_cast<std::ptrdiff_t>((a * total.extent + offset) * total.inner));
    }
    offsets.push_back(offset);
    offset += ext;
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (any && Tape::active()) {
    record(out, [parts, out, offsets, total, axis]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      for (std::size_t n = 0; n < parts.size(); ++n) {
        if (!parts[n].requires_grad()) continue;
        const std::size_t ext = parts[n].shape()[axis];
        auto gp = parts[n].mutable_grad();
        for (std::size_t a = 0; a < total.outer; ++a)
          for (std::size_t i = 0; i < ext * total.inner; ++i)
            gp[a * ext * total.inner + i] += g[(a * total.extent + offsets[n]) * total.inner + i];
      }
    });
  }
  return out;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  const AxisSplit s = split_at(x.shape(), axis, "slice");
  if (start + length > s.extent) {
    throw DimensionError("slice [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") exceeds axis " +
                         std::to_string(axis) + " of " + shape_string(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  Tensor out(out_shape);
  auto xv = x.data();
  auto o = out.mutable_data();
  for (std::size_t a = 0; a < s.outer; ++a) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((a * s.extent + start) * s.inner),
                length * s.inner, o.begin() + static_cast<std::ptrdiff_t>(a * length * s.inner));
  }
  if (recording({&x})) {
    record(out, [x, out, s, start, length]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t a = 0; a < s.outer; ++a)
        for (std::size_t i = 0; i < length * s.inner; ++i)
          gx[(a * s.extent + start) * s.inner + i] += g[a * length * s.inner + i];
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  Tensor out = x.detach_reshaped(std::move(shape));
  if (recording({&x})) {
    record(out, [x, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor expand(const Tensor& x, std::size_t axis, std::size_t n) {
  const AxisSplit s = split_at(x.shape(), axis, "expand");
  if (s.extent != 1) {
    throw DimensionError("expand needs extent 1 on axis " + std::to_string(axis) + ", got " +
                         shape_string(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = n;
  Tensor out(out_shape);
  auto xv = x.data();
  auto o = out.mutable_data();
  for (std::size_t a = 0; a < s.outer; ++a)
    for (std::size_t k = 0; k < n; ++k)
      std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(a * s.inner), s.inner,
                  o.begin() + static_cast<std::ptrdiff_t>((a * n + k) * s.inner));
  if (recording({&x})) {
    record(out, [x, out, s, n]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t a = 0; a < s.outer; ++a)
        for (std::size_t k = 0; k < n; ++k)
          for (std::size_t i = 0; i < s.inner; ++i)
            gx[a * s.inner + i] += g[(a * n + k) * s.inner + i];
    });
  }
  return out;
}

// ---- normalisation, probabilities, losses ------------------------------

namespace {

// Softmax backward on a strided slice: gx = y * (g - <g, y>).
void softmax_backward(std::span<const double> y, std::span<const double> g, std::span<double> gx,
                      const AxisSplit& s) {
  for (std::size_t a = 0; a < s.outer; ++a) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = a * s.extent * s.inner + i;
      double inner_product = 0.0;
      for (std::size_t k = 0; k < s.extent; ++k) {
        inner_product += g[base + k * s.inner] * y[base + k * s.inner];
      }
      for (std::size_t k = 0; k < s.extent; ++k) {
        const std::size_t idx = base + k * s.inner;
        gx[idx] += y[idx] * (g[idx] - inner_product);
      }
    }
  }
}

}  // namespace

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_at(x.shape(), axis, "softmax");
  Tensor out(x.shape());
  auto xv = x.data();
  auto o = out.mutable_data();
  for (std::size_t a = 0; a < s.outer; ++a) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = a * s.extent * s.inner + i;
      double hi = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.extent; ++k) hi = std::max(hi, xv[base + k * s.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.extent; ++k) {
        const double e = std::exp(xv[base + k * s.inner] - hi);
        o[base + k * s.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < s.extent; ++k) o[base + k * s.inner] /= z;
    }
  }
  check_finite(out, "softmax");
  if (recording({&x})) {
    record(out, [x, out, s]() mutable {
      if (!out.has_grad()) return;
      softmax_backward(out.data(), out.grad(), x.mutable_grad(), s);
    });
  }
  return out;
}

Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> mask) {
  if (x.rank() == 0) throw DimensionError("masked_softmax on a scalar");
  if (mask.size() != x.size()) {
    throw DimensionError("masked_softmax: mask has " + std::to_string(mask.size()) +
                         " entries for tensor " + shape_string(x.shape()));
  }
  const AxisSplit s = split_at(x.shape(), x.rank() - 1, "masked_softmax");
  Tensor out(x.shape());
  auto xv = x.data();
  auto o = out.mutable_data();
  for (std::size_t a = 0; a < s.outer; ++a) {
    const std::size_t base = a * s.extent;
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < s.extent; ++k) {
      if (mask[base + k]) hi = std::max(hi, xv[base + k]);
    }
    if (hi == -std::numeric_limits<double>::infinity()) {
      throw DimensionError("masked_softmax: row " + std::to_string(a) +
                           " has every position masked; softmax is undefined");
    }
    double z = 0.0;
    for (std::size_t k = 0; k < s.extent; ++k) {
      const double e = mask[base + k] ? std::exp(xv[base + k] - hi) : 0.0;
      o[base + k] = e;
      z += e;
    }
    for (std::size_t k = 0; k < s.extent; ++k) o[base + k] /= z;
  }
  check_finite(out, "masked_softmax");
  if (recording({&x})) {
    record(out, [x, out, s]() mutable {
      if (!out.has_grad()) return;
      softmax_backward(out.data(), out.grad(), x.mutable_grad(), s);
    });
  }
  return out;
}

Tensor log_softmax(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("log_softmax on a scalar");
  const AxisSplit s = split_at(x.shape(), x.rank() - 1, "log_softmax");
  Tensor out(x.shape());
  auto xv = x.data();
  auto o = out.mutable_data();
  for (std::size_t a = 0; a < s.outer; ++a) {
    const std::size_t base = a * s.extent;
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < s.extent; ++k) hi = std::max(hi, xv[base + k]);
    double z = 0.0;
    for (std::size_t k = 0; k < s.extent; ++k) z += std::exp(xv[base + k] - hi);
    const double log_z = hi + std::log(z);
    for (std::size_t k = 0; k < s.extent; ++k) o[base + k] = xv[base + k] - log_z;
  }
  check_finite(out, "log_softmax");
  if (recording({&x})) {
    record(out, [x, out, s]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto y = out.data();
      auto gx = x.mutable_grad();
      for (std::size_t a = 0; a < s.outer; ++a) {
        const std::size_t base = a * s.extent;
        double total = 0.0;
        for (std::size_t k = 0; k < s.extent; ++k) total += g[base + k];
        for (std::size_t k = 0; k < s.extent; ++k) {
          gx[base + k] += g[base + k] - std::exp(y[base + k]) * total;
        }
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets, TokenId pad_id) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t rows = logits.dim(0), classes = logits.dim(1);
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         shape_string(logits.shape()) + " logits");
  }
  std::vector<double> probs(rows * classes, 0.0);
  std::vector<TokenId> kept(targets.begin(), targets.end());
  std::size_t count = 0;
  double total = 0.0;
  auto xv = logits.data();
  for (std::size_t t = 0; t < rows; ++t) {
    const TokenId y = targets[t];
    if (y == pad_id) continue;
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw VocabularyError("cross_entropy: target id " + std::to_string(y) +
                            " outside vocabulary of size " + std::to_string(classes));
    }
    const double* row = xv.data() + t * classes;
    const double hi = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t k = 0; k < classes; ++k) {
      const double e = std::exp(row[k] - hi);
      probs[t * classes + k] = e;
      z += e;
    }
    for (std::size_t k = 0; k < classes; ++k) probs[t * classes + k] /= z;
    total += -(row[y] - hi - std::log(z));
    ++count;
  }
  if (count == 0) throw DataError("cross_entropy: every target is padding; the loss is undefined");
  Tensor out = Tensor::scalar(total / static_cast<double>(count));
  check_finite(out, "cross_entropy");
  if (recording({&logits})) {
    record(out, [logits, out, probs = std::move(probs), kept = std::move(kept), rows, classes,
                 count, pad_id]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0] / static_cast<double>(count);
      auto gx = logits.mutable_grad();
      for (std::size_t t = 0; t < rows; ++t) {
        if (kept[t] == pad_id) continue;
        for (std::size_t k = 0; k < classes; ++k) gx[t * classes + k] += g * probs[t * classes + k];
        gx[t * classes + static_cast<std::size_t>(kept[t])] -= g;
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  constexpr double kEpsilon = 1e-6;
  require_rank(gain, 1, "layer_norm");
  require_rank(bias, 1, "layer_norm");
  if (x.rank() == 0 || x.shape().back() != gain.dim(0) || bias.dim(0) != gain.dim(0)) {
    throw DimensionError("layer_norm: input " + shape_string(x.shape()) + ", gain " +
                         shape_string(gain.shape()) + ", bias " + shape_string(bias.shape()));
  }
  const std::size_t d = gain.dim(0);
  const std::size_t rows = d ? x.size() / d : 0;
  Tensor out(x.shape());
  std::vector<double> normalized(x.size());
  std::vector<double> inv_std(rows);
  auto xv = x.data(), gv = gain.data(), bv = bias.data();
  auto o = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + kEpsilon);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double n = (row[j] - mu) * is;
      normalized[r * d + j] = n;
      o[r * d + j] = gv[j] * n + bv[j];
    }
  }
  check_finite(out, "layer_norm");
  if (recording({&x, &gain, &bias})) {
    record(out, [x, gain, bias, out, normalized = std::move(normalized),
                 inv_std = std::move(inv_std), rows, d]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gv = gain.data();
      if (gain.requires_grad()) {
        auto gg = gain.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * normalized[r * d + j];
      }
      if (bias.requires_grad()) {
        auto gb = bias.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
      }
      if (x.requires_grad()) {
        auto gx = x.mutable_grad();
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_g = 0.0, mean_gn = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double gn = g[r * d + j] * gv[j];
            mean_g += gn;
            mean_gn += gn * normalized[r * d + j];
          }
          mean_g *= inv_d;
          mean_gn *= inv_d;
          for (std::size_t j = 0; j < d; ++j) {
            const double gn = g[r * d + j] * gv[j];
            gx[r * d + j] += inv_std[r] * (gn - mean_g - normalized[r * d + j] * mean_gn);
          }
        }
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.size());
  for (double& m : mask) m = rng.uniform() >= rate ? keep_scale : 0.0;
  Tensor out(x.shape());
  auto xv = x.data();
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] * mask[i];
  if (recording({&x})) {
    record(out, [x, out, mask = std::move(mask)]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
  }
  return out;
}

// ---- lookups and structured ops ----------------------------------------

Tensor embedding_lookup(const Tensor& table, std::span<const TokenId> ids) {
  require_rank(table, 2, "embedding_lookup");
  const std::size_t rows = table.dim(0), width = table.dim(1);
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= rows) {
      throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(rows));
    }
  }
  Tensor out(Shape{ids.size(), width});
  auto tv = table.data();
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(ids[i]) * width),
                width, o.begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  if (recording({&table})) {
    record(out, [table, out, ids = std::vector<TokenId>(ids.begin(), ids.end()), width]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gt = table.mutable_grad();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        axpy(1.0, g.data() + i * width, gt.data() + static_cast<std::size_t>(ids[i]) * width,
             width);
      }
    });
  }
  return out;
}

Tensor conv1d_causal(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  if (kernel.rank() != 3 || kernel.dim(0) < 1) {
    throw ConfigError("conv1d_causal: kernel must be [w x e x c] with w >= 1, got " +
                      shape_string(kernel.shape()));
  }
  if (x.rank() != 2 && x.rank() != 3) {
    throw DimensionError("conv1d_causal: input must be [T x e] or [B x T x e], got " +
                         shape_string(x.shape()));
  }
  const std::size_t w = kernel.dim(0), e = kernel.dim(1), c = kernel.dim(2);
  const std::size_t batch = x.rank() == 3 ? x.dim(0) : 1;
  const std::size_t steps = x.rank() == 3 ? x.dim(1) : x.dim(0);
  if (x.shape().back() != e || bias.rank() != 1 || bias.dim(0) != c) {
    throw DimensionError("conv1d_causal: input " + shape_string(x.shape()) + ", kernel " +
                         shape_string(kernel.shape()) + ", bias " + shape_string(bias.shape()));
  }
  Shape out_shape = x.shape();
  out_shape.back() = c;
  Tensor out(out_shape);
  const double* xv = x.data().data();
  const double* kv = kernel.data().data();
  const double* bv = bias.data().data();
  double* o = out.mutable_data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < steps; ++t) {
      double* orow = o + (b * steps + t) * c;
      std::copy(bv, bv + c, orow);
      for (std::size_t j = 0; j < w; ++j) {
        // Tap j reads input time t - (w - 1) + j; earlier times are the zero padding.
        if (t + j + 1 < w) continue;
        const std::size_t src = t + j + 1 - w;
        gemm_nn(xv + (b * steps + src) * e, kv + j * e * c, orow, 1, e, c);
      }
    }
  }
  check_finite(out, "conv1d_causal");
  if (recording({&x, &kernel, &bias})) {
    record(out, [x, kernel, bias, out, batch, steps, w, e, c]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      const double* xv = x.data().data();
      const double* kv = kernel.data().data();
      double* gx = x.requires_grad() ? x.mutable_grad().data() : nullptr;
      double* gk = kernel.requires_grad() ? kernel.mutable_grad().data() : nullptr;
      if (bias.requires_grad()) {
        auto gb = bias.mutable_grad();
        for (std::size_t r = 0; r < batch * steps; ++r)
          for (std::size_t k = 0; k < c; ++k) gb[k] += g[r * c + k];
      }
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < steps; ++t) {
          const double* grow = g + (b * steps + t) * c;
          for (std::size_t j = 0; j < w; ++j) {
            if (t + j + 1 < w) continue;
            const std::size_t src = t + j + 1 - w;
            if (gx) gemm_nt(grow, kv + j * e * c, gx + (b * steps + src) * e, 1, c, e);
            if (gk) gemm_tn(xv + (b * steps + src) * e, grow, gk + j * e * c, 1, e, c);
          }
        }
      }
    });
  }
  return out;
}

Tensor weight_norm(const Tensor& direction, const Tensor& gain) {
  require_rank(direction, 2, "weight_norm");
  require_rank(gain, 1, "weight_norm");
  const std::size_t rows = direction.dim(0), cols = direction.dim(1);
  if (gain.dim(0) != rows) {
    throw DimensionError("weight_norm: gain " + shape_string(gain.shape()) + " for direction " +
                         shape_string(direction.shape()));
  }
  std::vector<double> norms(rows);
  Tensor out(direction.shape());
  auto dv = direction.data(), gv = gain.data();
  auto o = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double n = std::sqrt(dot(dv.data() + r * cols, dv.data() + r * cols, cols));
    if (n == 0.0) throw NumericError("weight_norm: row " + std::to_string(r) + " has zero norm");
    norms[r] = n;
    const double factor = gv[r] / n;
    for (std::size_t j = 0; j < cols; ++j) o[r * cols + j] = factor * dv[r * cols + j];
  }
  check_finite(out, "weight_norm");
  if (recording({&direction, &gain})) {
    record(out, [direction, gain, out, norms = std::move(norms), rows, cols]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      const double* dv = direction.data().data();
      auto gv = gain.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double n = norms[r];
        const double proj = dot(g + r * cols, dv + r * cols, cols);
        if (gain.requires_grad()) gain.mutable_grad()[r] += proj / n;
        if (direction.requires_grad()) {
          double* gd = direction.mutable_grad().data() + r * cols;
          const double factor = gv[r] / n;
          const double along = proj / (n * n);
          for (std::size_t j = 0; j < cols; ++j) {
            gd[j] += factor * (g[r * cols + j] - along * dv[r * cols + j]);
          }
        }
      }
    });
  }
  return out;
}

}  // namespace forge
