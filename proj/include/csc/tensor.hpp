#pragma once
// Dense f64 tensors (1-3 dims, row-major) with reverse-mode autodiff.
//
// A Tape records the differentiable ops of one forward pass (define-by-run);
// Tape::backward replays them once in reverse. Any non-finite value produced
// by a forward op is a hard error rather than a propagated NaN. Broadcasting
// is limited to scalar-times-tensor; everything else is reshaped explicitly.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "csc/common.hpp"

namespace csc {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  if (s.empty() || s.size() > 3) throw ShapeError("tensors are 1-3 dimensional");
  std::size_t n = 1;
  for (int e : s) {
    if (e <= 0) throw ShapeError("non-positive extent");
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // allocated lazily during backward

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor constant(Shape shape, std::vector<double> values) {
    auto impl = std::make_shared<TensorImpl>();
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("value count " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    }
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    return Tensor(std::move(impl));
  }

  static Tensor zeros(Shape shape) {
    const std::size_t n = shape_numel(shape);
    return constant(std::move(shape), std::vector<double>(n, 0.0));
  }

  static Tensor full(Shape shape, double v) {
    const std::size_t n = shape_numel(shape);
    return constant(std::move(shape), std::vector<double>(n, v));
  }

  static Tensor scalar(double v) { return constant({1}, {v}); }

  // Leaf with gradient tracking (model parameter or probed input).
  static Tensor param(Shape shape, std::vector<double> values) {
    Tensor t = constant(std::move(shape), std::move(values));
    t.impl_->requires_grad = true;
    return t;
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int extent(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return impl_->data.size(); }
  bool requires_grad() const { return impl_->requires_grad; }

  std::vector<double>& data() { return impl_->data; }
  const std::vector<double>& data() const { return impl_->data; }
  bool has_grad() const { return !impl_->grad.empty(); }
  const std::vector<double>& grad() const {
    if (impl_->grad.empty()) throw ContractError("tensor has no gradient");
    return impl_->grad;
  }

  double value() const {
    if (size() != 1) throw ShapeError("value() on non-scalar " + shape_str(shape()));
    return impl_->data[0];
  }

  double at(int i) const { return impl_->data[static_cast<std::size_t>(i)]; }
  double at(int i, int j) const {
    return impl_->data[static_cast<std::size_t>(i) * extent(1) + j];
  }
  double at(int i, int j, int k) const {
    return impl_->data[(static_cast<std::size_t>(i) * extent(1) + j) * extent(2) + k];
  }

  void zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }

  // Value copy with no grad tracking; used to snapshot live graph nodes.
  Tensor detached() const { return constant(impl_->shape, impl_->data); }

  std::shared_ptr<TensorImpl> impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

namespace detail {

inline void matmul_accum(const double* a, const double* b, double* c, int m, int k, int n) {
  // c[m x n] += a[m x k] * b[k x n], ikj order
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * k;
    double* crow = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x k] += g[m x n] * b^T  (b is [k x n])
inline void matmul_accum_bt(const double* g, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* grow = g + static_cast<std::size_t>(i) * n;
    double* crow = c + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double* brow = b + static_cast<std::size_t>(p) * n;
      double acc = 0.0;
      for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// c[k x n] += a^T * g  (a is [m x k], g is [m x n])
inline void matmul_accum_at(const double* a, const double* g, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * k;
    const double* grow = g + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

}  // namespace detail

class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t entry_count() const { return entries_.size(); }

  // ---- binary / unary elementwise ----

  Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    Tensor r = Tensor::constant(a.shape(), std::move(out));
    finalize("add", r, {a, b}, [ra = a.impl(), rb = b.impl(), ro = r.impl()] {
      accum(ra, ro->grad, 1.0);
      accum(rb, ro->grad, 1.0);
    });
    return r;
  }

  Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    Tensor r = Tensor::constant(a.shape(), std::move(out));
    finalize("sub", r, {a, b}, [ra = a.impl(), rb = b.impl(), ro = r.impl()] {
      accum(ra, ro->grad, 1.0);
      accum(rb, ro->grad, -1.0);
    });
    return r;
  }

  Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    Tensor r = Tensor::constant(a.shape(), std::move(out));
    finalize("mul", r, {a, b}, [ra = a.impl(), rb = b.impl(), ro = r.impl()] {
      if (ra->requires_grad) {
        ra->ensure_grad();
        for (std::size_t i = 0; i < ro->grad.size(); ++i) ra->grad[i] += ro->grad[i] * rb->data[i];
      }
      if (rb->requires_grad) {
        rb->ensure_grad();
        for (std::size_t i = 0; i < ro->grad.size(); ++i) rb->grad[i] += ro->grad[i] * ra->data[i];
      }
    });
    return r;
  }

  Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    Tensor r = Tensor::constant(a.shape(), std::move(out));
    finalize("scale", r, {a}, [ra = a.impl(), ro = r.impl(), c] { accum(ra, ro->grad, c); });
    return r;
  }

  Tensor neg(const Tensor& a) { return scale(a, -1.0); }

  Tensor add_const(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + c;
    Tensor r = Tensor::constant(a.shape(), std::move(out));
    finalize("add_const", r, {a}, [ra = a.impl(), ro = r.impl()] { accum(ra, ro->grad, 1.0); });
    return r;
  }

  Tensor exp_(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
    Tensor r = Tensor::constant(a.shape(), std::move(out));
    finalize("exp", r, {a}, [ra = a.impl(), ro = r.impl()] {
      if (!ra->requires_grad) return;
      ra->ensure_grad();
      for (std::size_t i = 0; i < ro->grad.size(); ++i) ra->grad[i] += ro->grad[i] * ro->data[i];
    });
    return r;
  }

  Tensor log_(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (a.data()[i] <= 0.0) throw NumericError("log: non-positive input");
      out[i] = std::log(a.data()[i]);
    }
    Tensor r = Tensor::constant(a.shape(), std::move(out));
    finalize("log", r, {a}, [ra = a.impl(), ro = r.impl()] {
      if (!ra->requires_grad) return;
      ra->ensure_grad();
      for (std::size_t i = 0; i < ro->grad.size(); ++i) ra->grad[i] += ro->grad[i] / ra->data[i];
    });
    return r;
  }

  Tensor tanh_(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.data()[i]);
    Tensor r = Tensor::constant(a.shape(), std::move(out));
    finalize("tanh", r, {a}, [ra = a.impl(), ro = r.impl()] {
      if (!ra->requires_grad) return;
      ra->ensure_grad();
      for (std::size_t i = 0; i < ro->grad.size(); ++i)
        ra->grad[i] += ro->grad[i] * (1.0 - ro->data[i] * ro->data[i]);
    });
    return r;
  }

  Tensor sigmoid(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double x = a.data()[i];
      out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    Tensor r = Tensor::constant(a.shape(), std::move(out));
    finalize("sigmoid", r, {a}, [ra = a.impl(), ro = r.impl()] {
      if (!ra->requires_grad) return;
      ra->ensure_grad();
      for (std::size_t i = 0; i < ro->grad.size(); ++i)
        ra->grad[i] += ro->grad[i] * ro->data[i] * (1.0 - ro->data[i]);
    });
    return r;
  }

  Tensor relu(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(a.data()[i], 0.0);
    Tensor r = Tensor::constant(a.shape(), std::move(out));
    finalize("relu", r, {a}, [ra = a.impl(), ro = r.impl()] {
      if (!ra->requires_grad) return;
      ra->ensure_grad();
      for (std::size_t i = 0; i < ro->grad.size(); ++i)
        if (ra->data[i] > 0.0) ra->grad[i] += ro->grad[i];
    });
    return r;
  }

  Tensor softplus(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double x = a.data()[i];
      out[i] = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
    }
    Tensor r = Tensor::constant(a.shape(), std::move(out));
    finalize("softplus", r, {a}, [ra = a.impl(), ro = r.impl()] {
      if (!ra->requires_grad) return;
      ra->ensure_grad();
      for (std::size_t i = 0; i < ro->grad.size(); ++i) {
        const double x = ra->data[i];
        const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        ra->grad[i] += ro->grad[i] * s;
      }
    });
    return r;
  }

  // Elementwise power with constant exponent; inputs must be strictly positive.
  Tensor pow_scalar(const Tensor& a, double p) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (a.data()[i] <= 0.0) throw NumericError("pow_scalar: non-positive base");
      out[i] = std::pow(a.data()[i], p);
    }
    Tensor r = Tensor::constant(a.shape(), std::move(out));
    finalize("pow_scalar", r, {a}, [ra = a.impl(), ro = r.impl(), p] {
      if (!ra->requires_grad) return;
      ra->ensure_grad();
      for (std::size_t i = 0; i < ro->grad.size(); ++i)
        ra->grad[i] += ro->grad[i] * p * ro->data[i] / ra->data[i];
    });
    return r;
  }

  // ---- scalar-tensor broadcasts (s has shape {1}) ----

  Tensor mul_scalar_t(const Tensor& x, const Tensor& s) {
    require_scalar(s, "mul_scalar_t");
    const double sv = s.data()[0];
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * sv;
    Tensor r = Tensor::constant(x.shape(), std::move(out));
    finalize("mul_scalar_t", r, {x, s}, [rx = x.impl(), rs = s.impl(), ro = r.impl()] {
      if (rx->requires_grad) {
        rx->ensure_grad();
        for (std::size_t i = 0; i < ro->grad.size(); ++i) rx->grad[i] += ro->grad[i] * rs->data[0];
      }
      if (rs->requires_grad) {
        rs->ensure_grad();
        double acc = 0.0;
        for (std::size_t i = 0; i < ro->grad.size(); ++i) acc += ro->grad[i] * rx->data[i];
        rs->grad[0] += acc;
      }
    });
    return r;
  }

  Tensor add_scalar_t(const Tensor& x, const Tensor& s) {
    require_scalar(s, "add_scalar_t");
    const double sv = s.data()[0];
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + sv;
    Tensor r = Tensor::constant(x.shape(), std::move(out));
    finalize("add_scalar_t", r, {x, s}, [rx = x.impl(), rs = s.impl(), ro = r.impl()] {
      accum(rx, ro->grad, 1.0);
      if (rs->requires_grad) {
        rs->ensure_grad();
        double acc = 0.0;
        for (double g : ro->grad) acc += g;
        rs->grad[0] += acc;
      }
    });
    return r;
  }

  // ---- reductions ----

  Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    Tensor r = Tensor::constant({1}, {acc});
    finalize("sum", r, {a}, [ra = a.impl(), ro = r.impl()] { accum(ra, ro->grad[0], 1.0); });
    return r;
  }

  Tensor mean(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    const double inv = 1.0 / static_cast<double>(a.size());
    Tensor r = Tensor::constant({1}, {acc * inv});
    finalize("mean", r, {a}, [ra = a.impl(), ro = r.impl(), inv] { accum(ra, ro->grad[0], inv); });
    return r;
  }

  // Squared L2 distance between same-shape tensors.
  Tensor sq_l2(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sq_l2");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = a.data()[i] - b.data()[i];
      acc += d * d;
    }
    Tensor r = Tensor::constant({1}, {acc});
    finalize("sq_l2", r, {a, b}, [ra = a.impl(), rb = b.impl(), ro = r.impl()] {
      const double g = ro->grad[0];
      if (ra->requires_grad) {
        ra->ensure_grad();
        for (std::size_t i = 0; i < ra->data.size(); ++i)
          ra->grad[i] += 2.0 * g * (ra->data[i] - rb->data[i]);
      }
      if (rb->requires_grad) {
        rb->ensure_grad();
        for (std::size_t i = 0; i < rb->data.size(); ++i)
          rb->grad[i] -= 2.0 * g * (ra->data[i] - rb->data[i]);
      }
    });
    return r;
  }

  // log sum exp of a 1-D tensor, max-subtraction stabilized.
  Tensor logsumexp(const Tensor& v) {
    if (v.ndim() != 1) throw ShapeError("logsumexp expects 1-D, got " + shape_str(v.shape()));
    const double m = *std::max_element(v.data().begin(), v.data().end());
    double acc = 0.0;
    for (double x : v.data()) acc += std::exp(x - m);
    Tensor r = Tensor::constant({1}, {m + std::log(acc)});
    finalize("logsumexp", r, {v}, [rv = v.impl(), ro = r.impl()] {
      if (!rv->requires_grad) return;
      rv->ensure_grad();
      const double g = ro->grad[0];
      const double out = ro->data[0];
      for (std::size_t i = 0; i < rv->data.size(); ++i)
        rv->grad[i] += g * std::exp(rv->data[i] - out);
    });
    return r;
  }

  // ---- linear algebra ----

  Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.extent(1) != b.extent(0)) {
      throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " * " +
                       shape_str(b.shape()));
    }
    const int m = a.extent(0), k = a.extent(1), n = b.extent(1);
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    detail::matmul_accum(a.data().data(), b.data().data(), out.data(), m, k, n);
    Tensor r = Tensor::constant({m, n}, std::move(out));
    finalize("matmul", r, {a, b}, [ra = a.impl(), rb = b.impl(), ro = r.impl(), m, k, n] {
      if (ra->requires_grad) {
        ra->ensure_grad();
        detail::matmul_accum_bt(ro->grad.data(), rb->data.data(), ra->grad.data(), m, k, n);
      }
      if (rb->requires_grad) {
        rb->ensure_grad();
        detail::matmul_accum_at(ra->data.data(), ro->grad.data(), rb->grad.data(), m, k, n);
      }
    });
    return r;
  }

  Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) throw ShapeError("transpose expects 2-D");
    const int m = a.extent(0), n = a.extent(1);
    std::vector<double> out(a.size());
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        out[static_cast<std::size_t>(j) * m + i] = a.data()[static_cast<std::size_t>(i) * n + j];
    Tensor r = Tensor::constant({n, m}, std::move(out));
    finalize("transpose", r, {a}, [ra = a.impl(), ro = r.impl(), m, n] {
      if (!ra->requires_grad) return;
      ra->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          ra->grad[static_cast<std::size_t>(i) * n + j] +=
              ro->grad[static_cast<std::size_t>(j) * m + i];
    });
    return r;
  }

  // Row-wise softmax of a 2-D tensor, stabilized by per-row max subtraction.
  Tensor softmax_rows(const Tensor& a) {
    if (a.ndim() != 2) throw ShapeError("softmax_rows expects 2-D");
    const int m = a.extent(0), n = a.extent(1);
    std::vector<double> out(a.size());
    for (int i = 0; i < m; ++i) {
      const double* row = a.data().data() + static_cast<std::size_t>(i) * n;
      double* orow = out.data() + static_cast<std::size_t>(i) * n;
      const double mx = *std::max_element(row, row + n);
      double acc = 0.0;
      for (int j = 0; j < n; ++j) {
        orow[j] = std::exp(row[j] - mx);
        acc += orow[j];
      }
      const double inv = 1.0 / acc;
      for (int j = 0; j < n; ++j) orow[j] *= inv;
    }
    Tensor r = Tensor::constant({m, n}, std::move(out));
    finalize("softmax_rows", r, {a}, [ra = a.impl(), ro = r.impl(), m, n] {
      if (!ra->requires_grad) return;
      ra->ensure_grad();
      for (int i = 0; i < m; ++i) {
        const double* y = ro->data.data() + static_cast<std::size_t>(i) * n;
        const double* g = ro->grad.data() + static_cast<std::size_t>(i) * n;
        double* dx = ra->grad.data() + static_cast<std::size_t>(i) * n;
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += g[j] * y[j];
        for (int j = 0; j < n; ++j) dx[j] += y[j] * (g[j] - dot);
      }
    });
    return r;
  }

  // ---- structure ops ----

  Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.size()) {
      throw ShapeError("reshape: size mismatch " + shape_str(a.shape()) + " -> " +
                       shape_str(shape));
    }
    Tensor r = Tensor::constant(std::move(shape), a.data());
    finalize("reshape", r, {a}, [ra = a.impl(), ro = r.impl()] { accum(ra, ro->grad, 1.0); });
    return r;
  }

  Tensor concat_rows(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.extent(1) != b.extent(1)) {
      throw ShapeError("concat_rows: incompatible " + shape_str(a.shape()) + " / " +
                       shape_str(b.shape()));
    }
    std::vector<double> out;
    out.reserve(a.size() + b.size());
    out.insert(out.end(), a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    Tensor r = Tensor::constant({a.extent(0) + b.extent(0), a.extent(1)}, std::move(out));
    finalize("concat_rows", r, {a, b}, [ra = a.impl(), rb = b.impl(), ro = r.impl()] {
      const std::size_t na = ra->data.size();
      if (ra->requires_grad) {
        ra->ensure_grad();
        for (std::size_t i = 0; i < na; ++i) ra->grad[i] += ro->grad[i];
      }
      if (rb->requires_grad) {
        rb->ensure_grad();
        for (std::size_t i = 0; i < rb->data.size(); ++i) rb->grad[i] += ro->grad[na + i];
      }
    });
    return r;
  }

  Tensor stack_scalars(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ShapeError("stack_scalars: empty input");
    std::vector<double> out(xs.size());
    bool any_grad = false;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (xs[i].size() != 1) throw ShapeError("stack_scalars: non-scalar element");
      out[i] = xs[i].data()[0];
      any_grad = any_grad || xs[i].requires_grad();
    }
    Tensor r = Tensor::constant({static_cast<int>(xs.size())}, std::move(out));
    if (grad_enabled_ && any_grad) {
      std::vector<std::shared_ptr<TensorImpl>> ins;
      ins.reserve(xs.size());
      for (const auto& x : xs) ins.push_back(x.impl());
      r.impl()->requires_grad = true;
      entries_.push_back([ins = std::move(ins), ro = r.impl()] {
        if (ro->grad.empty()) return;
        for (std::size_t i = 0; i < ins.size(); ++i) {
          if (!ins[i]->requires_grad) continue;
          ins[i]->ensure_grad();
          ins[i]->grad[0] += ro->grad[i];
        }
      });
    }
    check_finite("stack_scalars", r);
    return r;
  }

  Tensor select(const Tensor& v, int i) {
    if (v.ndim() != 1) throw ShapeError("select expects 1-D");
    if (i < 0 || i >= v.extent(0)) throw ShapeError("select: index out of range");
    Tensor r = Tensor::constant({1}, {v.data()[static_cast<std::size_t>(i)]});
    finalize("select", r, {v}, [rv = v.impl(), ro = r.impl(), i] {
      if (!rv->requires_grad) return;
      rv->ensure_grad();
      rv->grad[static_cast<std::size_t>(i)] += ro->grad[0];
    });
    return r;
  }

  // [A x B x C] -> [A x C] slice at middle index b.
  Tensor slice_mid(const Tensor& x, int b) {
    if (x.ndim() != 3) throw ShapeError("slice_mid expects 3-D");
    const int A = x.extent(0), B = x.extent(1), C = x.extent(2);
    if (b < 0 || b >= B) throw ShapeError("slice_mid: index out of range");
    std::vector<double> out(static_cast<std::size_t>(A) * C);
    for (int a = 0; a < A; ++a)
      for (int c = 0; c < C; ++c)
        out[static_cast<std::size_t>(a) * C + c] =
            x.data()[(static_cast<std::size_t>(a) * B + b) * C + c];
    Tensor r = Tensor::constant({A, C}, std::move(out));
    finalize("slice_mid", r, {x}, [rx = x.impl(), ro = r.impl(), A, B, C, b] {
      if (!rx->requires_grad) return;
      rx->ensure_grad();
      for (int a = 0; a < A; ++a)
        for (int c = 0; c < C; ++c)
          rx->grad[(static_cast<std::size_t>(a) * B + b) * C + c] +=
              ro->grad[static_cast<std::size_t>(a) * C + c];
    });
    return r;
  }

  // Inverse of slice_mid: B tensors [A x C] -> [A x B x C].
  Tensor stack_mid(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ShapeError("stack_mid: empty input");
    const int A = xs[0].extent(0), C = xs[0].extent(1);
    const int B = static_cast<int>(xs.size());
    bool any_grad = false;
    for (const auto& x : xs) {
      if (x.ndim() != 2 || x.extent(0) != A || x.extent(1) != C)
        throw ShapeError("stack_mid: inconsistent element shapes");
      any_grad = any_grad || x.requires_grad();
    }
    std::vector<double> out(static_cast<std::size_t>(A) * B * C);
    for (int b = 0; b < B; ++b)
      for (int a = 0; a < A; ++a)
        for (int c = 0; c < C; ++c)
          out[(static_cast<std::size_t>(a) * B + b) * C + c] =
              xs[static_cast<std::size_t>(b)].data()[static_cast<std::size_t>(a) * C + c];
    Tensor r = Tensor::constant({A, B, C}, std::move(out));
    if (grad_enabled_ && any_grad) {
      std::vector<std::shared_ptr<TensorImpl>> ins;
      ins.reserve(xs.size());
      for (const auto& x : xs) ins.push_back(x.impl());
      r.impl()->requires_grad = true;
      entries_.push_back([ins = std::move(ins), ro = r.impl(), A, B, C] {
        if (ro->grad.empty()) return;
        for (int b = 0; b < B; ++b) {
          auto& in = ins[static_cast<std::size_t>(b)];
          if (!in->requires_grad) continue;
          in->ensure_grad();
          for (int a = 0; a < A; ++a)
            for (int c = 0; c < C; ++c)
              in->grad[static_cast<std::size_t>(a) * C + c] +=
                  ro->grad[(static_cast<std::size_t>(a) * B + b) * C + c];
        }
      });
    }
    check_finite("stack_mid", r);
    return r;
  }

  // [A x B x C] -> [A x C x B]
  Tensor swap_last2(const Tensor& x) {
    if (x.ndim() != 3) throw ShapeError("swap_last2 expects 3-D");
    const int A = x.extent(0), B = x.extent(1), C = x.extent(2);
    std::vector<double> out(x.size());
    for (int a = 0; a < A; ++a)
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
          out[(static_cast<std::size_t>(a) * C + c) * B + b] =
              x.data()[(static_cast<std::size_t>(a) * B + b) * C + c];
    Tensor r = Tensor::constant({A, C, B}, std::move(out));
    finalize("swap_last2", r, {x}, [rx = x.impl(), ro = r.impl(), A, B, C] {
      if (!rx->requires_grad) return;
      rx->ensure_grad();
      for (int a = 0; a < A; ++a)
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c)
            rx->grad[(static_cast<std::size_t>(a) * B + b) * C + c] +=
                ro->grad[(static_cast<std::size_t>(a) * C + c) * B + b];
    });
    return r;
  }

  // 50%-overlap segmentation of [D x F] into [D x K x S]; zero-padded tail.
  Tensor segment_cols(const Tensor& f, int K) {
    if (f.ndim() != 2) throw ShapeError("segment_cols expects 2-D");
    if (K <= 0 || K % 2 != 0) throw ConfigError("segment length K must be even and positive");
    const int D = f.extent(0), F = f.extent(1);
    const int hop = K / 2;
    const int S = std::max(2, (F + hop - 1) / hop);
    std::vector<double> out(static_cast<std::size_t>(D) * K * S, 0.0);
    for (int d = 0; d < D; ++d)
      for (int s = 0; s < S; ++s)
        for (int k = 0; k < K; ++k) {
          const int col = s * hop + k;
          if (col < F)
            out[(static_cast<std::size_t>(d) * K + k) * S + s] =
                f.data()[static_cast<std::size_t>(d) * F + col];
        }
    Tensor r = Tensor::constant({D, K, S}, std::move(out));
    finalize("segment_cols", r, {f}, [rf = f.impl(), ro = r.impl(), D, F, K, S, hop] {
      if (!rf->requires_grad) return;
      rf->ensure_grad();
      for (int d = 0; d < D; ++d)
        for (int s = 0; s < S; ++s)
          for (int k = 0; k < K; ++k) {
            const int col = s * hop + k;
            if (col < F)
              rf->grad[static_cast<std::size_t>(d) * F + col] +=
                  ro->grad[(static_cast<std::size_t>(d) * K + k) * S + s];
          }
    });
    return r;
  }

  // Inverse of segment_cols; overlapping positions averaged, padding trimmed.
  Tensor overlap_add_cols(const Tensor& x, int F) {
    if (x.ndim() != 3) throw ShapeError("overlap_add_cols expects 3-D");
    const int D = x.extent(0), K = x.extent(1), S = x.extent(2);
    const int hop = K / 2;
    const int total = (S - 1) * hop + K;
    if (F <= 0 || F > total) throw ShapeError("overlap_add_cols: bad output length");
    std::vector<double> counts(static_cast<std::size_t>(F), 0.0);
    for (int s = 0; s < S; ++s)
      for (int k = 0; k < K; ++k) {
        const int col = s * hop + k;
        if (col < F) counts[static_cast<std::size_t>(col)] += 1.0;
      }
    std::vector<double> out(static_cast<std::size_t>(D) * F, 0.0);
    for (int d = 0; d < D; ++d)
      for (int s = 0; s < S; ++s)
        for (int k = 0; k < K; ++k) {
          const int col = s * hop + k;
          if (col < F)
            out[static_cast<std::size_t>(d) * F + col] +=
                x.data()[(static_cast<std::size_t>(d) * K + k) * S + s];
        }
    for (int d = 0; d < D; ++d)
      for (int col = 0; col < F; ++col)
        out[static_cast<std::size_t>(d) * F + col] /= counts[static_cast<std::size_t>(col)];
    Tensor r = Tensor::constant({D, F}, std::move(out));
    finalize("overlap_add_cols", r, {x},
             [rx = x.impl(), ro = r.impl(), counts, D, F, K, S, hop] {
               if (!rx->requires_grad) return;
               rx->ensure_grad();
               for (int d = 0; d < D; ++d)
                 for (int s = 0; s < S; ++s)
                   for (int k = 0; k < K; ++k) {
                     const int col = s * hop + k;
                     if (col < F)
                       rx->grad[(static_cast<std::size_t>(d) * K + k) * S + s] +=
                           ro->grad[static_cast<std::size_t>(d) * F + col] /
                           counts[static_cast<std::size_t>(col)];
                   }
             });
    return r;
  }

  // Frames [L x F] -> waveform [T], T = (F-1)*hop + L; overlaps averaged.
  Tensor ola_frames(const Tensor& frames, int hop) {
    if (frames.ndim() != 2) throw ShapeError("ola_frames expects 2-D");
    if (hop <= 0) throw ConfigError("ola_frames: hop must be positive");
    const int L = frames.extent(0), F = frames.extent(1);
    const int T = (F - 1) * hop + L;
    std::vector<double> counts(static_cast<std::size_t>(T), 0.0);
    std::vector<double> out(static_cast<std::size_t>(T), 0.0);
    for (int f = 0; f < F; ++f)
      for (int l = 0; l < L; ++l) {
        const int t = f * hop + l;
        out[static_cast<std::size_t>(t)] += frames.data()[static_cast<std::size_t>(l) * F + f];
        counts[static_cast<std::size_t>(t)] += 1.0;
      }
    for (int t = 0; t < T; ++t) out[static_cast<std::size_t>(t)] /= counts[static_cast<std::size_t>(t)];
    Tensor r = Tensor::constant({T}, std::move(out));
    finalize("ola_frames", r, {frames}, [rf = frames.impl(), ro = r.impl(), counts, L, F, hop] {
      if (!rf->requires_grad) return;
      rf->ensure_grad();
      for (int f = 0; f < F; ++f)
        for (int l = 0; l < L; ++l) {
          const int t = f * hop + l;
          rf->grad[static_cast<std::size_t>(l) * F + f] +=
              ro->grad[static_cast<std::size_t>(t)] / counts[static_cast<std::size_t>(t)];
        }
    });
    return r;
  }

  // ---- backward ----

  void backward(const Tensor& loss) {
    if (!grad_enabled_) throw ContractError("backward on a no-grad tape");
    if (backward_done_) throw ContractError("backward already ran on this tape");
    if (loss.size() != 1) throw ContractError("backward: loss must be scalar");
    if (!loss.requires_grad()) throw ContractError("backward: loss does not require grad");
    backward_done_ = true;
    loss.impl()->ensure_grad();
    loss.impl()->grad[0] = 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  }

 private:
  static void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
      throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    }
  }

  static void require_scalar(const Tensor& s, const char* op) {
    if (s.size() != 1) throw ShapeError(std::string(op) + ": expected scalar");
  }

  static void check_finite(const char* op, const Tensor& t) {
    for (double v : t.data()) {
      if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite result");
    }
  }

  static void accum(const std::shared_ptr<TensorImpl>& in, const std::vector<double>& g,
                    double c) {
    if (!in->requires_grad) return;
    in->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) in->grad[i] += c * g[i];
  }

  static void accum(const std::shared_ptr<TensorImpl>& in, double g, double c) {
    if (!in->requires_grad) return;
    in->ensure_grad();
    for (std::size_t i = 0; i < in->grad.size(); ++i) in->grad[i] += c * g;
  }

  void finalize(const char* op, Tensor& r, std::initializer_list<Tensor> inputs,
                std::function<void()> bw) {
    check_finite(op, r);
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (grad_enabled_ && any) {
      r.impl()->requires_grad = true;
      entries_.push_back(std::move(bw));
    }
  }

  std::vector<std::function<void()>> entries_;
  bool grad_enabled_ = true;
  bool backward_done_ = false;
};

// Frame a raw waveform into a [window x F] constant (no grad into samples).
inline Tensor frame_matrix(const std::vector<double>& wave, int window, int hop) {
  if (window <= 0 || hop <= 0 || hop > window) throw ConfigError("bad framing parameters");
  if (static_cast<int>(wave.size()) < window)
    throw ShapeError("waveform shorter than one window");
  const int F = (static_cast<int>(wave.size()) - window) / hop + 1;
  std::vector<double> out(static_cast<std::size_t>(window) * F);
  for (int l = 0; l < window; ++l)
    for (int f = 0; f < F; ++f)
      out[static_cast<std::size_t>(l) * F + f] = wave[static_cast<std::size_t>(f) * hop + l];
  return Tensor::constant({window, F}, std::move(out));
}

}  // namespace csc
