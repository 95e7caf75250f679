#pragma once

// Minimal reverse-mode automatic differentiation over dense NCHW arrays.
//
// A Tensor is a shared handle to a value buffer and a lazily allocated
// gradient buffer. Every differentiable op appends a backward closure to a
// Tape; Tape::backward replays the closures in reverse creation order, which
// is a valid topological order because an op can only consume tensors that
// already exist. A tape and its tensors belong to one thread.

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <limits>
#include <memory>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dynaflow/error.hpp"

namespace dynaflow {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + ")";
}

class Tensor {
  struct Impl {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
  };

 public:
  Tensor() : impl_(std::make_shared<Impl>()) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.impl_->value.assign(shape_numel(shape), 0.0);
    t.impl_->shape = std::move(shape);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.impl_->value.begin(), t.impl_->value.end(), v);
    return t;
  }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (values.size() != shape_numel(shape))
      throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                       shape_str(shape));
    Tensor t;
    t.impl_->shape = std::move(shape);
    t.impl_->value = std::move(values);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->value.size(); }

  std::span<double> data() { return impl_->value; }
  std::span<const double> data() const { return impl_->value; }
  double* ptr() { return impl_->value.data(); }
  const double* ptr() const { return impl_->value.data(); }
  std::vector<double>& values() { return impl_->value; }
  const std::vector<double>& values() const { return impl_->value; }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->value[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  bool has_grad() const { return !impl_->grad.empty(); }
  // Gradient buffer, allocated (zero-filled) on first access.
  std::span<double> grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), 0.0);
    return impl_->grad;
  }
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0); }

  // NCHW element access.
  double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    const auto& s = impl_->shape;
    return impl_->value[((n * s[1] + c) * s[2] + h) * s[3] + w];
  }
  double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    const auto& s = impl_->shape;
    return impl_->value[((n * s[1] + c) * s[2] + h) * s[3] + w];
  }

  Tensor clone() const {
    Tensor t = from(shape(), values(), requires_grad());
    return t;
  }

  bool same(const Tensor& o) const { return impl_ == o.impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

class Tape {
 public:
  enum class Mode { record, inference };

  explicit Tape(Mode mode = Mode::record) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return mode_ == Mode::record; }

  // Whether an op over these inputs needs a backward closure.
  bool tracks(std::initializer_list<const Tensor*> inputs) const {
    if (!recording()) return false;
    for (const auto* t : inputs)
      if (t->requires_grad()) return true;
    return false;
  }

  void record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }

  // Seeds d(loss)/d(loss) = 1 and accumulates into every tracked tensor.
  void backward(Tensor& loss) {
    if (loss.numel() != 1) throw ShapeError("backward requires a scalar loss");
    if (!loss.requires_grad()) return;
    loss.grad()[0] += 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    ops_.clear();
  }

  std::size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

 private:
  Mode mode_;
  std::vector<std::function<void()>> ops_;
};

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

inline void require_ndim(const Tensor& a, std::size_t n, const char* op) {
  if (a.ndim() != n)
    throw ShapeError(std::string(op) + ": expected " + std::to_string(n) + "-d tensor, got " +
                     shape_str(a.shape()));
}

template <typename Fwd, typename Deriv>
Tensor unary(Tape& tape, Tensor x, Fwd fwd, Deriv deriv) {
  Tensor out = Tensor::zeros(x.shape(), tape.tracks({&x}));
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = fwd(xv[i]);
  if (out.requires_grad()) {
    tape.record([x, out, deriv]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      auto xv = x.data();
      auto ov = out.data();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xv[i], ov[i]);
    });
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(Tape& tape, Tensor a, Tensor b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape(), tape.tracks({&a, &b}));
  auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (out.requires_grad()) {
    tape.record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

inline Tensor sub(Tape& tape, Tensor a, Tensor b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape(), tape.tracks({&a, &b}));
  auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  if (out.requires_grad()) {
    tape.record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

inline Tensor mul(Tape& tape, Tensor a, Tensor b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape(), tape.tracks({&a, &b}));
  auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (out.requires_grad()) {
    tape.record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto av = a.data(), bv = b.data();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
      }
    });
  }
  return out;
}

inline Tensor scale(Tape& tape, Tensor x, double s) {
  return detail::unary(tape, x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(Tape& tape, Tensor x, double s) {
  return detail::unary(tape, x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

inline Tensor relu(Tape& tape, Tensor x) {
  return detail::unary(
      tape, x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline double sigmoid_value(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

// log(1 + exp(v)) without overflow.
inline double softplus_value(double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); }

inline Tensor sigmoid(Tape& tape, Tensor x) {
  return detail::unary(tape, x, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor softplus(Tape& tape, Tensor x) {
  return detail::unary(tape, x, softplus_value, [](double v, double) { return sigmoid_value(v); });
}

inline Tensor square(Tape& tape, Tensor x) {
  return detail::unary(tape, x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(Tape& tape, Tensor x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s, tape.tracks({&x}));
  if (out.requires_grad()) {
    tape.record([x, out]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0];
      for (auto& gx : x.grad()) gx += g;
    });
  }
  return out;
}

inline Tensor mean(Tape& tape, Tensor x) {
  if (x.numel() == 0) throw ShapeError("mean of an empty tensor");
  return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x.numel()));
}

// Sum of scalar tensors.
inline Tensor add_n(Tape& tape, std::vector<Tensor> terms) {
  double s = 0.0;
  bool tracked = false;
  for (const auto& t : terms) {
    if (t.numel() != 1) throw ShapeError("add_n expects scalars");
    s += t.item();
    tracked = tracked || t.requires_grad();
  }
  Tensor out = Tensor::scalar(s, tape.recording() && tracked);
  if (out.requires_grad()) {
    tape.record([terms, out]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0];
      for (auto& t : terms)
        if (t.requires_grad()) t.grad()[0] += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

enum class ConvImpl { gemm, loops };

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeom {
  std::size_t n, cin, h, w, cout, k, stride, pad, ho, wo;
};

inline ConvGeom conv_geometry(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  require_ndim(x, 4, "conv2d");
  require_ndim(w, 4, "conv2d");
  if (w.dim(1) != x.dim(1))
    throw ShapeError("conv2d: input has " + std::to_string(x.dim(1)) + " channels, kernel expects " +
                     std::to_string(w.dim(1)));
  if (w.dim(2) != w.dim(3)) throw ShapeError("conv2d: kernel must be square");
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), stride, pad, 0, 0};
  if (g.h + 2 * pad < g.k || g.w + 2 * pad < g.k) throw ShapeError("conv2d: kernel larger than input");
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;
  return g;
}

inline bool is_pointwise(const ConvGeom& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

// cols[(ci*k + ky)*k + kx][oy*wo + ox] = x[ci][oy*s + ky - pad][ox*s + kx - pad]
inline void im2col(const double* x, const ConvGeom& g, double* cols) {
  const std::size_t hw = g.ho * g.wo;
  for (std::size_t ci = 0; ci < g.cin; ++ci)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = cols + ((ci * g.k + ky) * g.k + kx) * hw;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          double* dst = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.wo, 0.0);
            continue;
          }
          const double* src = x + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0 : src[ix];
          }
        }
      }
}

inline void col2im_add(const double* cols, const ConvGeom& g, double* dx) {
  const std::size_t hw = g.ho * g.wo;
  for (std::size_t ci = 0; ci < g.cin; ++ci)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = cols + ((ci * g.k + ky) * g.k + kx) * hw;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          double* dst = dx + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          const double* src = row + oy * g.wo;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[ox];
          }
        }
      }
}

inline void conv_forward_loops(const ConvGeom& g, const double* x, const double* w, const double* b,
                               double* out) {
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t co = 0; co < g.cout; ++co)
      for (std::size_t oy = 0; oy < g.ho; ++oy)
        for (std::size_t ox = 0; ox < g.wo; ++ox) {
          double acc = b ? b[co] : 0.0;
          for (std::size_t ci = 0; ci < g.cin; ++ci)
            for (std::size_t ky = 0; ky < g.k; ++ky)
              for (std::size_t kx = 0; kx < g.k; ++kx) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.h) ||
                    ix >= static_cast<std::ptrdiff_t>(g.w))
                  continue;
                acc += w[((co * g.cin + ci) * g.k + ky) * g.k + kx] *
                       x[((n * g.cin + ci) * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)];
              }
          out[((n * g.cout + co) * g.ho + oy) * g.wo + ox] = acc;
        }
}

inline void conv_backward_loops(const ConvGeom& g, const double* x, const double* w, const double* gout,
                                double* gx, double* gw, double* gb) {
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t co = 0; co < g.cout; ++co)
      for (std::size_t oy = 0; oy < g.ho; ++oy)
        for (std::size_t ox = 0; ox < g.wo; ++ox) {
          const double go = gout[((n * g.cout + co) * g.ho + oy) * g.wo + ox];
          if (gb) gb[co] += go;
          for (std::size_t ci = 0; ci < g.cin; ++ci)
            for (std::size_t ky = 0; ky < g.k; ++ky)
              for (std::size_t kx = 0; kx < g.k; ++kx) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.h) ||
                    ix >= static_cast<std::ptrdiff_t>(g.w))
                  continue;
                const std::size_t xi =
                    ((n * g.cin + ci) * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix);
                const std::size_t wi = ((co * g.cin + ci) * g.k + ky) * g.k + kx;
                if (gw) gw[wi] += go * x[xi];
                if (gx) gx[xi] += go * w[wi];
              }
        }
}

inline void conv_forward_gemm(const ConvGeom& g, const double* x, const double* w, const double* b,
                              double* out) {
  const auto rows = static_cast<Eigen::Index>(g.cin * g.k * g.k);
  const auto hw = static_cast<Eigen::Index>(g.ho * g.wo);
  Eigen::Map<const RowMat> W(w, static_cast<Eigen::Index>(g.cout), rows);
  RowMat cols;
  if (!is_pointwise(g)) cols.resize(rows, hw);
  for (std::size_t n = 0; n < g.n; ++n) {
    const double* xn = x + n * g.cin * g.h * g.w;
    Eigen::Map<RowMat> O(out + n * g.cout * g.ho * g.wo, static_cast<Eigen::Index>(g.cout), hw);
    if (is_pointwise(g)) {
      O.noalias() = W * Eigen::Map<const RowMat>(xn, rows, hw);
    } else {
      im2col(xn, g, cols.data());
      O.noalias() = W * cols;
    }
    if (b)
      for (std::size_t co = 0; co < g.cout; ++co) O.row(static_cast<Eigen::Index>(co)).array() += b[co];
  }
}

inline void conv_backward_gemm(const ConvGeom& g, const double* x, const double* w, const double* gout,
                               double* gx, double* gw, double* gb) {
  const auto rows = static_cast<Eigen::Index>(g.cin * g.k * g.k);
  const auto hw = static_cast<Eigen::Index>(g.ho * g.wo);
  const auto cout = static_cast<Eigen::Index>(g.cout);
  Eigen::Map<const RowMat> W(w, cout, rows);
  RowMat cols, dcols;
  if (!is_pointwise(g)) {
    cols.resize(rows, hw);
    if (gx) dcols.resize(rows, hw);
  }
  for (std::size_t n = 0; n < g.n; ++n) {
    const double* xn = x + n * g.cin * g.h * g.w;
    Eigen::Map<const RowMat> G(gout + n * g.cout * g.ho * g.wo, cout, hw);
    if (gb)
      for (Eigen::Index co = 0; co < cout; ++co) gb[co] += G.row(co).sum();
    if (is_pointwise(g)) {
      Eigen::Map<const RowMat> X(xn, rows, hw);
      if (gw) Eigen::Map<RowMat>(gw, cout, rows).noalias() += G * X.transpose();
      if (gx) Eigen::Map<RowMat>(gx + n * g.cin * g.h * g.w, rows, hw).noalias() += W.transpose() * G;
    } else {
      if (gw) {
        im2col(xn, g, cols.data());
        Eigen::Map<RowMat>(gw, cout, rows).noalias() += G * cols.transpose();
      }
      if (gx) {
        dcols.noalias() = W.transpose() * G;
        col2im_add(dcols.data(), g, gx + n * g.cin * g.h * g.w);
      }
    }
  }
}

}  // namespace detail

// Cross-correlation of x (N,Cin,H,W) with w (Cout,Cin,K,K), optional bias
// (Cout), zero padding.
inline Tensor conv2d(Tape& tape, Tensor x, Tensor w, const Tensor* bias,
                     std::size_t stride = 1, std::size_t pad = 0, ConvImpl impl = ConvImpl::gemm) {
  const auto g = detail::conv_geometry(x, w, stride, pad);
  if (bias && (bias->ndim() != 1 || bias->dim(0) != g.cout)) throw ShapeError("conv2d: bias shape");
  const bool tracked = bias ? tape.tracks({&x, &w, bias}) : tape.tracks({&x, &w});
  Tensor out = Tensor::zeros({g.n, g.cout, g.ho, g.wo}, tracked);
  const double* bp = bias ? bias->ptr() : nullptr;
  if (impl == ConvImpl::gemm)
    detail::conv_forward_gemm(g, x.ptr(), w.ptr(), bp, out.ptr());
  else
    detail::conv_forward_loops(g, x.ptr(), w.ptr(), bp, out.ptr());
  if (tracked) {
    Tensor b = bias ? *bias : Tensor();
    const bool has_bias = bias != nullptr;
    tape.record([x, w, b, out, g, has_bias, impl]() mutable {
      if (!out.has_grad()) return;
      double* gx = x.requires_grad() ? x.grad().data() : nullptr;
      double* gw = w.requires_grad() ? w.grad().data() : nullptr;
      double* gb = (has_bias && b.requires_grad()) ? b.grad().data() : nullptr;
      const double* go = out.grad().data();
      if (impl == ConvImpl::gemm)
        detail::conv_backward_gemm(g, x.ptr(), w.ptr(), go, gx, gw, gb);
      else
        detail::conv_backward_loops(g, x.ptr(), w.ptr(), go, gx, gw, gb);
    });
  }
  return out;
}

inline Tensor conv2d(Tape& tape, Tensor x, Tensor w, Tensor bias,
                     std::size_t stride = 1, std::size_t pad = 0, ConvImpl impl = ConvImpl::gemm) {
  return conv2d(tape, x, w, &bias, stride, pad, impl);
}

// ---------------------------------------------------------------------------
// Resampling and channel plumbing

inline Tensor upsample_nearest2x(Tape& tape, Tensor x) {
  detail::require_ndim(x, 4, "upsample_nearest2x");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out = Tensor::zeros({n, c, 2 * h, 2 * w}, tape.tracks({&x}));
  const double* xp = x.ptr();
  double* op = out.ptr();
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < 2 * w; ++j)
        op[(p * 2 * h + i) * 2 * w + j] = xp[(p * h + i / 2) * w + j / 2];
  if (out.requires_grad()) {
    tape.record([x, out, n, c, h, w]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      double* gx = x.grad().data();
      for (std::size_t p = 0; p < n * c; ++p)
        for (std::size_t i = 0; i < 2 * h; ++i)
          for (std::size_t j = 0; j < 2 * w; ++j)
            gx[(p * h + i / 2) * w + j / 2] += g[(p * 2 * h + i) * 2 * w + j];
    });
  }
  return out;
}

inline Tensor maxpool2x(Tape& tape, Tensor x) {
  detail::require_ndim(x, 4, "maxpool2x");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) throw ShapeError("maxpool2x: spatial size must be even");
  const std::size_t ho = h / 2, wo = w / 2;
  Tensor out = Tensor::zeros({n, c, ho, wo}, tape.tracks({&x}));
  std::vector<std::size_t> argmax(out.numel());
  const double* xp = x.ptr();
  double* op = out.ptr();
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j) {
        std::size_t best = (p * h + 2 * i) * w + 2 * j;
        for (std::size_t di = 0; di < 2; ++di)
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const std::size_t idx = (p * h + 2 * i + di) * w + 2 * j + dj;
            if (xp[idx] > xp[best]) best = idx;
          }
        const std::size_t o = (p * ho + i) * wo + j;
        op[o] = xp[best];
        argmax[o] = best;
      }
  if (out.requires_grad()) {
    tape.record([x, out, argmax = std::move(argmax)]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t o = 0; o < g.size(); ++o) gx[argmax[o]] += g[o];
    });
  }
  return out;
}

inline Tensor concat_channels(Tape& tape, std::vector<Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  for (const auto& p : parts) detail::require_ndim(p, 4, "concat_channels");
  const std::size_t n = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  std::size_t c_total = 0;
  bool tracked = false;
  for (const auto& p : parts) {
    if (p.dim(0) != n || p.dim(2) != h || p.dim(3) != w)
      throw ShapeError("concat_channels: batch/spatial mismatch " + shape_str(p.shape()));
    c_total += p.dim(1);
    tracked = tracked || p.requires_grad();
  }
  tracked = tracked && tape.recording();
  Tensor out = Tensor::zeros({n, c_total, h, w}, tracked);
  const std::size_t plane = h * w;
  double* op = out.ptr();
  for (std::size_t b = 0; b < n; ++b) {
    std::size_t c0 = 0;
    for (const auto& p : parts) {
      const std::size_t c = p.dim(1);
      std::copy_n(p.ptr() + b * c * plane, c * plane, op + (b * c_total + c0) * plane);
      c0 += c;
    }
  }
  if (tracked) {
    tape.record([parts, out, n, c_total, plane]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      for (std::size_t b = 0; b < n; ++b) {
        std::size_t c0 = 0;
        for (auto& p : parts) {
          const std::size_t c = p.dim(1);
          if (p.requires_grad()) {
            double* gp = p.grad().data() + b * c * plane;
            const double* src = g + (b * c_total + c0) * plane;
            for (std::size_t i = 0; i < c * plane; ++i) gp[i] += src[i];
          }
          c0 += c;
        }
      }
    });
  }
  return out;
}

// (N, D) -> (N, D, H, W), every pixel carrying the row vector.
inline Tensor tile_spatial(Tape& tape, Tensor v, std::size_t h, std::size_t w) {
  detail::require_ndim(v, 2, "tile_spatial");
  const std::size_t n = v.dim(0), d = v.dim(1), plane = h * w;
  Tensor out = Tensor::zeros({n, d, h, w}, tape.tracks({&v}));
  for (std::size_t i = 0; i < n * d; ++i) std::fill_n(out.ptr() + i * plane, plane, v.ptr()[i]);
  if (out.requires_grad()) {
    tape.record([v, out, n, d, plane]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      auto gv = v.grad();
      for (std::size_t i = 0; i < n * d; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < plane; ++j) s += g[i * plane + j];
        gv[i] += s;
      }
    });
  }
  return out;
}

// Concatenates 1-d tensors end to end.
inline Tensor concat_vectors(Tape& tape, std::vector<Tensor> parts) {
  std::size_t total = 0;
  bool tracked = false;
  for (const auto& p : parts) {
    detail::require_ndim(p, 1, "concat_vectors");
    total += p.numel();
    tracked = tracked || p.requires_grad();
  }
  tracked = tracked && tape.recording();
  Tensor out = Tensor::zeros({total}, tracked);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.ptr() + off);
    off += p.numel();
  }
  if (tracked) {
    tape.record([parts, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      std::size_t off = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) {
          auto gp = p.grad();
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[off + i];
        }
        off += p.numel();
      }
    });
  }
  return out;
}

// Stacks equal-length 1-d tensors into an (N, D) matrix.
inline Tensor stack_rows(Tape& tape, std::vector<Tensor> rows) {
  if (rows.empty()) throw ShapeError("stack_rows: no inputs");
  const std::size_t d = rows[0].numel();
  for (const auto& r : rows)
    if (r.ndim() != 1 || r.numel() != d) throw ShapeError("stack_rows: rows must be equal-length vectors");
  Tensor flat = concat_vectors(tape, rows);
  Tensor out = Tensor::zeros({rows.size(), d}, flat.requires_grad());
  std::copy(flat.data().begin(), flat.data().end(), out.ptr());
  if (out.requires_grad()) {
    tape.record([flat, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gf = flat.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gf[i] += g[i];
    });
  }
  return out;
}

// Per-pixel softmax over the channel axis of an NCHW tensor.
inline Tensor softmax_channels(Tape& tape, Tensor x) {
  detail::require_ndim(x, 4, "softmax_channels");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (c < 1) throw ShapeError("softmax_channels: no channels");
  Tensor out = Tensor::zeros(x.shape(), tape.tracks({&x}));
  const double* xp = x.ptr();
  double* op = out.ptr();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t base = b * c * plane + p;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < c; ++k) mx = std::max(mx, xp[base + k * plane]);
      double z = 0.0;
      for (std::size_t k = 0; k < c; ++k) z += (op[base + k * plane] = std::exp(xp[base + k * plane] - mx));
      for (std::size_t k = 0; k < c; ++k) op[base + k * plane] /= z;
    }
  if (out.requires_grad()) {
    tape.record([x, out, n, c, plane]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      const double* y = out.ptr();
      double* gx = x.grad().data();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < plane; ++p) {
          const std::size_t base = b * c * plane + p;
          double dot = 0.0;
          for (std::size_t k = 0; k < c; ++k) dot += y[base + k * plane] * g[base + k * plane];
          for (std::size_t k = 0; k < c; ++k)
            gx[base + k * plane] += y[base + k * plane] * (g[base + k * plane] - dot);
        }
    });
  }
  return out;
}

struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

// Training mode normalizes with batch statistics (biased variance) and
// updates the running averages; eval mode uses the running averages.
inline Tensor batchnorm2d(Tape& tape, Tensor x, Tensor gamma, Tensor beta,
                          BatchNormState& state, bool training) {
  detail::require_ndim(x, 4, "batchnorm2d");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (gamma.numel() != c || beta.numel() != c || state.running_mean.size() != c)
    throw ShapeError("batchnorm2d: parameter size does not match channels");
  const double count = static_cast<double>(n * plane);
  std::vector<double> mu(c), inv_std(c);
  for (std::size_t k = 0; k < c; ++k) {
    if (training) {
      double s = 0.0, s2 = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < plane; ++p) s += x.ptr()[(b * c + k) * plane + p];
      mu[k] = s / count;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < plane; ++p) {
          const double d = x.ptr()[(b * c + k) * plane + p] - mu[k];
          s2 += d * d;
        }
      const double var = s2 / count;
      inv_std[k] = 1.0 / std::sqrt(var + state.eps);
      state.running_mean[k] = (1 - state.momentum) * state.running_mean[k] + state.momentum * mu[k];
      const double unbiased = count > 1 ? s2 / (count - 1) : var;
      state.running_var[k] = (1 - state.momentum) * state.running_var[k] + state.momentum * unbiased;
    } else {
      mu[k] = state.running_mean[k];
      inv_std[k] = 1.0 / std::sqrt(state.running_var[k] + state.eps);
    }
  }
  Tensor xhat = Tensor::zeros(x.shape());
  Tensor out = Tensor::zeros(x.shape(), tape.tracks({&x, &gamma, &beta}));
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t i = (b * c + k) * plane + p;
        xhat.ptr()[i] = (x.ptr()[i] - mu[k]) * inv_std[k];
        out.ptr()[i] = gamma.ptr()[k] * xhat.ptr()[i] + beta.ptr()[k];
      }
  if (out.requires_grad()) {
    tape.record([x, gamma, beta, out, xhat, inv_std, n, c, plane, training, count]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.grad().data();
      for (std::size_t k = 0; k < c; ++k) {
        double sg = 0.0, sgx = 0.0;
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t p = 0; p < plane; ++p) {
            const std::size_t i = (b * c + k) * plane + p;
            sg += g[i];
            sgx += g[i] * xhat.ptr()[i];
          }
        if (gamma.requires_grad()) gamma.grad()[k] += sgx;
        if (beta.requires_grad()) beta.grad()[k] += sg;
        if (!x.requires_grad()) continue;
        double* gx = x.grad().data();
        const double gk = gamma.ptr()[k];
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t p = 0; p < plane; ++p) {
            const std::size_t i = (b * c + k) * plane + p;
            if (training)
              gx[i] += gk * inv_std[k] * (g[i] - sg / count - xhat.ptr()[i] * sgx / count);
            else
              gx[i] += gk * inv_std[k] * g[i];
          }
      }
    });
  }
  return out;
}

// Row `index` of a (V, D) table as a length-D vector.
inline Tensor embedding_lookup(Tape& tape, Tensor table, std::size_t index) {
  detail::require_ndim(table, 2, "embedding_lookup");
  if (index >= table.dim(0))
    throw BoundsError("embedding index " + std::to_string(index) + " out of range for table of " +
                      std::to_string(table.dim(0)) + " rows");
  const std::size_t d = table.dim(1);
  Tensor out = Tensor::zeros({d}, tape.tracks({&table}));
  std::copy_n(table.ptr() + index * d, d, out.ptr());
  if (out.requires_grad()) {
    tape.record([table, out, index, d]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gt = table.grad();
      for (std::size_t j = 0; j < d; ++j) gt[index * d + j] += g[j];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference verification

// Largest |analytic - numeric| / max(|analytic|, |numeric|, floor) over the
// elements of x, with central differences of step eps.
inline double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& x,
                         double eps = 1e-4, double floor = 1e-6) {
  Tensor probe = x.clone();
  probe.set_requires_grad(true);
  probe.zero_grad();
  {
    Tape tape;
    Tensor y = f(tape, probe);
    tape.backward(y);
  }
  std::vector<double> analytic(probe.grad().begin(), probe.grad().end());
  if (analytic.empty()) analytic.assign(probe.numel(), 0.0);
  double worst = 0.0;
  Tensor shifted = x.clone();
  shifted.set_requires_grad(false);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = shifted.data()[i];
    shifted.data()[i] = orig + eps;
    Tape t1(Tape::Mode::inference);
    const double up = f(t1, shifted).item();
    shifted.data()[i] = orig - eps;
    Tape t2(Tape::Mode::inference);
    const double down = f(t2, shifted).item();
    shifted.data()[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

// Same check over a set of parameters that the loss closes over.
inline double grad_check_params(const std::function<Tensor(Tape&)>& loss, std::vector<Tensor> params,
                                double eps = 1e-4, double floor = 1e-6) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tape tape;
    Tensor y = loss(tape);
    tape.backward(y);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    if (p.has_grad())
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    else
      analytic.emplace_back(p.numel(), 0.0);
  }
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double orig = p.data()[i];
      p.data()[i] = orig + eps;
      Tape t1(Tape::Mode::inference);
      const double up = loss(t1).item();
      p.data()[i] = orig - eps;
      Tape t2(Tape::Mode::inference);
      const double down = loss(t2).item();
      p.data()[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double denom = std::max({std::abs(analytic[k][i]), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(analytic[k][i] - numeric) / denom);
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Serialization: "DFTN" magic, u32 version, u32 ndim, u64 dims, f64 payload,
// all little-endian.

namespace detail {

template <typename T>
void write_le(std::ostream& out, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T))) throw FormatError("truncated binary stream");
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace detail

inline constexpr std::uint32_t kTensorFormatVersion = 1;

inline void write_tensor(std::ostream& out, const Tensor& t) {
  out.write("DFTN", 4);
  detail::write_le<std::uint32_t>(out, kTensorFormatVersion);
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.ndim()));
  for (auto d : t.shape()) detail::write_le<std::uint64_t>(out, d);
  for (double v : t.data()) detail::write_le<double>(out, v);
}

inline Tensor read_tensor(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != "DFTN") throw FormatError("bad tensor magic");
  const auto version = detail::read_le<std::uint32_t>(in);
  if (version != kTensorFormatVersion) throw FormatError("unsupported tensor version " + std::to_string(version));
  const auto nd = detail::read_le<std::uint32_t>(in);
  if (nd > 8) throw FormatError("implausible tensor rank");
  Shape shape(nd);
  for (auto& d : shape) d = detail::read_le<std::uint64_t>(in);
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = detail::read_le<double>(in);
  return Tensor::from(std::move(shape), std::move(values));
}

}  // namespace dynaflow
