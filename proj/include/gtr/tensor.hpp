#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gtr/common.hpp"
#include "gtr/graph.hpp"

namespace gtr {

using Shape = std::vector<std::size_t>;  // rank 1 (vector) or 2 (matrix)

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

namespace detail {

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool& check_numerics_flag() {
  thread_local bool enabled = false;
  return enabled;
}

inline std::uint64_t& visit_epoch_counter() {
  thread_local std::uint64_t epoch = 0;
  return epoch;
}

template <typename Real>
struct TensorNode {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::string name;  // set for named parameters
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backprop;
  std::uint64_t visit_epoch = 0;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), Real(0));
  }
};

}  // namespace detail

/// Disables tape recording in the current scope (inference mode).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled_flag()) {
    detail::grad_enabled_flag() = false;
  }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// When on, every operation validates its output for NaN/Inf and throws a
/// NumericError naming the op. Off by default; NaNs otherwise surface at
/// loss time.
inline void set_check_numerics(bool on) { detail::check_numerics_flag() = on; }

// ---------------------------------------------------------------------------
// Tensor: a value-semantics handle onto a tape node. Dense, row-major,
// rank 1 or 2. Gradients accumulate into `grad()` during backward().
// ---------------------------------------------------------------------------

template <typename Real>
class Tensor {
 public:
  using Node = detail::TensorNode<Real>;

  Tensor() = default;

  static Tensor from(Shape shape, std::vector<Real> values) {
    if (shape.empty() || shape.size() > 2) {
      throw DimensionError(str_cat("tensor rank must be 1 or 2, got shape ",
                                   shape_str(shape)));
    }
    if (shape_numel(shape) != values.size()) {
      throw DimensionError(str_cat("shape ", shape_str(shape), " needs ",
                                   shape_numel(shape), " values, got ",
                                   values.size()));
    }
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(values);
    return t;
  }

  static Tensor zeros(Shape shape) {
    auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<Real>(n, Real(0)));
  }

  static Tensor vector(std::vector<Real> values) {
    Shape s{values.size()};
    return from(std::move(s), std::move(values));
  }

  static Tensor scalar(Real v) { return from({1}, {v}); }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<Real> values) {
    return from({rows, cols}, std::move(values));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rows() const {
    return rank() == 2 ? node_->shape[0] : std::size_t{1};
  }
  std::size_t cols() const {
    return rank() == 2 ? node_->shape[1] : node_->shape[0];
  }

  std::vector<Real>& value() { return node_->value; }
  const std::vector<Real>& value() const { return node_->value; }
  std::vector<Real>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return !node_->grad.empty(); }

  Real at(std::size_t i) const { return node_->value[i]; }
  Real at(std::size_t r, std::size_t c) const {
    return node_->value[r * cols() + c];
  }
  Real scalar_value() const {
    if (size() != 1) {
      throw DimensionError(str_cat("expected scalar, got shape ",
                                   shape_str(shape())));
    }
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    node_->requires_grad = on;
    return *this;
  }
  Tensor& set_name(std::string name) {
    node_->name = std::move(name);
    return *this;
  }
  const std::string& name() const { return node_->name; }
  const char* op() const { return node_->op; }

  void zero_grad() {
    if (!node_->grad.empty()) {
      std::fill(node_->grad.begin(), node_->grad.end(), Real(0));
    }
  }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename Real>
Tensor<Real> make_op(const char* op, Shape shape, std::vector<Real> values,
                     std::initializer_list<Tensor<Real>> inputs,
                     std::function<void()> (*bind)(TensorNode<Real>*,
                                                   std::vector<TensorNode<Real>*>) = nullptr) {
  (void)bind;
  Tensor<Real> out = Tensor<Real>::from(std::move(shape), std::move(values));
  out.node()->op = op;
  bool needs = false;
  if (grad_enabled_flag()) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    out.node()->requires_grad = true;
    for (const auto& t : inputs) out.node()->parents.push_back(t.node());
  }
  if (check_numerics_flag()) {
    for (Real v : out.node()->value) {
      if (!std::isfinite(v)) {
        throw NumericError(str_cat("non-finite value produced by op '", op, "'"));
      }
    }
  }
  return out;
}

template <typename Real>
using EMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MapM = Eigen::Map<EMat<Real>>;
template <typename Real>
using CMapM = Eigen::Map<const EMat<Real>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Core dense ops. Each records its backward rule on the tape.
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw DimensionError(str_cat("matmul: incompatible shapes ",
                                 shape_str(a.shape()), " x ",
                                 shape_str(b.shape())));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<Real> out(m * n);
  {
    detail::CMapM<Real> A(a.value().data(), m, k), B(b.value().data(), k, n);
    detail::MapM<Real> C(out.data(), m, n);
    C.noalias() = A * B;
  }
  auto t = detail::make_op<Real>("matmul", {m, n}, std::move(out), {a, b});
  if (t.requires_grad()) {
    auto* on = t.node().get();
    auto an = a.node(), bn = b.node();
    t.node()->backprop = [on, an, bn, m, k, n]() {
      detail::CMapM<Real> G(on->grad.data(), m, n);
      if (an->requires_grad) {
        an->ensure_grad();
        detail::CMapM<Real> B(bn->value.data(), k, n);
        detail::MapM<Real> dA(an->grad.data(), m, k);
        dA.noalias() += G * B.transpose();
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        detail::CMapM<Real> A(an->value.data(), m, k);
        detail::MapM<Real> dB(bn->grad.data(), k, n);
        dB.noalias() += A.transpose() * G;
      }
    };
  }
  return t;
}

namespace detail {

template <typename Real, typename Fwd, typename Bwd>
Tensor<Real> elementwise_binary(const char* opname, const Tensor<Real>& a,
                                const Tensor<Real>& b, Fwd fwd, Bwd bwd) {
  if (a.shape() != b.shape()) {
    throw DimensionError(str_cat(opname, ": shape mismatch ",
                                 shape_str(a.shape()), " vs ",
                                 shape_str(b.shape())));
  }
  std::vector<Real> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = fwd(a.value()[i], b.value()[i]);
  }
  auto t = make_op<Real>(opname, a.shape(), std::move(out), {a, b});
  if (t.requires_grad()) {
    auto* on = t.node().get();
    auto an = a.node(), bn = b.node();
    t.node()->backprop = [on, an, bn, bwd]() {
      const bool da = an->requires_grad, db = bn->requires_grad;
      if (da) an->ensure_grad();
      if (db) bn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        auto [ga, gb] = bwd(an->value[i], bn->value[i]);
        if (da) an->grad[i] += on->grad[i] * ga;
        if (db) bn->grad[i] += on->grad[i] * gb;
      }
    };
  }
  return t;
}

}  // namespace detail

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::elementwise_binary<Real>(
      "add", a, b, [](Real x, Real y) { return x + y; },
      [](Real, Real) { return std::pair<Real, Real>(1, 1); });
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::elementwise_binary<Real>(
      "sub", a, b, [](Real x, Real y) { return x - y; },
      [](Real, Real) { return std::pair<Real, Real>(1, -1); });
}

template <typename Real>
Tensor<Real> hadamard(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::elementwise_binary<Real>(
      "hadamard", a, b, [](Real x, Real y) { return x * y; },
      [](Real x, Real y) { return std::pair<Real, Real>(y, x); });
}

/// out[i,j] = m[i,j] + bias[j]; bias is rank 1.
template <typename Real>
Tensor<Real> add_bias(const Tensor<Real>& m, const Tensor<Real>& bias) {
  if (m.rank() != 2 || bias.rank() != 1 || bias.size() != m.cols()) {
    throw DimensionError(str_cat("add_bias: shapes ", shape_str(m.shape()),
                                 " vs ", shape_str(bias.shape())));
  }
  const std::size_t r = m.rows(), c = m.cols();
  std::vector<Real> out(m.value());
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += bias.value()[j];
  }
  auto t = detail::make_op<Real>("add_bias", m.shape(), std::move(out),
                                 {m, bias});
  if (t.requires_grad()) {
    auto* on = t.node().get();
    auto mn = m.node(), bn = bias.node();
    t.node()->backprop = [on, mn, bn, r, c]() {
      if (mn->requires_grad) {
        mn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) {
          mn->grad[i] += on->grad[i];
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) {
            bn->grad[j] += on->grad[i * c + j];
          }
        }
      }
    };
  }
  return t;
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real factor) {
  std::vector<Real> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * factor;
  auto t = detail::make_op<Real>("scale", a.shape(), std::move(out), {a});
  if (t.requires_grad()) {
    auto* on = t.node().get();
    auto an = a.node();
    t.node()->backprop = [on, an, factor]() {
      an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        an->grad[i] += on->grad[i] * factor;
      }
    };
  }
  return t;
}

/// Column-wise concatenation of matrices sharing a row count.
template <typename Real>
Tensor<Real> concat_cols(const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t r = parts.front().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.rows() != r) {
      throw DimensionError(str_cat("concat_cols: shape ", shape_str(p.shape()),
                                   " does not match ", r, " rows"));
    }
    total += p.cols();
  }
  std::vector<Real> out(r * total);
  std::size_t col0 = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.cols();
    for (std::size_t i = 0; i < r; ++i) {
      std::copy_n(p.value().data() + i * c, c, out.data() + i * total + col0);
    }
    col0 += c;
  }
  Tensor<Real> t = Tensor<Real>::from({r, total}, std::move(out));
  t.node()->op = "concat_cols";
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parts) needs = needs || p.requires_grad();
  }
  if (needs) {
    t.node()->requires_grad = true;
    for (const auto& p : parts) t.node()->parents.push_back(p.node());
    auto* on = t.node().get();
    std::vector<std::size_t> widths;
    for (const auto& p : parts) widths.push_back(p.cols());
    t.node()->backprop = [on, widths, r, total]() {
      std::size_t col0 = 0;
      for (std::size_t pi = 0; pi < on->parents.size(); ++pi) {
        auto& par = *on->parents[pi];
        const std::size_t c = widths[pi];
        if (par.requires_grad) {
          par.ensure_grad();
          for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
              par.grad[i * c + j] += on->grad[i * total + col0 + j];
            }
          }
        }
        col0 += c;
      }
    };
  }
  return t;
}

/// Repeats a 1xD row (or rank-1 vector) N times into an NxD matrix.
template <typename Real>
Tensor<Real> tile_rows(const Tensor<Real>& row, std::size_t n) {
  const std::size_t d = row.cols();
  if (row.rows() != 1) {
    throw DimensionError(str_cat("tile_rows: expected a single row, got ",
                                 shape_str(row.shape())));
  }
  std::vector<Real> out(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(row.value().data(), d, out.data() + i * d);
  }
  auto t = detail::make_op<Real>("tile_rows", {n, d}, std::move(out), {row});
  if (t.requires_grad()) {
    auto* on = t.node().get();
    auto rn = row.node();
    t.node()->backprop = [on, rn, n, d]() {
      rn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
          rn->grad[j] += on->grad[i * d + j];
        }
      }
    };
  }
  return t;
}

template <typename Real>
Tensor<Real> mean_all(const Tensor<Real>& a) {
  const std::size_t n = a.size();
  Real acc = 0;
  for (Real v : a.value()) acc += v;
  auto t = detail::make_op<Real>("mean_all", {1}, {acc / Real(n)}, {a});
  if (t.requires_grad()) {
    auto* on = t.node().get();
    auto an = a.node();
    t.node()->backprop = [on, an, n]() {
      an->ensure_grad();
      const Real g = on->grad[0] / Real(n);
      for (std::size_t i = 0; i < n; ++i) an->grad[i] += g;
    };
  }
  return t;
}

/// Mean over one axis of a matrix: axis 0 averages rows away (result has
/// `cols` entries), axis 1 averages columns away (result has `rows` entries).
template <typename Real>
Tensor<Real> mean_axis(const Tensor<Real>& a, int axis) {
  if (a.rank() != 2 || (axis != 0 && axis != 1)) {
    throw DimensionError(str_cat("mean_axis: axis ", axis, " on shape ",
                                 shape_str(a.shape())));
  }
  const std::size_t r = a.rows(), c = a.cols();
  const std::size_t out_n = axis == 0 ? c : r;
  const Real denom = Real(axis == 0 ? r : c);
  std::vector<Real> out(out_n, Real(0));
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      out[axis == 0 ? j : i] += a.value()[i * c + j];
    }
  }
  for (Real& v : out) v /= denom;
  auto t = detail::make_op<Real>("mean_axis", {out_n}, std::move(out), {a});
  if (t.requires_grad()) {
    auto* on = t.node().get();
    auto an = a.node();
    t.node()->backprop = [on, an, r, c, axis, denom]() {
      an->ensure_grad();
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          an->grad[i * c + j] += on->grad[axis == 0 ? j : i] / denom;
        }
      }
    };
  }
  return t;
}

template <typename Real>
Tensor<Real> leaky_relu(const Tensor<Real>& a, Real slope) {
  if (!(slope > Real(0) && slope < Real(1))) {
    throw ConfigError(str_cat("leaky_relu: slope must be in (0,1), got ",
                              slope));
  }
  std::vector<Real> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Real x = a.value()[i];
    out[i] = x >= Real(0) ? x : slope * x;
  }
  auto t = detail::make_op<Real>("leaky_relu", a.shape(), std::move(out), {a});
  if (t.requires_grad()) {
    auto* on = t.node().get();
    auto an = a.node();
    t.node()->backprop = [on, an, slope]() {
      an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        an->grad[i] += on->grad[i] *
                       (an->value[i] >= Real(0) ? Real(1) : slope);
      }
    };
  }
  return t;
}

template <typename Real>
Tensor<Real> tanh_op(const Tensor<Real>& a) {
  std::vector<Real> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::tanh(a.value()[i]);
  }
  auto t = detail::make_op<Real>("tanh", a.shape(), std::move(out), {a});
  if (t.requires_grad()) {
    auto* on = t.node().get();
    auto an = a.node();
    t.node()->backprop = [on, an]() {
      an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const Real y = on->value[i];
        an->grad[i] += on->grad[i] * (Real(1) - y * y);
      }
    };
  }
  return t;
}

/// LayerNorm over the last axis with learned gain/bias, population variance:
/// y = (x - mean) / sqrt(var + eps) * gain + bias, row by row.
template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain,
                        const Tensor<Real>& bias, Real eps) {
  const std::size_t r = x.rows(), c = x.cols();
  if (gain.rank() != 1 || bias.rank() != 1 || gain.size() != c ||
      bias.size() != c) {
    throw DimensionError(str_cat("layer_norm: x ", shape_str(x.shape()),
                                 ", gain ", shape_str(gain.shape()), ", bias ",
                                 shape_str(bias.shape())));
  }
  if (!(eps > Real(0))) throw ConfigError("layer_norm: eps must be > 0");
  std::vector<Real> out(x.size());
  auto xhat = std::make_shared<std::vector<Real>>(x.size());
  auto inv_std = std::make_shared<std::vector<Real>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    const Real* row = x.value().data() + i * c;
    Real mean = 0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= Real(c);
    Real var = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const Real d = row[j] - mean;
      var += d * d;
    }
    var /= Real(c);
    const Real s = Real(1) / std::sqrt(var + eps);
    (*inv_std)[i] = s;
    for (std::size_t j = 0; j < c; ++j) {
      const Real h = (row[j] - mean) * s;
      (*xhat)[i * c + j] = h;
      out[i * c + j] = h * gain.value()[j] + bias.value()[j];
    }
  }
  auto t = detail::make_op<Real>("layer_norm", x.shape(), std::move(out),
                                 {x, gain, bias});
  if (t.requires_grad()) {
    auto* on = t.node().get();
    auto xn = x.node(), gn = gain.node(), bn = bias.node();
    t.node()->backprop = [on, xn, gn, bn, xhat, inv_std, r, c]() {
      if (gn->requires_grad) gn->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      if (xn->requires_grad) xn->ensure_grad();
      for (std::size_t i = 0; i < r; ++i) {
        const Real* g = on->grad.data() + i * c;
        const Real* h = xhat->data() + i * c;
        if (gn->requires_grad || bn->requires_grad) {
          for (std::size_t j = 0; j < c; ++j) {
            if (gn->requires_grad) gn->grad[j] += g[j] * h[j];
            if (bn->requires_grad) bn->grad[j] += g[j];
          }
        }
        if (xn->requires_grad) {
          // dxhat = g * gain; dx = s*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
          Real mean_dh = 0, mean_dh_h = 0;
          for (std::size_t j = 0; j < c; ++j) {
            const Real dh = g[j] * gn->value[j];
            mean_dh += dh;
            mean_dh_h += dh * h[j];
          }
          mean_dh /= Real(c);
          mean_dh_h /= Real(c);
          const Real s = (*inv_std)[i];
          for (std::size_t j = 0; j < c; ++j) {
            const Real dh = g[j] * gn->value[j];
            xn->grad[i * c + j] += s * (dh - mean_dh - h[j] * mean_dh_h);
          }
        }
      }
    };
  }
  return t;
}

/// Numerically stable softmax; rank 1 normalizes the whole vector, rank 2
/// normalizes each row.
template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& x) {
  if (x.size() == 0) throw DimensionError("softmax: empty input");
  const std::size_t r = x.rank() == 2 ? x.rows() : 1;
  const std::size_t c = x.rank() == 2 ? x.cols() : x.size();
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    const Real* row = x.value().data() + i * c;
    Real mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    Real denom = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const Real e = std::exp(row[j] - mx);
      out[i * c + j] = e;
      denom += e;
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= denom;
  }
  auto t = detail::make_op<Real>("softmax", x.shape(), std::move(out), {x});
  if (t.requires_grad()) {
    auto* on = t.node().get();
    auto xn = x.node();
    t.node()->backprop = [on, xn, r, c]() {
      xn->ensure_grad();
      for (std::size_t i = 0; i < r; ++i) {
        const Real* y = on->value.data() + i * c;
        const Real* g = on->grad.data() + i * c;
        Real dot = 0;
        for (std::size_t j = 0; j < c; ++j) dot += y[j] * g[j];
        for (std::size_t j = 0; j < c; ++j) {
          xn->grad[i * c + j] += y[j] * (g[j] - dot);
        }
      }
    };
  }
  return t;
}

/// Inverted dropout: zero with probability p, scale survivors by 1/(1-p).
/// Identity when `training` is false or p == 0.
template <typename Real>
Tensor<Real> dropout(const Tensor<Real>& x, Real p, bool training, Rng& rng) {
  if (!(p >= Real(0) && p < Real(1))) {
    throw ConfigError(str_cat("dropout: p must be in [0,1), got ", p));
  }
  if (!training || p == Real(0)) return x;
  const Real keep = Real(1) - p;
  auto mask = std::make_shared<std::vector<Real>>(x.size());
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Real m = rng.next_unit() < static_cast<double>(p)
                       ? Real(0)
                       : Real(1) / keep;
    (*mask)[i] = m;
    out[i] = x.value()[i] * m;
  }
  auto t = detail::make_op<Real>("dropout", x.shape(), std::move(out), {x});
  if (t.requires_grad()) {
    auto* on = t.node().get();
    auto xn = x.node();
    t.node()->backprop = [on, xn, mask]() {
      xn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        xn->grad[i] += on->grad[i] * (*mask)[i];
      }
    };
  }
  return t;
}

/// Elementwise max over matrix rows. `argmax[j]` is the lowest row index
/// attaining the max in column j (ties break toward the lower index).
template <typename Real>
struct PoolResult {
  Tensor<Real> pooled;               // 1 x cols
  std::vector<std::size_t> argmax;   // per column
};

template <typename Real>
PoolResult<Real> max_over_rows(const Tensor<Real>& m) {
  if (m.rank() != 2 || m.rows() == 0) {
    throw DimensionError(str_cat("max_over_rows: need a non-empty matrix, got ",
                                 shape_str(m.shape())));
  }
  const std::size_t r = m.rows(), c = m.cols();
  std::vector<Real> out(m.value().begin(), m.value().begin() + c);
  std::vector<std::size_t> argmax(c, 0);
  for (std::size_t i = 1; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const Real v = m.value()[i * c + j];
      if (v > out[j]) {
        out[j] = v;
        argmax[j] = i;
      }
    }
  }
  auto t = detail::make_op<Real>("max_over_rows", {std::size_t{1}, c},
                                 std::move(out), {m});
  if (t.requires_grad()) {
    auto* on = t.node().get();
    auto mn = m.node();
    auto winners = argmax;
    t.node()->backprop = [on, mn, winners, c]() {
      mn->ensure_grad();
      for (std::size_t j = 0; j < c; ++j) {
        mn->grad[winners[j] * c + j] += on->grad[j];
      }
    };
  }
  return {t, std::move(argmax)};
}

/// Packs scalar tensors into one rank-1 tensor.
template <typename Real>
Tensor<Real> stack_scalars(const std::vector<Tensor<Real>>& scalars) {
  if (scalars.empty()) throw DimensionError("stack_scalars: no inputs");
  std::vector<Real> out;
  out.reserve(scalars.size());
  for (const auto& s : scalars) out.push_back(s.scalar_value());
  Tensor<Real> t = Tensor<Real>::vector(std::move(out));
  t.node()->op = "stack_scalars";
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& s : scalars) needs = needs || s.requires_grad();
  }
  if (needs) {
    t.node()->requires_grad = true;
    for (const auto& s : scalars) t.node()->parents.push_back(s.node());
    auto* on = t.node().get();
    t.node()->backprop = [on]() {
      for (std::size_t i = 0; i < on->parents.size(); ++i) {
        auto& par = *on->parents[i];
        if (!par.requires_grad) continue;
        par.ensure_grad();
        par.grad[0] += on->grad[i];
      }
    };
  }
  return t;
}

/// Negative log-softmax probability of the element at `gold`:
/// loss = logsumexp(scores) - scores[gold].
template <typename Real>
Tensor<Real> nll_from_scores(const Tensor<Real>& scores, std::size_t gold) {
  if (scores.rank() != 1 || scores.size() == 0 || gold >= scores.size()) {
    throw DimensionError(str_cat("nll_from_scores: scores ",
                                 shape_str(scores.shape()), ", gold index ",
                                 gold));
  }
  const std::size_t n = scores.size();
  Real mx = scores.value()[0];
  for (Real v : scores.value()) mx = std::max(mx, v);
  Real denom = 0;
  for (Real v : scores.value()) denom += std::exp(v - mx);
  const Real lse = mx + std::log(denom);
  auto t = detail::make_op<Real>("nll", {1}, {lse - scores.value()[gold]},
                                 {scores});
  if (t.requires_grad()) {
    auto* on = t.node().get();
    auto sn = scores.node();
    t.node()->backprop = [on, sn, gold, mx, denom, n]() {
      sn->ensure_grad();
      const Real g = on->grad[0];
      for (std::size_t i = 0; i < n; ++i) {
        const Real p = std::exp(sn->value[i] - mx) / denom;
        sn->grad[i] += g * (p - (i == gold ? Real(1) : Real(0)));
      }
    };
  }
  return t;
}

// ---------------------------------------------------------------------------
// Graph message-passing ops. The NeighborIndex is a CSR view over in-edges,
// destination by destination, with self-loops injected; attention neighbor-
// hoods are therefore never empty.
// ---------------------------------------------------------------------------

struct NeighborIndex {
  std::size_t num_nodes = 0;
  std::vector<std::size_t> offsets;  // num_nodes + 1
  std::vector<std::size_t> src;      // in-neighbors incl. self, per destination
  std::vector<std::size_t> dst;      // parallel to src

  std::size_t num_entries() const { return src.size(); }
};

/// Neighborhoods keep insertion order (self first, then stored edges in edge
/// list order) rather than sorting by node id. Relabeling the nodes of a
/// graph while renaming its edge list in place then preserves each node's
/// accumulation order, which keeps encoder outputs exactly permutation
/// equivariant at the floating-point level.
inline std::shared_ptr<const NeighborIndex> build_neighbor_index(
    const TabularGraph& g) {
  const std::size_t n = g.node_count();
  std::vector<std::vector<std::size_t>> in(n);
  for (std::size_t i = 0; i < n; ++i) in[i].push_back(i);  // self-loop
  for (const auto& [src, dst] : g.edges) {
    if (src >= n || dst >= n) {
      throw DataError(str_cat("graph '", g.origin, "': edge (", src, ",", dst,
                              ") out of range for ", n, " nodes"));
    }
    bool seen = false;
    for (std::size_t j : in[dst]) {
      if (j == src) {
        seen = true;
        break;
      }
    }
    if (!seen) in[dst].push_back(src);
  }
  auto idx = std::make_shared<NeighborIndex>();
  idx->num_nodes = n;
  idx->offsets.assign(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) {
    idx->offsets[i + 1] = idx->offsets[i] + in[i].size();
    for (std::size_t j : in[i]) {
      idx->src.push_back(j);
      idx->dst.push_back(i);
    }
  }
  return idx;
}

/// Additive attention logits per (dst, src) entry:
///   e_k = LeakyReLU( w[0:dh] . K[dst_k] + w[dh:2dh] . K[src_k] )
template <typename Real>
Tensor<Real> edge_scores(const Tensor<Real>& keys, const Tensor<Real>& w,
                         std::shared_ptr<const NeighborIndex> idx, Real slope) {
  const std::size_t dh = keys.cols();
  if (keys.rank() != 2 || keys.rows() != idx->num_nodes) {
    throw DimensionError(str_cat("edge_scores: keys ", shape_str(keys.shape()),
                                 " vs ", idx->num_nodes, " nodes"));
  }
  if (w.rank() != 1 || w.size() != 2 * dh) {
    throw DimensionError(str_cat("edge_scores: attention vector ",
                                 shape_str(w.shape()), " vs head dim ", dh));
  }
  const std::size_t e = idx->num_entries();
  // Per-node dot products with both halves of w; logits are sums of pairs.
  std::vector<Real> dst_dot(idx->num_nodes, 0), src_dot(idx->num_nodes, 0);
  for (std::size_t i = 0; i < idx->num_nodes; ++i) {
    const Real* row = keys.value().data() + i * dh;
    Real a = 0, b = 0;
    for (std::size_t d = 0; d < dh; ++d) {
      a += w.value()[d] * row[d];
      b += w.value()[dh + d] * row[d];
    }
    dst_dot[i] = a;
    src_dot[i] = b;
  }
  auto pre = std::make_shared<std::vector<Real>>(e);
  std::vector<Real> out(e);
  for (std::size_t k = 0; k < e; ++k) {
    const Real z = dst_dot[idx->dst[k]] + src_dot[idx->src[k]];
    (*pre)[k] = z;
    out[k] = z >= Real(0) ? z : slope * z;
  }
  auto t = detail::make_op<Real>("edge_scores", {e}, std::move(out), {keys, w});
  if (t.requires_grad()) {
    auto* on = t.node().get();
    auto kn = keys.node(), wn = w.node();
    t.node()->backprop = [on, kn, wn, idx, pre, dh, slope]() {
      if (kn->requires_grad) kn->ensure_grad();
      if (wn->requires_grad) wn->ensure_grad();
      for (std::size_t k = 0; k < on->grad.size(); ++k) {
        const Real dz = on->grad[k] *
                        ((*pre)[k] >= Real(0) ? Real(1) : slope);
        if (dz == Real(0)) continue;
        const std::size_t i = idx->dst[k], j = idx->src[k];
        const Real* ki = kn->value.data() + i * dh;
        const Real* kj = kn->value.data() + j * dh;
        for (std::size_t d = 0; d < dh; ++d) {
          if (wn->requires_grad) {
            wn->grad[d] += dz * ki[d];
            wn->grad[dh + d] += dz * kj[d];
          }
          if (kn->requires_grad) {
            kn->grad[i * dh + d] += dz * wn->value[d];
            kn->grad[j * dh + d] += dz * wn->value[dh + d];
          }
        }
      }
    };
  }
  return t;
}

/// Softmax within each destination's neighborhood segment.
template <typename Real>
Tensor<Real> segment_softmax(const Tensor<Real>& logits,
                             std::shared_ptr<const NeighborIndex> idx) {
  if (logits.rank() != 1 || logits.size() != idx->num_entries()) {
    throw DimensionError(str_cat("segment_softmax: logits ",
                                 shape_str(logits.shape()), " vs ",
                                 idx->num_entries(), " entries"));
  }
  std::vector<Real> out(logits.size());
  for (std::size_t i = 0; i < idx->num_nodes; ++i) {
    const std::size_t lo = idx->offsets[i], hi = idx->offsets[i + 1];
    Real mx = logits.value()[lo];
    for (std::size_t k = lo + 1; k < hi; ++k) {
      mx = std::max(mx, logits.value()[k]);
    }
    Real denom = 0;
    for (std::size_t k = lo; k < hi; ++k) {
      out[k] = std::exp(logits.value()[k] - mx);
      denom += out[k];
    }
    for (std::size_t k = lo; k < hi; ++k) out[k] /= denom;
  }
  auto t = detail::make_op<Real>("segment_softmax", logits.shape(),
                                 std::move(out), {logits});
  if (t.requires_grad()) {
    auto* on = t.node().get();
    auto ln = logits.node();
    t.node()->backprop = [on, ln, idx]() {
      ln->ensure_grad();
      for (std::size_t i = 0; i < idx->num_nodes; ++i) {
        const std::size_t lo = idx->offsets[i], hi = idx->offsets[i + 1];
        Real dot = 0;
        for (std::size_t k = lo; k < hi; ++k) {
          dot += on->value[k] * on->grad[k];
        }
        for (std::size_t k = lo; k < hi; ++k) {
          ln->grad[k] += on->value[k] * (on->grad[k] - dot);
        }
      }
    };
  }
  return t;
}

/// out[i,:] = sum over neighborhood entries k of node i: alpha[k] * M[src_k,:]
template <typename Real>
Tensor<Real> segment_weighted_sum(const Tensor<Real>& alpha,
                                  const Tensor<Real>& messages,
                                  std::shared_ptr<const NeighborIndex> idx) {
  const std::size_t dh = messages.cols();
  if (alpha.rank() != 1 || alpha.size() != idx->num_entries() ||
      messages.rank() != 2 || messages.rows() != idx->num_nodes) {
    throw DimensionError(str_cat("segment_weighted_sum: alpha ",
                                 shape_str(alpha.shape()), ", messages ",
                                 shape_str(messages.shape()), ", entries ",
                                 idx->num_entries()));
  }
  std::vector<Real> out(idx->num_nodes * dh, Real(0));
  for (std::size_t k = 0; k < idx->num_entries(); ++k) {
    const Real a = alpha.value()[k];
    const Real* m = messages.value().data() + idx->src[k] * dh;
    Real* o = out.data() + idx->dst[k] * dh;
    for (std::size_t d = 0; d < dh; ++d) o[d] += a * m[d];
  }
  auto t = detail::make_op<Real>("segment_weighted_sum",
                                 {idx->num_nodes, dh}, std::move(out),
                                 {alpha, messages});
  if (t.requires_grad()) {
    auto* on = t.node().get();
    auto an = alpha.node(), mn = messages.node();
    t.node()->backprop = [on, an, mn, idx, dh]() {
      if (an->requires_grad) an->ensure_grad();
      if (mn->requires_grad) mn->ensure_grad();
      for (std::size_t k = 0; k < idx->num_entries(); ++k) {
        const std::size_t i = idx->dst[k], j = idx->src[k];
        const Real* g = on->grad.data() + i * dh;
        const Real* m = mn->value.data() + j * dh;
        if (an->requires_grad) {
          Real acc = 0;
          for (std::size_t d = 0; d < dh; ++d) acc += g[d] * m[d];
          an->grad[k] += acc;
        }
        if (mn->requires_grad) {
          const Real a = an->value[k];
          Real* dm = mn->grad.data() + j * dh;
          for (std::size_t d = 0; d < dh; ++d) dm[d] += a * g[d];
        }
      }
    };
  }
  return t;
}

// ---------------------------------------------------------------------------
// Reverse-mode accumulation
// ---------------------------------------------------------------------------

/// Runs reverse-mode accumulation from a scalar loss. Gradients accumulate
/// into every reachable tensor with requires_grad set. Returns the visit
/// epoch used, so callers can tell which named parameters were reached.
template <typename Real>
std::uint64_t backward(const Tensor<Real>& loss) {
  if (loss.size() != 1) {
    throw DimensionError(str_cat("backward: loss must be scalar, got ",
                                 shape_str(loss.shape())));
  }
  if (!std::isfinite(loss.scalar_value())) {
    throw NumericError(str_cat("backward: non-finite loss (op '", loss.op(),
                               "')"));
  }
  const std::uint64_t epoch = ++detail::visit_epoch_counter();
  using Node = detail::TensorNode<Real>;

  // Iterative post-order DFS over grad-requiring ancestry.
  std::vector<Node*> order;
  std::vector<std::pair<Node*, std::size_t>> stack;
  auto push = [&](Node* n) {
    if (n->visit_epoch != epoch && n->requires_grad) {
      n->visit_epoch = epoch;
      stack.emplace_back(n, 0);
    }
  };
  push(loss.node().get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      push(p);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  if (loss.requires_grad()) {
    loss.node()->ensure_grad();
    loss.node()->grad[0] += Real(1);
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && !n->grad.empty()) n->backprop();
  }
  return epoch;
}

}  // namespace gtr
