// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <type_traits>

#include <Eigen/Core>

#include "cladapter/errors.hpp"

namespace cladapter {

using Eigen::Index;

// Token matrices are stored row-major so each token is a contiguous row and
// flattened parameter order matches the on-disk layout.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrixd = Matrix<double>;
using Vectord = Vector<double>;

/// Learnable elementwise affine applied after normalization.
template <typename Scalar>
struct AffineNorm {
  Vector<Scalar> gain;
  Vector<Scalar> bias;
  Scalar eps = Scalar(1e-5);

  static AffineNorm identity(Index dim, Scalar eps = Scalar(1e-5)) {
    return {Vector<Scalar>::Ones(dim), Vector<Scalar>::Zero(dim), eps};
  }

  Index dim() const { return gain.size(); }
};

template <typename A, typename B>
void require_same_size(const A& a, const B& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(what) + ": " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

template <typename Derived>
void require_finite(const Eigen::DenseBase<Derived>& x, const char* what) {
  if (!x.allFinite()) throw NumericError(std::string(what) + ": non-finite value");
}

// ---------------------------------------------------------------------------
// Layer normalization (biased variance), applied independently to each row.

template <typename Scalar>
struct LayerNormCache {
  Matrix<Scalar> normalized;  // (x - mean) / std, before the affine
  Vector<Scalar> inv_std;     // one entry per row
};

template <typename Scalar>
Matrix<Scalar> layer_norm_rows(const Matrix<Scalar>& x, const AffineNorm<Scalar>& p,
                               LayerNormCache<Scalar>* cache = nullptr) {
  if (x.cols() != p.dim() || p.bias.size() != p.dim()) {
    throw ShapeError("layer_norm: feature width " + std::to_string(x.cols()) +
                     " does not match affine width " + std::to_string(p.dim()));
  }
  if (x.cols() < 1) throw ShapeError("layer_norm: empty feature dimension");
  const Scalar width = Scalar(x.cols());
  Matrix<Scalar> normalized(x.rows(), x.cols());
  Vector<Scalar> inv_std(x.rows());
  for (Index i = 0; i < x.rows(); ++i) {
    const Scalar mean = x.row(i).sum() / width;
    const auto centered = (x.row(i).array() - mean).eval();
    const Scalar var = centered.square().sum() / width;
    inv_std(i) = Scalar(1) / std::sqrt(var + p.eps);
    normalized.row(i) = centered * inv_std(i);
  }
  Matrix<Scalar> y =
      (normalized.array().rowwise() * p.gain.transpose().array()).rowwise() + p.bias.transpose().array();
  if (cache) *cache = {std::move(normalized), std::move(inv_std)};
  return y;
}

/// Vector-Jacobian product of layer_norm_rows. Parameter gradients are accumulated.
template <typename Scalar>
Matrix<Scalar> layer_norm_rows_vjp(const Matrix<Scalar>& dy, const AffineNorm<Scalar>& p,
                                   const LayerNormCache<Scalar>& cache, Vector<Scalar>& dgain,
                                   Vector<Scalar>& dbias) {
  require_same_size(dy, cache.normalized, "layer_norm_vjp");
  dgain += (dy.array() * cache.normalized.array()).colwise().sum().transpose().matrix();
  dbias += dy.colwise().sum().transpose();
  const Scalar width = Scalar(dy.cols());
  Matrix<Scalar> dx(dy.rows(), dy.cols());
  for (Index i = 0; i < dy.rows(); ++i) {
    const auto g = (dy.row(i).array() * p.gain.transpose().array()).eval();
    const Scalar mean_g = g.sum() / width;
    const Scalar mean_gx = (g * cache.normalized.row(i).array()).sum() / width;
    dx.row(i) = (g - mean_g - cache.normalized.row(i).array() * mean_gx) * cache.inv_std(i);
  }
  return dx;
}

template <typename Scalar>
Vector<Scalar> layer_norm(const Vector<Scalar>& x, const AffineNorm<Scalar>& p) {
  Matrix<Scalar> row = x.transpose();
  return layer_norm_rows(row, p).transpose();
}

// ---------------------------------------------------------------------------
// Softmax and friends

template <typename Scalar>
Vector<Scalar> softmax(const Vector<Scalar>& v) {
  if (v.size() < 1) throw ShapeError("softmax: empty input");
  require_finite(v, "softmax");
  Vector<Scalar> e = (v.array() - v.maxCoeff()).exp();
  return e / e.sum();
}

template <typename Scalar>
Vector<Scalar> softmax_vjp(const Vector<Scalar>& y, const Vector<Scalar>& dy) {
  require_same_size(y, dy, "softmax_vjp");
  return y.array() * (dy.array() - y.dot(dy));
}

template <typename Scalar>
Scalar log_sum_exp(const Vector<Scalar>& v) {
  require_finite(v, "log_sum_exp");
  const Scalar m = v.maxCoeff();
  return m + std::log((v.array() - m).exp().sum());
}

// ---------------------------------------------------------------------------
// GELU, exact erf form

template <typename Scalar>
  requires std::is_floating_point_v<Scalar>
Scalar gelu(Scalar x) {
  return Scalar(0.5) * x * (Scalar(1) + std::erf(x / std::sqrt(Scalar(2))));
}

template <typename Scalar>
  requires std::is_floating_point_v<Scalar>
Scalar gelu_derivative(Scalar x) {
  const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x / std::sqrt(Scalar(2))));
  const Scalar pdf = std::exp(Scalar(-0.5) * x * x) / std::sqrt(Scalar(2) * Scalar(M_PI));
  return cdf + x * pdf;
}

template <typename Derived>
auto gelu(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  return x.unaryExpr([](Scalar v) { return gelu(v); });
}

template <typename Derived>
auto gelu_derivative(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  return x.unaryExpr([](Scalar v) { return gelu_derivative(v); });
}

// ---------------------------------------------------------------------------
// L2 normalization with a floor on the norm

template <typename Scalar>
Vector<Scalar> l2_normalize(const Vector<Scalar>& v, Scalar eps) {
  return v / std::max(v.norm(), eps);
}

template <typename Scalar>
Vector<Scalar> l2_normalize_vjp(const Vector<Scalar>& v, Scalar eps, const Vector<Scalar>& dy) {
  require_same_size(v, dy, "l2_normalize_vjp");
  const Scalar n = v.norm();
  if (n < eps) return dy / eps;
  const Vector<Scalar> u = v / n;
  return (dy - u * u.dot(dy)) / n;
}

// ---------------------------------------------------------------------------
// Central-difference gradient checking

struct GradCheckResult {
  double max_rel_error = 0.0;
  Index worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares `analytic` against (f(p+h e_i) - f(p-h e_i)) / 2h for i in [begin, end).
/// The relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
template <typename Scalar, typename Fn>
GradCheckResult grad_check(Fn&& f, Vector<Scalar> params, const Vector<Scalar>& analytic, Scalar h,
                           Index begin = 0, Index end = -1) {
  if (!(h > Scalar(0))) throw ArgumentError("grad_check: step must be positive");
  require_same_size(params, analytic, "grad_check");
  if (end < 0) end = params.size();
  if (begin < 0 || end > params.size() || begin > end) throw ArgumentError("grad_check: bad index range");
  GradCheckResult result;
  for (Index i = begin; i < end; ++i) {
    const Scalar saved = params(i);
    params(i) = saved + h;
    const Scalar plus = f(static_cast<const Vector<Scalar>&>(params));
    params(i) = saved - h;
    const Scalar minus = f(static_cast<const Vector<Scalar>&>(params));
    params(i) = saved;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      throw NumericError("grad_check: non-finite function value at coordinate " + std::to_string(i));
    }
    const double numeric = double((plus - minus) / (Scalar(2) * h));
    const double a = double(analytic(i));
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > result.max_rel_error || result.worst_index < 0) {
      result = {std::max(rel, result.max_rel_error), i, a, numeric};
    }
  }
  return result;
}

}  // namespace cladapter
