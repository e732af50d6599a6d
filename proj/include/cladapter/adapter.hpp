// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <type_traits>
#include <vector>

#include "cladapter/numerics.hpp"

namespace cladapter {

/// Learnable state of the cluster attention adapter.
///
/// Tokens enter as an N x D block. A pooled query is compared (cosine) against
/// K cluster centers; the softmax of those similarities mixes K transforms into
/// one D x D matrix applied to every token, followed by LayerNorm and a
/// GELU MLP of hidden width ratio * D.
template <typename Scalar>
struct AdapterParams {
  Matrix<Scalar> centers;                  // D x K, one center per column
  std::vector<Matrix<Scalar>> transforms;  // K matrices, D x D
  AffineNorm<Scalar> norm_in;
  AffineNorm<Scalar> norm_mid;
  Matrix<Scalar> w1;  // D x rD
  Vector<Scalar> b1;  // rD
  Matrix<Scalar> w2;  // rD x D
  Vector<Scalar> b2;  // D
  Index ratio = 4;
  Scalar l2_eps = Scalar(1e-12);

  Index dim() const { return centers.rows(); }
  Index clusters() const { return centers.cols(); }
  Index hidden() const { return ratio * dim(); }

  void validate() const {
    const Index d = dim(), k = clusters(), h = hidden();
    if (d < 1 || k < 1 || ratio < 1) throw ShapeError("adapter: D, K and ratio must be >= 1");
    if (static_cast<Index>(transforms.size()) != k) throw ShapeError("adapter: transform count != K");
    for (const auto& m : transforms) {
      if (m.rows() != d || m.cols() != d) throw ShapeError("adapter: transform is not D x D");
    }
    if (norm_in.gain.size() != d || norm_in.bias.size() != d || norm_mid.gain.size() != d ||
        norm_mid.bias.size() != d) {
      throw ShapeError("adapter: norm affine width != D");
    }
    if (w1.rows() != d || w1.cols() != h || b1.size() != h || w2.rows() != h || w2.cols() != d ||
        b2.size() != d) {
      throw ShapeError("adapter: MLP shapes inconsistent with D and ratio");
    }
  }

  /// Same shapes, every entry zero. Used as a gradient accumulator.
  AdapterParams zeros_like() const {
    AdapterParams z = *this;
    z.for_each_tensor([](std::string_view, auto v) { v.setZero(); });
    return z;
  }

  /// Visits every learnable array in serialization order:
  /// centers, transforms[0..K), norm_in gain/bias, norm_mid gain/bias, w1, b1, w2, b2.
  /// The callback receives (group name, flat row-major view).
  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    visit_impl(*this, fn);
  }
  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    visit_impl(*this, fn);
  }

 private:
  template <typename Self, typename Fn>
  static void visit_impl(Self& self, Fn& fn) {
    using Elem = std::conditional_t<std::is_const_v<Self>, const Scalar, Scalar>;
    using View = Eigen::Map<std::conditional_t<std::is_const_v<Self>, const Vector<Scalar>, Vector<Scalar>>>;
    auto view = [](auto& a) { return View(static_cast<Elem*>(a.data()), a.size()); };
    fn(std::string_view("centers"), view(self.centers));
    for (auto& m : self.transforms) fn(std::string_view("transforms"), view(m));
    fn(std::string_view("norm_in"), view(self.norm_in.gain));
    fn(std::string_view("norm_in"), view(self.norm_in.bias));
    fn(std::string_view("norm_mid"), view(self.norm_mid.gain));
    fn(std::string_view("norm_mid"), view(self.norm_mid.bias));
    fn(std::string_view("mlp"), view(self.w1));
    fn(std::string_view("mlp"), view(self.b1));
    fn(std::string_view("mlp"), view(self.w2));
    fn(std::string_view("mlp"), view(self.b2));
  }
};

using AdapterParamsd = AdapterParams<double>;

/// Closed-form number of learnable entries.
inline std::int64_t adapter_param_count(std::int64_t dim, std::int64_t clusters, std::int64_t ratio) {
  const std::int64_t hidden = ratio * dim;
  return clusters * dim                         // centers
         + clusters * dim * dim                 // transform bank
         + 2 * 2 * dim                          // two affine norms
         + dim * hidden + hidden + hidden * dim + dim;  // MLP
}

template <typename Scalar>
std::int64_t count_entries(const AdapterParams<Scalar>& p) {
  std::int64_t n = 0;
  p.for_each_tensor([&](std::string_view, const auto& v) { n += v.size(); });
  return n;
}

/// Centers ~ N(0, 1/sqrt(D)); transforms = I + N(0, noise/sqrt(D)); norms identity;
/// MLP weights ~ N(0, 1/sqrt(fan_in)) with zero biases.
template <typename Scalar = double>
AdapterParams<Scalar> init_adapter(Index dim, Index clusters, Index ratio, std::uint64_t seed,
                                   double transform_noise = 0.01) {
  if (dim < 1 || clusters < 1 || ratio < 1) throw ArgumentError("init_adapter: D, K and ratio must be >= 1");
  std::mt19937_64 rng(seed);
  auto gaussian = [&rng](Index rows, Index cols, double stddev) {
    Matrix<Scalar> m(rows, cols);
    if (stddev == 0.0) return Matrix<Scalar>(Matrix<Scalar>::Zero(rows, cols));
    std::normal_distribution<double> dist(0.0, stddev);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = Scalar(dist(rng));
    return m;
  };
  const double inv_sqrt_d = 1.0 / std::sqrt(double(dim));
  AdapterParams<Scalar> p;
  p.ratio = ratio;
  p.centers = gaussian(dim, clusters, inv_sqrt_d);
  p.transforms.reserve(clusters);
  for (Index k = 0; k < clusters; ++k) {
    p.transforms.push_back(Matrix<Scalar>::Identity(dim, dim) + gaussian(dim, dim, transform_noise * inv_sqrt_d));
  }
  p.norm_in = AffineNorm<Scalar>::identity(dim);
  p.norm_mid = AffineNorm<Scalar>::identity(dim);
  const Index hidden = ratio * dim;
  p.w1 = gaussian(dim, hidden, inv_sqrt_d);
  p.b1 = Vector<Scalar>::Zero(hidden);
  p.w2 = gaussian(hidden, dim, 1.0 / std::sqrt(double(hidden)));
  p.b2 = Vector<Scalar>::Zero(dim);
  return p;
}

template <typename Scalar>
struct AttentionScores {
  Matrix<Scalar> normalized_tokens;  // LayerNorm(H), row-wise
  Vector<Scalar> beta;               // length K, on the simplex
};

/// Forward intermediates kept for the backward pass.
template <typename Scalar>
struct AdapterTape {
  LayerNormCache<Scalar> in_cache;
  Matrix<Scalar> tokens_ln;
  Vector<Scalar> query;
  Vector<Scalar> query_hat;
  Matrix<Scalar> centers_hat;
  Vector<Scalar> beta;
  Matrix<Scalar> mixed;
  LayerNormCache<Scalar> mid_cache;
  Matrix<Scalar> refined;      // H*
  Matrix<Scalar> pre_act;      // H* W1 + b1
  Matrix<Scalar> activations;  // gelu(pre_act)
};

namespace detail {

template <typename Scalar>
void attention_into(const Matrix<Scalar>& tokens, const AdapterParams<Scalar>& p, AdapterTape<Scalar>& t) {
  if (tokens.cols() != p.dim()) {
    throw ShapeError("adapter: token width " + std::to_string(tokens.cols()) + " != adapter D " +
                     std::to_string(p.dim()));
  }
  if (tokens.rows() < 1) throw ShapeError("adapter: empty feature block");
  t.tokens_ln = layer_norm_rows(tokens, p.norm_in, &t.in_cache);
  t.query = t.tokens_ln.colwise().mean().transpose();
  t.query_hat = l2_normalize(t.query, p.l2_eps);
  t.centers_hat.resize(p.dim(), p.clusters());
  for (Index k = 0; k < p.clusters(); ++k) {
    t.centers_hat.col(k) = l2_normalize(Vector<Scalar>(p.centers.col(k)), p.l2_eps);
  }
  t.beta = softmax(Vector<Scalar>(t.centers_hat.transpose() * t.query_hat));
}

}  // namespace detail

template <typename Scalar>
AttentionScores<Scalar> attention_scores(const Matrix<Scalar>& tokens, const AdapterParams<Scalar>& p) {
  AdapterTape<Scalar> t;
  detail::attention_into(tokens, p, t);
  return {std::move(t.tokens_ln), std::move(t.beta)};
}

template <typename Scalar>
Matrix<Scalar> weighted_transform(const Vector<Scalar>& beta, const AdapterParams<Scalar>& p) {
  if (beta.size() != p.clusters()) throw ShapeError("weighted_transform: len(beta) != K");
  Matrix<Scalar> mixed = Matrix<Scalar>::Zero(p.dim(), p.dim());
  for (Index k = 0; k < p.clusters(); ++k) mixed += beta(k) * p.transforms[k];
  return mixed;
}

/// Maps an N x D block to the refined N x D block. No residual path.
template <typename Scalar>
Matrix<Scalar> adapter_forward(const Matrix<Scalar>& tokens, const AdapterParams<Scalar>& p,
                               AdapterTape<Scalar>* tape = nullptr) {
  AdapterTape<Scalar> local;
  AdapterTape<Scalar>& t = tape ? *tape : local;
  detail::attention_into(tokens, p, t);
  t.mixed = weighted_transform(t.beta, p);
  t.refined = layer_norm_rows(Matrix<Scalar>(t.tokens_ln * t.mixed), p.norm_mid, &t.mid_cache);
  t.pre_act = (t.refined * p.w1).rowwise() + p.b1.transpose();
  t.activations = gelu(t.pre_act);
  Matrix<Scalar> out = (t.activations * p.w2).rowwise() + p.b2.transpose();
  require_finite(out, "adapter_forward");
  return out;
}

/// Backpropagates dL/d(output) through the adapter. Parameter gradients are
/// accumulated into `grads`; the gradient with respect to the input tokens is returned.
template <typename Scalar>
Matrix<Scalar> adapter_backward(const Matrix<Scalar>& d_out, const AdapterParams<Scalar>& p,
                                const AdapterTape<Scalar>& t, AdapterParams<Scalar>& grads) {
  require_same_size(d_out, t.refined, "adapter_backward");
  const Index n = d_out.rows();

  // MLP
  grads.w2.noalias() += t.activations.transpose() * d_out;
  grads.b2 += d_out.colwise().sum().transpose();
  Matrix<Scalar> d_pre = (d_out * p.w2.transpose()).array() * gelu_derivative(t.pre_act).array();
  grads.w1.noalias() += t.refined.transpose() * d_pre;
  grads.b1 += d_pre.colwise().sum().transpose();
  const Matrix<Scalar> d_refined = d_pre * p.w1.transpose();

  // LayerNorm(H_ln M*)
  const Matrix<Scalar> d_mixed_tokens =
      layer_norm_rows_vjp(d_refined, p.norm_mid, t.mid_cache, grads.norm_mid.gain, grads.norm_mid.bias);
  Matrix<Scalar> d_tokens_ln = d_mixed_tokens * t.mixed.transpose();
  const Matrix<Scalar> d_mixed = t.tokens_ln.transpose() * d_mixed_tokens;

  // M* = sum_k beta_k M_k
  Vector<Scalar> d_beta(p.clusters());
  for (Index k = 0; k < p.clusters(); ++k) {
    grads.transforms[k] += t.beta(k) * d_mixed;
    d_beta(k) = (p.transforms[k].array() * d_mixed.array()).sum();
  }

  // beta = softmax(cosines)
  const Vector<Scalar> d_cos = softmax_vjp(t.beta, d_beta);
  const Vector<Scalar> d_query_hat = t.centers_hat * d_cos;
  for (Index k = 0; k < p.clusters(); ++k) {
    const Vector<Scalar> d_center_hat = d_cos(k) * t.query_hat;
    grads.centers.col(k) += l2_normalize_vjp(Vector<Scalar>(p.centers.col(k)), p.l2_eps, d_center_hat);
  }
  const Vector<Scalar> d_query = l2_normalize_vjp(t.query, p.l2_eps, d_query_hat);
  d_tokens_ln.rowwise() += (d_query / Scalar(n)).transpose();

  return layer_norm_rows_vjp(d_tokens_ln, p.norm_in, t.in_cache, grads.norm_in.gain, grads.norm_in.bias);
}

}  // namespace cladapter
