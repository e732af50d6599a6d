// SPDX-License-Identifier: Apache-2.0

#include "cladapter/head.hpp"

#include <random>
#include <string>

namespace cladapter {

namespace {

void require_label(const Vectord& logits, Index label) {
  if (label < 0 || label >= logits.size()) {
    throw ArgumentError("label " + std::to_string(label) + " outside [0, " + std::to_string(logits.size()) + ")");
  }
}

}  // namespace

HeadParams init_head(Index dim, Index classes, std::uint64_t seed, double stddev) {
  if (dim < 1 || classes < 1) throw ArgumentError("init_head: D and C must be >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, stddev);
  HeadParams h{Matrixd(dim, classes), Vectord::Zero(classes)};
  for (Index i = 0; i < h.weight.size(); ++i) h.weight.data()[i] = stddev > 0 ? dist(rng) : 0.0;
  return h;
}

Vectord head_forward(const Matrixd& tokens, const HeadParams& head) {
  if (tokens.cols() != head.dim() || head.bias.size() != head.classes()) {
    throw ShapeError("head: token width " + std::to_string(tokens.cols()) + " != head D " + std::to_string(head.dim()));
  }
  if (tokens.rows() < 1) throw ShapeError("head: empty feature block");
  const Vectord pooled = tokens.colwise().mean().transpose();
  return head.weight.transpose() * pooled + head.bias;
}

Matrixd head_backward(const Matrixd& tokens, const Vectord& d_logits, const HeadParams& head, HeadParams& grads) {
  const Vectord pooled = tokens.colwise().mean().transpose();
  grads.weight.noalias() += pooled * d_logits.transpose();
  grads.bias += d_logits;
  const Vectord d_pooled = head.weight * d_logits / double(tokens.rows());
  return d_pooled.transpose().replicate(tokens.rows(), 1);
}

double cross_entropy(const Vectord& logits, Index label) {
  require_label(logits, label);
  return log_sum_exp(logits) - logits(label);
}

Vectord cross_entropy_grad(const Vectord& logits, Index label) {
  require_label(logits, label);
  Vectord g = softmax(logits);
  g(label) -= 1.0;
  return g;
}

Index argmax(const Vectord& logits) {
  Index best = 0;
  for (Index i = 1; i < logits.size(); ++i) {
    if (logits(i) > logits(best)) best = i;
  }
  return best;
}

}  // namespace cladapter
