// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

#include "cladapter/numerics.hpp"

namespace cladapter {

/// Linear classifier over mean-pooled tokens.
struct HeadParams {
  Matrixd weight;  // D x C
  Vectord bias;    // C

  Index dim() const { return weight.rows(); }
  Index classes() const { return weight.cols(); }
};

HeadParams init_head(Index dim, Index classes, std::uint64_t seed, double stddev = 0.01);

/// logits = mean_rows(tokens)^T W + b
Vectord head_forward(const Matrixd& tokens, const HeadParams& head);

/// Accumulates head gradients and returns dL/d(tokens).
Matrixd head_backward(const Matrixd& tokens, const Vectord& d_logits, const HeadParams& head, HeadParams& grads);

/// -log softmax(logits)[label], stabilized with log-sum-exp.
double cross_entropy(const Vectord& logits, Index label);

/// d cross_entropy / d logits = softmax(logits) - onehot(label).
Vectord cross_entropy_grad(const Vectord& logits, Index label);

/// Index of the largest logit; ties go to the lowest index.
Index argmax(const Vectord& logits);

}  // namespace cladapter
