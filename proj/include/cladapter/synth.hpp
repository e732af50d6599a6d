// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "cladapter/adapter.hpp"
#include "cladapter/head.hpp"
#include "cladapter/interface.hpp"

namespace cladapter {

/// Frozen stand-in for a pre-trained network: one projection followed by GELU,
/// emitted in the layout of a ViT, CNN or video backbone.
struct SyntheticBackbone {
  Matrixd projection;  // input_dim x D
  TensorKind kind = TensorKind::VitTokens;
  Index frames = 1;  // VideoClip only; must divide the token count

  Index input_dim() const { return projection.rows(); }
  Index dim() const { return projection.cols(); }
};

SyntheticBackbone make_backbone(Index input_dim, Index dim, TensorKind kind, std::uint64_t seed, Index frames = 1);

/// Per-token gelu(x^T P), reshaped into the backbone's declared layout. ViT
/// outputs carry a class token equal to the mean token feature.
RawTensor backbone_forward(const SyntheticBackbone& bb, const Matrixd& tokens);

/// Gradient of a scalar loss with respect to the projection, given dL/d(raw output).
Matrixd backbone_backward(const SyntheticBackbone& bb, const Matrixd& tokens, const RawTensor& d_raw);

struct Sample {
  Matrixd tokens;  // N x input_dim
  Index label = 0;
};

using Dataset = std::vector<Sample>;

struct TaskSpec {
  Index classes = 5;
  Index tokens = 8;
  Index input_dim = 16;
  double spread = 0.6;            // per-token standard deviation around the class mean
  double shift_degrees = 45.0;    // rotation angle applied in every plane of a random basis
  double shift_translation = 0.0; // length of the translation added to OOD tokens
  Index train_per_class = 200;
  Index val_per_class = 100;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TaskData {
  Dataset train;
  Dataset val_id;
  Dataset val_ood;
};

/// Gaussian class clusters in input space. The OOD split is drawn from the same
/// clusters and then rotated and translated. Splits are balanced and
/// interleaved by class.
TaskData gen_task(const TaskSpec& spec);

/// Rotation used for the OOD split, exposed for tests.
Matrixd ood_rotation(const TaskSpec& spec);

/// Backbone, optional adapter, and head.
struct Model {
  SyntheticBackbone backbone;
  std::optional<AdapterParamsd> adapter;
  HeadParams head;
};

Vectord model_logits(const Model& model, const Matrixd& tokens);

/// Adapter output on unified backbone features (the features that reach the head).
Matrixd model_features(const Model& model, const Matrixd& tokens);

/// Fraction of samples whose argmax logit equals the label.
double evaluate(const Model& model, const Dataset& split);
double accuracy(const std::vector<Vectord>& logits, const std::vector<Index>& labels);

}  // namespace cladapter
