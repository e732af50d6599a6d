// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cladapter/numerics.hpp"

namespace cladapter {

/// N x D token matrix shared by every backbone kind. N >= 1, D >= 1, finite.
using FeatureBlock = Matrixd;

enum class TensorKind {
  VitTokens,  // (N+1) x D, class token in row 0
  CnnMap,     // C' x H' x W'
  VideoClip,  // T x C' x H' x W'
};

std::string_view to_string(TensorKind kind);
TensorKind parse_tensor_kind(std::string_view name);

/// Dense row-major tensor as emitted by a backbone.
struct RawTensor {
  TensorKind kind = TensorKind::VitTokens;
  std::vector<Index> dims;
  std::vector<double> data;

  Index numel() const;
  bool operator==(const RawTensor&) const = default;
};

/// Everything needed to undo the flattening, including the dropped class token.
struct ShapeDescriptor {
  TensorKind kind = TensorKind::VitTokens;
  std::vector<Index> dims;
  std::optional<Vectord> class_token;

  Index tokens() const;
  Index width() const;
};

struct UnifiedFeatures {
  FeatureBlock block;
  ShapeDescriptor desc;
};

/// Flattens a backbone tensor into tokens x channels. Spatial and temporal axes
/// are flattened row-major, token t = (tau * H' + h) * W' + w.
UnifiedFeatures unify(const RawTensor& raw);

/// Exact inverse of unify; re-inserts the stored class token for ViT outputs.
RawTensor inverse_unify(const FeatureBlock& block, const ShapeDescriptor& desc);

}  // namespace cladapter
