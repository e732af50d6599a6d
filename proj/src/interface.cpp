// SPDX-License-Identifier: Apache-2.0

#include "cladapter/interface.hpp"

#include <functional>
#include <numeric>

namespace cladapter {

namespace {

struct GridDims {
  Index frames, channels, height, width;
};

std::string dims_string(const std::vector<Index>& dims) {
  std::string out = "(";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(dims[i]);
  }
  return out + ")";
}

void require_rank(TensorKind kind, const std::vector<Index>& dims) {
  const std::size_t expected = kind == TensorKind::VitTokens ? 2 : kind == TensorKind::CnnMap ? 3 : 4;
  if (dims.size() != expected) {
    throw ShapeError(std::string(to_string(kind)) + " expects rank " + std::to_string(expected) +
                     ", got dims " + dims_string(dims));
  }
  for (Index d : dims) {
    if (d < 1) throw ShapeError("non-positive dimension in " + dims_string(dims));
  }
  if (kind == TensorKind::VitTokens && dims[0] < 2) {
    throw ShapeError("VitTokens needs a class token plus at least one patch token");
  }
}

GridDims grid_of(TensorKind kind, const std::vector<Index>& dims) {
  if (kind == TensorKind::CnnMap) return {1, dims[0], dims[1], dims[2]};
  return {dims[0], dims[1], dims[2], dims[3]};
}

}  // namespace

std::string_view to_string(TensorKind kind) {
  switch (kind) {
    case TensorKind::VitTokens: return "vit";
    case TensorKind::CnnMap: return "cnn";
    case TensorKind::VideoClip: return "video";
  }
  return "?";
}

TensorKind parse_tensor_kind(std::string_view name) {
  if (name == "vit") return TensorKind::VitTokens;
  if (name == "cnn") return TensorKind::CnnMap;
  if (name == "video") return TensorKind::VideoClip;
  throw ArgumentError("unknown tensor kind '" + std::string(name) + "' (expected vit, cnn or video)");
}

Index RawTensor::numel() const {
  return std::accumulate(dims.begin(), dims.end(), Index{1}, std::multiplies<>());
}

Index ShapeDescriptor::tokens() const {
  if (kind == TensorKind::VitTokens) return dims[0] - 1;
  const GridDims g = grid_of(kind, dims);
  return g.frames * g.height * g.width;
}

Index ShapeDescriptor::width() const {
  if (kind == TensorKind::VitTokens) return dims[1];
  return grid_of(kind, dims).channels;
}

UnifiedFeatures unify(const RawTensor& raw) {
  require_rank(raw.kind, raw.dims);
  if (static_cast<Index>(raw.data.size()) != raw.numel()) {
    throw ShapeError("tensor data holds " + std::to_string(raw.data.size()) + " values, dims " +
                     dims_string(raw.dims) + " need " + std::to_string(raw.numel()));
  }
  for (double v : raw.data) {
    if (!std::isfinite(v)) throw NumericError("unify: non-finite tensor entry");
  }

  UnifiedFeatures out;
  out.desc.kind = raw.kind;
  out.desc.dims = raw.dims;

  if (raw.kind == TensorKind::VitTokens) {
    const Index rows = raw.dims[0], width = raw.dims[1];
    Eigen::Map<const Matrixd> tokens(raw.data.data(), rows, width);
    out.desc.class_token = tokens.row(0).transpose();
    out.block = tokens.bottomRows(rows - 1);
    return out;
  }

  const GridDims g = grid_of(raw.kind, raw.dims);
  const Index plane = g.height * g.width;
  out.block.resize(g.frames * plane, g.channels);
  for (Index t = 0; t < g.frames; ++t) {
    for (Index c = 0; c < g.channels; ++c) {
      const double* src = raw.data.data() + (t * g.channels + c) * plane;
      for (Index s = 0; s < plane; ++s) out.block(t * plane + s, c) = src[s];
    }
  }
  return out;
}

RawTensor inverse_unify(const FeatureBlock& block, const ShapeDescriptor& desc) {
  require_rank(desc.kind, desc.dims);
  if (block.rows() != desc.tokens() || block.cols() != desc.width()) {
    throw ShapeError("inverse_unify: block is " + std::to_string(block.rows()) + "x" +
                     std::to_string(block.cols()) + " but descriptor " + dims_string(desc.dims) +
                     " implies " + std::to_string(desc.tokens()) + "x" + std::to_string(desc.width()));
  }

  RawTensor raw;
  raw.kind = desc.kind;
  raw.dims = desc.dims;
  raw.data.resize(static_cast<std::size_t>(raw.numel()));

  if (desc.kind == TensorKind::VitTokens) {
    if (!desc.class_token || desc.class_token->size() != block.cols()) {
      throw ShapeError("inverse_unify: ViT descriptor lacks a class token of width " +
                       std::to_string(block.cols()));
    }
    Eigen::Map<Matrixd> tokens(raw.data.data(), desc.dims[0], desc.dims[1]);
    tokens.row(0) = desc.class_token->transpose();
    tokens.bottomRows(block.rows()) = block;
    return raw;
  }

  const GridDims g = grid_of(desc.kind, desc.dims);
  const Index plane = g.height * g.width;
  for (Index t = 0; t < g.frames; ++t) {
    for (Index c = 0; c < g.channels; ++c) {
      double* dst = raw.data.data() + (t * g.channels + c) * plane;
      for (Index s = 0; s < plane; ++s) dst[s] = block(t * plane + s, c);
    }
  }
  return raw;
}

}  // namespace cladapter
