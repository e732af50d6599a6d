// SPDX-License-Identifier: Apache-2.0

#include "cladapter/synth.hpp"

#include <cmath>
#include <random>

#include <Eigen/QR>

namespace cladapter {

namespace {

Matrixd gaussian_matrix(std::mt19937_64& rng, Index rows, Index cols, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrixd m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

// Height/width of a plane holding `count` tokens: the most square factorization.
std::pair<Index, Index> plane_dims(Index count) {
  Index h = static_cast<Index>(std::sqrt(double(count)));
  while (h > 1 && count % h != 0) --h;
  return {h, count / h};
}

std::vector<Index> layout_dims(const SyntheticBackbone& bb, Index n) {
  switch (bb.kind) {
    case TensorKind::VitTokens: return {n + 1, bb.dim()};
    case TensorKind::CnnMap: {
      const auto [h, w] = plane_dims(n);
      return {bb.dim(), h, w};
    }
    case TensorKind::VideoClip: {
      if (bb.frames < 1 || n % bb.frames != 0) {
        throw ShapeError("backbone: " + std::to_string(bb.frames) + " frames do not divide " +
                         std::to_string(n) + " tokens");
      }
      const auto [h, w] = plane_dims(n / bb.frames);
      return {bb.frames, bb.dim(), h, w};
    }
  }
  return {};
}

Dataset draw_split(std::mt19937_64& rng, const Matrixd& means, const TaskSpec& spec, Index per_class) {
  std::normal_distribution<double> noise(0.0, spec.spread);
  Dataset out;
  out.reserve(static_cast<std::size_t>(per_class * spec.classes));
  for (Index i = 0; i < per_class; ++i) {
    for (Index c = 0; c < spec.classes; ++c) {
      Sample s{Matrixd(spec.tokens, spec.input_dim), c};
      for (Index t = 0; t < spec.tokens; ++t) {
        for (Index j = 0; j < spec.input_dim; ++j) s.tokens(t, j) = means(c, j) + noise(rng);
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

}  // namespace

SyntheticBackbone make_backbone(Index input_dim, Index dim, TensorKind kind, std::uint64_t seed, Index frames) {
  if (input_dim < 1 || dim < 1) throw ArgumentError("make_backbone: dimensions must be >= 1");
  std::mt19937_64 rng(seed);
  return {gaussian_matrix(rng, input_dim, dim, 1.0 / std::sqrt(double(input_dim))), kind, frames};
}

RawTensor backbone_forward(const SyntheticBackbone& bb, const Matrixd& tokens) {
  if (tokens.cols() != bb.input_dim()) {
    throw ShapeError("backbone: token width " + std::to_string(tokens.cols()) + " != input dim " +
                     std::to_string(bb.input_dim()));
  }
  const Index n = tokens.rows();
  const Matrixd features = gelu(tokens * bb.projection);

  RawTensor raw{bb.kind, layout_dims(bb, n), {}};
  raw.data.resize(static_cast<std::size_t>(raw.numel()));
  if (bb.kind == TensorKind::VitTokens) {
    Eigen::Map<Matrixd> out(raw.data.data(), n + 1, bb.dim());
    out.row(0) = features.colwise().mean();
    out.bottomRows(n) = features;
    return raw;
  }
  const Index frames = bb.kind == TensorKind::VideoClip ? bb.frames : 1;
  const Index plane = n / frames;
  for (Index f = 0; f < frames; ++f) {
    for (Index c = 0; c < bb.dim(); ++c) {
      double* dst = raw.data.data() + (f * bb.dim() + c) * plane;
      for (Index s = 0; s < plane; ++s) dst[s] = features(f * plane + s, c);
    }
  }
  return raw;
}

Matrixd backbone_backward(const SyntheticBackbone& bb, const Matrixd& tokens, const RawTensor& d_raw) {
  // The layout is exactly what unify undoes, so unify recovers per-token gradients.
  UnifiedFeatures u = unify(d_raw);
  Matrixd d_features = std::move(u.block);
  if (d_features.rows() != tokens.rows() || d_features.cols() != bb.dim()) {
    throw ShapeError("backbone_backward: gradient layout does not match tokens");
  }
  if (u.desc.class_token) {
    d_features.rowwise() += (*u.desc.class_token / double(tokens.rows())).transpose();
  }
  const Matrixd pre = tokens * bb.projection;
  const Matrixd d_pre = d_features.array() * gelu_derivative(pre).array();
  return tokens.transpose() * d_pre;
}

void TaskSpec::validate() const {
  if (classes < 2) throw ArgumentError("task: classes must be >= 2");
  if (tokens < 1 || input_dim < 1) throw ArgumentError("task: tokens and input_dim must be >= 1");
  if (!(spread > 0.0)) throw ArgumentError("task: spread must be > 0");
  if (train_per_class < 1 || val_per_class < 1) throw ArgumentError("task: samples per class must be >= 1");
  if (!std::isfinite(shift_degrees) || !std::isfinite(shift_translation)) {
    throw ArgumentError("task: shift must be finite");
  }
}

Matrixd ood_rotation(const TaskSpec& spec) {
  // Separate stream so the basis does not depend on the class means or angle.
  std::mt19937_64 rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
  const Index d = spec.input_dim;
  const Eigen::MatrixXd basis = Eigen::HouseholderQR<Eigen::MatrixXd>(gaussian_matrix(rng, d, d, 1.0)).householderQ();
  const double theta = spec.shift_degrees * M_PI / 180.0;
  Eigen::MatrixXd planes = Eigen::MatrixXd::Identity(d, d);
  for (Index i = 0; i + 1 < d; i += 2) {
    planes(i, i) = std::cos(theta);
    planes(i, i + 1) = -std::sin(theta);
    planes(i + 1, i) = std::sin(theta);
    planes(i + 1, i + 1) = std::cos(theta);
  }
  return basis * planes * basis.transpose();
}

TaskData gen_task(const TaskSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const Matrixd means = gaussian_matrix(rng, spec.classes, spec.input_dim, 1.0);
  Vectord direction = gaussian_matrix(rng, spec.input_dim, 1, 1.0);
  direction.normalize();
  const Vectord translation = spec.shift_translation * direction;

  TaskData data;
  data.train = draw_split(rng, means, spec, spec.train_per_class);
  data.val_id = draw_split(rng, means, spec, spec.val_per_class);
  data.val_ood = draw_split(rng, means, spec, spec.val_per_class);

  const Matrixd rotation_t = ood_rotation(spec).transpose();
  for (Sample& s : data.val_ood) {
    s.tokens = (s.tokens * rotation_t).rowwise() + translation.transpose();
  }
  return data;
}

Matrixd model_features(const Model& model, const Matrixd& tokens) {
  const UnifiedFeatures u = unify(backbone_forward(model.backbone, tokens));
  return model.adapter ? adapter_forward(u.block, *model.adapter) : u.block;
}

Vectord model_logits(const Model& model, const Matrixd& tokens) {
  return head_forward(model_features(model, tokens), model.head);
}

double accuracy(const std::vector<Vectord>& logits, const std::vector<Index>& labels) {
  if (logits.empty() || logits.size() != labels.size()) throw ArgumentError("accuracy: empty or mismatched inputs");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) hits += argmax(logits[i]) == labels[i];
  return double(hits) / double(logits.size());
}

double evaluate(const Model& model, const Dataset& split) {
  if (split.empty()) throw ArgumentError("evaluate: empty split");
  std::size_t hits = 0;
  for (const Sample& s : split) hits += argmax(model_logits(model, s.tokens)) == s.label;
  return double(hits) / double(split.size());
}

}  // namespace cladapter
