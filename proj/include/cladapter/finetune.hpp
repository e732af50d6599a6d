// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cladapter/synth.hpp"

namespace cladapter {

enum class FineTuneMode {
  LP,   // backbone frozen; adapter and head trained
  FT,   // everything trained jointly
  SFT,  // LP stage, then FT from the LP weights
};

std::string_view to_string(FineTuneMode mode);
FineTuneMode parse_mode(std::string_view name);

struct AdamWSettings {
  double lr = 1e-4;
  double weight_decay = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainPlan {
  FineTuneMode mode = FineTuneMode::SFT;
  int stage1_epochs = 40;  // total epochs for LP and FT
  int stage2_epochs = 60;  // SFT only
  AdamWSettings optimizer;
  std::optional<double> stage2_lr;  // defaults to optimizer.lr
  int batch_size = 16;
  std::uint64_t seed = 0;

  void validate() const;
};

struct OptimizerState {
  Vectord m;
  Vectord v;
  std::int64_t step = 0;
};

/// One decoupled-weight-decay Adam update over a flat parameter vector.
void adamw_step(Vectord& params, const Vectord& grads, OptimizerState& state, const AdamWSettings& opt);

/// Named flat view of one learnable array inside a Model.
struct ParamView {
  std::string_view group;
  Eigen::Map<Vectord> values;
};

/// Views in a fixed order: adapter arrays, head weight, head bias, then the
/// backbone projection when `include_backbone` is set.
std::vector<ParamView> param_views(Model& model, bool include_backbone);

Vectord flatten(Model& model, bool include_backbone);
void unflatten(Model& model, bool include_backbone, const Vectord& flat);

/// Same shapes as `model`, all zeros.
Model zeros_like(const Model& model);

/// Cross-entropy of one sample. When `grads` is given, accumulates parameter
/// gradients into it (backbone gradients only if `backbone_grad`).
double sample_loss(const Model& model, const Sample& sample, Model* grads = nullptr, bool backbone_grad = false);

struct EpochMetrics {
  int epoch = 0;  // 1-based across stages
  int stage = 1;
  double train_loss = 0.0;
  double val_id_acc = 0.0;
  double val_ood_acc = 0.0;
};

struct FineTuneResult {
  Model model;
  std::vector<EpochMetrics> metrics;
};

/// Trains per plan. Each epoch shuffles the training set with seed + epoch and
/// runs minibatch AdamW; optimizer state starts fresh at every stage.
FineTuneResult run_finetune(Model model, const TaskData& data, const TrainPlan& plan);

}  // namespace cladapter
