// SPDX-License-Identifier: Apache-2.0

#include "cladapter/finetune.hpp"

#include <algorithm>
#include <numeric>
#include <random>

namespace cladapter {

std::string_view to_string(FineTuneMode mode) {
  switch (mode) {
    case FineTuneMode::LP: return "lp";
    case FineTuneMode::FT: return "ft";
    case FineTuneMode::SFT: return "sft";
  }
  return "?";
}

FineTuneMode parse_mode(std::string_view name) {
  if (name == "lp" || name == "LP") return FineTuneMode::LP;
  if (name == "ft" || name == "FT") return FineTuneMode::FT;
  if (name == "sft" || name == "SFT") return FineTuneMode::SFT;
  throw ArgumentError("unknown mode '" + std::string(name) + "' (expected lp, ft or sft)");
}

void TrainPlan::validate() const {
  if (stage1_epochs < 0 || stage2_epochs < 0) throw ArgumentError("plan: epoch counts must be >= 0");
  if (mode == FineTuneMode::SFT && stage1_epochs < 1) throw ArgumentError("plan: SFT needs stage1_epochs >= 1");
  if (batch_size < 1) throw ArgumentError("plan: batch_size must be >= 1");
  if (!(optimizer.lr > 0.0) || (stage2_lr && !(*stage2_lr > 0.0))) throw ArgumentError("plan: lr must be > 0");
  if (!(optimizer.weight_decay >= 0.0)) throw ArgumentError("plan: weight_decay must be >= 0");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0) || !(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) {
    throw ArgumentError("plan: betas must lie in [0, 1)");
  }
  if (!(optimizer.eps > 0.0)) throw ArgumentError("plan: adam_eps must be > 0");
}

void adamw_step(Vectord& params, const Vectord& grads, OptimizerState& state, const AdamWSettings& opt) {
  require_same_size(params, grads, "adamw_step");
  require_finite(grads, "adamw_step gradient");
  if (state.m.size() != params.size()) {
    state.m = Vectord::Zero(params.size());
    state.v = Vectord::Zero(params.size());
    state.step = 0;
  }
  ++state.step;
  state.m = opt.beta1 * state.m + (1.0 - opt.beta1) * grads;
  state.v = opt.beta2 * state.v + (1.0 - opt.beta2) * grads.cwiseAbs2();
  const double c1 = 1.0 - std::pow(opt.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(opt.beta2, double(state.step));

  params *= 1.0 - opt.lr * opt.weight_decay;
  params.array() -= opt.lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + opt.eps);
}

std::vector<ParamView> param_views(Model& model, bool include_backbone) {
  std::vector<ParamView> views;
  if (model.adapter) {
    model.adapter->for_each_tensor([&](std::string_view group, Eigen::Map<Vectord> v) { views.push_back({group, v}); });
  }
  auto& h = model.head;
  views.push_back({"head", Eigen::Map<Vectord>(h.weight.data(), h.weight.size())});
  views.push_back({"head", Eigen::Map<Vectord>(h.bias.data(), h.bias.size())});
  if (include_backbone) {
    auto& p = model.backbone.projection;
    views.push_back({"backbone", Eigen::Map<Vectord>(p.data(), p.size())});
  }
  return views;
}

Vectord flatten(Model& model, bool include_backbone) {
  const auto views = param_views(model, include_backbone);
  Index total = 0;
  for (const auto& v : views) total += v.values.size();
  Vectord flat(total);
  Index offset = 0;
  for (const auto& v : views) {
    flat.segment(offset, v.values.size()) = v.values;
    offset += v.values.size();
  }
  return flat;
}

void unflatten(Model& model, bool include_backbone, const Vectord& flat) {
  auto views = param_views(model, include_backbone);
  Index offset = 0;
  for (auto& v : views) {
    if (offset + v.values.size() > flat.size()) throw ShapeError("unflatten: vector too short");
    v.values = flat.segment(offset, v.values.size());
    offset += v.values.size();
  }
  if (offset != flat.size()) throw ShapeError("unflatten: vector too long");
}

Model zeros_like(const Model& model) {
  Model z = model;
  for (auto& v : param_views(z, true)) v.values.setZero();
  return z;
}

double sample_loss(const Model& model, const Sample& sample, Model* grads, bool backbone_grad) {
  const RawTensor raw = backbone_forward(model.backbone, sample.tokens);
  const UnifiedFeatures unified = unify(raw);

  AdapterTape<double> tape;
  const Matrixd features = model.adapter ? adapter_forward(unified.block, *model.adapter, &tape) : unified.block;
  const Vectord logits = head_forward(features, model.head);
  const double loss = cross_entropy(logits, sample.label);
  if (!grads) return loss;

  const Matrixd d_features = head_backward(features, cross_entropy_grad(logits, sample.label), model.head, grads->head);
  if (!backbone_grad) {
    if (model.adapter) adapter_backward(d_features, *model.adapter, tape, *grads->adapter);
    return loss;
  }
  const Matrixd d_tokens =
      model.adapter ? adapter_backward(d_features, *model.adapter, tape, *grads->adapter) : d_features;
  // The class token bypasses the adapter, so it receives no gradient.
  ShapeDescriptor desc = unified.desc;
  if (desc.class_token) desc.class_token->setZero();
  grads->backbone.projection += backbone_backward(model.backbone, sample.tokens, inverse_unify(d_tokens, desc));
  return loss;
}

namespace {

void run_stage(Model& model, const TaskData& data, const TrainPlan& plan, bool train_backbone, double lr,
                 int first_epoch, int epochs, int stage, std::vector<EpochMetrics>& metrics) {
  AdamWSettings opt = plan.optimizer;
  opt.lr = lr;
  OptimizerState state;
  const std::size_t n = data.train.size();
  const std::size_t batch = static_cast<std::size_t>(plan.batch_size);
  std::vector<std::size_t> order(n);

  for (int e = 0; e < epochs; ++e) {
    const int epoch = first_epoch + e;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(plan.seed + static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t stop = std::min(n, start + batch);
      Model grads = zeros_like(model);
      for (std::size_t i = start; i < stop; ++i) {
        loss_sum += sample_loss(model, data.train[order[i]], &grads, train_backbone);
      }
      Vectord flat_grads = flatten(grads, train_backbone) / double(stop - start);
      Vectord params = flatten(model, train_backbone);
      adamw_step(params, flat_grads, state, opt);
      unflatten(model, train_backbone, params);
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.stage = stage;
    m.train_loss = loss_sum / double(n);
    m.val_id_acc = data.val_id.empty() ? 0.0 : evaluate(model, data.val_id);
    m.val_ood_acc = data.val_ood.empty() ? 0.0 : evaluate(model, data.val_ood);
    metrics.push_back(m);
  }
}

}  // namespace

FineTuneResult run_finetune(Model model, const TaskData& data, const TrainPlan& plan) {
  plan.validate();
  if (data.train.empty()) throw ArgumentError("run_finetune: empty training set");
  if (model.adapter) model.adapter->validate();

  FineTuneResult result;
  const double lr2 = plan.stage2_lr.value_or(plan.optimizer.lr);
  switch (plan.mode) {
    case FineTuneMode::LP:
      run_stage(model, data, plan, false, plan.optimizer.lr, 1, plan.stage1_epochs, 1, result.metrics);
      break;
    case FineTuneMode::FT:
      run_stage(model, data, plan, true, plan.optimizer.lr, 1, plan.stage1_epochs, 1, result.metrics);
      break;
    case FineTuneMode::SFT:
      run_stage(model, data, plan, false, plan.optimizer.lr, 1, plan.stage1_epochs, 1, result.metrics);
      run_stage(model, data, plan, true, lr2, plan.stage1_epochs + 1, plan.stage2_epochs, 2, result.metrics);
      break;
  }
  result.model = std::move(model);
  return result;
}

}  // namespace cladapter
