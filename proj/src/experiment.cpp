// SPDX-License-Identifier: Apache-2.0

#include "cladapter/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <random>
#include <sstream>

#include "cladapter/checkpoint.hpp"

namespace cladapter {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

TaskSpec resolved_task(const ExperimentConfig& cfg) {
  TaskSpec t = cfg.task;
  t.seed = cfg.seed;
  return t;
}

TrainPlan resolved_plan(const ExperimentConfig& cfg) {
  TrainPlan p = cfg.plan;
  p.seed = cfg.seed;
  return p;
}

Model build_model(const ExperimentConfig& cfg) {
  Model m;
  m.backbone = make_backbone(cfg.task.input_dim, cfg.dim, cfg.backbone_kind, derive_seed(cfg.seed, 1), cfg.frames);
  if (cfg.use_adapter) {
    m.adapter = init_adapter(cfg.dim, cfg.clusters, cfg.ratio, derive_seed(cfg.seed, 2), cfg.transform_noise);
  }
  m.head = init_head(cfg.dim, cfg.task.classes, derive_seed(cfg.seed, 3));
  return m;
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  return std::string(buf, ptr);
}

namespace {

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  return out;
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw IoError("cannot create output directory " + dir.string() + (ec ? ": " + ec.message() : ""));
  }
}

}  // namespace

void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& metrics) {
  auto out = open_output(path);
  out << "epoch,stage,train_loss,val_id_acc,val_ood_acc\n";
  for (const auto& m : metrics) {
    out << m.epoch << ',' << m.stage << ',' << format_double(m.train_loss) << ',' << format_double(m.val_id_acc) << ','
        << format_double(m.val_ood_acc) << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

void write_features_csv(const std::filesystem::path& path, const Model& model, const Dataset& split) {
  auto out = open_output(path);
  const Index width = model.head.dim();
  out << "sample_id,token_index,label";
  for (Index j = 0; j < width; ++j) out << ",f" << j;
  out << '\n';
  for (std::size_t s = 0; s < split.size(); ++s) {
    const Matrixd features = model_features(model, split[s].tokens);
    for (Index t = 0; t < features.rows(); ++t) {
      out << s << ',' << t << ',' << split[s].label;
      for (Index j = 0; j < features.cols(); ++j) out << ',' << format_double(features(t, j));
      out << '\n';
    }
  }
  if (!out) throw IoError("write failed for " + path.string());
}

void write_dataset_csv(const std::filesystem::path& path, const TaskData& data) {
  auto out = open_output(path);
  const Index width = data.train.empty() ? 0 : data.train.front().tokens.cols();
  out << "split,sample_id,token_index,label";
  for (Index j = 0; j < width; ++j) out << ",x" << j;
  out << '\n';
  auto dump = [&](const char* name, const Dataset& split) {
    for (std::size_t s = 0; s < split.size(); ++s) {
      for (Index t = 0; t < split[s].tokens.rows(); ++t) {
        out << name << ',' << s << ',' << t << ',' << split[s].label;
        for (Index j = 0; j < split[s].tokens.cols(); ++j) out << ',' << format_double(split[s].tokens(t, j));
        out << '\n';
      }
    }
  };
  dump("train", data.train);
  dump("val_id", data.val_id);
  dump("val_ood", data.val_ood);
  if (!out) throw IoError("write failed for " + path.string());
}

ExperimentReport run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  ensure_dir(cfg.output_dir);
  const TaskData data = gen_task(resolved_task(cfg));

  ExperimentReport report;
  report.result = run_finetune(build_model(cfg), data, resolved_plan(cfg));
  const Model& model = report.result.model;
  report.val_id_acc = evaluate(model, data.val_id);
  report.val_ood_acc = evaluate(model, data.val_ood);

  report.metrics_path = cfg.output_dir / "metrics.csv";
  write_metrics_csv(report.metrics_path, report.result.metrics);
  report.checkpoint_path = cfg.output_dir / "checkpoint.clad";
  save_checkpoint(report.checkpoint_path, model);
  if (cfg.export_features) {
    report.features_path = cfg.output_dir / "features.csv";
    write_features_csv(report.features_path, model, cfg.features_split == "ood" ? data.val_ood : data.val_id);
  }
  return report;
}

bool GradCheckReport::passed() const {
  for (const auto& g : groups) {
    if (!(g.errors.at(primary_step) < tolerance)) return false;
  }
  return true;
}

GradCheckReport grad_check_model(const ExperimentConfig& cfg) {
  cfg.validate();
  Model model = build_model(cfg);

  // Move away from the structured init (identity norms, zero biases) so every
  // parameter sits at a generic point.
  {
    std::mt19937_64 rng(derive_seed(cfg.seed, 4));
    std::normal_distribution<double> noise(0.0, 0.1);
    for (auto& v : param_views(model, true)) {
      for (Index i = 0; i < v.values.size(); ++i) v.values(i) += noise(rng);
    }
  }

  TaskSpec spec = resolved_task(cfg);
  spec.train_per_class = (cfg.grad_samples + spec.classes - 1) / spec.classes;
  spec.val_per_class = 1;
  Dataset samples = gen_task(spec).train;
  samples.resize(static_cast<std::size_t>(cfg.grad_samples));

  const double count = double(samples.size());
  Model grads = zeros_like(model);
  for (const Sample& s : samples) sample_loss(model, s, &grads, true);
  Vectord analytic = flatten(grads, true) / count;
  const Vectord params = flatten(model, true);

  struct Range {
    std::string group;
    Index begin, end;
  };
  std::vector<Range> ranges;
  Index offset = 0;
  for (const auto& v : param_views(model, true)) {
    if (ranges.empty() || ranges.back().group != v.group) ranges.push_back({std::string(v.group), offset, offset});
    offset += v.values.size();
    ranges.back().end = offset;
  }

  if (!cfg.grad_corrupt_group.empty()) {
    bool found = false;
    for (const auto& r : ranges) {
      if (r.group == cfg.grad_corrupt_group) {
        analytic.segment(r.begin, r.end - r.begin) *= -1.0;
        found = true;
      }
    }
    if (!found) throw UsageError("config field 'grad_corrupt_group': no parameter group '" + cfg.grad_corrupt_group + "'");
  }

  Model probe = model;
  auto loss = [&](const Vectord& flat) {
    unflatten(probe, true, flat);
    double total = 0.0;
    for (const Sample& s : samples) total += sample_loss(probe, s, nullptr);
    return total / count;
  };

  GradCheckReport report;
  report.tolerance = cfg.grad_tolerance;
  report.steps = {1e-4, 1e-5, 1e-6};
  auto it = std::find(report.steps.begin(), report.steps.end(), cfg.grad_h);
  if (it == report.steps.end()) {
    report.steps.push_back(cfg.grad_h);
    it = report.steps.end() - 1;
  }
  report.primary_step = static_cast<std::size_t>(it - report.steps.begin());

  for (const auto& r : ranges) {
    GroupGradError g{r.group, {}};
    for (double h : report.steps) g.errors.push_back(grad_check(loss, params, analytic, h, r.begin, r.end).max_rel_error);
    report.groups.push_back(std::move(g));
  }
  return report;
}

void print_grad_report(std::ostream& os, const GradCheckReport& report) {
  os << std::left << std::setw(12) << "group";
  for (double h : report.steps) {
    std::ostringstream label;
    label << "h=" << h;
    os << std::setw(16) << label.str();
  }
  os << "status\n";
  for (const auto& g : report.groups) {
    os << std::setw(12) << g.group;
    for (double e : g.errors) {
      std::ostringstream cell;
      cell << std::scientific << std::setprecision(3) << e;
      os << std::setw(16) << cell.str();
    }
    os << (g.errors.at(report.primary_step) < report.tolerance ? "ok" : "FAIL") << '\n';
  }
  os << (report.passed() ? "PASS" : "FAIL") << ": max relative error at h=" << format_double(report.steps[report.primary_step])
     << " vs tolerance " << format_double(report.tolerance) << '\n';
}

}  // namespace cladapter
