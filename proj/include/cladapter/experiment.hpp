// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "cladapter/finetune.hpp"

namespace cladapter {

/// Every knob of an experiment. Defaults reproduce the reference experiment.
struct ExperimentConfig {
  TaskSpec task;
  Index dim = 16;
  Index clusters = 20;
  Index ratio = 4;
  bool use_adapter = true;
  double transform_noise = 0.01;
  TensorKind backbone_kind = TensorKind::VitTokens;
  Index frames = 1;
  TrainPlan plan;
  std::uint64_t seed = 0;

  std::filesystem::path output_dir = "cladapter_out";
  bool export_features = false;
  std::string features_split = "id";
  std::filesystem::path checkpoint;  // export-features input; empty means output_dir/checkpoint.clad

  double grad_h = 1e-5;
  double grad_tolerance = 1e-4;
  Index grad_samples = 2;
  std::string grad_corrupt_group;  // fault injection: negate this group's analytic gradient

  void validate() const;
};

/// Flat `key = value` settings. Unknown keys and unparsable values raise
/// UsageError naming the field.
class ConfigRegistry {
 public:
  static const std::vector<std::string>& keys();
  static std::string describe(const std::string& key);
  static void set(ExperimentConfig& cfg, const std::string& key, const std::string& value);
  static std::string get(const ExperimentConfig& cfg, const std::string& key);
};

/// Parses `key = value` lines; '#' starts a comment.
std::map<std::string, std::string> parse_config_text(const std::string& text);
ExperimentConfig load_config_file(const std::filesystem::path& path);
void apply_settings(ExperimentConfig& cfg, const std::map<std::string, std::string>& settings);
/// Applies CLADAPTER_SEED when set in the environment.
void apply_seed_env(ExperimentConfig& cfg);
std::string dump_config(const ExperimentConfig& cfg);

/// Sub-seeds derived from the experiment seed. The synthetic task itself uses the
/// experiment seed directly; the training plan seed is replaced by it as well.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);
Model build_model(const ExperimentConfig& cfg);
TaskSpec resolved_task(const ExperimentConfig& cfg);
TrainPlan resolved_plan(const ExperimentConfig& cfg);

struct ExperimentReport {
  FineTuneResult result;
  double val_id_acc = 0.0;
  double val_ood_acc = 0.0;
  std::filesystem::path metrics_path;
  std::filesystem::path checkpoint_path;
  std::filesystem::path features_path;  // empty unless exported
};

/// gen_task -> run_finetune -> evaluate, writing metrics.csv, checkpoint.clad and
/// optionally features.csv into cfg.output_dir.
ExperimentReport run_experiment(const ExperimentConfig& cfg);

// CSV output: comma separated, header row, doubles with 17 significant digits.
std::string format_double(double v);
void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& metrics);
void write_features_csv(const std::filesystem::path& path, const Model& model, const Dataset& split);
void write_dataset_csv(const std::filesystem::path& path, const TaskData& data);

struct GroupGradError {
  std::string group;
  std::vector<double> errors;  // one per step in GradCheckReport::steps
};

struct GradCheckReport {
  std::vector<double> steps;
  std::vector<GroupGradError> groups;
  double tolerance = 1e-4;
  std::size_t primary_step = 0;  // index into steps used for pass/fail

  bool passed() const;
};

/// Finite-difference check of the full backbone + adapter + head loss, per parameter group.
GradCheckReport grad_check_model(const ExperimentConfig& cfg);
void print_grad_report(std::ostream& os, const GradCheckReport& report);

}  // namespace cladapter
