// SPDX-License-Identifier: Apache-2.0
//
// Experiment runner. Every config key is accepted as --key value on each
// subcommand; --config FILE loads key = value lines first.

#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "cladapter/checkpoint.hpp"
#include "cladapter/experiment.hpp"

using namespace cladapter;

namespace {

struct Subcommand {
  CLI::App* app = nullptr;
  std::string config_file;
  std::map<std::string, std::string> overrides;
};

void add_config_options(Subcommand& sub) {
  sub.app->add_option("--config", sub.config_file, "key = value config file");
  for (const auto& key : ConfigRegistry::keys()) {
    sub.app->add_option("--" + key, sub.overrides[key], ConfigRegistry::describe(key));
  }
}

// Precedence: defaults < config file < CLADAPTER_SEED < command-line flags.
ExperimentConfig resolve(const Subcommand& sub) {
  ExperimentConfig cfg = sub.config_file.empty() ? ExperimentConfig{} : load_config_file(sub.config_file);
  apply_seed_env(cfg);
  for (const auto& [key, value] : sub.overrides) {
    if (sub.app->count("--" + key) > 0) ConfigRegistry::set(cfg, key, value);
  }
  cfg.validate();
  return cfg;
}

int cmd_train(const ExperimentConfig& cfg) {
  const ExperimentReport r = run_experiment(cfg);
  const auto& last = r.result.metrics.empty() ? EpochMetrics{} : r.result.metrics.back();
  std::cout << "mode=" << to_string(cfg.plan.mode) << " epochs=" << r.result.metrics.size()
            << " final_train_loss=" << format_double(last.train_loss) << " val_id_acc=" << format_double(r.val_id_acc)
            << " val_ood_acc=" << format_double(r.val_ood_acc) << '\n'
            << "wrote " << r.metrics_path.string() << '\n'
            << "wrote " << r.checkpoint_path.string() << '\n';
  if (!r.features_path.empty()) std::cout << "wrote " << r.features_path.string() << '\n';
  return 0;
}

int cmd_grad_check(const ExperimentConfig& cfg) {
  const GradCheckReport report = grad_check_model(cfg);
  print_grad_report(std::cout, report);
  return report.passed() ? 0 : 1;
}

int cmd_export_features(const ExperimentConfig& cfg) {
  const auto path = cfg.checkpoint.empty() ? cfg.output_dir / "checkpoint.clad" : cfg.checkpoint;
  CheckpointHeader header;
  Model model = load_checkpoint(path, &header);
  if (!(header.flags & kHasBackbone)) model.backbone = build_model(cfg).backbone;
  const TaskData data = gen_task(resolved_task(cfg));
  std::filesystem::create_directories(cfg.output_dir);
  const auto out = cfg.output_dir / "features.csv";
  write_features_csv(out, model, cfg.features_split == "ood" ? data.val_ood : data.val_id);
  std::cout << "wrote " << out.string() << '\n';
  return 0;
}

int cmd_param_count(const ExperimentConfig& cfg) {
  const auto d = cfg.dim, k = cfg.clusters, r = cfg.ratio;
  const AdapterParamsd p = init_adapter(d, k, r, 0, 0.0);
  std::map<std::string, std::int64_t> by_group;
  p.for_each_tensor([&](std::string_view g, const auto& v) { by_group[std::string(g)] += v.size(); });
  std::cout << "D=" << d << " K=" << k << " ratio=" << r << '\n';
  for (const char* g : {"centers", "transforms", "norm_in", "norm_mid", "mlp"}) {
    std::cout << "  " << g << ": " << by_group[g] << '\n';
  }
  std::cout << "adapter_params=" << adapter_param_count(d, k, r) << '\n';
  std::cout << "head_params=" << d * cfg.task.classes + cfg.task.classes << '\n';
  return count_entries(p) == adapter_param_count(d, k, r) ? 0 : 1;
}

int cmd_synth_gen(const ExperimentConfig& cfg) {
  std::filesystem::create_directories(cfg.output_dir);
  const auto out = cfg.output_dir / "dataset.csv";
  write_dataset_csv(out, gen_task(resolved_task(cfg)));
  std::cout << "wrote " << out.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cluster attention adapter experiments"};
  app.require_subcommand(1);

  Subcommand train{app.add_subcommand("train", "generate a task, fine-tune, write metrics/checkpoint/features")};
  Subcommand grad{app.add_subcommand("grad-check", "finite-difference check of every parameter group")};
  Subcommand features{app.add_subcommand("export-features", "write adapter features of a saved checkpoint")};
  Subcommand count{app.add_subcommand("param-count", "print adapter parameter accounting")};
  Subcommand synth{app.add_subcommand("synth-gen", "write the synthetic dataset as CSV")};
  for (Subcommand* s : {&train, &grad, &features, &count, &synth}) add_config_options(*s);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train.app) return cmd_train(resolve(train));
    if (*grad.app) return cmd_grad_check(resolve(grad));
    if (*features.app) return cmd_export_features(resolve(features));
    if (*count.app) return cmd_param_count(resolve(count));
    if (*synth.app) return cmd_synth_gen(resolve(synth));
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
