// SPDX-License-Identifier: Apache-2.0

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "cladapter/experiment.hpp"

namespace cladapter {

namespace {

struct Entry {
  std::string key;
  std::string help;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& expected) {
  throw UsageError("config field '" + key + "': cannot parse '" + value + "' as " + expected);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& value) {
  Int out{};
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) bad_value(key, value, "an integer");
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) bad_value(key, value, "a number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  bad_value(key, value, "a boolean");
}

template <typename Int>
Entry int_entry(std::string key, std::string help, Int ExperimentConfig::*field) {
  return {key, std::move(help), [key, field](ExperimentConfig& c, const std::string& v) { c.*field = parse_int<Int>(key, v); },
          [field](const ExperimentConfig& c) { return std::to_string(c.*field); }};
}

template <typename Int, typename Owner>
Entry nested_int(std::string key, std::string help, Owner ExperimentConfig::*owner, Int Owner::*field) {
  return {key, std::move(help),
          [key, owner, field](ExperimentConfig& c, const std::string& v) { (c.*owner).*field = parse_int<Int>(key, v); },
          [owner, field](const ExperimentConfig& c) { return std::to_string((c.*owner).*field); }};
}

template <typename Owner>
Entry nested_double(std::string key, std::string help, Owner ExperimentConfig::*owner, double Owner::*field) {
  return {key, std::move(help),
          [key, owner, field](ExperimentConfig& c, const std::string& v) { (c.*owner).*field = parse_double(key, v); },
          [owner, field](const ExperimentConfig& c) { return format_double((c.*owner).*field); }};
}

Entry double_entry(std::string key, std::string help, double ExperimentConfig::*field) {
  return {key, std::move(help), [key, field](ExperimentConfig& c, const std::string& v) { c.*field = parse_double(key, v); },
          [field](const ExperimentConfig& c) { return format_double(c.*field); }};
}

Entry optimizer_entry(std::string key, std::string help, double AdamWSettings::*field) {
  return {key, std::move(help),
          [key, field](ExperimentConfig& c, const std::string& v) { c.plan.optimizer.*field = parse_double(key, v); },
          [field](const ExperimentConfig& c) { return format_double(c.plan.optimizer.*field); }};
}

const std::vector<Entry>& table() {
  static const std::vector<Entry> entries = [] {
    using C = ExperimentConfig;
    std::vector<Entry> t;
    t.push_back(nested_int("classes", "number of classes C", &C::task, &TaskSpec::classes));
    t.push_back(nested_int("tokens", "tokens per sample N", &C::task, &TaskSpec::tokens));
    t.push_back(nested_int("input_dim", "input-space width fed to the backbone", &C::task, &TaskSpec::input_dim));
    t.push_back(nested_double("spread", "per-token standard deviation around class means", &C::task, &TaskSpec::spread));
    t.push_back(nested_double("shift_degrees", "OOD rotation angle in degrees", &C::task, &TaskSpec::shift_degrees));
    t.push_back(nested_double("shift_translation", "OOD translation length", &C::task, &TaskSpec::shift_translation));
    t.push_back(nested_int("train_per_class", "training samples per class", &C::task, &TaskSpec::train_per_class));
    t.push_back(nested_int("val_per_class", "validation samples per class (each split)", &C::task, &TaskSpec::val_per_class));
    t.push_back(int_entry("dim", "feature width D", &C::dim));
    t.push_back(int_entry("clusters", "cluster centers K", &C::clusters));
    t.push_back(int_entry("ratio", "MLP hidden ratio", &C::ratio));
    t.push_back({"adapter", "insert the adapter (false = head-only baseline)",
                 [](C& c, const std::string& v) { c.use_adapter = parse_bool("adapter", v); },
                 [](const C& c) { return std::string(c.use_adapter ? "true" : "false"); }});
    t.push_back(double_entry("transform_noise", "init noise of the transform bank around identity", &C::transform_noise));
    t.push_back({"backbone", "backbone layout: vit, cnn or video",
                 [](C& c, const std::string& v) {
                   try {
                     c.backbone_kind = parse_tensor_kind(v);
                   } catch (const ArgumentError&) {
                     bad_value("backbone", v, "one of vit, cnn, video");
                   }
                 },
                 [](const C& c) { return std::string(to_string(c.backbone_kind)); }});
    t.push_back(int_entry("frames", "frames T for the video backbone", &C::frames));
    t.push_back({"mode", "fine-tuning mode: lp, ft or sft",
                 [](C& c, const std::string& v) {
                   try {
                     c.plan.mode = parse_mode(v);
                   } catch (const ArgumentError&) {
                     bad_value("mode", v, "one of lp, ft, sft");
                   }
                 },
                 [](const C& c) { return std::string(to_string(c.plan.mode)); }});
    t.push_back(nested_int("stage1_epochs", "epochs of stage 1 (total for lp/ft)", &C::plan, &TrainPlan::stage1_epochs));
    t.push_back(nested_int("stage2_epochs", "epochs of stage 2 (sft only)", &C::plan, &TrainPlan::stage2_epochs));
    t.push_back(optimizer_entry("lr", "AdamW learning rate", &AdamWSettings::lr));
    t.push_back({"stage2_lr", "stage-2 learning rate (empty = lr)",
                 [](C& c, const std::string& v) {
                   if (v.empty()) c.plan.stage2_lr.reset();
                   else c.plan.stage2_lr = parse_double("stage2_lr", v);
                 },
                 [](const C& c) { return c.plan.stage2_lr ? format_double(*c.plan.stage2_lr) : std::string(); }});
    t.push_back(optimizer_entry("weight_decay", "decoupled weight decay", &AdamWSettings::weight_decay));
    t.push_back(optimizer_entry("beta1", "AdamW first-moment decay", &AdamWSettings::beta1));
    t.push_back(optimizer_entry("beta2", "AdamW second-moment decay", &AdamWSettings::beta2));
    t.push_back(optimizer_entry("adam_eps", "AdamW denominator epsilon", &AdamWSettings::eps));
    t.push_back(nested_int("batch_size", "minibatch size", &C::plan, &TrainPlan::batch_size));
    t.push_back(int_entry("seed", "experiment seed (CLADAPTER_SEED overrides the file value)", &C::seed));
    t.push_back({"output_dir", "directory for metrics, checkpoint and features",
                 [](C& c, const std::string& v) { c.output_dir = v; },
                 [](const C& c) { return c.output_dir.string(); }});
    t.push_back({"export_features", "write features.csv after training",
                 [](C& c, const std::string& v) { c.export_features = parse_bool("export_features", v); },
                 [](const C& c) { return std::string(c.export_features ? "true" : "false"); }});
    t.push_back({"features_split", "split exported to features.csv: id or ood",
                 [](C& c, const std::string& v) {
                   if (v != "id" && v != "ood") bad_value("features_split", v, "id or ood");
                   c.features_split = v;
                 },
                 [](const C& c) { return c.features_split; }});
    t.push_back({"checkpoint", "checkpoint read by export-features",
                 [](C& c, const std::string& v) { c.checkpoint = v; },
                 [](const C& c) { return c.checkpoint.string(); }});
    t.push_back(double_entry("grad_h", "primary finite-difference step", &C::grad_h));
    t.push_back(double_entry("grad_tolerance", "max relative gradient error", &C::grad_tolerance));
    t.push_back(int_entry("grad_samples", "samples in the grad-check loss", &C::grad_samples));
    t.push_back({"grad_corrupt_group", "negate one group's analytic gradient (fault injection)",
                 [](C& c, const std::string& v) { c.grad_corrupt_group = v; },
                 [](const C& c) { return c.grad_corrupt_group; }});
    return t;
  }();
  return entries;
}

const Entry& find(const std::string& key) {
  for (const auto& e : table()) {
    if (e.key == key) return e;
  }
  throw UsageError("unknown config field '" + key + "'");
}

}  // namespace

const std::vector<std::string>& ConfigRegistry::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& e : table()) out.push_back(e.key);
    return out;
  }();
  return k;
}

std::string ConfigRegistry::describe(const std::string& key) { return find(key).help; }

void ConfigRegistry::set(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  find(key).set(cfg, trim(value));
}

std::string ConfigRegistry::get(const ExperimentConfig& cfg, const std::string& key) { return find(key).get(cfg); }

std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw UsageError("config line " + std::to_string(lineno) + ": empty key");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

void apply_settings(ExperimentConfig& cfg, const std::map<std::string, std::string>& settings) {
  for (const auto& [k, v] : settings) ConfigRegistry::set(cfg, k, v);
}

ExperimentConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  ExperimentConfig cfg;
  apply_settings(cfg, parse_config_text(buf.str()));
  return cfg;
}

void apply_seed_env(ExperimentConfig& cfg) {
  if (const char* env = std::getenv("CLADAPTER_SEED"); env && *env) {
    try {
      cfg.seed = parse_int<std::uint64_t>("seed", env);
    } catch (const UsageError&) {
      throw UsageError("CLADAPTER_SEED: cannot parse '" + std::string(env) + "' as an integer");
    }
  }
}

std::string dump_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& e : table()) out += e.key + " = " + e.get(cfg) + "\n";
  return out;
}

void ExperimentConfig::validate() const {
  auto need = [](bool ok, const char* field, const char* rule) {
    if (!ok) throw UsageError(std::string("config field '") + field + "': " + rule);
  };
  need(task.classes >= 2, "classes", "must be >= 2");
  need(task.tokens >= 1, "tokens", "must be >= 1");
  need(task.input_dim >= 1, "input_dim", "must be >= 1");
  need(task.spread > 0.0, "spread", "must be > 0");
  need(task.train_per_class >= 1, "train_per_class", "must be >= 1");
  need(task.val_per_class >= 1, "val_per_class", "must be >= 1");
  need(dim >= 1, "dim", "must be >= 1");
  need(clusters >= 1, "clusters", "must be >= 1");
  need(ratio >= 1, "ratio", "must be >= 1");
  need(transform_noise >= 0.0, "transform_noise", "must be >= 0");
  need(frames >= 1, "frames", "must be >= 1");
  need(backbone_kind != TensorKind::VideoClip || task.tokens % frames == 0, "frames", "must divide tokens");
  need(plan.stage1_epochs >= 0, "stage1_epochs", "must be >= 0");
  need(plan.mode != FineTuneMode::SFT || plan.stage1_epochs >= 1, "stage1_epochs", "must be >= 1 for sft");
  need(plan.stage2_epochs >= 0, "stage2_epochs", "must be >= 0");
  need(plan.optimizer.lr > 0.0, "lr", "must be > 0");
  need(!plan.stage2_lr || *plan.stage2_lr > 0.0, "stage2_lr", "must be > 0");
  need(plan.optimizer.weight_decay >= 0.0, "weight_decay", "must be >= 0");
  need(plan.optimizer.beta1 >= 0.0 && plan.optimizer.beta1 < 1.0, "beta1", "must lie in [0, 1)");
  need(plan.optimizer.beta2 >= 0.0 && plan.optimizer.beta2 < 1.0, "beta2", "must lie in [0, 1)");
  need(plan.optimizer.eps > 0.0, "adam_eps", "must be > 0");
  need(plan.batch_size >= 1, "batch_size", "must be >= 1");
  need(!output_dir.empty(), "output_dir", "must not be empty");
  need(grad_h > 0.0, "grad_h", "must be > 0");
  need(grad_tolerance > 0.0, "grad_tolerance", "must be > 0");
  need(grad_samples >= 1, "grad_samples", "must be >= 1");
}

}  // namespace cladapter
