#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dfm/model.hpp"
#include "dfm/sampler.hpp"
#include "dfm/train.hpp"

namespace dfm {

struct DataConfig {
  std::string kind = "synthetic";  // synthetic | directory
  std::string path;                // image directory when kind = directory
  SyntheticDatasetSpec synthetic;  // resolution, channels and classes apply to both kinds
  long stats_samples = 1024;
};

struct SamplerDefaults {
  std::vector<int> budgets{30, 10};
  double tau = 0.7;
  double cfg = 1.0;
  int count = 64;
  int class_label = -1;  // -1 cycles through the classes
  std::uint64_t seed = 0;
};

struct EvalConfig {
  std::uint64_t feature_seed = 0;
  int samples = 1000;
  int reference = 2000;
};

/// Everything a run needs, as read from one INI file.
struct RunConfig {
  ScaleSpec scales;
  ModelConfig model;  // scales, patch_sizes, num_classes and data_std are derived
  int patch_size = 2;  // at the finest scale
  ComputeAllocation allocation = ComputeAllocation::tokens;
  bool conditional = true;
  TrainConfig train;  // sampler_cfg holds the timestep settings
  long checkpoint_every = 1000;
  DataConfig data;
  SamplerDefaults sampler;
  EvalConfig eval;
  std::string output_dir = "run";

  RunConfig();

  /// Cross-field checks: patch divisibility, stage counts, data shape against scales.
  void validate() const;
};

RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
/// Canonical text; parse_config(serialize_config(c)) reproduces c.
std::string serialize_config(const RunConfig& c);
std::string config_digest(const RunConfig& c);
std::string sha256_hex(const std::string& bytes);

/// Sets one `section.key` entry from its text form. Throws InvalidConfig for unknown keys.
void set_config_value(RunConfig& c, const std::string& key, const std::string& value);
bool is_config_key(const std::string& key);
/// Key -> value text in canonical form.
std::map<std::string, std::string> config_values(const RunConfig& c);
/// Keys whose values differ.
std::vector<std::string> config_diff(const RunConfig& a, const RunConfig& b);

/// Model configuration after allocation and variant; `level_stds` (one per model level)
/// fills data_std and, when standardizing, the scale stds.
ModelConfig resolve_model(const RunConfig& c, const std::vector<double>& level_stds = {});
/// Training configuration after allocation (batch multiplier) and variant.
TrainConfig resolve_train(const RunConfig& c);
/// Sampling schedule for the variant: vanilla integrates the summed budget on one stage,
/// tied uses one shared grid of the summed budget.
SamplerSchedule resolve_schedule(const RunConfig& c, const std::vector<int>& budgets, double tau);

std::vector<std::string> split_list(const std::string& s, char sep);
/// Shortest text that parses back to the same double.
std::string format_number(double v);

}  // namespace dfm
