#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dfm/checkpoint.hpp"
#include "dfm/config.hpp"
#include "dfm/eval.hpp"

namespace dfm {

namespace fs = std::filesystem;

/// $DFM_OUT, or the working directory.
fs::path output_root();
/// `explicit_dir` when given, else output_root() / cfg.output_dir.
fs::path run_dir(const RunConfig& cfg, const std::optional<fs::path>& explicit_dir);

std::unique_ptr<Dataset> make_dataset(const RunConfig& cfg);
/// Held-out images: synthetic indices past the training set, or the directory images.
LabeledSet reference_set(const RunConfig& cfg, int count);

struct DecomposeResult {
  std::vector<fs::path> files;
  double max_error = 0.0;
};

/// Writes level_<s>.pgm/ppm per level plus levels.txt describing the display mapping.
DecomposeResult cmd_decompose(const fs::path& input, const RunConfig& cfg, const fs::path& out, std::ostream& log);

struct TrainOptions {
  bool resume = false;
  std::optional<long> stop_after;  // stop (with a checkpoint) once this step is reached
};

struct TrainResult {
  long step = 0;
  long rows_written = 0;
  double final_loss = 0.0;
  fs::path checkpoint;
};

inline constexpr const char* kCheckpointFile = "checkpoint.dfm";
inline constexpr const char* kAbortCheckpointFile = "checkpoint_abort.dfm";
inline constexpr const char* kTrainLog = "train_log.csv";

/// Trains into `out`: config.ini, train_log.csv (step,loss,grad_norm,lr,wall_ms) and
/// checkpoint.dfm every checkpoint_every steps and at the end. With resume set, continues
/// from checkpoint.dfm when present. A non-finite loss saves checkpoint_abort.dfm and rethrows.
TrainResult cmd_train(const RunConfig& cfg, const fs::path& out, const TrainOptions& opts, std::ostream& log);

struct SampleRequest {
  fs::path checkpoint;
  int count = 64;
  int class_label = -1;  // -1 cycles through the classes
  double cfg = 1.0;
  std::vector<int> budgets;  // empty: the checkpoint config's defaults
  std::optional<double> tau;
  std::uint64_t seed = 0;
  bool previews = false;
  bool use_ema = true;
  /// When set, the checkpoint must agree with it on every model-defining field.
  std::optional<RunConfig> expect;
};

struct SampleOutput {
  std::vector<fs::path> files;
  std::vector<fs::path> previews;
  int evaluations = 0;  // per image
  std::vector<Tensor<float>> images;
  std::vector<int> labels;
};

/// Writes sample_s<seed>_c<class>_<i>.pgm (image i uses noise seed seed + i) and, with
/// previews, previews/sample_..._p<phase>.pgm.
SampleOutput cmd_sample(const SampleRequest& req, const fs::path& out, std::ostream& log);

/// Keys that change the network or its inputs; sampling requires them to match.
std::vector<std::string> incompatible_fields(const RunConfig& checkpoint_cfg, const RunConfig& expected);

/// Images of a run directory grouped into seeds: by subdirectory when the directory holds
/// no images itself, otherwise by the `_s<n>` filename token.
RunSamples load_run(const fs::path& dir);

struct EvalRequest {
  std::vector<fs::path> runs;  // exactly two
  std::optional<fs::path> reference;  // default: held-out images from the config
  std::uint64_t seed = 0;             // feature extractor seed
};

/// Writes report.csv and verdict.txt into `out`.
CompareReport cmd_eval(const EvalRequest& req, const RunConfig& cfg, const fs::path& out, std::ostream& log);

struct SweepSpec {
  std::vector<std::pair<std::string, std::vector<std::string>>> params;
};

/// `[sweep]` section with `section.key = v1 | v2 | ...` entries.
SweepSpec parse_sweep(const std::string& text);
SweepSpec load_sweep(const fs::path& path);

struct AblationRow {
  std::string run;
  std::vector<std::string> values;  // one per swept parameter
  std::uint64_t seed = 0;
  double pseudo_fd = 0.0;
  double final_loss = 0.0;
  int evaluations = 0;
};

struct AblationResult {
  std::vector<std::string> params;
  std::vector<AblationRow> rows;
  fs::path summary;
};

/// Every grid configuration, validated. Runs without a swept train.seed use base seed + index.
std::vector<RunConfig> expand_sweep(const RunConfig& base, const SweepSpec& sweep);

/// Trains, samples and scores every grid point in order into out/run_<i>; summary.csv
/// (run, one column per parameter, seed, pseudo_fd, final_loss, evaluations) is rewritten
/// after each run.
AblationResult cmd_ablate(const RunConfig& base, const SweepSpec& sweep, const fs::path& out, std::ostream& log);

}  // namespace dfm
