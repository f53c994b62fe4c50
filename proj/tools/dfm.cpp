#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "dfm/commands.hpp"

namespace {

constexpr int kConfigError = 2;
constexpr int kRuntimeError = 3;

std::vector<int> parse_budgets(const std::string& s) {
  std::vector<int> out;
  for (const auto& item : dfm::split_list(s, ',')) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size()) throw dfm::InvalidConfig("--steps: cannot parse '" + item + "'");
    out.push_back(v);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multiscale flow matching: decompose, train, sample, evaluate and ablate"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  auto add_out = [&](CLI::App* c) {
    c->add_option("--out", out_dir, "Output directory (default: $DFM_OUT/<output.dir>)");
  };

  auto* decompose = app.add_subcommand("decompose", "Write the per-level images of one image");
  std::string input;
  decompose->add_option("--config", config_path, "Run config")->required();
  decompose->add_option("--input", input, "PGM/PPM image at the finest resolution")->required();
  add_out(decompose);

  auto* train = app.add_subcommand("train", "Train a model");
  std::optional<long> steps, stop_after;
  std::optional<std::string> variant;
  std::optional<std::uint64_t> seed;
  bool resume = false;
  train->add_option("--config", config_path, "Run config")->required();
  train->add_option("--steps", steps, "Override train.steps");
  train->add_option("--variant", variant, "Override train.variant (dfm, vanilla, tied)");
  train->add_option("--seed", seed, "Override train.seed");
  train->add_flag("--resume", resume, "Continue from the run directory's checkpoint");
  train->add_option("--stop-after", stop_after, "Stop with a checkpoint after this step");
  add_out(train);

  auto* sample = app.add_subcommand("sample", "Generate images from a checkpoint");
  std::string checkpoint, budgets;
  std::optional<int> count, cls;
  std::optional<double> cfg_weight, tau;
  bool previews = false, live = false;
  sample->add_option("--checkpoint", checkpoint, "Checkpoint (default: the config's run directory)");
  sample->add_option("--config", config_path, "Config the checkpoint must be compatible with");
  sample->add_option("--count", count, "Number of images");
  sample->add_option("--class", cls, "Class label, -1 to cycle through classes");
  sample->add_option("--cfg", cfg_weight, "Guidance weight");
  sample->add_option("--steps", budgets, "Per-stage step budgets, e.g. 30,10");
  sample->add_option("--tau", tau, "Activation threshold");
  sample->add_option("--seed", seed, "Base noise seed");
  sample->add_flag("--previews", previews, "Also write per-phase previews");
  sample->add_flag("--live", live, "Use the live weights instead of the EMA");
  add_out(sample);

  auto* eval = app.add_subcommand("eval", "Compare two sample directories against a reference");
  std::vector<std::string> runs;
  std::string reference;
  eval->add_option("runs", runs, "Two run directories")->required()->expected(2);
  eval->add_option("--reference", reference, "Reference image directory (default: held-out data from --config)");
  eval->add_option("--config", config_path, "Run config");
  eval->add_option("--seed", seed, "Feature extractor seed");
  add_out(eval);

  auto* ablate = app.add_subcommand("ablate", "Run a parameter sweep");
  std::string sweep_path;
  ablate->add_option("--config", config_path, "Base run config")->required();
  ablate->add_option("--sweep", sweep_path, "Sweep file")->required();
  add_out(ablate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigError;
  }

  const auto explicit_out = out_dir.empty() ? std::nullopt : std::optional<dfm::fs::path>(out_dir);
  try {
    std::optional<dfm::RunConfig> cfg;
    if (!config_path.empty()) cfg = dfm::load_config(config_path);

    if (*decompose) {
      const auto out = explicit_out.value_or(dfm::run_dir(*cfg, std::nullopt) / "decompose");
      dfm::cmd_decompose(input, *cfg, out, std::cout);
    } else if (*train) {
      if (steps) cfg->train.steps = *steps;
      if (variant) cfg->train.variant = dfm::parse_variant(*variant);
      if (seed) cfg->train.seed = *seed;
      dfm::TrainOptions opts;
      opts.resume = resume;
      opts.stop_after = stop_after;
      const auto r = dfm::cmd_train(*cfg, dfm::run_dir(*cfg, explicit_out), opts, std::cout);
      std::cout << "trained to step " << r.step << "\n";
    } else if (*sample) {
      dfm::SampleRequest req;
      if (checkpoint.empty()) {
        if (!cfg) throw dfm::InvalidConfig("sample needs --checkpoint or --config");
        req.checkpoint = dfm::run_dir(*cfg, std::nullopt) / dfm::kCheckpointFile;
      } else {
        req.checkpoint = checkpoint;
      }
      const auto stored = dfm::checkpoint_config(dfm::load_checkpoint(req.checkpoint));
      const auto& defaults = cfg ? *cfg : stored;
      req.expect = cfg;
      req.count = count.value_or(defaults.sampler.count);
      req.class_label = cls.value_or(defaults.sampler.class_label);
      req.cfg = cfg_weight.value_or(defaults.sampler.cfg);
      req.budgets = budgets.empty() ? defaults.sampler.budgets : parse_budgets(budgets);
      req.tau = tau.value_or(defaults.sampler.tau);
      req.seed = seed.value_or(defaults.sampler.seed);
      req.previews = previews;
      req.use_ema = !live;
      const auto out = explicit_out.value_or(req.checkpoint.parent_path() / "samples");
      dfm::cmd_sample(req, out, std::cout);
    } else if (*eval) {
      dfm::EvalRequest req;
      for (const auto& r : runs) req.runs.emplace_back(r);
      if (!reference.empty()) req.reference = reference;
      if (!cfg && !req.reference) throw dfm::InvalidConfig("eval needs --reference or --config");
      const dfm::RunConfig c = cfg.value_or(dfm::RunConfig{});
      req.seed = seed.value_or(c.eval.feature_seed);
      dfm::cmd_eval(req, c, explicit_out.value_or(dfm::output_root() / "eval"), std::cout);
    } else if (*ablate) {
      const auto sweep = dfm::load_sweep(sweep_path);
      const auto r = dfm::cmd_ablate(*cfg, sweep, explicit_out.value_or(dfm::output_root() / "ablate"), std::cout);
      std::cout << "summary: " << r.summary.string() << "\n";
    }
  } catch (const dfm::InvalidConfig& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const dfm::InvalidSpec& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return 0;
}
