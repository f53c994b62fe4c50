// Acceptance checks: one PASS/FAIL line per criterion. Exit status is nonzero when any
// criterion fails. The long training comparison (criterion 8) only runs with --slow.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>

#include "dfm/commands.hpp"
#include "dfm/image_io.hpp"
#include "support/gradcheck.hpp"

using namespace dfm;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

template <typename T>
Pyramid<T> random_pyramid(const ScaleSpec& spec, Rng& rng, double scale = 1.0) {
  auto p = standard_normal_pyramid<T>(spec, rng);
  for (auto& l : p.levels) {
    for (auto& v : l.values()) v = static_cast<T>(v * scale);
  }
  return p;
}

ScaleSpec spec_of(std::initializer_list<Resolution> res, int channels = 1) {
  ScaleSpec s;
  s.resolutions = res;
  s.channels = channels;
  return s;
}

// 1. max |reconstruct(decompose(x)) - x| <= 1e-5 in single precision.
Outcome reconstruction_identity() {
  const std::vector<ScaleSpec> specs = {spec_of({{4, 4}, {8, 8}, {16, 16}}), spec_of({{8, 8}, {16, 16}}),
                                        spec_of({{2, 2}, {4, 4}, {8, 8}, {16, 16}, {32, 32}}),
                                        spec_of({{4, 4}, {16, 16}}, 3), spec_of({{16, 16}})};
  Rng rng(101);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  double worst = 0.0;
  int images = 0;
  for (const auto& spec : specs) {
    for (int i = 0; i < 1000; ++i) {
      Tensor<float> x(spec.channels, spec.finest());
      for (auto& v : x.values()) v = u(rng);
      worst = std::max(worst, max_abs_diff(reconstruct(decompose(x, spec), spec, spec.stages()), x));
      ++images;
    }
  }
  return {worst <= 1e-5, std::to_string(images) + " images over " + std::to_string(specs.size()) +
                             " scale specs, max error " + num(worst) + " (tolerance 1e-5)"};
}

// 2. Endpoints of the forward process, zero loss at the target, masked levels ignored.
Outcome flow_endpoints() {
  Rng rng(202);
  const auto spec = spec_of({{4, 4}, {8, 8}, {16, 16}});
  bool ok = true;
  int cases = 0;
  for (int i = 0; i < 200; ++i) {
    const auto clean = random_pyramid<float>(spec, rng), noise = random_pyramid<float>(spec, rng);
    ok = ok && forward_process(clean, noise, StageTimesteps{{1.0, 1.0, 1.0}}) == clean;
    ok = ok && forward_process(clean, noise, StageTimesteps{{0.0, 0.0, 0.0}}) == noise;
    const auto target = velocity_target(clean, noise);
    for (int upto = 1; upto <= 3; ++upto) {
      const auto mask = LossMask::upto(3, upto);
      ok = ok && dfm_loss(target, target, mask) == 0.0f;
      const auto pred = random_pyramid<float>(spec, rng);
      auto perturbed = pred;
      for (int s = upto; s < 3; ++s) {
        for (auto& v : perturbed.levels[s].values()) v += 100.0f;
      }
      ok = ok && dfm_loss(pred, target, mask) == dfm_loss(perturbed, target, mask);
      ++cases;
    }
  }
  return {ok, std::to_string(cases) + " mask cases: endpoints exact, zero loss at target, masked levels bit-identical"};
}

// 3. With one stage the loss is the plain flow-matching objective and sampling is a linear grid.
Outcome collapse_to_vanilla() {
  ModelConfig mc;
  mc.scales = spec_of({{16, 16}});
  mc.patch_sizes = {2};
  mc.width = 32;
  mc.depth = 1;
  mc.heads = 2;
  mc.num_classes = 4;
  mc.time_features = 32;
  const VelocityNet<float> net(mc);
  auto w = net.init(3);
  fill_uniform(w.base, 4, 0.05);
  TimestepSamplerConfig ts;
  ts.stage_probs = {1.0};

  Rng rng(303);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  bool ok = true;
  int draws = 0;
  for (int chunk = 0; chunk < 10; ++chunk) {
    std::vector<Pyramid<float>> clean(100), noise(100), noisy(100);
    std::vector<ModelInput<float>> batch(100);
    std::vector<double> t(100);
    for (int b = 0; b < 100; ++b) {
      Tensor<float> x(1, 16, 16);
      for (auto& v : x.values()) v = u(rng);
      clean[b] = decompose(x, mc.scales);
      noise[b] = standard_normal_pyramid<float>(mc.scales, rng);
      const auto d = sample_train_draw(ts, rng);
      ok = ok && d.stage == 1 && d.mask == LossMask::all(1);
      t[b] = d.timesteps[0];
      noisy[b] = forward_process(clean[b], noise[b], d.timesteps);
      // x_t = t x1 + (1 - t) x0 computed directly
      const float tf = static_cast<float>(t[b]), sf = static_cast<float>(1.0 - t[b]);
      for (std::size_t i = 0; i < x.size(); ++i) ok = ok && noisy[b][0][i] == tf * x[i] + sf * noise[b][0][i];
      batch[b] = {&noisy[b], d.timesteps, d.mask, 1, b % 4};
    }
    const auto pred = predict<float>(net, w, batch);
    for (int b = 0; b < 100; ++b) {
      float direct = 0.0f;
      for (std::size_t i = 0; i < pred[b][0].size(); ++i) {
        const float d = pred[b][0][i] - (clean[b][0][i] - noise[b][0][i]);
        direct += d * d;
      }
      ok = ok && dfm_loss(pred[b], velocity_target(clean[b], noise[b]), LossMask::all(1)) == direct;
      ++draws;
    }
  }
  const int b40[] = {40};
  const auto sch = build_schedule(1, b40, 0.7);
  bool grid = sch.total_steps() == 40;
  for (int k = 0; k <= 40 && grid; ++k) grid = sch.steps[k][0] == k / 40.0;
  RunConfig rc;
  rc.train.variant = Variant::vanilla;
  const auto vs = resolve_schedule(rc, {30, 10}, 0.7);
  for (int k = 0; k <= 40 && grid; ++k) grid = vs.stages() == 1 && vs.steps[k][0] == k / 40.0;
  return {ok && grid, std::to_string(draws) + " shared draws: loss " + (ok ? "identical" : "DIFFERS") +
                          "; 40-step schedule " + (grid ? "equals k/40" : "DIFFERS")};
}

// 4. Training timestep sampler statistics.
Outcome sampler_statistics() {
  TimestepSamplerConfig cfg;
  cfg.stage_probs = {0.9, 0.1};
  Rng rng(404);
  const int n = 100000;
  int first = 0;
  std::vector<double> current, previous;
  for (int i = 0; i < n; ++i) {
    const auto d = sample_train_draw(cfg, rng);
    if (d.stage == 1) ++first;
    current.push_back(d.timesteps[d.stage - 1]);
    if (d.stage == 2) previous.push_back(d.timesteps[0]);
  }
  const double freq = static_cast<double>(first) / n;
  const double mc = median(current), mp = median(previous);
  const double target_prev = sigmoid(1.5);
  const bool ok = std::abs(freq - 0.9) <= 0.005 && std::abs(mc - 0.5) <= 0.01 && std::abs(mp - target_prev) <= 0.01;
  return {ok, "stage-1 frequency " + num(freq) + " (0.9 +- 0.005), median current " + num(mc) +
                  " (0.5 +- 0.01), median preceding " + num(mp) + " (" + num(target_prev) + " +- 0.01)"};
}

// 5. Analytic gradients against central differences.
Outcome gradient_check() {
  double worst = 0.0;
  std::size_t tensors = 0;
  std::string worst_name;
  // full specialization gives every parameter group an expert, so base and expert paths are both covered
  {
    auto g = testing::make_gradcheck_setup(Specialization::full, 32, 2);
    const VelocityNet<double> net(g.cfg);
    auto w = net.init(7);
    fill_uniform(w.base, 8, 0.2);
    for (std::size_t e = 0; e < w.experts.size(); ++e) fill_uniform(w.experts[e], 9 + e, 0.2);
    for (const auto& c : testing::check_gradients(net, w, g.batch, g.targets)) {
      ++tensors;
      if (c.rel_error > worst) {
        worst = c.rel_error;
        worst_name = c.name;
      }
    }
  }
  return {worst <= 1e-4, std::to_string(tensors) + " parameter tensors, worst relative error " + num(worst) + " (" +
                             worst_name + ", tolerance 1e-4)"};
}

// 6. Sampling Gaussian data with the exact velocity recovers its per-level statistics.
struct LevelStats {
  std::vector<double> mean, std;
};

LevelStats level_stats(const std::vector<Tensor<double>>& images, const ScaleSpec& spec) {
  const int S = spec.stages();
  std::vector<Pyramid<double>> pyr;
  for (const auto& img : images) pyr.push_back(decompose(img, spec));
  LevelStats st{std::vector<double>(S), std::vector<double>(S)};
  const double n = static_cast<double>(images.size());
  for (int s = 0; s < S; ++s) {
    const std::size_t m = pyr[0][s].size();
    double mean_sum = 0.0, var_sum = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      double a = 0.0, b = 0.0;
      for (const auto& p : pyr) a += p[s][i];
      a /= n;
      for (const auto& p : pyr) b += (p[s][i] - a) * (p[s][i] - a);
      mean_sum += a;
      var_sum += b / (n - 1);
    }
    st.mean[s] = mean_sum / m;
    st.std[s] = std::sqrt(var_sum / m);
  }
  return st;
}

Outcome gaussian_oracle() {
  const auto spec = spec_of({{8, 8}, {16, 16}});
  GaussianOracleSpec oracle;
  oracle.std = {0.5, 0.25};
  oracle.mean = {Tensor<double>(1, 8, 8), Tensor<double>(1, 16, 16)};
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) oracle.mean[0](0, y, x) = 0.4 + 0.05 * std::sin(0.7 * x + 0.3 * y);
  }
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) oracle.mean[1](0, y, x) = 0.2 + 0.05 * std::cos(0.9 * x - 0.4 * y);
  }
  // Levels are sampled independently, so decomposing the reconstructed image moves each
  // 2x2 block mean of level 2 into level 1. Targets go through the same linear map.
  Pyramid<double> mean_pyr;
  mean_pyr.levels = oracle.mean;
  const auto target_mean = decompose(reconstruct(mean_pyr, spec, 2), spec);
  const double s1 = oracle.std[0], s2 = oracle.std[1];
  const double target_std[2] = {std::sqrt(s1 * s1 + s2 * s2 / 4.0), s2 * std::sqrt(0.75)};

  const OracleField<double> field(spec, oracle);
  const int n = 10000;
  std::vector<std::uint64_t> seeds(n);
  std::iota(seeds.begin(), seeds.end(), std::uint64_t{1});
  const std::vector<std::optional<int>> labels(n);

  // mean error relative to max(|mean|, std) of the level, std error relative to the std
  auto errors = [&](const LevelStats& st, double& worst_mean, double& worst_std) {
    worst_mean = worst_std = 0.0;
    for (int s = 0; s < 2; ++s) {
      const double m = mean(target_mean[s]);
      worst_mean = std::max(worst_mean, std::abs(st.mean[s] - m) / std::max(std::abs(m), target_std[s]));
      worst_std = std::max(worst_std, std::abs(st.std[s] - target_std[s]) / target_std[s]);
    }
  };

  const auto fine = level_stats(sample<double>(field, build_tied_schedule(2, 200), labels, seeds).images, spec);
  double fm = 0, fsd = 0;
  errors(fine, fm, fsd);

  const int b[] = {30, 10};
  const auto staged = level_stats(sample<double>(field, build_schedule(2, b, 0.7), labels, seeds).images, spec);
  double sm = 0, ssd = 0;
  errors(staged, sm, ssd);

  const bool ok = fm <= 0.02 && fsd <= 0.02 && sm <= 0.03 && ssd <= 0.03;
  return {ok, "200 steps: worst mean error " + num(100 * fm) + "%, std error " + num(100 * fsd) +
                  "% (2%); staged 30/10 tau 0.7: mean " + num(100 * sm) + "%, std " + num(100 * ssd) +
                  "% (3%); staged level stds " + num(staged.std[0]) + "/" + num(staged.std[1]) + " vs " +
                  num(target_std[0]) + "/" + num(target_std[1])};
}

// 7. Schedule invariants over a sweep grid.
Outcome schedule_invariants() {
  int checked = 0;
  bool ok = true;
  const std::vector<std::vector<int>> budget_grid = {{40}, {30, 10}, {10, 30}, {1, 1}, {20, 20}, {5, 1, 7},
                                                     {12, 8, 4}, {1, 1, 1, 1}, {3, 9, 2, 17}, {25, 1}};
  for (const auto& b : budget_grid) {
    for (double tau : {0.5, 0.7, 0.9, 0.95, 1.0}) {
      const int S = static_cast<int>(b.size());
      const auto sch = build_schedule(S, b, tau);
      const int K = sch.total_steps();
      ok = ok && K == std::accumulate(b.begin(), b.end(), 0);
      for (int s = 0; s < S; ++s) {
        ok = ok && sch.steps[0][s] == 0.0 && sch.steps[K][s] == 1.0;
        for (int k = 0; k < K; ++k) ok = ok && sch.steps[k + 1][s] >= sch.steps[k][s];
      }
      for (int s = 0; s + 1 < S; ++s) {
        int first_tau = -1, first_next = -1;
        for (int k = 0; k <= K; ++k) {
          if (first_tau < 0 && sch.steps[k][s] >= tau) first_tau = k;
          if (first_next < 0 && sch.steps[k][s + 1] > 0.0) first_next = k;
        }
        ok = ok && first_tau >= 0 && sch.steps[first_tau][s] == tau && first_next == first_tau + 1;
        for (int k = 0; k < K; ++k) ok = ok && static_cast<bool>(sch.active[k][s + 1]) == (k >= first_tau);
      }
      ++checked;
    }
  }
  return {ok, std::to_string(checked) + " (budgets, tau) pairs: monotone, end at 1, activation exactly at tau"};
}

// 8. DFM against vanilla flow matching and the tied variant at equal compute.
std::vector<AblationRow> read_summary(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<AblationRow> rows;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    AblationRow r;
    r.run = cells[0];
    r.values = {cells[1].substr(1, cells[1].size() - 2), cells[2].substr(1, cells[2].size() - 2)};
    r.seed = std::stoull(cells[3]);
    r.pseudo_fd = std::stod(cells[4]);
    r.final_loss = std::stod(cells[5]);
    rows.push_back(r);
  }
  return rows;
}

Outcome directional_reproduction(const fs::path& dir, bool reuse) {
  const RunConfig base;
  SweepSpec sweep;
  sweep.params = {{"train.variant", {"dfm", "vanilla", "tied"}}, {"train.seed", {"0", "1", "2"}}};
  const auto grid = expand_sweep(base, sweep);
  bool equal = true;
  for (const auto& c : grid) {
    const auto t = resolve_train(c), t0 = resolve_train(grid[0]);
    const auto m = resolve_model(c), m0 = resolve_model(grid[0]);
    equal = equal && t.steps == t0.steps && t.batch == t0.batch && m.width == m0.width && m.depth == m0.depth &&
            m.tokens() == m0.tokens();
  }
  std::vector<AblationRow> rows;
  if (reuse && fs::exists(dir / "summary.csv")) {
    rows = read_summary(dir / "summary.csv");
  } else {
    std::ofstream progress(dir.string() + ".log");
    rows = cmd_ablate(base, sweep, dir, progress).rows;
  }
  std::map<std::string, std::vector<double>> fd;
  for (const auto& r : rows) fd[r.values[0]].push_back(r.pseudo_fd);
  const double d = median(fd["dfm"]), v = median(fd["vanilla"]), t = median(fd["tied"]);
  const bool complete = fd["dfm"].size() == 3 && fd["vanilla"].size() == 3 && fd["tied"].size() == 3;
  return {complete && equal && d <= v && d <= t,
          "median pseudo-FD dfm " + num(d) + ", vanilla " + num(v) + ", tied " + num(t) +
              (equal ? "; equal steps/width/depth/batch/tokens" : "; UNEQUAL compute") +
              (complete ? "" : "; incomplete runs")};
}

// 9. Training resumption and sampling reruns are byte-identical.
Outcome determinism(const fs::path& dir) {
  std::ostringstream log;
  RunConfig cfg;
  cfg.train.steps = 30;
  cfg.checkpoint_every = 10;
  cfg.train.warmup_steps = 10;
  cmd_train(cfg, dir / "full", {}, log);
  TrainOptions stop;
  stop.stop_after = 13;
  cmd_train(cfg, dir / "resumed", stop, log);
  TrainOptions resume;
  resume.resume = true;
  cmd_train(cfg, dir / "resumed", resume, log);

  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  auto losses = [&](const fs::path& p) {
    std::istringstream in(slurp(p));
    std::string line, out;
    while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + "\n";
    return out;
  };
  const bool log_same = losses(dir / "full" / kTrainLog) == losses(dir / "resumed" / kTrainLog);
  const bool ckpt_same = slurp(dir / "full" / kCheckpointFile) == slurp(dir / "resumed" / kCheckpointFile);

  SampleRequest req;
  req.checkpoint = dir / "full" / kCheckpointFile;
  req.count = 16;
  req.seed = 77;
  req.budgets = {30, 10};
  req.tau = 0.7;
  req.cfg = 1.5;
  req.previews = true;
  const auto a = cmd_sample(req, dir / "sample_a", log);
  const auto b = cmd_sample(req, dir / "sample_b", log);
  bool samples_same = a.files.size() == b.files.size() && a.previews.size() == b.previews.size();
  for (std::size_t i = 0; i < a.files.size() && samples_same; ++i) {
    samples_same = slurp(a.files[i]) == slurp(b.files[i]);
  }
  for (std::size_t i = 0; i < a.previews.size() && samples_same; ++i) {
    samples_same = slurp(a.previews[i]) == slurp(b.previews[i]);
  }
  return {log_same && ckpt_same && samples_same,
          std::string("resume at step 13: log ") + (log_same ? "identical" : "DIFFERS") + ", checkpoint " +
              (ckpt_same ? "identical" : "DIFFERS") + "; sample rerun " + (samples_same ? "identical" : "DIFFERS")};
}

// 10. Frechet distance closed forms and calibration of the permutation null.
Outcome metric_sanity() {
  Rng rng(1010);
  GaussianSummary a;
  const int d = 8;
  Eigen::MatrixXd m = Eigen::MatrixXd::Random(d, d);
  a.mean = Eigen::VectorXd::Random(d);
  a.cov = m * m.transpose();
  const double same = frechet_distance(a, a);
  GaussianSummary n01{Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1)};
  GaussianSummary n14{Eigen::VectorXd::Ones(1), Eigen::MatrixXd::Constant(1, 1, 4.0)};
  const double one_d = frechet_distance(n01, n14);

  RunConfig cfg;
  const FeatureExtractor fe(FeatureExtractorSpec{}, 1);
  auto images = [&](long first, long count) {
    std::vector<Tensor<float>> out;
    for (long i = first; i < first + count; ++i) out.push_back(generate_synthetic(cfg.data.synthetic, i).image);
    return out;
  };
  const auto pool = fe.features(images(0, 800));
  const double threshold = permutation_null_threshold(pool, 400, 0.99, rng);
  const int trials = 200;
  int accepted = 0;
  for (int t = 0; t < trials; ++t) {
    const auto fa = summarize_features(fe.features(images(100000 + 800L * t, 400)));
    const auto fb = summarize_features(fe.features(images(100400 + 800L * t, 400)));
    if (frechet_distance(fa, fb) <= threshold) ++accepted;
  }
  const double rate = static_cast<double>(accepted) / trials;
  const bool ok = std::abs(same) <= 1e-6 && std::abs(one_d - 2.0) <= 1e-6 && rate >= 0.95;
  return {ok, "identical " + num(same) + ", N(0,1) vs N(1,4) " + num(one_d) + " (2 +- 1e-6), null acceptance " +
                  num(100 * rate) + "% over " + std::to_string(trials) + " same-distribution pairs (>= 95%)"};
}

}  // namespace

int main(int argc, char** argv) {
  bool slow = false, reuse = false;
  fs::path slow_dir = output_root() / "acceptance_slow";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--slow") {
      slow = true;
    } else if (a == "--reuse") {
      reuse = true;
    } else if (a == "--slow-dir" && i + 1 < argc) {
      slow_dir = argv[++i];
    } else {
      std::cerr << "usage: acceptance [--slow] [--slow-dir DIR] [--reuse]\n";
      return 2;
    }
  }
  const fs::path scratch = fs::temp_directory_path() / ("dfm_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(scratch);

  struct Criterion {
    int id;
    std::string name;
    double budget_s;  // 0: no limit
    std::function<Outcome()> run;
  };
  std::vector<Criterion> criteria = {
      {1, "reconstruction identity", 10, reconstruction_identity},
      {2, "flow-process endpoints", 1, flow_endpoints},
      {3, "collapse to vanilla flow matching", 5, collapse_to_vanilla},
      {4, "training-sampler statistics", 5, sampler_statistics},
      {5, "gradient check", 120, gradient_check},
      {6, "gaussian-oracle sampling", 60, gaussian_oracle},
      {7, "schedule invariants", 1, schedule_invariants},
      {8, "directional reproduction", 0, [&] { return directional_reproduction(slow_dir, reuse); }},
      {9, "determinism", 300, [&] { return determinism(scratch / "determinism"); }},
      {10, "metric sanity", 120, metric_sanity},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    std::string prefix = "criterion " + std::to_string(c.id) + " " + c.name + ": ";
    if (c.id == 8 && !slow) {
      std::cout << prefix << "SKIP (long-running; pass --slow)" << std::endl;
      continue;
    }
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = c.budget_s == 0 || secs < c.budget_s;
    const bool pass = o.pass && in_time;
    if (!pass) ++failed;
    std::cout << prefix << (pass ? "PASS" : "FAIL") << " (" << o.detail << "; " << num(secs) << " s"
              << (c.budget_s > 0 ? " of " + num(c.budget_s) + " s" : "") << (in_time ? "" : ", over time budget")
              << ")" << std::endl;
  }
  fs::remove_all(scratch);
  return failed == 0 ? 0 : 1;
}
