#include "dfm/commands.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "dfm/image_io.hpp"

namespace dfm {

namespace {

std::string ext_for(int channels) { return channels == 1 ? ".pgm" : ".ppm"; }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string pad(long v, int width) {
  auto s = std::to_string(v);
  if (static_cast<int>(s.size()) < width) s.insert(0, static_cast<std::size_t>(width) - s.size(), '0');
  return s;
}

bool starts_with_any(const std::string& key, std::initializer_list<const char*> prefixes) {
  for (const char* p : prefixes) {
    if (key.rfind(p, 0) == 0) return true;
  }
  return false;
}

/// Keys that may change between an interrupted run and its resumption.
bool resumable_key(const std::string& key) {
  return key == "train.steps" || key == "train.checkpoint_every" ||
         starts_with_any(key, {"sampler.", "eval.", "output."});
}

std::string join_keys(const std::vector<std::string>& keys) {
  std::string out;
  for (const auto& k : keys) out += (out.empty() ? "" : ", ") + k;
  return out;
}

std::vector<double> log_losses(const fs::path& path) {
  std::vector<double> out;
  std::istringstream in(read_text(path));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    const auto a = line.find(',');
    const auto b = line.find(',', a + 1);
    out.push_back(std::stod(line.substr(a + 1, b - a - 1)));
  }
  return out;
}

ScaleSpec raw_scales(ScaleSpec s) {
  s.standardize = false;
  s.scale_stds.reset();
  return s;
}

}  // namespace

fs::path output_root() {
  const char* env = std::getenv("DFM_OUT");
  return env && *env ? fs::path(env) : fs::current_path();
}

fs::path run_dir(const RunConfig& cfg, const std::optional<fs::path>& explicit_dir) {
  if (explicit_dir) return *explicit_dir;
  return output_root() / cfg.output_dir;
}

std::unique_ptr<Dataset> make_dataset(const RunConfig& cfg) {
  if (cfg.data.kind == "directory") {
    return std::make_unique<DirectoryDataset>(cfg.data.path, cfg.data.synthetic.resolution, cfg.data.synthetic.channels,
                                              cfg.data.synthetic.num_classes);
  }
  return std::make_unique<SyntheticDataset>(cfg.data.synthetic);
}

LabeledSet reference_set(const RunConfig& cfg, int count) {
  LabeledSet ref;
  if (cfg.data.kind == "directory") {
    const auto data = make_dataset(cfg);
    const long n = std::min<long>(count, data->size());
    for (long i = 0; i < n; ++i) {
      auto s = data->get(i);
      ref.images.push_back(std::move(s.image));
      ref.labels.push_back(s.label);
    }
    return ref;
  }
  for (long i = 0; i < count; ++i) {
    auto s = generate_synthetic(cfg.data.synthetic, cfg.data.synthetic.size + i);
    ref.images.push_back(std::move(s.image));
    ref.labels.push_back(s.label);
  }
  return ref;
}

DecomposeResult cmd_decompose(const fs::path& input, const RunConfig& cfg, const fs::path& out, std::ostream& log) {
  cfg.validate();
  const auto spec = raw_scales(cfg.scales);
  const auto img = read_pnm(input);
  if (img.channels() != spec.channels || !(img.resolution() == spec.finest())) {
    throw InvalidInput(input.string() + " is " + std::to_string(img.channels()) + "x" + img.resolution().str() +
                       ", expected " + std::to_string(spec.channels) + "x" + spec.finest().str());
  }
  fs::create_directories(out);
  const auto p = decompose(img, spec);
  DecomposeResult r;
  std::string mapping;
  for (int s = 0; s < p.stages(); ++s) {
    const auto path = out / ("level_" + std::to_string(s + 1) + ext_for(spec.channels));
    Tensor<float> shown = p[s];
    if (s == 0) {
      mapping += "level_1 " + spec.resolutions[0].str() + " pixel = round(255 * (v + 1) / 2)\n";
    } else {
      float m = 0.0f;
      for (float v : shown.values()) m = std::max(m, std::abs(v));
      if (m == 0.0f) m = 1.0f;
      for (auto& v : shown.values()) v /= m;
      mapping += "level_" + std::to_string(s + 1) + " " + spec.resolutions[s].str() + " pixel = round(255 * (v / " +
                 format_number(m) + " + 1) / 2)\n";
    }
    write_pnm(path, shown);
    r.files.push_back(path);
  }
  write_text(out / "levels.txt", mapping);
  r.max_error = max_abs_diff(reconstruct(p, spec, spec.stages()), img);
  log << "max reconstruction error: " << r.max_error << "\n";
  return r;
}

TrainResult cmd_train(const RunConfig& cfg, const fs::path& out, const TrainOptions& opts, std::ostream& log) {
  cfg.validate();
  const auto data = make_dataset(cfg);
  const auto tcfg = resolve_train(cfg);
  fs::create_directories(out);
  const auto ckpt_path = out / kCheckpointFile;
  const auto log_path = out / kTrainLog;

  std::optional<Checkpoint> resume_from;
  if (opts.resume && fs::exists(ckpt_path)) {
    resume_from = load_checkpoint(ckpt_path);
    std::vector<std::string> bad;
    for (const auto& k : config_diff(checkpoint_config(*resume_from), cfg)) {
      if (!resumable_key(k)) bad.push_back(k);
    }
    if (!bad.empty()) throw InvalidConfig("cannot resume " + ckpt_path.string() + ": config differs in " + join_keys(bad));
  }

  std::vector<double> stds;
  if (resume_from) {
    stds = checkpoint_level_stds(*resume_from);
  } else {
    stds = estimate_level_stds(*data, raw_scales(resolve_model(cfg).scales), cfg.data.stats_samples);
  }
  const VelocityNet<float> net(resolve_model(cfg, stds));
  auto state = init_train_state(net, tcfg);
  if (resume_from) restore_state(*resume_from, state);
  write_text(out / "config.ini", serialize_config(cfg));

  std::ofstream csv;
  if (resume_from) {
    std::istringstream in(read_text(log_path));
    std::string line, kept;
    std::getline(in, line);
    kept = line + "\n";
    while (std::getline(in, line)) {
      if (std::stol(line.substr(0, line.find(','))) <= state.step) kept += line + "\n";
    }
    write_text(log_path, kept);
    csv.open(log_path, std::ios::binary | std::ios::app);
    log << "resuming at step " << state.step << "\n";
  } else {
    csv.open(log_path, std::ios::binary | std::ios::trunc);
    csv << "step,loss,grad_norm,lr,wall_ms\n";
  }
  if (!csv) throw std::runtime_error("cannot write " + log_path.string());

  TrainResult r;
  r.checkpoint = ckpt_path;
  auto save = [&](const fs::path& path) { save_checkpoint(path, make_checkpoint(cfg, state, stds)); };
  while (state.step < tcfg.steps) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto batch = draw_batch(*data, tcfg.batch, state.rng);
    std::vector<Tensor<float>> images;
    std::vector<int> labels;
    for (const auto& b : batch) {
      images.push_back(b.image);
      labels.push_back(b.label);
    }
    StepResult s;
    try {
      s = train_step(net, state, images, labels, tcfg);
    } catch (const NonFiniteLoss&) {
      save(out / kAbortCheckpointFile);
      csv.flush();
      throw;
    }
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    char wall[32];
    std::snprintf(wall, sizeof wall, "%.3f", ms);
    csv << state.step << "," << format_number(s.loss) << "," << format_number(s.grad_norm) << ","
        << format_number(s.lr) << "," << wall << "\n";
    ++r.rows_written;
    r.final_loss = s.loss;
    const bool stop = opts.stop_after && state.step >= *opts.stop_after;
    if (state.step % cfg.checkpoint_every == 0 || state.step == tcfg.steps || stop) {
      csv.flush();
      save(ckpt_path);
    }
    if (state.step % 100 == 0) log << "step " << state.step << " loss " << s.loss << "\n";
    if (stop) break;
  }
  if (!resume_from && r.rows_written == 0) save(ckpt_path);
  r.step = state.step;
  return r;
}

std::vector<std::string> incompatible_fields(const RunConfig& checkpoint_cfg, const RunConfig& expected) {
  std::vector<std::string> out;
  for (const auto& k : config_diff(checkpoint_cfg, expected)) {
    if (k == "data.resolution" || k == "data.channels" || k == "data.num_classes" || k == "train.variant" ||
        (starts_with_any(k, {"scales.", "model."}) && k != "model.class_drop_prob")) {
      out.push_back(k);
    }
  }
  return out;
}

SampleOutput cmd_sample(const SampleRequest& req, const fs::path& out, std::ostream& log) {
  const auto ck = load_checkpoint(req.checkpoint);
  const auto cfg = checkpoint_config(ck);
  if (req.expect) {
    const auto bad = incompatible_fields(cfg, *req.expect);
    if (!bad.empty()) {
      throw InvalidConfig("incompatible checkpoint " + req.checkpoint.string() + ": mismatched fields " + join_keys(bad));
    }
  }
  if (req.count < 1) throw InvalidConfig("sample count must be at least 1");
  if (!(req.cfg >= 0.0)) throw InvalidConfig("cfg weight must be nonnegative");
  const auto budgets = req.budgets.empty() ? cfg.sampler.budgets : req.budgets;
  const double tau = req.tau.value_or(cfg.sampler.tau);
  const auto schedule = resolve_schedule(cfg, budgets, tau);

  const VelocityNet<float> net(resolve_model(cfg, checkpoint_level_stds(ck)));
  const auto weights = checkpoint_weights(ck, net, req.use_ema);
  const int K = net.config().num_classes;
  if (req.class_label < -1 || (req.class_label >= 0 && req.class_label >= std::max(K, 1))) {
    throw InvalidConfig("class " + std::to_string(req.class_label) + " is out of range");
  }

  std::vector<std::optional<int>> labels(req.count);
  std::vector<std::uint64_t> seeds(req.count);
  for (int i = 0; i < req.count; ++i) {
    if (K > 0) labels[i] = req.class_label >= 0 ? req.class_label : i % K;
    seeds[i] = req.seed + static_cast<std::uint64_t>(i);
  }
  const ModelField<float> field(net, weights);
  SampleOptions so;
  so.guidance = req.cfg;
  so.previews = req.previews;
  auto res = sample<float>(field, schedule, labels, seeds, so);

  fs::create_directories(out);
  if (req.previews) fs::create_directories(out / "previews");
  SampleOutput o;
  o.evaluations = res.evaluations;
  const auto ext = ext_for(cfg.data.synthetic.channels);
  for (int i = 0; i < req.count; ++i) {
    const std::string cls = labels[i] ? "c" + std::to_string(*labels[i]) : "cu";
    const std::string stem = "sample_s" + std::to_string(req.seed) + "_" + cls + "_" + pad(i, 4);
    const auto path = out / (stem + ext);
    write_pnm(path, res.images[i]);
    o.files.push_back(path);
    if (req.previews) {
      for (std::size_t p = 0; p < res.previews[i].size(); ++p) {
        const auto pp = out / "previews" / (stem + "_p" + std::to_string(p + 1) + ext);
        write_pnm(pp, res.previews[i][p]);
        o.previews.push_back(pp);
      }
    }
    o.labels.push_back(labels[i].value_or(-1));
  }
  o.images = std::move(res.images);
  std::ostringstream info;
  info << "checkpoint_step " << ck.step << "\ncount " << req.count << "\nseed " << req.seed << "\ncfg "
       << format_number(req.cfg) << "\nsteps " << schedule.total_steps() << "\nevaluations_per_image "
       << o.evaluations << "\n";
  write_text(out / "sample_log.txt", info.str());
  log << "wrote " << req.count << " images to " << out.string() << "; evaluations per image: " << o.evaluations
      << "\n";
  return o;
}

RunSamples load_run(const fs::path& dir) {
  RunSamples run;
  run.name = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
  auto load = [](const std::vector<fs::path>& files, SeedSamples& s) {
    for (const auto& f : files) {
      s.images.push_back(read_pnm(f));
      s.labels.push_back(label_from_name(f.stem().string()));
    }
    // labels are only usable when every image carries one
    for (int l : s.labels) {
      if (l < 0) {
        s.labels.clear();
        break;
      }
    }
  };
  const auto direct = list_images(dir);
  if (!direct.empty()) {
    std::map<long long, std::vector<fs::path>> groups;
    for (const auto& f : direct) groups[std::max(0LL, seed_from_name(f.stem().string()))].push_back(f);
    for (const auto& [seed, files] : groups) {
      SeedSamples s;
      s.seed = static_cast<std::uint64_t>(seed);
      load(files, s);
      run.seeds.push_back(std::move(s));
    }
    return run;
  }
  std::vector<fs::path> subdirs;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory() && e.path().filename() != "previews") subdirs.push_back(e.path());
  }
  std::sort(subdirs.begin(), subdirs.end());
  for (std::size_t i = 0; i < subdirs.size(); ++i) {
    const auto files = list_images(subdirs[i]);
    if (files.empty()) continue;
    SeedSamples s;
    const auto named = seed_from_name(subdirs[i].filename().string());
    s.seed = named >= 0 ? static_cast<std::uint64_t>(named) : i;
    load(files, s);
    run.seeds.push_back(std::move(s));
  }
  if (run.seeds.empty()) throw InvalidInput("no images found in " + dir.string());
  return run;
}

CompareReport cmd_eval(const EvalRequest& req, const RunConfig& cfg, const fs::path& out, std::ostream& log) {
  if (req.runs.size() != 2) throw InvalidConfig("eval compares exactly two run directories");
  LabeledSet ref;
  if (req.reference) {
    for (const auto& f : list_images(*req.reference)) {
      ref.images.push_back(read_pnm(f));
      ref.labels.push_back(label_from_name(f.stem().string()));
    }
    if (ref.images.empty()) throw InvalidInput("no images found in " + req.reference->string());
    if (std::any_of(ref.labels.begin(), ref.labels.end(), [](int l) { return l < 0; })) ref.labels.clear();
  } else {
    cfg.validate();
    ref = reference_set(cfg, cfg.eval.reference);
  }
  const auto a = load_run(req.runs[0]), b = load_run(req.runs[1]);
  const auto& proto = ref.images.front();
  auto check = [&](const Tensor<float>& img, const std::string& where) {
    if (!img.same_shape(proto)) {
      throw InvalidInput("resolution mismatch: " + where + " has " + std::to_string(img.channels()) + "x" +
                         img.resolution().str() + ", reference has " + std::to_string(proto.channels()) + "x" +
                         proto.resolution().str());
    }
  };
  for (const auto& img : ref.images) check(img, "reference");
  for (const auto* run : {&a, &b}) {
    for (const auto& s : run->seeds) {
      for (const auto& img : s.images) check(img, run->name);
    }
  }
  FeatureExtractorSpec fs_spec;
  fs_spec.seed = req.seed;
  const FeatureExtractor fe(fs_spec, proto.channels());
  std::optional<ScaleSpec> scales;
  const auto raw = raw_scales(cfg.scales);
  if (raw.channels == proto.channels() && raw.finest() == proto.resolution()) scales = raw;
  const auto report = compare_runs(a, b, ref, fe, scales);

  fs::create_directories(out);
  std::ofstream csv(out / "report.csv", std::ios::binary | std::ios::trunc);
  report.write_csv(csv);
  write_text(out / "verdict.txt", report.verdict() + "\n");
  log << report.verdict() << "\n";
  return report;
}

SweepSpec parse_sweep(const std::string& text) {
  boost::property_tree::ptree pt;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw InvalidConfig(std::string("sweep syntax: ") + e.what());
  }
  SweepSpec s;
  for (const auto& [section, body] : pt) {
    if (section != "sweep") throw InvalidConfig("sweep file: unknown section [" + section + "]");
    for (const auto& [key, value] : body) {
      if (!is_config_key(key)) throw InvalidConfig("sweep: unknown parameter '" + key + "'");
      auto values = split_list(value.data(), '|');
      if (values.empty()) throw InvalidConfig("sweep: parameter '" + key + "' has no values");
      s.params.emplace_back(key, std::move(values));
    }
  }
  if (s.params.empty()) throw InvalidConfig("sweep file lists no parameters");
  return s;
}

SweepSpec load_sweep(const fs::path& path) {
  if (!fs::exists(path)) throw InvalidConfig("cannot read sweep " + path.string());
  return parse_sweep(read_text(path));
}

std::vector<RunConfig> expand_sweep(const RunConfig& base, const SweepSpec& sweep) {
  std::size_t total = 1;
  bool seed_swept = false;
  for (const auto& [key, values] : sweep.params) {
    if (!is_config_key(key)) throw InvalidConfig("sweep: unknown parameter '" + key + "'");
    total *= values.size();
    seed_swept = seed_swept || key == "train.seed";
  }
  std::vector<RunConfig> out;
  for (std::size_t idx = 0; idx < total; ++idx) {
    RunConfig c = base;
    std::size_t rest = idx;
    for (std::size_t p = sweep.params.size(); p-- > 0;) {
      const auto& values = sweep.params[p].second;
      set_config_value(c, sweep.params[p].first, values[rest % values.size()]);
      rest /= values.size();
    }
    if (!seed_swept) c.train.seed = base.train.seed + idx;
    try {
      c.validate();
    } catch (const std::invalid_argument& e) {
      throw InvalidConfig("sweep grid point " + std::to_string(idx) + ": " + e.what());
    }
    out.push_back(std::move(c));
  }
  return out;
}

AblationResult cmd_ablate(const RunConfig& base, const SweepSpec& sweep, const fs::path& out, std::ostream& log) {
  const auto grid = expand_sweep(base, sweep);
  fs::create_directories(out);
  AblationResult r;
  for (const auto& p : sweep.params) r.params.push_back(p.first);
  r.summary = out / "summary.csv";
  auto write_summary = [&] {
    std::string text = "run";
    for (const auto& p : r.params) text += "," + p;
    text += ",seed,pseudo_fd,final_loss,evaluations\n";
    for (const auto& row : r.rows) {
      text += row.run;
      for (const auto& v : row.values) text += ",\"" + v + "\"";
      text += "," + std::to_string(row.seed) + "," + format_number(row.pseudo_fd) + "," +
              format_number(row.final_loss) + "," + std::to_string(row.evaluations) + "\n";
    }
    write_text(r.summary, text);
  };
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto& c = grid[i];
    const std::string name = "run_" + pad(static_cast<long>(i), 3);
    const auto dir = out / name;
    log << "[" << (i + 1) << "/" << grid.size() << "] " << name << "\n";
    cmd_train(c, dir, {}, log);

    SampleRequest req;
    req.checkpoint = dir / kCheckpointFile;
    req.count = c.eval.samples;
    req.cfg = c.sampler.cfg;
    req.class_label = c.sampler.class_label;
    req.seed = c.train.seed;
    const auto samples = cmd_sample(req, dir / "samples", log);

    const FeatureExtractor fe(FeatureExtractorSpec{c.eval.feature_seed}, c.data.synthetic.channels);
    const auto ref = reference_set(c, c.eval.reference);
    AblationRow row;
    row.run = name;
    const auto values = config_values(c);
    for (const auto& p : r.params) row.values.push_back(values.at(p));
    row.seed = c.train.seed;
    row.pseudo_fd = frechet_distance(summarize(samples.images, fe), summarize(ref.images, fe));
    const auto losses = log_losses(dir / kTrainLog);
    const std::size_t tail = std::min<std::size_t>(100, losses.size());
    for (std::size_t k = losses.size() - tail; k < losses.size(); ++k) row.final_loss += losses[k] / tail;
    row.evaluations = samples.evaluations;
    r.rows.push_back(row);
    write_summary();
    log << name << " pseudo_fd " << row.pseudo_fd << "\n";
  }
  return r;
}

}  // namespace dfm
