#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>

#include <unistd.h>

#include "doctest.h"
#include "dfm/commands.hpp"
#include "dfm/image_io.hpp"

using namespace dfm;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name)
      : path(fs::temp_directory_path() / ("dfm_" + name + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  fs::path operator/(const std::string& s) const { return path / s; }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig tiny_config() {
  return parse_config(R"(
[model]
width = 16
depth = 1
heads = 1
time_features = 16

[train]
steps = 12
batch = 4
warmup_steps = 3
checkpoint_every = 5

[sampler]
budgets = 3, 2
count = 3

[eval]
samples = 6
reference = 12
)");
}

/// Loss, grad-norm and lr columns of a training log, without wall times.
std::vector<std::string> log_rows(const fs::path& p) {
  std::istringstream in(slurp(p));
  std::string line;
  std::vector<std::string> rows;
  std::getline(in, line);
  while (std::getline(in, line)) rows.push_back(line.substr(0, line.rfind(',')));
  return rows;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DFM_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string random_config_text(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto pick = [&](std::initializer_list<const char*> xs) { return *(xs.begin() + rng() % xs.size()); };
  std::ostringstream t;
  t << "[data]\nseed = " << rng() % 1000 << "\nlow_amplitude = " << u(rng) << "\nhigh_amplitude = " << u(rng) / 3
    << "\nnum_classes = " << 1 + rng() % 9 << "\n";
  t << "[model]\nwidth = " << 8 * (1 + rng() % 8) << "\nclass_drop_prob = " << u(rng)
    << "\nspecialization = " << pick({"none", "modulation", "projection", "full"})
    << "\ncompute_allocation = " << pick({"tokens", "batch"}) << "\nprecondition = " << pick({"true", "false"})
    << "\nrope_base = " << 1.0 + 1e5 * u(rng) << "\n";
  t << "[train]\nlr = " << u(rng) * 1e-3 << "\nseed = " << rng() << "\nvariant = " << pick({"dfm", "vanilla", "tied"})
    << "\nema_beta = " << u(rng) * 0.999 << "\n";
  const double p = u(rng);
  t << "[timesteps]\nstage_probs = " << p << ", " << 1.0 - p << "\ncurrent_loc = " << (u(rng) - 0.5) * 4 << "\n";
  t << "[sampler]\nbudgets = " << 1 + rng() % 50 << ", " << 1 + rng() % 50 << "\ntau = " << 0.05 + 0.95 * u(rng)
    << "\ncfg = " << 2 * u(rng) << "\n";
  t << "[output]\ndir = run_" << rng() % 100 << "\n";
  return t.str();
}

}  // namespace

TEST_CASE("config defaults validate and round-trip") {
  const RunConfig c;
  CHECK_NOTHROW(c.validate());
  const auto text = serialize_config(c);
  CHECK(serialize_config(parse_config(text)) == text);
  CHECK(config_digest(c) == sha256_hex(text));
  CHECK(config_digest(c).size() == 64);
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("property: config parse-serialize-parse is the identity") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const auto c = parse_config(random_config_text(rng));
    const auto text = serialize_config(c);
    const auto again = parse_config(text);
    CHECK(config_diff(c, again).empty());
    CHECK(serialize_config(again) == text);
    CHECK(config_values(again) == config_values(c));
  }
}

TEST_CASE("config errors") {
  CHECK_THROWS_AS(parse_config("[model]\nwidht = 3\n"), InvalidConfig);
  CHECK_THROWS_AS(parse_config("[train]\nsteps = many\n"), InvalidConfig);
  CHECK_THROWS_AS(parse_config("[train]\nsteps = 5 # comment\n"), InvalidConfig);
  CHECK_THROWS_AS(parse_config("[model]\nwidth 3\n"), InvalidConfig);
  CHECK_NOTHROW(parse_config("# comment\n; other\n[model]\nwidth = 32\n"));

  auto expect_invalid = [](const std::string& text) {
    const auto c = parse_config(text);
    CHECK_THROWS_AS(c.validate(), InvalidConfig);
  };
  expect_invalid("[timesteps]\nstage_probs = 0.5, 0.3, 0.2\n");
  expect_invalid("[sampler]\nbudgets = 30\n");
  expect_invalid("[model]\npatch_size = 3\n");
  expect_invalid("[data]\nresolution = 32x32\n");
  expect_invalid("[timesteps]\nstage_probs = 0.5, 0.6\n");
  expect_invalid("[model]\nwidth = 20\nheads = 2\n");
  expect_invalid("[sampler]\ntau = 0\n");
  expect_invalid("[data]\nkind = directory\n");
  expect_invalid("[sampler]\nclass = 4\n");
  CHECK_THROWS_AS(parse_config("[scales]\nresolutions = 8x8, 12x12\n").validate(), std::invalid_argument);
}

TEST_CASE("config resolution follows allocation and variant") {
  auto c = tiny_config();
  auto m = resolve_model(c);
  CHECK(m.patch_sizes == std::vector<int>{1, 2});
  CHECK(m.num_classes == 4);
  CHECK(resolve_train(c).batch == 4);

  set_config_value(c, "model.compute_allocation", "batch");
  CHECK(resolve_model(c).patch_sizes == std::vector<int>{2, 4});
  CHECK(resolve_train(c).batch == 16);

  set_config_value(c, "train.variant", "vanilla");
  m = resolve_model(c);
  CHECK(m.stages() == 1);
  CHECK(m.patch_sizes == std::vector<int>{2});
  CHECK(resolve_train(c).batch == 4);
  const auto sched = resolve_schedule(c, {3, 2}, 0.7);
  CHECK(sched.stages() == 1);
  CHECK(sched.total_steps() == 5);

  set_config_value(c, "train.variant", "tied");
  const auto tied = resolve_schedule(c, {3, 2}, 0.7);
  CHECK(tied.tied);
  CHECK(tied.total_steps() == 5);
  CHECK(resolve_train(c).sampler_cfg.tied);

  set_config_value(c, "model.conditional", "false");
  CHECK(resolve_model(c).num_classes == 0);
}

TEST_CASE("checkpoint container round trip") {
  Checkpoint c;
  c.config = serialize_config(RunConfig{});
  c.digest = sha256_hex(c.config);
  c.step = 42;
  c.meta["note"] = "x";
  const std::vector<float> a{1.5f, -2.0f, 3.25f};
  const std::vector<double> b{0.1, 0.2};
  c.add("a", std::span<const float>(a), {3});
  c.add("b", std::span<const double>(b), {1, 2});
  c.add("empty", std::span<const float>(), {0});
  CHECK_THROWS_AS(c.add("a", std::span<const float>(a), {3}), InvalidInput);
  CHECK_THROWS_AS(c.add("bad", std::span<const float>(a), {2}), InvalidInput);

  const auto bytes = encode_checkpoint(c);
  CHECK(bytes.rfind("DFMCKPT1", 0) == 0);
  CHECK(bytes.size() % 64 == 0);
  const auto d = decode_checkpoint(bytes);
  CHECK(encode_checkpoint(d) == bytes);
  CHECK(d.step == 42);
  CHECK(d.meta.at("note") == "x");
  CHECK(d.floats("a") == a);
  CHECK(d.doubles("b") == b);
  CHECK(d.get("b").shape == std::vector<std::int64_t>{1, 2});
  CHECK_THROWS_AS(d.floats("b"), InvalidInput);
  CHECK_THROWS_AS(d.get("missing"), InvalidInput);

  // the first payload starts on a 64-byte boundary of the file
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + 8, 8);
  const std::size_t base = (16 + hlen + 63) / 64 * 64;
  float first = 0.0f;
  std::memcpy(&first, bytes.data() + base, 4);
  CHECK(first == 1.5f);

  auto tampered = c;
  tampered.digest = sha256_hex("something else");
  CHECK_THROWS_AS(decode_checkpoint(encode_checkpoint(tampered)), InvalidInput);
  CHECK_THROWS_AS(decode_checkpoint("NOTACKPT........"), InvalidInput);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 64)), InvalidInput);
}

TEST_CASE("checkpoint captures the full training state") {
  const auto cfg = tiny_config();
  const VelocityNet<float> net(resolve_model(cfg, {0.5, 0.2}));
  const auto tcfg = resolve_train(cfg);
  auto state = init_train_state(net, tcfg);
  SyntheticDataset data(cfg.data.synthetic);
  for (int i = 0; i < 3; ++i) {
    std::vector<Tensor<float>> imgs;
    std::vector<int> labels;
    for (const auto& b : draw_batch(data, 4, state.rng)) {
      imgs.push_back(b.image);
      labels.push_back(b.label);
    }
    train_step(net, state, imgs, labels, tcfg);
  }
  const auto ck = make_checkpoint(cfg, state, {0.5, 0.2});
  const auto bytes = encode_checkpoint(ck);
  const auto back = decode_checkpoint(bytes);
  CHECK(checkpoint_level_stds(back) == std::vector<double>{0.5, 0.2});
  CHECK(config_diff(checkpoint_config(back), cfg).empty());

  auto restored = init_train_state(net, tcfg);
  restore_state(back, restored);
  CHECK(restored.step == 3);
  CHECK(restored.weights.base == state.weights.base);
  CHECK(restored.ema.base == state.ema.base);
  CHECK(restored.adam_m.base == state.adam_m.base);
  CHECK(restored.adam_v.base == state.adam_v.base);
  CHECK(restored.rng == state.rng);
  CHECK(encode_checkpoint(make_checkpoint(cfg, restored, {0.5, 0.2})) == bytes);
  CHECK(checkpoint_weights(back, net, true).base == state.ema.base);
}

TEST_CASE("image mapping and pnm codec") {
  for (int b = 0; b < 256; ++b) CHECK(to_byte(from_byte(static_cast<std::uint8_t>(b))) == b);
  CHECK(to_byte(0.0) == 128);
  CHECK(to_byte(-1.0) == 0);
  CHECK(to_byte(1.0) == 255);
  CHECK(to_byte(7.0) == 255);
  CHECK(to_byte(-7.0) == 0);

  Tensor<float> rgb(3, 2, 5);
  for (std::size_t i = 0; i < rgb.size(); ++i) rgb[i] = from_byte(static_cast<std::uint8_t>(i * 8));
  const auto enc = encode_pnm(rgb);
  CHECK(enc.rfind("P6\n5 2\n255\n", 0) == 0);
  CHECK(decode_pnm(enc) == rgb);
  CHECK(static_cast<std::uint8_t>(enc[11]) == 0);    // (c0, y0, x0)
  CHECK(static_cast<std::uint8_t>(enc[12]) == 80);   // (c1, y0, x0) = element 10
  CHECK(decode_pnm("P5\n# comment\n2 1\n255\n\x01\x02") == [] {
    Tensor<float> t(1, 1, 2);
    t[0] = from_byte(1);
    t[1] = from_byte(2);
    return t;
  }());
  CHECK_THROWS_AS(decode_pnm("P2\n1 1\n255\n0"), InvalidInput);
  CHECK_THROWS_AS(decode_pnm("P5\n4 4\n255\n\x01"), InvalidInput);
  CHECK_THROWS_AS(decode_pnm("P5\n1 1\n65535\n\x01\x01"), InvalidInput);
  CHECK_THROWS_AS(encode_pnm(Tensor<float>(2, 2, 2)), InvalidInput);

  CHECK(label_from_name("sample_s3_c12_0004") == 12);
  CHECK(seed_from_name("sample_s3_c12_0004") == 3);
  CHECK(label_from_name("sample_s3_cu_0004") == -1);
  CHECK(seed_from_name("img") == -1);
}

TEST_CASE("cmd_decompose") {
  TempDir tmp("decompose");
  std::ostringstream log;
  auto cfg = tiny_config();
  set_config_value(cfg, "scales.resolutions", "4x4, 8x8, 16x16");
  set_config_value(cfg, "timesteps.stage_probs", "0.8, 0.1, 0.1");
  set_config_value(cfg, "sampler.budgets", "2, 2, 2");
  set_config_value(cfg, "model.patch_size", "4");

  write_pnm(tmp / "flat.pgm", Tensor<float>(1, 16, 16, from_byte(90)));
  const auto flat = cmd_decompose(tmp / "flat.pgm", cfg, tmp / "flat", log);
  REQUIRE(flat.files.size() == 3);
  for (int s = 1; s < 3; ++s) {
    const auto img = read_pnm(flat.files[s]);
    for (float v : img.values()) CHECK(to_byte(v) == 128);
  }
  CHECK(slurp(tmp / "flat" / "levels.txt").find("level_3 16x16") != std::string::npos);

  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor<float> x(1, 16, 16);
    for (auto& v : x.values()) v = from_byte(static_cast<std::uint8_t>(rng() % 256));
    write_pnm(tmp / "x.pgm", x);
    CHECK(cmd_decompose(tmp / "x.pgm", cfg, tmp / "x", log).max_error <= 1e-5);
  }

  auto single = tiny_config();
  set_config_value(single, "scales.resolutions", "16x16");
  set_config_value(single, "timesteps.stage_probs", "1");
  set_config_value(single, "sampler.budgets", "40");
  const auto one = cmd_decompose(tmp / "x.pgm", single, tmp / "single", log);
  REQUIRE(one.files.size() == 1);
  CHECK(slurp(one.files[0]) == slurp(tmp / "x.pgm"));

  write_pnm(tmp / "small.pgm", Tensor<float>(1, 8, 8));
  CHECK_THROWS_AS(cmd_decompose(tmp / "small.pgm", cfg, tmp / "small", log), InvalidInput);
  CHECK_THROWS_AS(cmd_decompose(tmp / "missing.pgm", cfg, tmp / "m", log), InvalidInput);
}

TEST_CASE("cmd_train logs, checkpoints and resumes bit-identically") {
  TempDir tmp("train");
  std::ostringstream log;
  const auto cfg = tiny_config();

  const auto full = cmd_train(cfg, tmp / "full", {}, log);
  CHECK(full.step == 12);
  CHECK(log_rows(tmp / "full" / kTrainLog).size() == 12);
  CHECK(slurp(tmp / "full" / kTrainLog).rfind("step,loss,grad_norm,lr,wall_ms\n", 0) == 0);
  CHECK(fs::exists(tmp / "full" / kCheckpointFile));
  CHECK(load_checkpoint(tmp / "full" / kCheckpointFile).step == 12);

  TrainOptions stop;
  stop.stop_after = 7;
  CHECK(cmd_train(cfg, tmp / "split", stop, log).step == 7);
  CHECK(log_rows(tmp / "split" / kTrainLog).size() == 7);
  // rows logged after the last checkpoint are dropped on resume
  std::ofstream(tmp / "split" / kTrainLog, std::ios::app) << "8,1,1,1,1\n";
  TrainOptions resume;
  resume.resume = true;
  CHECK(cmd_train(cfg, tmp / "split", resume, log).step == 12);
  CHECK(log_rows(tmp / "split" / kTrainLog) == log_rows(tmp / "full" / kTrainLog));
  CHECK(slurp(tmp / "split" / kCheckpointFile) == slurp(tmp / "full" / kCheckpointFile));

  auto other = cfg;
  set_config_value(other, "model.width", "32");
  set_config_value(other, "model.heads", "2");
  try {
    cmd_train(other, tmp / "split", resume, log);
    FAIL("expected a config mismatch");
  } catch (const InvalidConfig& e) {
    CHECK(std::string(e.what()).find("model.width") != std::string::npos);
  }

  auto bad = cfg;
  set_config_value(bad, "sampler.budgets", "3");
  CHECK_THROWS_AS(cmd_train(bad, tmp / "bad", {}, log), InvalidConfig);
  CHECK_FALSE(fs::exists(tmp / "bad"));
}

TEST_CASE("cmd_train: vanilla equals single-stage dfm") {
  TempDir tmp("vanilla");
  std::ostringstream log;
  auto vanilla = tiny_config();
  set_config_value(vanilla, "train.variant", "vanilla");
  set_config_value(vanilla, "model.patch_size", "2");
  auto single = tiny_config();
  set_config_value(single, "scales.resolutions", "16x16");
  set_config_value(single, "timesteps.stage_probs", "1");
  set_config_value(single, "sampler.budgets", "5");
  cmd_train(vanilla, tmp / "v", {}, log);
  cmd_train(single, tmp / "s", {}, log);
  CHECK(log_rows(tmp / "v" / kTrainLog) == log_rows(tmp / "s" / kTrainLog));
}

TEST_CASE("cmd_train aborts on a non-finite loss with a checkpoint") {
  TempDir tmp("abort");
  std::ostringstream log;
  auto cfg = tiny_config();
  set_config_value(cfg, "train.lr", "1e30");
  set_config_value(cfg, "train.warmup_steps", "0");
  set_config_value(cfg, "train.grad_clip", "1e30");
  set_config_value(cfg, "train.weight_decay", "0");
  set_config_value(cfg, "train.steps", "50");
  CHECK_THROWS_AS(cmd_train(cfg, tmp / "run", {}, log), NonFiniteLoss);
  REQUIRE(fs::exists(tmp / "run" / kAbortCheckpointFile));
  const auto ck = load_checkpoint(tmp / "run" / kAbortCheckpointFile);
  CHECK(ck.step < 50);
  CHECK(static_cast<long>(log_rows(tmp / "run" / kTrainLog).size()) == ck.step);
}

TEST_CASE("cmd_sample") {
  TempDir tmp("sample");
  std::ostringstream log;
  const auto cfg = tiny_config();
  cmd_train(cfg, tmp / "run", {}, log);

  SampleRequest req;
  req.checkpoint = tmp / "run" / kCheckpointFile;
  req.count = 3;
  req.seed = 9;
  req.budgets = {3, 2};
  req.tau = 0.7;
  req.cfg = 1.5;
  req.previews = true;
  const auto a = cmd_sample(req, tmp / "a", log);
  const auto b = cmd_sample(req, tmp / "b", log);
  REQUIRE(a.files.size() == 3);
  CHECK(a.files[1].filename() == "sample_s9_c1_0001.pgm");
  CHECK(a.previews.size() == 6);
  for (std::size_t i = 0; i < a.files.size(); ++i) CHECK(slurp(a.files[i]) == slurp(b.files[i]));
  for (std::size_t i = 0; i < a.previews.size(); ++i) CHECK(slurp(a.previews[i]) == slurp(b.previews[i]));
  CHECK(a.evaluations == 10);

  req.cfg = 1.0;
  req.previews = false;
  CHECK(cmd_sample(req, tmp / "c", log).evaluations * 2 == a.evaluations);

  req.class_label = 2;
  const auto fixed = cmd_sample(req, tmp / "d", log);
  for (int l : fixed.labels) CHECK(l == 2);
  CHECK(slurp(tmp / "d" / "sample_log.txt").find("evaluations_per_image 5") != std::string::npos);

  auto other = cfg;
  set_config_value(other, "model.depth", "2");
  set_config_value(other, "model.specialization", "full");
  req.expect = other;
  try {
    cmd_sample(req, tmp / "e", log);
    FAIL("expected an incompatible checkpoint");
  } catch (const InvalidConfig& e) {
    const std::string what = e.what();
    CHECK(what.find("model.depth") != std::string::npos);
    CHECK(what.find("model.specialization") != std::string::npos);
  }
  req.expect.reset();
  req.budgets = {3, 2, 1};
  CHECK_THROWS_AS(cmd_sample(req, tmp / "f", log), InvalidConfig);
}

TEST_CASE("cmd_eval and load_run") {
  TempDir tmp("eval");
  std::ostringstream log;
  const auto cfg = tiny_config();
  const auto ref = reference_set(cfg, 40);
  for (int run = 0; run < 2; ++run) {
    for (int seed = 0; seed < 3; ++seed) {
      const auto dir = tmp / ("run" + std::to_string(run));
      fs::create_directories(dir);
      for (int i = 0; i < 10; ++i) {
        auto img = generate_synthetic(cfg.data.synthetic, 1000 + 100 * seed + i);
        if (run == 1) {
          for (auto& v : img.image.values()) v *= 0.5f;
        }
        write_pnm(dir / ("sample_s" + std::to_string(seed) + "_c" + std::to_string(img.label) + "_" +
                         std::to_string(i) + ".pgm"),
                  img.image);
      }
    }
  }
  const auto r0 = load_run(tmp / "run0");
  CHECK(r0.name == "run0");
  REQUIRE(r0.seeds.size() == 3);
  CHECK(r0.seeds[2].seed == 2);
  CHECK(r0.seeds[2].images.size() == 10);
  CHECK(r0.seeds[2].labels.size() == 10);

  EvalRequest req;
  req.runs = {tmp / "run0", tmp / "run1"};
  const auto rep = cmd_eval(req, cfg, tmp / "out", log);
  CHECK(rep.winner == "run0");
  CHECK(slurp(tmp / "out" / "report.csv").rfind("metric,run,seed,value\n", 0) == 0);
  CHECK(slurp(tmp / "out" / "verdict.txt").find("run0") != std::string::npos);

  fs::create_directories(tmp / "ref");
  for (std::size_t i = 0; i < ref.images.size(); ++i) {
    write_pnm(tmp / "ref" / ("r_c" + std::to_string(ref.labels[i]) + "_" + std::to_string(i) + ".pgm"), ref.images[i]);
  }
  req.reference = tmp / "ref";
  CHECK(cmd_eval(req, cfg, tmp / "out2", log).winner == "run0");

  write_pnm(tmp / "run1" / "sample_s0_c0_big.pgm", Tensor<float>(1, 32, 32));
  CHECK_THROWS_AS(cmd_eval(req, cfg, tmp / "out3", log), InvalidInput);
  req.runs.pop_back();
  CHECK_THROWS_AS(cmd_eval(req, cfg, tmp / "out4", log), InvalidConfig);
}

TEST_CASE("sweep parsing and expansion") {
  const auto s = parse_sweep("[sweep]\ntrain.variant = dfm | vanilla\ntimesteps.stage_probs = 0.9, 0.1 | 0.5, 0.5\n");
  REQUIRE(s.params.size() == 2);
  CHECK(s.params[1].second == std::vector<std::string>{"0.9, 0.1", "0.5, 0.5"});
  auto base = tiny_config();
  base.train.seed = 100;
  const auto grid = expand_sweep(base, s);
  REQUIRE(grid.size() == 4);
  CHECK(grid[1].train.variant == Variant::dfm);
  CHECK(grid[1].train.sampler_cfg.stage_probs == std::vector<double>{0.5, 0.5});
  CHECK(grid[2].train.variant == Variant::vanilla);
  for (std::size_t i = 0; i < grid.size(); ++i) CHECK(grid[i].train.seed == 100 + i);

  const auto seeded = expand_sweep(base, parse_sweep("[sweep]\ntrain.seed = 7 | 8\n"));
  CHECK(seeded[0].train.seed == 7);
  CHECK(seeded[1].train.seed == 8);

  CHECK_THROWS_AS(parse_sweep("[sweep]\nmodel.colour = 1 | 2\n"), InvalidConfig);
  CHECK_THROWS_AS(parse_sweep("[grid]\nmodel.width = 1\n"), InvalidConfig);
  CHECK_THROWS_AS(expand_sweep(base, parse_sweep("[sweep]\nmodel.width = 16 | 15\n")), InvalidConfig);
}

TEST_CASE("cmd_ablate") {
  TempDir tmp("ablate");
  std::ostringstream log;
  auto base = tiny_config();
  set_config_value(base, "train.steps", "4");
  const auto sweep = parse_sweep("[sweep]\ntrain.variant = dfm | tied\n");
  const auto r = cmd_ablate(base, sweep, tmp / "out", log);
  REQUIRE(r.rows.size() == 2);
  CHECK(fs::exists(tmp / "out" / "run_000" / kCheckpointFile));
  CHECK(fs::exists(tmp / "out" / "run_001" / "samples" / "sample_s1_c0_0000.pgm"));
  const auto summary = slurp(r.summary);
  CHECK(summary.rfind("run,train.variant,seed,pseudo_fd,final_loss,evaluations\n", 0) == 0);
  CHECK(summary.find("run_001,\"tied\",1,") != std::string::npos);
  for (const auto& row : r.rows) CHECK(row.pseudo_fd > 0.0);

  const auto bad = SweepSpec{{{"model.width", {"16", "15"}}}};
  CHECK_THROWS_AS(cmd_ablate(base, bad, tmp / "bad", log), InvalidConfig);
  CHECK_FALSE(fs::exists(tmp / "bad"));
}

TEST_CASE("cli exit codes") {
  TempDir tmp("exit");
  {
    std::ofstream(tmp / "c.ini") << serialize_config(tiny_config());
    std::ofstream(tmp / "bad.ini") << "[model]\nwidht = 3\n";
    std::ofstream(tmp / "junk.pgm") << "not an image";
  }
  const auto c = (tmp / "c.ini").string(), out = (tmp / "o").string();
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("") == 2);
  CHECK(run_cli("train --config " + (tmp / "bad.ini").string()) == 2);
  CHECK(run_cli("train --config " + (tmp / "missing.ini").string()) == 2);
  CHECK(run_cli("train --config " + c + " --variant nope --out " + out) == 2);
  CHECK(run_cli("decompose --config " + c + " --input " + (tmp / "junk.pgm").string() + " --out " + out) == 3);
  CHECK(run_cli("train --config " + c + " --steps 2 --out " + out) == 0);
  CHECK(run_cli("sample --checkpoint " + out + "/checkpoint.dfm --steps 3,2 --tau 0.7 --count 2 --out " + out +
                "/s") == 0);
  CHECK(fs::exists(tmp / "o" / "s" / "sample_s0_c1_0001.pgm"));
  CHECK(run_cli("sample --checkpoint " + out + "/checkpoint.dfm --steps 3 --out " + out + "/s") == 2);
  CHECK(run_cli("sample --checkpoint " + (tmp / "junk.pgm").string()) == 3);
  CHECK(run_cli("ablate --config " + c + " --sweep " + (tmp / "missing.ini").string()) == 2);
  setenv("DFM_OUT", tmp.path.c_str(), 1);
  CHECK(output_root() == tmp.path);
  CHECK(run_dir(tiny_config(), std::nullopt) == tmp.path / "run");
  unsetenv("DFM_OUT");
}
