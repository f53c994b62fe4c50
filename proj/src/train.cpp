#include "dfm/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace dfm {

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::dfm: return "dfm";
    case Variant::vanilla: return "vanilla";
    case Variant::tied: return "tied";
  }
  return "dfm";
}

Variant parse_variant(std::string_view s) {
  if (s == "dfm") return Variant::dfm;
  if (s == "vanilla") return Variant::vanilla;
  if (s == "tied") return Variant::tied;
  throw InvalidConfig("unknown variant '" + std::string(s) + "' (expected dfm, vanilla or tied)");
}

std::string_view to_string(ComputeAllocation c) { return c == ComputeAllocation::tokens ? "tokens" : "batch"; }

ComputeAllocation parse_compute_allocation(std::string_view s) {
  if (s == "tokens") return ComputeAllocation::tokens;
  if (s == "batch") return ComputeAllocation::batch;
  throw InvalidConfig("unknown compute allocation '" + std::string(s) + "' (expected tokens or batch)");
}

void TrainConfig::validate() const {
  if (steps < 0) throw InvalidConfig("steps must be nonnegative");
  if (batch < 1) throw InvalidConfig("batch must be at least 1");
  if (!(lr > 0.0)) throw InvalidConfig("lr must be positive");
  if (warmup_steps < 0) throw InvalidConfig("warmup_steps must be nonnegative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw InvalidConfig("optimizer betas must lie in [0, 1)");
  }
  if (!(eps_opt > 0.0)) throw InvalidConfig("eps_opt must be positive");
  if (!(weight_decay >= 0.0)) throw InvalidConfig("weight_decay must be nonnegative");
  if (!(grad_clip > 0.0)) throw InvalidConfig("grad_clip must be positive");
  if (!(ema_beta >= 0.0 && ema_beta < 1.0)) throw InvalidConfig("ema_beta must lie in [0, 1)");
  sampler_cfg.validate();
}

Allocation allocate_compute(const ScaleSpec& scales, int finest_patch, ComputeAllocation mode) {
  scales.validate();
  const int S = scales.stages();
  const Resolution fine = scales.finest();
  if (finest_patch < 1 || fine.height % finest_patch != 0 || fine.width % finest_patch != 0) {
    throw InvalidConfig("finest patch size " + std::to_string(finest_patch) + " does not divide " + fine.str());
  }
  Allocation a;
  a.patch_sizes.resize(S);
  if (mode == ComputeAllocation::tokens) {
    for (int s = 0; s < S; ++s) {
      const int f = fine.height / scales.resolutions[s].height;
      if (finest_patch % f != 0 || fine.width / scales.resolutions[s].width != f) {
        throw InvalidConfig("cannot equalize tokens: patch " + std::to_string(finest_patch) + " at " + fine.str() +
                            " has no integer counterpart at " + scales.resolutions[s].str());
      }
      a.patch_sizes[s] = finest_patch / f;
    }
    return a;
  }
  const Resolution coarse = scales.resolutions.front();
  if (coarse.height % finest_patch != 0 || coarse.width % finest_patch != 0) {
    throw InvalidConfig("patch " + std::to_string(finest_patch) + " does not divide the coarsest scale " +
                        coarse.str());
  }
  for (int s = 0; s < S; ++s) {
    const int f = scales.resolutions[s].height / coarse.height;
    if (scales.resolutions[s].width / coarse.width != f) {
      throw InvalidConfig("batch allocation needs equal height and width factors");
    }
    a.patch_sizes[s] = finest_patch * f;
  }
  const int ratio = fine.height / coarse.height;
  a.batch_multiplier = ratio * ratio;
  return a;
}

void apply_variant(Variant v, ModelConfig& model, TimestepSamplerConfig& sampler) {
  switch (v) {
    case Variant::dfm:
      sampler.tied = false;
      break;
    case Variant::tied:
      sampler.tied = true;
      break;
    case Variant::vanilla: {
      const int S = model.stages();
      ScaleSpec single;
      single.resolutions = {model.scales.finest()};
      single.channels = model.scales.channels;
      single.standardize = model.scales.standardize;
      if (model.scales.scale_stds) single.scale_stds = std::vector<double>{model.scales.scale_stds->back()};
      model.scales = single;
      model.patch_sizes = {model.patch_sizes.back()};
      if (model.data_std.size() == static_cast<std::size_t>(S) && S > 1) model.data_std = {model.data_std.back()};
      sampler.stage_probs = {1.0};
      sampler.tied = false;
      break;
    }
  }
}

void SyntheticDatasetSpec::validate() const {
  if (num_classes < 1) throw InvalidConfig("synthetic dataset needs at least one class");
  if (channels < 1) throw InvalidConfig("synthetic dataset needs at least one channel");
  if (resolution.height < 1 || resolution.width < 1) throw InvalidConfig("synthetic resolution must be positive");
  if (size < 1) throw InvalidConfig("synthetic dataset size must be positive");
  if (!classes.empty() && static_cast<int>(classes.size()) != num_classes) {
    throw InvalidConfig("synthetic class parameter count does not match num_classes");
  }
}

std::vector<SyntheticClass> SyntheticDatasetSpec::class_params() const {
  if (!classes.empty()) return classes;
  std::seed_seq seq{seed, std::uint64_t{0x5eed}};
  Rng rng(seq);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double pi = std::numbers::pi;
  std::vector<SyntheticClass> out(num_classes);
  for (int k = 0; k < num_classes; ++k) {
    auto& c = out[k];
    const double frac = num_classes == 1 ? 0.5 : static_cast<double>(k) / (num_classes - 1);
    c.offset = -0.45 + 0.9 * frac;
    c.ramp_angle = 2.0 * pi * k / num_classes + 0.6 * (u(rng) - 0.5);
    c.ramp_amplitude = 0.12 + 0.06 * u(rng);
    c.blob_x = 0.3 + 0.4 * u(rng);
    c.blob_y = 0.3 + 0.4 * u(rng);
    c.blob_width = 0.25 + 0.1 * u(rng);
    c.blob_amplitude = (k % 2 == 0 ? 1.0 : -1.0) * (0.08 + 0.04 * u(rng));
    c.stripe_angle = pi * k / num_classes + 0.2 * (u(rng) - 0.5);
    c.stripe_freq = 0.22 + 0.18 * ((3 * k) % num_classes) / std::max(1, num_classes);
  }
  return out;
}

namespace {

LabeledImage render(const SyntheticDatasetSpec& spec, const std::vector<SyntheticClass>& classes, long index) {
  const auto idx = static_cast<std::uint64_t>(index);
  std::seed_seq seq{spec.seed, idx & 0xffffffffu, idx >> 32};
  Rng rng(seq);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> cls(0, spec.num_classes - 1);
  const double pi = std::numbers::pi;

  LabeledImage out{Tensor<float>(spec.channels, spec.resolution), cls(rng)};
  const auto& c = classes[out.label];
  const double offset = c.offset + 0.2 * (u(rng) - 0.5);
  const double ramp = c.ramp_amplitude * (0.8 + 0.4 * u(rng));
  const double bx = c.blob_x + 0.1 * (u(rng) - 0.5);
  const double by = c.blob_y + 0.1 * (u(rng) - 0.5);
  const double stripe_amp = 0.8 + 0.4 * u(rng);
  const double stripe_angle = c.stripe_angle + 0.1 * (u(rng) - 0.5);
  const double phase = 2.0 * pi * u(rng);
  const double ca = std::cos(c.ramp_angle), sa = std::sin(c.ramp_angle);
  const double cs = std::cos(stripe_angle), ss = std::sin(stripe_angle);
  const double bw2 = 2.0 * c.blob_width * c.blob_width;
  const int H = spec.resolution.height, W = spec.resolution.width;

  for (int ch = 0; ch < spec.channels; ++ch) {
    const double gain = spec.channels == 1 ? 1.0 : 1.0 + 0.3 * std::cos(c.ramp_angle + 2.0 * pi * ch / spec.channels);
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const double uu = (x + 0.5) / W, ww = (y + 0.5) / H;
        const double d2 = (uu - bx) * (uu - bx) + (ww - by) * (ww - by);
        const double low = offset + ramp * ((uu - 0.5) * ca + (ww - 0.5) * sa) + c.blob_amplitude * std::exp(-d2 / bw2);
        const double high = stripe_amp * std::sin(2.0 * pi * c.stripe_freq * (x * cs + y * ss) + phase);
        const double v = spec.low_amplitude * gain * low + spec.high_amplitude * high;
        out.image(ch, y, x) = static_cast<float>(std::clamp(v, -1.0, 1.0));
      }
    }
  }
  return out;
}

}  // namespace

LabeledImage generate_synthetic(const SyntheticDatasetSpec& spec, long index) {
  spec.validate();
  return render(spec, spec.class_params(), index);
}

SyntheticDataset::SyntheticDataset(SyntheticDatasetSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  classes_ = spec_.class_params();
}

LabeledImage SyntheticDataset::get(long index) const {
  if (index < 0 || index >= spec_.size) throw InvalidInput("dataset index out of range");
  return render(spec_, classes_, index);
}

std::vector<double> estimate_level_stds(const Dataset& data, const ScaleSpec& scales, long count) {
  const long n = std::min(count, data.size());
  std::vector<Tensor<float>> imgs;
  imgs.reserve(n);
  for (long i = 0; i < n; ++i) imgs.push_back(data.get(i).image);
  return estimate_scale_stds<float>(imgs, scales);
}

double lr_at(long step, const TrainConfig& cfg) {
  if (step < 0) throw InvalidInput("lr_at: negative step");
  if (cfg.warmup_steps <= 0 || step >= cfg.warmup_steps) return cfg.lr;
  return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
}

namespace {

template <typename T, typename F>
void for_each_pair(ModelWeights<T>& a, const ModelWeights<T>& b, F&& f) {
  for (std::size_t i = 0; i < a.base.data.size(); ++i) f(a.base.data[i], b.base.data[i]);
  for (std::size_t e = 0; e < a.experts.size(); ++e) {
    for (std::size_t i = 0; i < a.experts[e].data.size(); ++i) f(a.experts[e].data[i], b.experts[e].data[i]);
  }
}

}  // namespace

template <typename T>
void ema_update(ModelWeights<T>& ema, const ModelWeights<T>& w, double beta) {
  if (ema.base.data.size() != w.base.data.size() || ema.experts.size() != w.experts.size()) {
    throw InvalidInput("ema_update: parameter layouts differ");
  }
  const T b = static_cast<T>(beta), a = static_cast<T>(1.0 - beta);
  for_each_pair(ema, w, [&](auto& e, const auto& v) {
    if (e.size() != v.size()) throw InvalidInput("ema_update: tensor sizes differ");
    for (std::size_t j = 0; j < e.size(); ++j) e[j] = b * e[j] + a * v[j];
  });
}

template <typename T>
double global_norm(const ModelWeights<T>& g) {
  double sq = 0.0;
  auto add = [&](const ParamStore<T>& p) {
    for (const auto& d : p.data) {
      for (T v : d) sq += static_cast<double>(v) * v;
    }
  };
  add(g.base);
  for (const auto& e : g.experts) add(e);
  return std::sqrt(sq);
}

template void ema_update<float>(ModelWeights<float>&, const ModelWeights<float>&, double);
template void ema_update<double>(ModelWeights<double>&, const ModelWeights<double>&, double);
template double global_norm<float>(const ModelWeights<float>&);
template double global_norm<double>(const ModelWeights<double>&);

TrainState init_train_state(const VelocityNet<float>& net, const TrainConfig& cfg) {
  TrainState st;
  st.weights = net.init(cfg.seed);
  st.ema = st.weights;
  st.adam_m = st.weights.zeros_like();
  st.adam_v = st.weights.zeros_like();
  std::seed_seq seq{cfg.seed, std::uint64_t{0x7a1}};
  st.rng.seed(seq);
  return st;
}

namespace {

void adamw(ParamStore<float>& p, ParamStore<float>& m, ParamStore<float>& v, const ParamStore<float>& g,
           const TrainConfig& cfg, double lr, double clip_scale, long t) {
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < p.data.size(); ++i) {
    auto& w = p.data[i];
    auto& mi = m.data[i];
    auto& vi = v.data[i];
    const auto& gi = g.data[i];
    const double decay = p.info[i].decay ? lr * cfg.weight_decay : 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = gi[j] * clip_scale;
      const double mj = cfg.beta1 * mi[j] + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * vi[j] + (1.0 - cfg.beta2) * gj * gj;
      mi[j] = static_cast<float>(mj);
      vi[j] = static_cast<float>(vj);
      double wj = w[j];
      wj -= decay * wj;
      wj -= lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg.eps_opt);
      w[j] = static_cast<float>(wj);
    }
  }
}

}  // namespace

StepResult train_step(const VelocityNet<float>& net, TrainState& state, std::span<const Tensor<float>> images,
                      std::span<const int> labels, const TrainConfig& cfg) {
  const auto& mc = net.config();
  const int S = mc.stages();
  const std::size_t B = images.size();
  if (B == 0 || labels.size() != B) throw InvalidInput("train_step: need a nonempty batch with one label per image");
  if (cfg.sampler_cfg.stages() != S) {
    throw InvalidConfig("timestep sampler has " + std::to_string(cfg.sampler_cfg.stages()) +
                        " stage probabilities, model has " + std::to_string(S) + " stages");
  }

  std::vector<Pyramid<float>> noisy(B), targets(B);
  std::vector<ModelInput<float>> inputs(B);
  std::bernoulli_distribution drop(mc.class_drop_prob);
  for (std::size_t b = 0; b < B; ++b) {
    const auto clean = decompose(images[b], mc.scales);
    const auto noise = standard_normal_pyramid<float>(mc.scales, state.rng);
    const auto draw = sample_train_draw(cfg.sampler_cfg, state.rng);
    noisy[b] = forward_process(clean, noise, draw.timesteps);
    targets[b] = velocity_target(clean, noise);
    std::optional<int> label;
    if (mc.num_classes > 0 && !drop(state.rng)) {
      if (labels[b] < 0 || labels[b] >= mc.num_classes) throw InvalidInput("train_step: label out of range");
      label = labels[b];
    }
    inputs[b] = {&noisy[b], draw.timesteps, draw.mask, draw.stage, label};
  }

  auto grad = state.weights.zeros_like();
  const float inv_b = 1.0f / static_cast<float>(B);
  StepResult r;
  r.loss = static_cast<double>(loss_and_grad<float>(net, state.weights, inputs, targets, grad, inv_b)) / B;
  r.grad_norm = global_norm(grad);
  if (!std::isfinite(r.loss) || !std::isfinite(r.grad_norm)) throw NonFiniteLoss(state.step, r.loss, r.grad_norm);

  const double clip_scale = r.grad_norm > cfg.grad_clip ? cfg.grad_clip / r.grad_norm : 1.0;
  const long t = state.step + 1;
  r.lr = lr_at(t, cfg);
  adamw(state.weights.base, state.adam_m.base, state.adam_v.base, grad.base, cfg, r.lr, clip_scale, t);
  for (std::size_t e = 0; e < state.weights.experts.size(); ++e) {
    adamw(state.weights.experts[e], state.adam_m.experts[e], state.adam_v.experts[e], grad.experts[e], cfg, r.lr,
          clip_scale, t);
  }
  ema_update(state.ema, state.weights, cfg.ema_beta);
  state.step = t;
  return r;
}

std::vector<LabeledImage> draw_batch(const Dataset& data, int batch, Rng& rng) {
  std::uniform_int_distribution<long> pick(0, data.size() - 1);
  std::vector<LabeledImage> out;
  out.reserve(batch);
  for (int i = 0; i < batch; ++i) out.push_back(data.get(pick(rng)));
  return out;
}

}  // namespace dfm
