#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "dfm/error.hpp"
#include "dfm/pyramid.hpp"

namespace dfm {

using Rng = std::mt19937_64;

/// One flow time per stage; t = 0 is noise, t = 1 is data.
struct StageTimesteps {
  std::vector<double> t;

  int stages() const { return static_cast<int>(t.size()); }
  double operator[](int s) const { return t[s]; }
  double& operator[](int s) { return t[s]; }
  friend bool operator==(const StageTimesteps&, const StageTimesteps&) = default;
};

struct LossMask {
  std::vector<std::uint8_t> m;

  static LossMask upto(int stages, int stage) {
    LossMask mask{std::vector<std::uint8_t>(stages, 0)};
    for (int s = 0; s < stage; ++s) mask.m[s] = 1;
    return mask;
  }
  static LossMask all(int stages) { return {std::vector<std::uint8_t>(stages, 1)}; }

  int stages() const { return static_cast<int>(m.size()); }
  bool operator[](int s) const { return m[s] != 0; }
  /// 1-based index of the highest unmasked stage, 0 if everything is masked.
  int highest() const {
    for (int s = stages(); s > 0; --s) {
      if (m[s - 1]) return s;
    }
    return 0;
  }
  friend bool operator==(const LossMask&, const LossMask&) = default;
};

struct TrainDraw {
  int stage = 1;  // 1-based
  StageTimesteps timesteps;
  LossMask mask;
};

struct TimestepSamplerConfig {
  std::vector<double> stage_probs{0.9, 0.1};
  double current_loc = 0.0;
  double current_scale = 1.0;
  double prev_loc = 1.5;
  double prev_scale = 1.0;
  bool tied = false;

  int stages() const { return static_cast<int>(stage_probs.size()); }

  void validate() const {
    if (stage_probs.empty()) throw InvalidConfig("stage_probs is empty");
    double total = 0.0;
    for (double p : stage_probs) {
      if (!(p >= 0.0)) throw InvalidConfig("stage_probs must be nonnegative");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw InvalidConfig("stage_probs must sum to 1");
    if (!(current_scale > 0.0) || !(prev_scale > 0.0)) throw InvalidConfig("logit-normal scales must be positive");
  }
};

namespace detail {

template <typename T>
void check_same(const Pyramid<T>& a, const Pyramid<T>& b, const char* what) {
  if (!a.same_shape(b)) throw InvalidInput(std::string(what) + ": pyramid shape mismatch");
}

}  // namespace detail

/// Level s of the result is t^s * clean^s + (1 - t^s) * noise^s.
template <typename T>
Pyramid<T> forward_process(const Pyramid<T>& clean, const Pyramid<T>& noise, const StageTimesteps& t) {
  detail::check_same(clean, noise, "forward_process");
  if (t.stages() != clean.stages()) throw InvalidInput("forward_process: timestep count mismatch");
  Pyramid<T> out = clean;
  for (int s = 0; s < clean.stages(); ++s) {
    const T ts = static_cast<T>(t[s]);
    const T tn = static_cast<T>(1.0 - t[s]);
    auto& o = out.levels[s];
    const auto& n = noise.levels[s];
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = ts * o[i] + tn * n[i];
  }
  return out;
}

template <typename T>
Pyramid<T> velocity_target(const Pyramid<T>& clean, const Pyramid<T>& noise) {
  detail::check_same(clean, noise, "velocity_target");
  Pyramid<T> out = clean;
  for (int s = 0; s < clean.stages(); ++s) {
    auto& o = out.levels[s];
    const auto& n = noise.levels[s];
    for (std::size_t i = 0; i < o.size(); ++i) o[i] -= n[i];
  }
  return out;
}

/// Sum over unmasked levels of the squared L2 error (no per-level normalization).
template <typename T>
T dfm_loss(const Pyramid<T>& pred, const Pyramid<T>& target, const LossMask& mask) {
  detail::check_same(pred, target, "dfm_loss");
  if (mask.stages() != pred.stages()) throw InvalidInput("dfm_loss: mask length mismatch");
  T total = 0;
  for (int s = 0; s < pred.stages(); ++s) {
    if (!mask[s]) continue;
    T acc = 0;
    const auto& p = pred.levels[s];
    const auto& g = target.levels[s];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T d = p[i] - g[i];
      acc += d * d;
    }
    total += acc;
  }
  return total;
}

/// Batch reduction: mean of per-example losses.
template <typename T>
T dfm_loss(std::span<const Pyramid<T>> pred, std::span<const Pyramid<T>> target, std::span<const LossMask> masks) {
  if (pred.size() != target.size() || pred.size() != masks.size() || pred.empty()) {
    throw InvalidInput("dfm_loss: batch size mismatch");
  }
  T total = 0;
  for (std::size_t b = 0; b < pred.size(); ++b) total += dfm_loss(pred[b], target[b], masks[b]);
  return total / static_cast<T>(pred.size());
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

template <typename URBG>
double sample_logit_normal(double loc, double scale, URBG& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  return sigmoid(loc + scale * normal(rng));
}

template <typename URBG>
TrainDraw sample_train_draw(const TimestepSamplerConfig& cfg, URBG& rng) {
  const int S = cfg.stages();
  TrainDraw d;
  if (cfg.tied) {
    const double t = sample_logit_normal(cfg.current_loc, cfg.current_scale, rng);
    d.stage = S;
    d.timesteps.t.assign(S, t);
    d.mask = LossMask::all(S);
    return d;
  }
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double u = unif(rng);
  double cum = 0.0;
  d.stage = S;
  for (int s = 0; s < S; ++s) {
    cum += cfg.stage_probs[s];
    if (u < cum) {
      d.stage = s + 1;
      break;
    }
  }
  // Zero-probability tail stages are never chosen, even if rounding leaves cum < 1.
  while (d.stage > 1 && cfg.stage_probs[d.stage - 1] == 0.0) --d.stage;

  d.timesteps.t.assign(S, 0.0);
  for (int s = 0; s < d.stage - 1; ++s) d.timesteps[s] = sample_logit_normal(cfg.prev_loc, cfg.prev_scale, rng);
  d.timesteps[d.stage - 1] = sample_logit_normal(cfg.current_loc, cfg.current_scale, rng);
  d.mask = LossMask::upto(S, d.stage);
  return d;
}

template <typename T, typename URBG>
Pyramid<T> standard_normal_pyramid(const ScaleSpec& spec, URBG& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Pyramid<T> p = Pyramid<T>::zeros(spec);
  for (auto& level : p.levels) {
    for (auto& v : level.values()) v = static_cast<T>(normal(rng));
  }
  return p;
}

}  // namespace dfm
