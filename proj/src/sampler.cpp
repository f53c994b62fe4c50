#include "dfm/sampler.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace dfm {

int SamplerSchedule::phase_of(int k) const {
  int end = 0;
  for (std::size_t p = 0; p < stage_budgets.size(); ++p) {
    end += stage_budgets[p];
    if (k < end) return static_cast<int>(p);
  }
  return static_cast<int>(stage_budgets.size()) - 1;
}

std::vector<int> SamplerSchedule::phase_starts() const {
  std::vector<int> starts;
  int k = 0;
  for (int b : stage_budgets) {
    starts.push_back(k);
    k += b;
  }
  return starts;
}

SamplerSchedule build_schedule(int stages, std::span<const int> budgets, double tau) {
  if (stages < 1) throw InvalidConfig("schedule needs at least one stage");
  if (static_cast<int>(budgets.size()) != stages) {
    throw InvalidConfig("schedule: " + std::to_string(budgets.size()) + " budgets for " + std::to_string(stages) +
                        " stages");
  }
  for (int b : budgets) {
    if (b <= 0) throw InvalidConfig("schedule: stage budgets must be positive");
  }
  if (!(tau > 0.0 && tau <= 1.0)) throw InvalidConfig("schedule: tau must lie in (0, 1]");

  SamplerSchedule sch;
  sch.stage_budgets.assign(budgets.begin(), budgets.end());
  sch.tau = tau;
  std::vector<double> value(stages, 0.0);
  sch.steps.push_back(value);
  for (int p = 0; p < stages; ++p) {
    const int b = budgets[p];
    const int remaining = std::accumulate(budgets.begin() + p, budgets.end(), 0);
    const std::vector<double> entry = value;
    std::vector<double> exit = value;
    for (int r = 0; r < p; ++r) {
      exit[r] = (b == remaining) ? 1.0 : entry[r] + (1.0 - entry[r]) * b / remaining;
    }
    exit[p] = (p == stages - 1) ? 1.0 : tau;
    std::vector<std::uint8_t> act(stages, 0);
    for (int r = 0; r <= p; ++r) act[r] = 1;
    for (int j = 1; j <= b; ++j) {
      for (int r = 0; r <= p; ++r) {
        value[r] = (j == b) ? exit[r] : entry[r] + (exit[r] - entry[r]) * j / b;
      }
      sch.steps.push_back(value);
      sch.active.push_back(act);
    }
  }
  return sch;
}

SamplerSchedule build_schedule(const ScaleSpec& spec, std::span<const int> budgets, double tau) {
  return build_schedule(spec.stages(), budgets, tau);
}

SamplerSchedule build_tied_schedule(int stages, int steps) {
  if (stages < 1) throw InvalidConfig("schedule needs at least one stage");
  if (steps <= 0) throw InvalidConfig("schedule: step count must be positive");
  SamplerSchedule sch;
  sch.stage_budgets = {steps};
  sch.tied = true;
  for (int k = 0; k <= steps; ++k) {
    sch.steps.emplace_back(stages, k == steps ? 1.0 : static_cast<double>(k) / steps);
    if (k < steps) sch.active.emplace_back(stages, 1);
  }
  return sch;
}

template <typename T>
Pyramid<T> euler_step(const Pyramid<T>& state, const Pyramid<T>& v, std::span<const double> dt) {
  if (!state.same_shape(v) || static_cast<int>(dt.size()) != state.stages()) {
    throw InvalidInput("euler_step: mismatched state, velocity or step sizes");
  }
  Pyramid<T> out = state;
  for (int s = 0; s < state.stages(); ++s) {
    if (dt[s] < 0.0) throw InvalidInput("euler_step: negative step size");
    if (dt[s] == 0.0) continue;
    const T h = static_cast<T>(dt[s]);
    auto& level = out[s];
    for (std::size_t i = 0; i < level.size(); ++i) level[i] += h * v[s][i];
  }
  return out;
}

template <typename T>
Pyramid<T> cfg_combine(const Pyramid<T>& uncond, const Pyramid<T>& cond, double w) {
  if (!uncond.same_shape(cond)) throw InvalidInput("cfg_combine: mismatched predictions");
  if (w == 1.0) return cond;
  if (w == 0.0) return uncond;
  Pyramid<T> out = uncond;
  const T g = static_cast<T>(w);
  for (int s = 0; s < out.stages(); ++s) {
    for (std::size_t i = 0; i < out[s].size(); ++i) out[s][i] = uncond[s][i] + g * (cond[s][i] - uncond[s][i]);
  }
  return out;
}

template <typename T>
Tensor<T> estimate_clean(const Tensor<T>& x, double t, const Tensor<T>& v) {
  if (!x.same_shape(v)) throw InvalidInput("estimate_clean: mismatched shapes");
  Tensor<T> out = x;
  const T h = static_cast<T>(1.0 - t);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += h * v[i];
  return out;
}

void GaussianOracleSpec::validate(const ScaleSpec& spec) const {
  if (static_cast<int>(mean.size()) != spec.stages() || static_cast<int>(std.size()) != spec.stages()) {
    throw InvalidConfig("oracle spec must give a mean and std per level");
  }
  for (int s = 0; s < spec.stages(); ++s) {
    if (mean[s].channels() != spec.channels || !(mean[s].resolution() == spec.resolutions[s])) {
      throw InvalidConfig("oracle mean for level " + std::to_string(s + 1) + " has the wrong shape");
    }
    if (!(std[s] > 0.0)) throw InvalidConfig("oracle std must be positive");
  }
}

template <typename T>
Tensor<T> oracle_velocity(const Tensor<T>& x, double t, const Tensor<double>& mean, double std) {
  if (!(t >= 0.0 && t <= 1.0)) throw InvalidInput("oracle_velocity: t outside [0, 1]");
  if (x.channels() != mean.channels() || !(x.resolution() == mean.resolution())) {
    throw InvalidInput("oracle_velocity: mean does not match the state");
  }
  const double var = std * std;
  const double D = t * t * var + (1.0 - t) * (1.0 - t);
  Tensor<T> out(x.channels(), x.resolution());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double mu = mean[i];
    const double r = static_cast<double>(x[i]) - t * mu;
    const double e1 = mu + t * var * r / D;
    const double e0 = (1.0 - t) * r / D;
    out[i] = static_cast<T>(e1 - e0);
  }
  return out;
}

template <typename T>
std::vector<Pyramid<T>> ModelField<T>::operator()(std::span<const ModelInput<T>> batch) const {
  return predict(net_, weights_, batch);
}

template <typename T>
OracleField<T>::OracleField(ScaleSpec spec, GaussianOracleSpec oracle)
    : spec_(std::move(spec)), oracle_(std::move(oracle)) {
  spec_.validate();
  oracle_.validate(spec_);
}

template <typename T>
std::vector<Pyramid<T>> OracleField<T>::operator()(std::span<const ModelInput<T>> batch) const {
  std::vector<Pyramid<T>> out;
  out.reserve(batch.size());
  for (const auto& in : batch) {
    Pyramid<T> v;
    for (int s = 0; s < spec_.stages(); ++s) {
      v.levels.push_back(oracle_velocity((*in.noisy)[s], in.t[s], oracle_.mean[s], oracle_.std[s]));
    }
    out.push_back(std::move(v));
  }
  return out;
}

namespace {

template <typename T>
SampleResult<T> integrate(const VelocityField<T>& field, const SamplerSchedule& schedule,
                          std::span<const std::optional<int>> labels, std::vector<Pyramid<T>> states,
                          const SampleOptions& opts) {
  const ScaleSpec& spec = field.scales();
  const int S = spec.stages();
  if (schedule.stages() != S) {
    throw InvalidConfig("schedule has " + std::to_string(schedule.stages()) + " stages, model has " +
                        std::to_string(S));
  }
  if (labels.size() != states.size()) throw InvalidInput("sample: one label per trajectory required");
  const std::size_t n = states.size();
  const int K = schedule.total_steps();
  const int chunk = std::max(1, opts.chunk);
  bool guided = false;
  if (opts.guidance != 1.0) {
    guided = std::any_of(labels.begin(), labels.end(), [](const auto& l) { return l.has_value(); });
  }

  SampleResult<T> res;
  res.previews.resize(opts.previews ? n : 0);
  const auto starts = schedule.phase_starts();
  std::vector<double> dt(S);

  for (int k = 0; k < K; ++k) {
    const auto& t_now = schedule.steps[k];
    const auto& t_next = schedule.steps[k + 1];
    for (int s = 0; s < S; ++s) dt[s] = t_next[s] - t_now[s];
    const LossMask mask{schedule.active[k]};
    const int stage = mask.highest();
    const StageTimesteps ts{t_now};
    // A new phase begins: its first evaluation also yields the preview of the finished phase.
    int preview_stages = 0;
    if (opts.previews && !schedule.tied) {
      for (std::size_t p = 1; p < starts.size(); ++p) {
        if (starts[p] == k) preview_stages = static_cast<int>(p);
      }
    }

    for (std::size_t c0 = 0; c0 < n; c0 += chunk) {
      const std::size_t c1 = std::min(n, c0 + chunk);
      std::vector<ModelInput<T>> cond, uncond;
      std::vector<std::size_t> guided_idx;
      for (std::size_t i = c0; i < c1; ++i) {
        cond.push_back({&states[i], ts, mask, stage, labels[i]});
        if (guided && labels[i]) {
          uncond.push_back({&states[i], ts, mask, stage, std::nullopt});
          guided_idx.push_back(i - c0);
        }
      }
      auto v = field(cond);
      if (!uncond.empty()) {
        const auto vu = field(uncond);
        for (std::size_t j = 0; j < guided_idx.size(); ++j) {
          v[guided_idx[j]] = cfg_combine(vu[j], v[guided_idx[j]], opts.guidance);
        }
      }
      for (std::size_t i = c0; i < c1; ++i) {
        const auto& vi = v[i - c0];
        if (preview_stages > 0) {
          Pyramid<T> est = states[i];
          for (int s = 0; s < preview_stages; ++s) est[s] = estimate_clean(states[i][s], t_now[s], vi[s]);
          res.previews[i].push_back(reconstruct(est, spec, preview_stages));
        }
        states[i] = euler_step(states[i], vi, dt);
      }
    }
    res.evaluations += guided ? 2 : 1;
  }

  res.images.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    res.images.push_back(reconstruct(states[i], spec, S));
    if (opts.previews) res.previews[i].push_back(res.images.back());
  }
  return res;
}

}  // namespace

template <typename T>
SampleResult<T> sample(const VelocityField<T>& field, const SamplerSchedule& schedule,
                       std::span<const std::optional<int>> labels, std::span<const std::uint64_t> seeds,
                       const SampleOptions& opts) {
  std::vector<Pyramid<T>> states;
  states.reserve(seeds.size());
  for (std::uint64_t seed : seeds) {
    Rng rng(seed);
    states.push_back(standard_normal_pyramid<T>(field.scales(), rng));
  }
  return integrate(field, schedule, labels, std::move(states), opts);
}

template <typename T>
SampleResult<T> sample(const VelocityField<T>& field, const SamplerSchedule& schedule, std::optional<int> label,
                       double guidance, Rng& rng, bool previews) {
  std::vector<Pyramid<T>> states{standard_normal_pyramid<T>(field.scales(), rng)};
  const std::optional<int> labels[] = {label};
  SampleOptions opts;
  opts.guidance = guidance;
  opts.previews = previews;
  return integrate(field, schedule, std::span<const std::optional<int>>(labels), std::move(states), opts);
}

#define DFM_INSTANTIATE(T)                                                                                     \
  template Pyramid<T> euler_step(const Pyramid<T>&, const Pyramid<T>&, std::span<const double>);               \
  template Pyramid<T> cfg_combine(const Pyramid<T>&, const Pyramid<T>&, double);                               \
  template Tensor<T> estimate_clean(const Tensor<T>&, double, const Tensor<T>&);                               \
  template Tensor<T> oracle_velocity(const Tensor<T>&, double, const Tensor<double>&, double);                 \
  template class ModelField<T>;                                                                                \
  template class OracleField<T>;                                                                               \
  template SampleResult<T> sample(const VelocityField<T>&, const SamplerSchedule&,                             \
                                  std::span<const std::optional<int>>, std::span<const std::uint64_t>,         \
                                  const SampleOptions&);                                                       \
  template SampleResult<T> sample(const VelocityField<T>&, const SamplerSchedule&, std::optional<int>, double, \
                                  Rng&, bool);

DFM_INSTANTIATE(float)
DFM_INSTANTIATE(double)

#undef DFM_INSTANTIATE

}  // namespace dfm
