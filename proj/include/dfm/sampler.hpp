#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "dfm/flow.hpp"
#include "dfm/model.hpp"
#include "dfm/pyramid.hpp"

namespace dfm {

/// Per-stage timesteps for K Euler steps: `steps` has K + 1 rows, `active` has K rows.
struct SamplerSchedule {
  std::vector<std::vector<double>> steps;
  std::vector<std::vector<std::uint8_t>> active;
  std::vector<int> stage_budgets;
  double tau = 1.0;
  bool tied = false;

  int stages() const { return steps.empty() ? 0 : static_cast<int>(steps.front().size()); }
  int total_steps() const { return static_cast<int>(active.size()); }
  /// 0-based phase containing step k.
  int phase_of(int k) const;
  /// Index of the first step of each phase.
  std::vector<int> phase_starts() const;
};

/// Staged schedule: during phase s stage s moves linearly from 0 to tau (to 1 for the last
/// stage) while every earlier stage moves linearly towards 1, each phase taking a share of
/// the remaining distance proportional to its budget so that all stages end at 1 together.
SamplerSchedule build_schedule(int stages, std::span<const int> budgets, double tau);
SamplerSchedule build_schedule(const ScaleSpec& spec, std::span<const int> budgets, double tau);

/// All stages share one linear 0 -> 1 grid of `steps` steps.
SamplerSchedule build_tied_schedule(int stages, int steps);

template <typename T>
Pyramid<T> euler_step(const Pyramid<T>& state, const Pyramid<T>& v, std::span<const double> dt);

/// uncond + w (cond - uncond); w = 1 returns cond and w = 0 returns uncond unchanged.
template <typename T>
Pyramid<T> cfg_combine(const Pyramid<T>& uncond, const Pyramid<T>& cond, double w);

/// One-jump clean estimate x + (1 - t) v.
template <typename T>
Tensor<T> estimate_clean(const Tensor<T>& x, double t, const Tensor<T>& v);

/// Independent per-element Gaussian data per level: level s ~ N(mean[s], std[s]^2).
struct GaussianOracleSpec {
  std::vector<Tensor<double>> mean;
  std::vector<double> std;

  void validate(const ScaleSpec& spec) const;
};

/// Exact velocity E[X1 | Xt = x] - E[X0 | Xt = x] for Gaussian data and standard normal noise.
template <typename T>
Tensor<T> oracle_velocity(const Tensor<T>& x, double t, const Tensor<double>& mean, double std);

/// Anything that predicts a velocity pyramid for a batch of noisy pyramids.
template <typename T>
class VelocityField {
 public:
  virtual ~VelocityField() = default;
  virtual const ScaleSpec& scales() const = 0;
  virtual std::vector<Pyramid<T>> operator()(std::span<const ModelInput<T>> batch) const = 0;
};

template <typename T>
class ModelField : public VelocityField<T> {
 public:
  ModelField(const VelocityNet<T>& net, const ModelWeights<T>& weights) : net_(net), weights_(weights) {}
  const ScaleSpec& scales() const override { return net_.config().scales; }
  std::vector<Pyramid<T>> operator()(std::span<const ModelInput<T>> batch) const override;

 private:
  const VelocityNet<T>& net_;
  const ModelWeights<T>& weights_;
};

template <typename T>
class OracleField : public VelocityField<T> {
 public:
  OracleField(ScaleSpec spec, GaussianOracleSpec oracle);
  const ScaleSpec& scales() const override { return spec_; }
  std::vector<Pyramid<T>> operator()(std::span<const ModelInput<T>> batch) const override;

 private:
  ScaleSpec spec_;
  GaussianOracleSpec oracle_;
};

template <typename T>
struct SampleResult {
  std::vector<Tensor<T>> images;
  /// previews[i][p]: preview of image i after phase p, at the resolution of stage p + 1.
  /// The last preview equals the final image.
  std::vector<std::vector<Tensor<T>>> previews;
  /// Velocity-field evaluations per trajectory.
  int evaluations = 0;
};

struct SampleOptions {
  double guidance = 1.0;
  bool previews = false;
  /// Examples evaluated per velocity-field call.
  int chunk = 64;
};

/// Integrates one trajectory per entry of `seeds` (initial noise drawn from a generator
/// seeded with that value). A label of nullopt samples unconditionally without guidance.
template <typename T>
SampleResult<T> sample(const VelocityField<T>& field, const SamplerSchedule& schedule,
                       std::span<const std::optional<int>> labels, std::span<const std::uint64_t> seeds,
                       const SampleOptions& opts = {});

/// Single trajectory with noise drawn from `rng`.
template <typename T>
SampleResult<T> sample(const VelocityField<T>& field, const SamplerSchedule& schedule, std::optional<int> label,
                       double guidance, Rng& rng, bool previews = false);

}  // namespace dfm
