#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "dfm/flow.hpp"
#include "dfm/model.hpp"
#include "dfm/pyramid.hpp"

namespace dfm {

enum class Variant { dfm, vanilla, tied };

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view s);

struct TrainConfig {
  long steps = 5000;
  int batch = 64;
  double lr = 1e-4;
  long warmup_steps = 500;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps_opt = 1e-8;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  double ema_beta = 0.999;
  std::uint64_t seed = 0;
  TimestepSamplerConfig sampler_cfg;
  Variant variant = Variant::dfm;

  void validate() const;
};

/// How the finer scales' token budget is spent. `tokens` lowers coarse patch sizes so
/// every scale yields the finest scale's token count; `batch` keeps the coarsest scale at
/// the finest patch size, which shrinks the token grid, and raises the batch to match.
enum class ComputeAllocation { tokens, batch };

std::string_view to_string(ComputeAllocation c);
ComputeAllocation parse_compute_allocation(std::string_view s);

/// Patch sizes for `finest_patch` at the finest scale under the given allocation, plus the
/// batch multiplier that keeps tokens per step constant.
struct Allocation {
  std::vector<int> patch_sizes;
  int batch_multiplier = 1;
};
Allocation allocate_compute(const ScaleSpec& scales, int finest_patch, ComputeAllocation mode);

/// Rewrites model and sampler settings for a training variant: vanilla collapses to a
/// single stage at the finest resolution, tied shares one timestep across stages.
void apply_variant(Variant v, ModelConfig& model, TimestepSamplerConfig& sampler);

/// Per-class generator parameters for the synthetic dataset.
struct SyntheticClass {
  double offset = 0.0;        // constant level
  double ramp_angle = 0.0;    // direction of the linear gradient
  double ramp_amplitude = 0.0;
  double blob_x = 0.5, blob_y = 0.5;  // blob centre in [0, 1] image coordinates
  double blob_width = 0.25;           // Gaussian sigma relative to image size
  double blob_amplitude = 0.0;
  double stripe_angle = 0.0;  // orientation of the high-frequency stripes
  double stripe_freq = 0.3;   // cycles per pixel
};

struct SyntheticDatasetSpec {
  Resolution resolution{16, 16};
  int channels = 1;
  int num_classes = 4;
  long size = 60000;
  std::uint64_t seed = 0;
  double low_amplitude = 1.0;   // scales the smooth field
  double high_amplitude = 0.25;  // stripe amplitude
  std::vector<SyntheticClass> classes;  // empty: derived from `seed`

  void validate() const;
  /// Class parameters, generating the seed-derived defaults when `classes` is empty.
  std::vector<SyntheticClass> class_params() const;
};

struct LabeledImage {
  Tensor<float> image;
  int label = 0;
};

/// Image `index` of the dataset; identical for identical (spec, index).
LabeledImage generate_synthetic(const SyntheticDatasetSpec& spec, long index);

/// Random-access labelled image source.
class Dataset {
 public:
  virtual ~Dataset() = default;
  virtual long size() const = 0;
  virtual int channels() const = 0;
  virtual Resolution resolution() const = 0;
  virtual int num_classes() const = 0;
  virtual LabeledImage get(long index) const = 0;
};

class SyntheticDataset : public Dataset {
 public:
  explicit SyntheticDataset(SyntheticDatasetSpec spec);
  long size() const override { return spec_.size; }
  int channels() const override { return spec_.channels; }
  Resolution resolution() const override { return spec_.resolution; }
  int num_classes() const override { return spec_.num_classes; }
  LabeledImage get(long index) const override;
  const SyntheticDatasetSpec& spec() const { return spec_; }

 private:
  SyntheticDatasetSpec spec_;
  std::vector<SyntheticClass> classes_;
};

/// Per-level population std of the decompositions of the first `count` images.
std::vector<double> estimate_level_stds(const Dataset& data, const ScaleSpec& scales, long count = 1024);

/// lr * min(1, step / warmup_steps).
double lr_at(long step, const TrainConfig& cfg);

/// ema <- beta * ema + (1 - beta) * w for every tensor.
template <typename T>
void ema_update(ModelWeights<T>& ema, const ModelWeights<T>& w, double beta);

template <typename T>
double global_norm(const ModelWeights<T>& g);

struct TrainState {
  ModelWeights<float> weights;
  ModelWeights<float> ema;
  ModelWeights<float> adam_m;
  ModelWeights<float> adam_v;
  long step = 0;
  Rng rng;
};

struct StepResult {
  double loss = 0.0;
  double grad_norm = 0.0;  // before clipping
  double lr = 0.0;
};

/// Fresh state: initialized weights, EMA equal to the weights, zero moments.
TrainState init_train_state(const VelocityNet<float>& net, const TrainConfig& cfg);

/// One optimizer update on a batch of images. The variant is read from the network's
/// configuration (stage count) and cfg.sampler_cfg (tied mode); see apply_variant.
StepResult train_step(const VelocityNet<float>& net, TrainState& state, std::span<const Tensor<float>> images,
                      std::span<const int> labels, const TrainConfig& cfg);

/// Draws a batch of dataset indices uniformly with the state's generator.
std::vector<LabeledImage> draw_batch(const Dataset& data, int batch, Rng& rng);

}  // namespace dfm
