#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dfm/flow.hpp"
#include "dfm/pyramid.hpp"

namespace dfm {

struct ConvLayerSpec {
  int out_channels = 32;
  int kernel = 3;
  int stride = 1;
};

struct FeatureExtractorSpec {
  std::uint64_t seed = 0;
  std::vector<ConvLayerSpec> layers{{32, 3, 1}, {64, 3, 2}, {256, 3, 2}};
  int output_dim = 256;

  void validate() const;
};

/// Frozen random convolution stack (zero padding, ReLU after every layer) followed by
/// global average pooling. Weights depend only on the seed and input channel count.
class FeatureExtractor {
 public:
  FeatureExtractor(FeatureExtractorSpec spec, int in_channels);

  int dim() const { return spec_.output_dim; }
  int in_channels() const { return in_channels_; }
  const FeatureExtractorSpec& spec() const { return spec_; }

  Eigen::VectorXd features(const Tensor<float>& image) const;
  /// One row per image.
  Eigen::MatrixXd features(std::span<const Tensor<float>> images) const;

 private:
  struct Layer {
    ConvLayerSpec spec;
    int in_channels;
    Eigen::MatrixXf weight;  // out x (in * k * k)
    Eigen::VectorXf bias;
  };

  FeatureExtractorSpec spec_;
  int in_channels_;
  std::vector<Layer> layers_;
};

struct GaussianSummary {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;

  int dim() const { return static_cast<int>(mean.size()); }
};

/// Mean and unbiased covariance of the rows of `features`.
GaussianSummary summarize_features(const Eigen::MatrixXd& features);
GaussianSummary summarize(std::span<const Tensor<float>> samples, const FeatureExtractor& fe);

/// ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)).
double frechet_distance(const GaussianSummary& a, const GaussianSummary& b);

/// Mean squared value per level.
template <typename T>
std::vector<double> band_energy(const Pyramid<T>& p);

/// Upper `quantile` of the Frechet distance between random equal halves of `pooled` rows.
double permutation_null_threshold(const Eigen::MatrixXd& pooled, int permutations, double quantile, Rng& rng);

/// Samples produced with one seed. `labels` may be empty when classes are unknown.
struct SeedSamples {
  std::uint64_t seed = 0;
  std::vector<Tensor<float>> images;
  std::vector<int> labels;
};

struct RunSamples {
  std::string name;
  std::vector<SeedSamples> seeds;
};

struct LabeledSet {
  std::vector<Tensor<float>> images;
  std::vector<int> labels;
};

struct ReportRow {
  std::string metric;
  std::string run;
  std::uint64_t seed = 0;
  double value = 0.0;
};

struct CompareReport {
  std::vector<ReportRow> rows;
  std::string run_a, run_b;
  double median_a = 0.0, median_b = 0.0;
  int seeds_a = 0, seeds_b = 0;
  /// run_a, run_b, "tie", or "insufficient seeds" when either run has fewer than 3 seeds.
  std::string winner;

  void write_csv(std::ostream& os) const;
  std::string verdict() const;
};

double median(std::vector<double> v);

/// Pseudo-FD of each seed of each run against the reference, per-class pseudo-FD where
/// labels allow it, band-energy profiles when `scales` is given, and a median-based verdict.
CompareReport compare_runs(const RunSamples& a, const RunSamples& b, const LabeledSet& reference,
                           const FeatureExtractor& fe, const std::optional<ScaleSpec>& scales = std::nullopt);

}  // namespace dfm
