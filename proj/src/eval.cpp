#include "dfm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <sstream>

namespace dfm {

void FeatureExtractorSpec::validate() const {
  if (layers.empty()) throw InvalidConfig("feature extractor needs at least one layer");
  for (const auto& l : layers) {
    if (l.out_channels < 1 || l.kernel < 1 || l.kernel % 2 == 0 || l.stride < 1) {
      throw InvalidConfig("feature extractor layers need positive widths, odd kernels and positive strides");
    }
  }
  if (layers.back().out_channels != output_dim) {
    throw InvalidConfig("last feature layer width must equal output_dim");
  }
}

FeatureExtractor::FeatureExtractor(FeatureExtractorSpec spec, int in_channels)
    : spec_(std::move(spec)), in_channels_(in_channels) {
  spec_.validate();
  if (in_channels < 1) throw InvalidConfig("feature extractor needs at least one input channel");
  int cin = in_channels;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto& ls = spec_.layers[i];
    std::seed_seq seq{spec_.seed, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(in_channels)};
    Rng rng(seq);
    const int fan_in = cin * ls.kernel * ls.kernel;
    std::normal_distribution<double> w(0.0, std::sqrt(2.0 / fan_in)), b(0.0, 0.05);
    Layer layer{ls, cin, Eigen::MatrixXf(ls.out_channels, fan_in), Eigen::VectorXf(ls.out_channels)};
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = static_cast<float>(w(rng));
    }
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) layer.bias(r) = static_cast<float>(b(rng));
    layers_.push_back(std::move(layer));
    cin = ls.out_channels;
  }
}

Eigen::VectorXd FeatureExtractor::features(const Tensor<float>& image) const {
  if (image.channels() != in_channels_) {
    throw InvalidInput("feature extractor expects " + std::to_string(in_channels_) + " channels, got " +
                       std::to_string(image.channels()));
  }
  // Activations as channels x (h * w), column-major so each channel row is contiguous per pixel.
  int h = image.height(), w = image.width();
  Eigen::MatrixXf act(image.channels(), h * w);
  for (int c = 0; c < image.channels(); ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) act(c, y * w + x) = image(c, y, x);
    }
  }
  for (const auto& layer : layers_) {
    const int k = layer.spec.kernel, st = layer.spec.stride, pad = k / 2;
    const int ho = (h + 2 * pad - k) / st + 1, wo = (w + 2 * pad - k) / st + 1;
    Eigen::MatrixXf col = Eigen::MatrixXf::Zero(static_cast<Eigen::Index>(layer.in_channels) * k * k, ho * wo);
    for (int c = 0; c < layer.in_channels; ++c) {
      for (int dy = 0; dy < k; ++dy) {
        for (int dx = 0; dx < k; ++dx) {
          const Eigen::Index row = (static_cast<Eigen::Index>(c) * k + dy) * k + dx;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * st + dy - pad;
            if (iy < 0 || iy >= h) continue;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * st + dx - pad;
              if (ix < 0 || ix >= w) continue;
              col(row, oy * wo + ox) = act(c, iy * w + ix);
            }
          }
        }
      }
    }
    Eigen::MatrixXf out = layer.weight * col;
    out.colwise() += layer.bias;
    act = out.cwiseMax(0.0f);
    h = ho;
    w = wo;
  }
  return act.cast<double>().rowwise().mean();
}

Eigen::MatrixXd FeatureExtractor::features(std::span<const Tensor<float>> images) const {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(images.size()), dim());
  for (std::size_t i = 0; i < images.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = features(images[i]).transpose();
  return out;
}

GaussianSummary summarize_features(const Eigen::MatrixXd& features) {
  const Eigen::Index n = features.rows();
  if (n < 2) throw InvalidInput("summarize needs at least 2 samples");
  // Shift by the first sample for numerical stability; identical samples give exactly zero.
  const Eigen::RowVectorXd origin = features.row(0);
  const Eigen::MatrixXd d = features.rowwise() - origin;
  const Eigen::RowVectorXd dmean = d.colwise().sum() / static_cast<double>(n);
  GaussianSummary s;
  s.mean = (origin + dmean).transpose();
  const Eigen::MatrixXd centered = d.rowwise() - dmean;
  Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  s.cov = (cov + cov.transpose()) * 0.5;
  return s;
}

GaussianSummary summarize(std::span<const Tensor<float>> samples, const FeatureExtractor& fe) {
  if (samples.size() < 2) throw InvalidInput("summarize needs at least 2 samples");
  return summarize_features(fe.features(samples));
}

namespace {

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const GaussianSummary& a, const GaussianSummary& b) {
  if (a.dim() != b.dim() || a.cov.rows() != a.dim() || b.cov.rows() != b.dim()) {
    throw InvalidInput("frechet_distance: dimension mismatch (" + std::to_string(a.dim()) + " vs " +
                       std::to_string(b.dim()) + ")");
  }
  const double mean_term = (a.mean - b.mean).squaredNorm();
  const Eigen::MatrixXd sa = psd_sqrt(a.cov);
  Eigen::MatrixXd m = sa * b.cov * sa;
  m = (m + m.transpose()) * 0.5;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double fd = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, fd);
}

template <typename T>
std::vector<double> band_energy(const Pyramid<T>& p) {
  std::vector<double> out;
  out.reserve(p.levels.size());
  for (const auto& l : p.levels) {
    double e = 0.0;
    for (T v : l.values()) e += static_cast<double>(v) * v;
    out.push_back(e / static_cast<double>(l.size()));
  }
  return out;
}

template std::vector<double> band_energy<float>(const Pyramid<float>&);
template std::vector<double> band_energy<double>(const Pyramid<double>&);

double permutation_null_threshold(const Eigen::MatrixXd& pooled, int permutations, double quantile, Rng& rng) {
  const Eigen::Index n = pooled.rows();
  if (n < 4) throw InvalidInput("permutation test needs at least 4 samples");
  if (permutations < 1 || !(quantile > 0.0 && quantile <= 1.0)) {
    throw InvalidInput("permutation test needs a positive count and a quantile in (0, 1]");
  }
  std::vector<Eigen::Index> idx(n);
  for (Eigen::Index i = 0; i < n; ++i) idx[i] = i;
  const Eigen::Index half = n / 2;
  std::vector<double> fds;
  fds.reserve(permutations);
  for (int p = 0; p < permutations; ++p) {
    std::shuffle(idx.begin(), idx.end(), rng);
    Eigen::MatrixXd a(half, pooled.cols()), b(half, pooled.cols());
    for (Eigen::Index i = 0; i < half; ++i) {
      a.row(i) = pooled.row(idx[i]);
      b.row(i) = pooled.row(idx[half + i]);
    }
    fds.push_back(frechet_distance(summarize_features(a), summarize_features(b)));
  }
  std::sort(fds.begin(), fds.end());
  const auto pos = static_cast<std::size_t>(std::ceil(quantile * static_cast<double>(fds.size()))) - 1;
  return fds[std::min(pos, fds.size() - 1)];
}

double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

namespace {

std::map<int, std::vector<Tensor<float>>> by_class(const std::vector<Tensor<float>>& images,
                                                   const std::vector<int>& labels) {
  std::map<int, std::vector<Tensor<float>>> out;
  if (labels.size() != images.size()) return out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (labels[i] >= 0) out[labels[i]].push_back(images[i]);
  }
  return out;
}

std::vector<double> score_run(const RunSamples& run, const GaussianSummary& ref_all,
                              const std::map<int, GaussianSummary>& ref_class, const FeatureExtractor& fe,
                              const std::optional<ScaleSpec>& scales, std::vector<ReportRow>& rows) {
  std::vector<double> fds;
  for (const auto& s : run.seeds) {
    const double fd = frechet_distance(summarize(s.images, fe), ref_all);
    fds.push_back(fd);
    rows.push_back({"pseudo_fd", run.name, s.seed, fd});
    for (const auto& [label, imgs] : by_class(s.images, s.labels)) {
      const auto it = ref_class.find(label);
      if (it == ref_class.end() || imgs.size() < 2) continue;
      rows.push_back({"pseudo_fd_class" + std::to_string(label), run.name, s.seed,
                      frechet_distance(summarize(imgs, fe), it->second)});
    }
    if (scales) {
      std::vector<double> energy(scales->stages(), 0.0);
      for (const auto& img : s.images) {
        const auto e = band_energy(decompose(img, *scales));
        for (std::size_t l = 0; l < e.size(); ++l) energy[l] += e[l];
      }
      for (std::size_t l = 0; l < energy.size(); ++l) {
        rows.push_back({"band_energy" + std::to_string(l + 1), run.name, s.seed,
                        energy[l] / static_cast<double>(s.images.size())});
      }
    }
  }
  return fds;
}

}  // namespace

CompareReport compare_runs(const RunSamples& a, const RunSamples& b, const LabeledSet& reference,
                           const FeatureExtractor& fe, const std::optional<ScaleSpec>& scales) {
  const auto ref_all = summarize(reference.images, fe);
  std::map<int, GaussianSummary> ref_class;
  for (const auto& [label, imgs] : by_class(reference.images, reference.labels)) {
    if (imgs.size() >= 2) ref_class.emplace(label, summarize(imgs, fe));
  }
  CompareReport r;
  r.run_a = a.name;
  r.run_b = b.name;
  if (scales) {
    std::vector<double> energy(scales->stages(), 0.0);
    for (const auto& img : reference.images) {
      const auto e = band_energy(decompose(img, *scales));
      for (std::size_t l = 0; l < e.size(); ++l) energy[l] += e[l];
    }
    for (std::size_t l = 0; l < energy.size(); ++l) {
      r.rows.push_back({"band_energy" + std::to_string(l + 1), "reference", 0,
                        energy[l] / static_cast<double>(reference.images.size())});
    }
  }
  const auto fa = score_run(a, ref_all, ref_class, fe, scales, r.rows);
  const auto fb = score_run(b, ref_all, ref_class, fe, scales, r.rows);
  r.seeds_a = static_cast<int>(fa.size());
  r.seeds_b = static_cast<int>(fb.size());
  r.median_a = median(fa);
  r.median_b = median(fb);
  r.rows.push_back({"median_pseudo_fd", a.name, 0, r.median_a});
  r.rows.push_back({"median_pseudo_fd", b.name, 0, r.median_b});
  if (r.seeds_a < 3 || r.seeds_b < 3) {
    r.winner = "insufficient seeds";
  } else if (r.median_a == r.median_b) {
    r.winner = "tie";
  } else {
    r.winner = r.median_a < r.median_b ? a.name : b.name;
  }
  return r;
}

void CompareReport::write_csv(std::ostream& os) const {
  os << "metric,run,seed,value\n";
  os.precision(10);
  for (const auto& row : rows) os << row.metric << ',' << row.run << ',' << row.seed << ',' << row.value << '\n';
}

std::string CompareReport::verdict() const {
  std::ostringstream os;
  os.precision(6);
  os << "run " << run_a << ": median pseudo-FD " << median_a << " over " << seeds_a << " seeds\n";
  os << "run " << run_b << ": median pseudo-FD " << median_b << " over " << seeds_b << " seeds\n";
  if (winner == "tie") {
    os << "verdict: tie\n";
  } else if (winner == "insufficient seeds") {
    os << "verdict: none (at least 3 seeds per run are required)\n";
  } else {
    os << "verdict: " << winner << " wins\n";
  }
  return os.str();
}

}  // namespace dfm
