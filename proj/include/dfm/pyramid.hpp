#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dfm/error.hpp"
#include "dfm/tensor.hpp"

namespace dfm {

/// Resolutions of the decomposition, coarsest first, plus optional per-level standardization.
struct ScaleSpec {
  std::vector<Resolution> resolutions;
  int channels = 1;
  bool standardize = false;
  std::optional<std::vector<double>> scale_stds;

  int stages() const { return static_cast<int>(resolutions.size()); }
  Resolution finest() const { return resolutions.back(); }

  void validate() const {
    if (resolutions.empty()) throw InvalidSpec("scale spec needs at least one resolution");
    if (channels <= 0) throw InvalidSpec("channels must be positive");
    for (std::size_t s = 0; s < resolutions.size(); ++s) {
      const auto& r = resolutions[s];
      if (r.height <= 0 || r.width <= 0) throw InvalidSpec("resolution " + r.str() + " is not positive");
      if (s == 0) continue;
      const auto& p = resolutions[s - 1];
      if (r.height % p.height != 0 || r.width % p.width != 0) {
        throw InvalidSpec("resolution " + p.str() + " does not divide " + r.str());
      }
      if (r.height * r.width <= p.height * p.width) {
        throw InvalidSpec("resolutions must be strictly increasing: " + p.str() + " -> " + r.str());
      }
    }
    if (standardize) {
      if (!scale_stds || scale_stds->size() != resolutions.size()) {
        throw InvalidSpec("standardize requires one scale std per level");
      }
      for (double v : *scale_stds) {
        if (!(v > 0.0)) throw InvalidSpec("scale stds must be positive");
      }
    }
  }

  double level_std(int s) const { return standardize ? (*scale_stds)[s] : 1.0; }
};

/// Multiscale representation; levels[0] is the coarsest.
template <typename T>
struct Pyramid {
  std::vector<Tensor<T>> levels;

  int stages() const { return static_cast<int>(levels.size()); }
  Tensor<T>& operator[](int s) { return levels[s]; }
  const Tensor<T>& operator[](int s) const { return levels[s]; }

  bool same_shape(const Pyramid& o) const {
    if (levels.size() != o.levels.size()) return false;
    for (std::size_t s = 0; s < levels.size(); ++s) {
      if (!levels[s].same_shape(o.levels[s])) return false;
    }
    return true;
  }

  bool matches(const ScaleSpec& spec) const {
    if (stages() != spec.stages()) return false;
    for (int s = 0; s < stages(); ++s) {
      const auto& l = levels[s];
      if (l.channels() != spec.channels || !(l.resolution() == spec.resolutions[s])) return false;
    }
    return true;
  }

  static Pyramid zeros(const ScaleSpec& spec) {
    Pyramid p;
    for (const auto& r : spec.resolutions) p.levels.emplace_back(spec.channels, r);
    return p;
  }

  friend bool operator==(const Pyramid&, const Pyramid&) = default;
};

namespace detail {

inline void scale_factors(Resolution from, Resolution to, int& fy, int& fx, const char* what) {
  // `from` is the larger resolution.
  if (to.height <= 0 || to.width <= 0 || from.height % to.height != 0 || from.width % to.width != 0) {
    throw InvalidSpec(std::string(what) + ": non-integer factor between " + from.str() + " and " + to.str());
  }
  fy = from.height / to.height;
  fx = from.width / to.width;
}

}  // namespace detail

/// Block average over non-overlapping factor x factor blocks.
template <typename T>
Tensor<T> downsample(const Tensor<T>& x, Resolution target) {
  int fy = 0, fx = 0;
  detail::scale_factors(x.resolution(), target, fy, fx, "downsample");
  if (fy == 1 && fx == 1) return x;
  Tensor<T> out(x.channels(), target);
  // Extended-precision accumulation keeps the average of replicated blocks exact.
  const long double inv = 1.0L / static_cast<long double>(fy * fx);
  for (int c = 0; c < x.channels(); ++c) {
    for (int y = 0; y < target.height; ++y) {
      for (int xx = 0; xx < target.width; ++xx) {
        long double acc = 0;
        for (int dy = 0; dy < fy; ++dy) {
          for (int dx = 0; dx < fx; ++dx) acc += x(c, y * fy + dy, xx * fx + dx);
        }
        out(c, y, xx) = static_cast<T>(acc * inv);
      }
    }
  }
  return out;
}

/// Nearest-neighbour replication into factor x factor blocks.
template <typename T>
Tensor<T> upsample(const Tensor<T>& x, Resolution target) {
  int fy = 0, fx = 0;
  detail::scale_factors(target, x.resolution(), fy, fx, "upsample");
  if (fy == 1 && fx == 1) return x;
  Tensor<T> out(x.channels(), target);
  for (int c = 0; c < x.channels(); ++c) {
    for (int y = 0; y < target.height; ++y) {
      for (int xx = 0; xx < target.width; ++xx) out(c, y, xx) = x(c, y / fy, xx / fx);
    }
  }
  return out;
}

/// Laplacian decomposition: level 1 is the coarsest approximation, levels s > 1 are the
/// residuals down(x, s) - up(down(x, s-1), s).
template <typename T>
Pyramid<T> decompose(const Tensor<T>& x, const ScaleSpec& spec) {
  spec.validate();
  if (x.channels() != spec.channels || !(x.resolution() == spec.finest())) {
    throw InvalidInput("decompose: input " + std::to_string(x.channels()) + "x" + x.resolution().str() +
                       " does not match finest scale " + std::to_string(spec.channels) + "x" +
                       spec.finest().str());
  }
  const int S = spec.stages();
  std::vector<Tensor<T>> approx(S);
  approx[S - 1] = x;
  for (int s = S - 2; s >= 0; --s) approx[s] = downsample(approx[s + 1], spec.resolutions[s]);

  Pyramid<T> p;
  p.levels.reserve(S);
  p.levels.push_back(approx[0]);
  for (int s = 1; s < S; ++s) {
    Tensor<T> level = approx[s];
    const Tensor<T> up = upsample(approx[s - 1], spec.resolutions[s]);
    for (std::size_t i = 0; i < level.size(); ++i) level[i] -= up[i];
    p.levels.push_back(std::move(level));
  }
  if (spec.standardize) {
    for (int s = 0; s < S; ++s) {
      const T inv = static_cast<T>(1.0 / (*spec.scale_stds)[s]);
      for (auto& v : p.levels[s].values()) v *= inv;
    }
  }
  return p;
}

/// Approximation at stage `upto` (1-based): X_1 = level 1, X_s = up(X_{s-1}) + level s.
template <typename T>
Tensor<T> reconstruct(const Pyramid<T>& p, const ScaleSpec& spec, int upto) {
  if (upto < 1 || upto > spec.stages()) {
    throw InvalidInput("reconstruct: stage " + std::to_string(upto) + " outside [1, " +
                       std::to_string(spec.stages()) + "]");
  }
  if (!p.matches(spec)) throw InvalidInput("reconstruct: pyramid does not match scale spec");
  auto unstd = [&](int s) {
    Tensor<T> l = p.levels[s];
    if (spec.standardize) {
      const T sd = static_cast<T>((*spec.scale_stds)[s]);
      for (auto& v : l.values()) v *= sd;
    }
    return l;
  };
  Tensor<T> acc = unstd(0);
  for (int s = 1; s < upto; ++s) {
    Tensor<T> up = upsample(acc, spec.resolutions[s]);
    const Tensor<T> l = unstd(s);
    for (std::size_t i = 0; i < up.size(); ++i) up[i] += l[i];
    acc = std::move(up);
  }
  return acc;
}

/// Per-level population standard deviation over all elements of the (unstandardized)
/// decompositions of `images`.
template <typename T>
std::vector<double> estimate_scale_stds(std::span<const Tensor<T>> images, const ScaleSpec& spec) {
  if (images.empty()) throw InvalidInput("estimate_scale_stds: no images");
  ScaleSpec raw = spec;
  raw.standardize = false;
  raw.scale_stds.reset();
  const int S = raw.stages();
  std::vector<double> sum(S, 0.0), sq(S, 0.0), n(S, 0.0);
  for (const auto& img : images) {
    const auto p = decompose(img, raw);
    for (int s = 0; s < S; ++s) {
      for (T v : p.levels[s].values()) {
        sum[s] += v;
        sq[s] += static_cast<double>(v) * v;
      }
      n[s] += static_cast<double>(p.levels[s].size());
    }
  }
  std::vector<double> out(S);
  for (int s = 0; s < S; ++s) {
    const double m = sum[s] / n[s];
    out[s] = std::sqrt(std::max(sq[s] / n[s] - m * m, 0.0));
  }
  return out;
}

}  // namespace dfm
