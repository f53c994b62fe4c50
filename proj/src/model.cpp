#include "dfm/model.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <random>

namespace dfm {

std::string_view to_string(Specialization s) {
  switch (s) {
    case Specialization::none: return "none";
    case Specialization::modulation: return "modulation";
    case Specialization::projection: return "projection";
    case Specialization::conditioning: return "conditioning";
    case Specialization::attention: return "attention";
    case Specialization::mlp: return "mlp";
    case Specialization::full: return "full";
  }
  return "none";
}

Specialization parse_specialization(std::string_view s) {
  for (auto m : {Specialization::none, Specialization::modulation, Specialization::projection,
                 Specialization::conditioning, Specialization::attention, Specialization::mlp,
                 Specialization::full}) {
    if (to_string(m) == s) return m;
  }
  throw InvalidConfig("unknown specialization mode '" + std::string(s) + "'");
}

bool selects(Specialization mode, ParamGroup group) {
  switch (mode) {
    case Specialization::none: return false;
    case Specialization::full: return true;
    case Specialization::modulation: return group == ParamGroup::modulation;
    case Specialization::projection: return group == ParamGroup::projection;
    case Specialization::conditioning: return group == ParamGroup::conditioning;
    case Specialization::attention: return group == ParamGroup::attention;
    case Specialization::mlp: return group == ParamGroup::mlp;
  }
  return false;
}

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
  scales.validate();
  const int S = scales.stages();
  if (static_cast<int>(patch_sizes.size()) != S) throw InvalidConfig("need one patch size per scale");
  Resolution grid{};
  for (int s = 0; s < S; ++s) {
    const int k = patch_sizes[s];
    const auto r = scales.resolutions[s];
    if (k <= 0 || r.height % k != 0 || r.width % k != 0) {
      throw InvalidConfig("patch size " + std::to_string(k) + " does not divide " + r.str());
    }
    const Resolution g{r.height / k, r.width / k};
    if (s == 0) {
      grid = g;
    } else if (!(g == grid)) {
      throw InvalidConfig("scale " + r.str() + " with patch " + std::to_string(k) + " yields a " + g.str() +
                          " token grid, expected " + grid.str());
    }
  }
  if (width <= 0 || depth < 0 || heads <= 0 || width % heads != 0) {
    throw InvalidConfig("width must be a positive multiple of heads");
  }
  if (head_dim() % 4 != 0) throw InvalidConfig("head dimension must be a multiple of 4 for 2D rotary embedding");
  if (num_classes < 0) throw InvalidConfig("num_classes must be nonnegative");
  if (class_drop_prob < 0.0 || class_drop_prob > 1.0) throw InvalidConfig("class_drop_prob must be in [0,1]");
  if (data_std.size() != 1 && static_cast<int>(data_std.size()) != S) {
    throw InvalidConfig("data_std must hold one global value or one per scale");
  }
  for (double v : data_std) {
    if (!(v > 0.0)) throw InvalidConfig("data_std must be positive");
  }
  if (time_features <= 0 || time_features % 2 != 0) throw InvalidConfig("time_features must be positive and even");
  if (mlp_ratio <= 0) throw InvalidConfig("mlp_ratio must be positive");
}

Resolution ModelConfig::token_grid() const {
  const auto r = scales.resolutions.front();
  return {r.height / patch_sizes.front(), r.width / patch_sizes.front()};
}

double ModelConfig::sigma_data(int s) const {
  if (scales.standardize) return 1.0;
  return data_std.size() == 1 ? data_std.front() : data_std[s];
}

double ModelConfig::c_in(int s, double t) const {
  if (!precondition) return 1.0;
  const double sd = sigma_data(s);
  return 1.0 / std::sqrt((t * sd) * (t * sd) + (1.0 - t) * (1.0 - t));
}

double ModelConfig::c_out(int s) const {
  if (!precondition) return 1.0;
  const double sd = sigma_data(s);
  return std::sqrt(sd * sd + 1.0);
}

// ---------------------------------------------------------------------------
// Free helpers

template <typename T>
ParamStore<T> specialize_weights(const ParamStore<T>& base, std::span<const ParamStore<T>> experts, int stage,
                                 Specialization mode) {
  if (mode == Specialization::none) return base;
  if (stage < 1 || stage > static_cast<int>(experts.size())) {
    throw InvalidConfig("no expert parameters for stage " + std::to_string(stage));
  }
  const auto& expert = experts[stage - 1];
  ParamStore<T> eff = base;
  for (std::size_t i = 0; i < base.count(); ++i) {
    if (!selects(mode, base.info[i].group)) continue;
    if (i >= expert.data.size() || expert.data[i].size() != base.data[i].size()) {
      throw InvalidConfig("missing stage " + std::to_string(stage) + " expert for '" + base.info[i].name + "'");
    }
    auto& e = eff.data[i];
    const auto& x = expert.data[i];
    for (std::size_t j = 0; j < e.size(); ++j) e[j] = (e[j] + x[j]) / T(2);
  }
  return eff;
}

template <typename T>
void fill_uniform(ParamStore<T>& p, std::uint64_t seed, double amplitude) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-amplitude, amplitude);
  for (auto& d : p.data) {
    for (auto& v : d) v = static_cast<T>(u(rng));
  }
}

template <typename T>
void apply_rope(std::span<T> head, double row, double col, double base, bool inverse) {
  const int hd = static_cast<int>(head.size());
  const int per_axis = hd / 2;
  const int pairs = per_axis / 2;
  for (int j = 0; j < hd / 2; ++j) {
    const int i = j % pairs;
    const double pos = j < pairs ? row : col;
    const double theta = pos * std::pow(base, -2.0 * i / per_axis);
    const double c = std::cos(theta);
    const double s = inverse ? -std::sin(theta) : std::sin(theta);
    const double x0 = head[2 * j], x1 = head[2 * j + 1];
    head[2 * j] = static_cast<T>(x0 * c - x1 * s);
    head[2 * j + 1] = static_cast<T>(x0 * s + x1 * c);
  }
}

template <typename T>
std::vector<std::vector<T>> patchify(const Tensor<T>& level, int patch) {
  if (patch <= 0 || level.height() % patch != 0 || level.width() % patch != 0) {
    throw InvalidConfig("patch size " + std::to_string(patch) + " does not divide " + level.resolution().str());
  }
  const int gh = level.height() / patch, gw = level.width() / patch;
  std::vector<std::vector<T>> tokens(static_cast<std::size_t>(gh) * gw);
  for (int gy = 0; gy < gh; ++gy) {
    for (int gx = 0; gx < gw; ++gx) {
      auto& tok = tokens[gy * gw + gx];
      tok.reserve(static_cast<std::size_t>(level.channels()) * patch * patch);
      for (int c = 0; c < level.channels(); ++c) {
        for (int dy = 0; dy < patch; ++dy) {
          for (int dx = 0; dx < patch; ++dx) tok.push_back(level(c, gy * patch + dy, gx * patch + dx));
        }
      }
    }
  }
  return tokens;
}

template <typename T>
Tensor<T> unpatchify(std::span<const std::vector<T>> tokens, int channels, Resolution res, int patch) {
  if (patch <= 0 || res.height % patch != 0 || res.width % patch != 0) {
    throw InvalidConfig("patch size " + std::to_string(patch) + " does not divide " + res.str());
  }
  const int gh = res.height / patch, gw = res.width / patch;
  if (static_cast<int>(tokens.size()) != gh * gw) throw InvalidInput("unpatchify: token count mismatch");
  Tensor<T> out(channels, res);
  for (int gy = 0; gy < gh; ++gy) {
    for (int gx = 0; gx < gw; ++gx) {
      const auto& tok = tokens[gy * gw + gx];
      if (static_cast<int>(tok.size()) != channels * patch * patch) throw InvalidInput("unpatchify: token width");
      std::size_t k = 0;
      for (int c = 0; c < channels; ++c) {
        for (int dy = 0; dy < patch; ++dy) {
          for (int dx = 0; dx < patch; ++dx) out(c, gy * patch + dy, gx * patch + dx) = tok[k++];
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// VelocityNet

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using CMap = Eigen::Map<const Mat<T>>;
template <typename T>
using MMap = Eigen::Map<Mat<T>>;

template <typename T>
CMap<T> as_mat(const ParamStore<T>& w, int idx) {
  const auto& sh = w.info[idx].shape;
  return CMap<T>(w.data[idx].data(), sh[0], sh.size() > 1 ? sh[1] : 1);
}

template <typename T>
MMap<T> as_mat(ParamStore<T>& w, int idx) {
  const auto& sh = w.info[idx].shape;
  return MMap<T>(w.data[idx].data(), sh[0], sh.size() > 1 ? sh[1] : 1);
}

template <typename T>
Eigen::Map<const RowVec<T>> as_row(const ParamStore<T>& w, int idx) {
  return Eigen::Map<const RowVec<T>>(w.data[idx].data(), static_cast<Eigen::Index>(w.data[idx].size()));
}

template <typename T>
Eigen::Map<RowVec<T>> as_row(ParamStore<T>& w, int idx) {
  return Eigen::Map<RowVec<T>>(w.data[idx].data(), static_cast<Eigen::Index>(w.data[idx].size()));
}

// y = x W^T + b
template <typename T>
Mat<T> linear(const Mat<T>& x, const ParamStore<T>& w, int wi, int bi) {
  Mat<T> y = x * as_mat(w, wi).transpose();
  y.rowwise() += as_row(w, bi);
  return y;
}

// Accumulates weight/bias gradients and returns dx.
template <typename T>
Mat<T> linear_backward(const Mat<T>& dy, const Mat<T>& x, const ParamStore<T>& w, int wi, int bi,
                       ParamStore<T>& g, bool need_dx = true) {
  as_mat(g, wi).noalias() += dy.transpose() * x;
  as_row(g, bi) += dy.colwise().sum();
  if (!need_dx) return {};
  return dy * as_mat(w, wi);
}

template <typename T>
T silu(T x) {
  return x / (T(1) + std::exp(-x));
}

template <typename T>
T silu_grad(T x) {
  const T s = T(1) / (T(1) + std::exp(-x));
  return s * (T(1) + x * (T(1) - s));
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

template <typename T>
Mat<T> gelu(const Mat<T>& x) {
  const auto a = x.array();
  const auto th = (static_cast<T>(kGeluC) * (a + T(0.044715) * a.cube())).tanh();
  return (T(0.5) * a * (T(1) + th)).matrix();
}

template <typename T>
Mat<T> gelu_grad(const Mat<T>& x) {
  const auto a = x.array();
  const Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> th =
      (static_cast<T>(kGeluC) * (a + T(0.044715) * a.cube())).tanh();
  const auto du = static_cast<T>(kGeluC) * (T(1) + T(3 * 0.044715) * a.square());
  return (T(0.5) * (T(1) + th) + T(0.5) * a * (T(1) - th.square()) * du).matrix();
}

// Row-wise layer norm without affine parameters.
template <typename T>
void layer_norm(const Mat<T>& x, T eps, Mat<T>& n, std::vector<T>& rstd) {
  const Eigen::Index rows = x.rows(), d = x.cols();
  n.resize(rows, d);
  rstd.resize(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const T mu = x.row(r).mean();
    const T var = (x.row(r).array() - mu).square().mean();
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    n.row(r) = (x.row(r).array() - mu) * rs;
  }
}

template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dn, const Mat<T>& n, const std::vector<T>& rstd) {
  Mat<T> dx(dn.rows(), dn.cols());
  for (Eigen::Index r = 0; r < dn.rows(); ++r) {
    const T m1 = dn.row(r).mean();
    const T m2 = (dn.row(r).array() * n.row(r).array()).mean();
    dx.row(r) = rstd[r] * (dn.row(r).array() - m1 - n.row(r).array() * m2);
  }
  return dx;
}

// u = n * (1 + scale_b) + shift_b for token blocks of N rows per example.
template <typename T>
Mat<T> modulate(const Mat<T>& n, const Mat<T>& mod, int shift_col, int scale_col, int N) {
  const Eigen::Index d = n.cols();
  Mat<T> u(n.rows(), d);
  for (Eigen::Index b = 0; b < mod.rows(); ++b) {
    const auto shift = mod.row(b).segment(shift_col, d);
    const RowVec<T> scale = mod.row(b).segment(scale_col, d).array() + T(1);
    for (int i = 0; i < N; ++i) {
      const Eigen::Index r = b * N + i;
      u.row(r) = n.row(r).cwiseProduct(scale) + shift;
    }
  }
  return u;
}

// Backward of modulate: writes dshift/dscale into dmod, returns dn.
template <typename T>
Mat<T> modulate_backward(const Mat<T>& du, const Mat<T>& n, const Mat<T>& mod, Mat<T>& dmod, int shift_col,
                         int scale_col, int N) {
  const Eigen::Index d = n.cols();
  Mat<T> dn(n.rows(), d);
  for (Eigen::Index b = 0; b < mod.rows(); ++b) {
    const RowVec<T> scale = mod.row(b).segment(scale_col, d).array() + T(1);
    const auto dub = du.middleRows(b * N, N);
    dmod.row(b).segment(shift_col, d) += dub.colwise().sum();
    dmod.row(b).segment(scale_col, d) += (dub.array() * n.middleRows(b * N, N).array()).colwise().sum().matrix();
    dn.middleRows(b * N, N) = dub.array().rowwise() * scale.array();
  }
  return dn;
}

// x += gate_b * y
template <typename T>
void gated_add(Mat<T>& x, const Mat<T>& y, const Mat<T>& mod, int gate_col, int N) {
  const Eigen::Index d = x.cols();
  for (Eigen::Index b = 0; b < mod.rows(); ++b) {
    const RowVec<T> gate = mod.row(b).segment(gate_col, d);
    x.middleRows(b * N, N).array() += y.middleRows(b * N, N).array().rowwise() * gate.array();
  }
}

template <typename T>
Mat<T> gated_add_backward(const Mat<T>& dx, const Mat<T>& y, const Mat<T>& mod, Mat<T>& dmod, int gate_col, int N) {
  const Eigen::Index d = dx.cols();
  Mat<T> dy(dx.rows(), d);
  for (Eigen::Index b = 0; b < mod.rows(); ++b) {
    const RowVec<T> gate = mod.row(b).segment(gate_col, d);
    dmod.row(b).segment(gate_col, d) +=
        (dx.middleRows(b * N, N).array() * y.middleRows(b * N, N).array()).colwise().sum().matrix();
    dy.middleRows(b * N, N) = dx.middleRows(b * N, N).array().rowwise() * gate.array();
  }
  return dy;
}

}  // namespace

template <typename T>
struct VelocityNet<T>::Tape {
  struct Block {
    Mat<T> mod;  // B x 6d
    Mat<T> n1, u1, qkv, probs, o, a, n2, u2, h, g, m;
    std::vector<T> rstd1, rstd2;
  };
  int B = 0;
  std::vector<Mat<T>> patches;           // per scale: (B N) x patch_dim
  std::vector<Mat<T>> tfeat, th, ta;     // per scale: B x F, B x d, B x d
  Mat<T> tokens;                         // (B N) x d embedding
  Mat<T> cond, sc;                       // B x d
  std::vector<Block> blocks;
  Mat<T> nf, uf, modf;
  std::vector<T> rstdf;
  std::vector<Mat<T>> raw;               // per scale: (B N) x patch_dim head output
};

template <typename T>
VelocityNet<T>::VelocityNet(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const int S = cfg_.stages();
  const int d = cfg_.width;
  auto add = [&](std::string name, ParamGroup g, std::vector<int> shape, bool decay) {
    layout_.push_back({std::move(name), g, std::move(shape), decay});
    return static_cast<int>(layout_.size()) - 1;
  };
  for (int s = 0; s < S; ++s) {
    const auto ss = std::to_string(s);
    embed_w_.push_back(add("embed." + ss + ".weight", ParamGroup::projection, {d, cfg_.patch_dim(s)}, true));
    embed_b_.push_back(add("embed." + ss + ".bias", ParamGroup::projection, {d}, false));
  }
  for (int s = 0; s < S; ++s) {
    const auto ss = std::to_string(s);
    t1_w_.push_back(add("time." + ss + ".fc1.weight", ParamGroup::conditioning, {d, cfg_.time_features}, true));
    t1_b_.push_back(add("time." + ss + ".fc1.bias", ParamGroup::conditioning, {d}, false));
    t2_w_.push_back(add("time." + ss + ".fc2.weight", ParamGroup::conditioning, {d, d}, true));
    t2_b_.push_back(add("time." + ss + ".fc2.bias", ParamGroup::conditioning, {d}, false));
  }
  stage_embed_ = add("stage_embed", ParamGroup::conditioning, {S, d}, true);
  class_embed_ = add("class_embed", ParamGroup::conditioning, {cfg_.num_classes + 1, d}, true);
  const int hidden = cfg_.mlp_ratio * d;
  for (int l = 0; l < cfg_.depth; ++l) {
    const auto p = "blocks." + std::to_string(l) + ".";
    BlockIdx b{};
    b.mod_w = add(p + "mod.weight", ParamGroup::modulation, {6 * d, d}, true);
    b.mod_b = add(p + "mod.bias", ParamGroup::modulation, {6 * d}, false);
    b.qkv_w = add(p + "qkv.weight", ParamGroup::attention, {3 * d, d}, true);
    b.qkv_b = add(p + "qkv.bias", ParamGroup::attention, {3 * d}, false);
    b.proj_w = add(p + "proj.weight", ParamGroup::attention, {d, d}, true);
    b.proj_b = add(p + "proj.bias", ParamGroup::attention, {d}, false);
    b.fc1_w = add(p + "fc1.weight", ParamGroup::mlp, {hidden, d}, true);
    b.fc1_b = add(p + "fc1.bias", ParamGroup::mlp, {hidden}, false);
    b.fc2_w = add(p + "fc2.weight", ParamGroup::mlp, {d, hidden}, true);
    b.fc2_b = add(p + "fc2.bias", ParamGroup::mlp, {d}, false);
    blocks_.push_back(b);
  }
  final_w_ = add("final.mod.weight", ParamGroup::modulation, {2 * d, d}, true);
  final_b_ = add("final.mod.bias", ParamGroup::modulation, {2 * d}, false);
  for (int s = 0; s < S; ++s) {
    const auto ss = std::to_string(s);
    head_w_.push_back(add("head." + ss + ".weight", ParamGroup::projection, {cfg_.patch_dim(s), d}, true));
    head_b_.push_back(add("head." + ss + ".bias", ParamGroup::projection, {cfg_.patch_dim(s)}, false));
  }

  const auto grid = cfg_.token_grid();
  const int hd = cfg_.head_dim();
  const int N = cfg_.tokens();
  rope_cos_.resize(static_cast<std::size_t>(N) * hd / 2);
  rope_sin_.resize(rope_cos_.size());
  const int per_axis = hd / 2, pairs = per_axis / 2;
  for (int tok = 0; tok < N; ++tok) {
    const double row = tok / grid.width, col = tok % grid.width;
    for (int j = 0; j < hd / 2; ++j) {
      const int i = j % pairs;
      const double theta = (j < pairs ? row : col) * std::pow(cfg_.rope_base, -2.0 * i / per_axis);
      rope_cos_[tok * (hd / 2) + j] = std::cos(theta);
      rope_sin_[tok * (hd / 2) + j] = std::sin(theta);
    }
  }
}

template <typename T>
ParamStore<T> VelocityNet<T>::layout() const {
  ParamStore<T> p;
  p.info = layout_;
  for (const auto& i : layout_) p.data.emplace_back(i.numel(), T(0));
  return p;
}

template <typename T>
ModelWeights<T> VelocityNet<T>::init(std::uint64_t seed) const {
  ModelWeights<T> w{layout(), {}};
  Rng rng(seed);
  const int d = cfg_.width;
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    const auto& info = layout_[i];
    auto& v = w.base.data[i];
    if (info.shape.size() != 2) continue;  // biases start at zero
    if (static_cast<int>(i) == stage_embed_ || static_cast<int>(i) == class_embed_) {
      std::normal_distribution<double> n(0.0, 0.02);
      for (auto& x : v) x = static_cast<T>(n(rng));
      continue;
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(info.shape[1]));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& x : v) x = static_cast<T>(u(rng));
  }
  for (int s = 0; s < cfg_.stages(); ++s) {
    std::fill(w.base.data[head_w_[s]].begin(), w.base.data[head_w_[s]].end(), T(0));
  }
  // Gate rows of every modulation projection: chunks 2 and 5 of (shift, scale, gate) x 2.
  for (const auto& b : blocks_) {
    auto& mw = w.base.data[b.mod_w];
    for (int chunk : {2, 5}) {
      std::fill(mw.begin() + static_cast<std::ptrdiff_t>(chunk) * d * d,
                mw.begin() + static_cast<std::ptrdiff_t>(chunk + 1) * d * d, T(0));
    }
  }
  if (cfg_.specialization != Specialization::none) {
    for (int s = 0; s < cfg_.stages(); ++s) {
      ParamStore<T> e;
      e.info = layout_;
      for (std::size_t i = 0; i < layout_.size(); ++i) {
        e.data.push_back(selects(cfg_.specialization, layout_[i].group) ? w.base.data[i] : AlignedVector<T>{});
      }
      w.experts.push_back(std::move(e));
    }
  }
  return w;
}

template <typename T>
void VelocityNet<T>::run_forward(const ParamStore<T>& w, std::span<const ModelInput<T>> batch, Tape& tape,
                                 int stop_after) const {
  const int S = cfg_.stages();
  const int B = static_cast<int>(batch.size());
  const int N = cfg_.tokens();
  const int d = cfg_.width;
  const int H = cfg_.heads;
  const int hd = cfg_.head_dim();
  const auto grid = cfg_.token_grid();
  tape.B = B;

  for (const auto& ex : batch) {
    if (!ex.noisy || !ex.noisy->matches(cfg_.scales)) throw InvalidInput("model input does not match scale spec");
    if (ex.t.stages() != S || ex.mask.stages() != S) throw InvalidInput("timestep/mask length mismatch");
    if (ex.stage < 1 || ex.stage > S) throw InvalidInput("stage index out of range");
    if (ex.label && (*ex.label < 0 || *ex.label > cfg_.num_classes)) {
      throw InvalidInput("class label " + std::to_string(*ex.label) + " out of range");
    }
  }

  // Per-scale patchification of the scaled (or zeroed) inputs, summed into one sequence.
  tape.patches.assign(S, {});
  tape.tokens = Mat<T>::Zero(static_cast<Eigen::Index>(B) * N, d);
  for (int s = 0; s < S; ++s) {
    const int k = cfg_.patch_sizes[s];
    const int C = cfg_.scales.channels;
    auto& P = tape.patches[s];
    P.resize(static_cast<Eigen::Index>(B) * N, cfg_.patch_dim(s));
    for (int b = 0; b < B; ++b) {
      const auto& ex = batch[b];
      const bool keep = ex.mask[s] || !cfg_.input_masking;
      const T scale = keep ? static_cast<T>(cfg_.c_in(s, ex.t[s])) : T(0);
      const auto& lvl = ex.noisy->levels[s];
      for (int gy = 0; gy < grid.height; ++gy) {
        for (int gx = 0; gx < grid.width; ++gx) {
          T* row = P.row(static_cast<Eigen::Index>(b) * N + gy * grid.width + gx).data();
          int q = 0;
          for (int c = 0; c < C; ++c) {
            for (int dy = 0; dy < k; ++dy) {
              for (int dx = 0; dx < k; ++dx) row[q++] = scale * lvl(c, gy * k + dy, gx * k + dx);
            }
          }
        }
      }
    }
    tape.tokens.noalias() += P * as_mat(w, embed_w_[s]).transpose();
    tape.tokens.rowwise() += as_row(w, embed_b_[s]);
  }
  if (stop_after == 0) return;

  // Conditioning: per-stage time embedders + stage embedding + class embedding.
  const int F = cfg_.time_features;
  const int half = F / 2;
  tape.tfeat.assign(S, {});
  tape.th.assign(S, {});
  tape.ta.assign(S, {});
  tape.cond = Mat<T>::Zero(B, d);
  for (int s = 0; s < S; ++s) {
    Mat<T>& tf = tape.tfeat[s];
    tf.resize(B, F);
    for (int b = 0; b < B; ++b) {
      const double tt = 1000.0 * batch[b].t[s];
      for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        tf(b, i) = static_cast<T>(std::cos(tt * freq));
        tf(b, half + i) = static_cast<T>(std::sin(tt * freq));
      }
    }
    tape.th[s] = linear(tf, w, t1_w_[s], t1_b_[s]);
    tape.ta[s] = tape.th[s].unaryExpr([](T x) { return silu(x); });
    tape.cond += linear(tape.ta[s], w, t2_w_[s], t2_b_[s]);
  }
  const auto stage_tab = as_mat(w, stage_embed_);
  const auto class_tab = as_mat(w, class_embed_);
  for (int b = 0; b < B; ++b) {
    tape.cond.row(b) += stage_tab.row(batch[b].stage - 1);
    tape.cond.row(b) += class_tab.row(batch[b].label ? *batch[b].label : cfg_.num_classes);
  }
  tape.sc = tape.cond.unaryExpr([](T x) { return silu(x); });
  if (stop_after == 1) return;

  // Transformer blocks.
  const T eps = static_cast<T>(cfg_.norm_eps);
  const T attn_scale = T(1) / std::sqrt(static_cast<T>(hd));
  Mat<T> x = tape.tokens;
  tape.blocks.assign(cfg_.depth, {});
  for (int l = 0; l < cfg_.depth; ++l) {
    const auto& bi = blocks_[l];
    auto& bt = tape.blocks[l];
    bt.mod = linear(tape.sc, w, bi.mod_w, bi.mod_b);
    layer_norm(x, eps, bt.n1, bt.rstd1);
    bt.u1 = modulate(bt.n1, bt.mod, 0, d, N);
    bt.qkv = linear(bt.u1, w, bi.qkv_w, bi.qkv_b);
    // Rotary positions on q and k, per head.
    for (int b = 0; b < B; ++b) {
      for (int i = 0; i < N; ++i) {
        T* row = bt.qkv.row(static_cast<Eigen::Index>(b) * N + i).data();
        const double* cs = &rope_cos_[static_cast<std::size_t>(i) * hd / 2];
        const double* sn = &rope_sin_[static_cast<std::size_t>(i) * hd / 2];
        for (int part = 0; part < 2; ++part) {
          for (int h = 0; h < H; ++h) {
            T* v = row + part * d + h * hd;
            for (int j = 0; j < hd / 2; ++j) {
              const T c = static_cast<T>(cs[j]), s = static_cast<T>(sn[j]);
              const T x0 = v[2 * j], x1 = v[2 * j + 1];
              v[2 * j] = x0 * c - x1 * s;
              v[2 * j + 1] = x0 * s + x1 * c;
            }
          }
        }
      }
    }
    bt.probs.resize(static_cast<Eigen::Index>(B) * H * N, N);
    bt.o.resize(static_cast<Eigen::Index>(B) * N, d);
    for (int b = 0; b < B; ++b) {
      for (int h = 0; h < H; ++h) {
        const auto q = bt.qkv.block(static_cast<Eigen::Index>(b) * N, h * hd, N, hd);
        const auto k = bt.qkv.block(static_cast<Eigen::Index>(b) * N, d + h * hd, N, hd);
        const auto v = bt.qkv.block(static_cast<Eigen::Index>(b) * N, 2 * d + h * hd, N, hd);
        auto p = bt.probs.middleRows((static_cast<Eigen::Index>(b) * H + h) * N, N);
        p.noalias() = (q * k.transpose()) * attn_scale;
        for (int r = 0; r < N; ++r) {
          const T mx = p.row(r).maxCoeff();
          p.row(r) = (p.row(r).array() - mx).exp();
          p.row(r) /= p.row(r).sum();
        }
        bt.o.block(static_cast<Eigen::Index>(b) * N, h * hd, N, hd).noalias() = p * v;
      }
    }
    bt.a = linear(bt.o, w, bi.proj_w, bi.proj_b);
    gated_add(x, bt.a, bt.mod, 2 * d, N);
    layer_norm(x, eps, bt.n2, bt.rstd2);
    bt.u2 = modulate(bt.n2, bt.mod, 3 * d, 4 * d, N);
    bt.h = linear(bt.u2, w, bi.fc1_w, bi.fc1_b);
    bt.g = gelu(bt.h);
    bt.m = linear(bt.g, w, bi.fc2_w, bi.fc2_b);
    gated_add(x, bt.m, bt.mod, 5 * d, N);
  }

  // Final modulated norm and per-scale heads.
  tape.modf = linear(tape.sc, w, final_w_, final_b_);
  layer_norm(x, eps, tape.nf, tape.rstdf);
  tape.uf = modulate(tape.nf, tape.modf, 0, d, N);
  tape.raw.assign(S, {});
  for (int s = 0; s < S; ++s) tape.raw[s] = linear(tape.uf, w, head_w_[s], head_b_[s]);
}

template <typename T>
std::vector<Pyramid<T>> VelocityNet<T>::outputs(const Tape& tape) const {
  const int S = cfg_.stages();
  const int N = cfg_.tokens();
  const auto grid = cfg_.token_grid();
  const int C = cfg_.scales.channels;
  std::vector<Pyramid<T>> out(tape.B);
  for (int b = 0; b < tape.B; ++b) {
    out[b] = Pyramid<T>::zeros(cfg_.scales);
    for (int s = 0; s < S; ++s) {
      const int k = cfg_.patch_sizes[s];
      const T co = static_cast<T>(cfg_.c_out(s));
      auto& lvl = out[b].levels[s];
      for (int gy = 0; gy < grid.height; ++gy) {
        for (int gx = 0; gx < grid.width; ++gx) {
          const T* row = tape.raw[s].row(static_cast<Eigen::Index>(b) * N + gy * grid.width + gx).data();
          int q = 0;
          for (int c = 0; c < C; ++c) {
            for (int dy = 0; dy < k; ++dy) {
              for (int dx = 0; dx < k; ++dx) lvl(c, gy * k + dy, gx * k + dx) = co * row[q++];
            }
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
std::vector<Pyramid<T>> VelocityNet<T>::forward(const ParamStore<T>& w, std::span<const ModelInput<T>> batch) const {
  Tape tape;
  run_forward(w, batch, tape);
  return outputs(tape);
}

template <typename T>
std::vector<T> VelocityNet<T>::embed_input(const ParamStore<T>& w, std::span<const ModelInput<T>> batch) const {
  Tape tape;
  run_forward(w, batch, tape, 0);
  return {tape.tokens.data(), tape.tokens.data() + tape.tokens.size()};
}

template <typename T>
std::vector<T> VelocityNet<T>::embed_time(const ParamStore<T>& w, std::span<const ModelInput<T>> batch) const {
  Tape tape;
  run_forward(w, batch, tape, 1);
  return {tape.cond.data(), tape.cond.data() + tape.cond.size()};
}

template <typename T>
void VelocityNet<T>::run_backward(const ParamStore<T>& w, std::span<const ModelInput<T>> batch, const Tape& tape,
                                  std::span<const Pyramid<T>> dout, ParamStore<T>& g) const {
  const int S = cfg_.stages();
  const int B = tape.B;
  const int N = cfg_.tokens();
  const int d = cfg_.width;
  const int H = cfg_.heads;
  const int hd = cfg_.head_dim();
  const auto grid = cfg_.token_grid();
  const int C = cfg_.scales.channels;
  const T attn_scale = T(1) / std::sqrt(static_cast<T>(hd));

  // Heads.
  Mat<T> duf = Mat<T>::Zero(static_cast<Eigen::Index>(B) * N, d);
  for (int s = 0; s < S; ++s) {
    const int k = cfg_.patch_sizes[s];
    const T co = static_cast<T>(cfg_.c_out(s));
    Mat<T> draw(static_cast<Eigen::Index>(B) * N, cfg_.patch_dim(s));
    for (int b = 0; b < B; ++b) {
      const auto& lvl = dout[b].levels[s];
      for (int gy = 0; gy < grid.height; ++gy) {
        for (int gx = 0; gx < grid.width; ++gx) {
          T* row = draw.row(static_cast<Eigen::Index>(b) * N + gy * grid.width + gx).data();
          int q = 0;
          for (int c = 0; c < C; ++c) {
            for (int dy = 0; dy < k; ++dy) {
              for (int dx = 0; dx < k; ++dx) row[q++] = co * lvl(c, gy * k + dy, gx * k + dx);
            }
          }
        }
      }
    }
    duf += linear_backward(draw, tape.uf, w, head_w_[s], head_b_[s], g);
  }

  Mat<T> dsc = Mat<T>::Zero(B, d);
  Mat<T> dmodf = Mat<T>::Zero(B, 2 * d);
  Mat<T> dx = layer_norm_backward(modulate_backward(duf, tape.nf, tape.modf, dmodf, 0, d, N), tape.nf, tape.rstdf);
  dsc += linear_backward(dmodf, tape.sc, w, final_w_, final_b_, g);

  for (int l = cfg_.depth - 1; l >= 0; --l) {
    const auto& bi = blocks_[l];
    const auto& bt = tape.blocks[l];
    Mat<T> dmod = Mat<T>::Zero(B, 6 * d);

    // MLP branch.
    const Mat<T> dm = gated_add_backward(dx, bt.m, bt.mod, dmod, 5 * d, N);
    Mat<T> dh = linear_backward(dm, bt.g, w, bi.fc2_w, bi.fc2_b, g);
    dh.array() *= gelu_grad(bt.h).array();
    const Mat<T> du2 = linear_backward(dh, bt.u2, w, bi.fc1_w, bi.fc1_b, g);
    dx += layer_norm_backward(modulate_backward(du2, bt.n2, bt.mod, dmod, 3 * d, 4 * d, N), bt.n2, bt.rstd2);

    // Attention branch.
    const Mat<T> da = gated_add_backward(dx, bt.a, bt.mod, dmod, 2 * d, N);
    const Mat<T> dO = linear_backward(da, bt.o, w, bi.proj_w, bi.proj_b, g);
    Mat<T> dqkv(static_cast<Eigen::Index>(B) * N, 3 * d);
    for (int b = 0; b < B; ++b) {
      for (int h = 0; h < H; ++h) {
        const Eigen::Index r0 = static_cast<Eigen::Index>(b) * N;
        const auto q = bt.qkv.block(r0, h * hd, N, hd);
        const auto k = bt.qkv.block(r0, d + h * hd, N, hd);
        const auto v = bt.qkv.block(r0, 2 * d + h * hd, N, hd);
        const auto p = bt.probs.middleRows((static_cast<Eigen::Index>(b) * H + h) * N, N);
        const auto dob = dO.block(r0, h * hd, N, hd);
        dqkv.block(r0, 2 * d + h * hd, N, hd).noalias() = p.transpose() * dob;
        Mat<T> dp = dob * v.transpose();
        for (int r = 0; r < N; ++r) {
          const T dot = dp.row(r).dot(p.row(r));
          dp.row(r) = p.row(r).array() * (dp.row(r).array() - dot);
        }
        dqkv.block(r0, h * hd, N, hd).noalias() = (dp * k) * attn_scale;
        dqkv.block(r0, d + h * hd, N, hd).noalias() = (dp.transpose() * q) * attn_scale;
      }
    }
    // Undo the rotary rotation on dq and dk.
    for (int b = 0; b < B; ++b) {
      for (int i = 0; i < N; ++i) {
        T* row = dqkv.row(static_cast<Eigen::Index>(b) * N + i).data();
        const double* cs = &rope_cos_[static_cast<std::size_t>(i) * hd / 2];
        const double* sn = &rope_sin_[static_cast<std::size_t>(i) * hd / 2];
        for (int part = 0; part < 2; ++part) {
          for (int h = 0; h < H; ++h) {
            T* v = row + part * d + h * hd;
            for (int j = 0; j < hd / 2; ++j) {
              const T c = static_cast<T>(cs[j]), s = static_cast<T>(sn[j]);
              const T g0 = v[2 * j], g1 = v[2 * j + 1];
              v[2 * j] = g0 * c + g1 * s;
              v[2 * j + 1] = -g0 * s + g1 * c;
            }
          }
        }
      }
    }
    const Mat<T> du1 = linear_backward(dqkv, bt.u1, w, bi.qkv_w, bi.qkv_b, g);
    dx += layer_norm_backward(modulate_backward(du1, bt.n1, bt.mod, dmod, 0, d, N), bt.n1, bt.rstd1);

    dsc += linear_backward(dmod, tape.sc, w, bi.mod_w, bi.mod_b, g);
  }

  // Conditioning.
  Mat<T> dcond = dsc.array() * tape.cond.unaryExpr([](T v) { return silu_grad(v); }).array();
  auto gstage = as_mat(g, stage_embed_);
  auto gclass = as_mat(g, class_embed_);
  for (int b = 0; b < B; ++b) {
    gstage.row(batch[b].stage - 1) += dcond.row(b);
    gclass.row(batch[b].label ? *batch[b].label : cfg_.num_classes) += dcond.row(b);
  }
  for (int s = 0; s < S; ++s) {
    Mat<T> dta = linear_backward(dcond, tape.ta[s], w, t2_w_[s], t2_b_[s], g);
    dta.array() *= tape.th[s].unaryExpr([](T v) { return silu_grad(v); }).array();
    linear_backward(dta, tape.tfeat[s], w, t1_w_[s], t1_b_[s], g, false);
  }

  // Patch embeddings.
  for (int s = 0; s < S; ++s) linear_backward(dx, tape.patches[s], w, embed_w_[s], embed_b_[s], g, false);
}

template <typename T>
T VelocityNet<T>::loss_and_grad(const ParamStore<T>& w, std::span<const ModelInput<T>> batch,
                                std::span<const Pyramid<T>> targets, ParamStore<T>& grad, T grad_scale) const {
  if (targets.size() != batch.size()) throw InvalidInput("loss_and_grad: target count mismatch");
  if (batch.empty()) return T(0);
  Tape tape;
  run_forward(w, batch, tape);
  const auto pred = outputs(tape);

  T total = 0;
  std::vector<Pyramid<T>> dout(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    total += dfm_loss(pred[b], targets[b], batch[b].mask);
    dout[b] = pred[b];
    for (int s = 0; s < cfg_.stages(); ++s) {
      auto& lvl = dout[b].levels[s];
      if (!batch[b].mask[s]) {
        lvl.fill(T(0));
        continue;
      }
      const auto& tgt = targets[b].levels[s];
      for (std::size_t i = 0; i < lvl.size(); ++i) lvl[i] = T(2) * grad_scale * (lvl[i] - tgt[i]);
    }
  }
  run_backward(w, batch, tape, dout, grad);
  return total;
}

// ---------------------------------------------------------------------------
// Stage-grouped helpers

namespace {

template <typename T>
std::map<int, std::vector<std::size_t>> group_by_stage(std::span<const ModelInput<T>> batch) {
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < batch.size(); ++i) groups[batch[i].stage].push_back(i);
  return groups;
}

}  // namespace

template <typename T>
std::vector<Pyramid<T>> predict(const VelocityNet<T>& net, const ModelWeights<T>& w,
                                std::span<const ModelInput<T>> batch) {
  const auto mode = net.config().specialization;
  if (mode == Specialization::none) return net.forward(w.base, batch);
  std::vector<Pyramid<T>> out(batch.size());
  for (const auto& [stage, idx] : group_by_stage(batch)) {
    const auto eff = specialize_weights<T>(w.base, w.experts, stage, mode);
    std::vector<ModelInput<T>> sub;
    for (auto i : idx) sub.push_back(batch[i]);
    auto pred = net.forward(eff, sub);
    for (std::size_t j = 0; j < idx.size(); ++j) out[idx[j]] = std::move(pred[j]);
  }
  return out;
}

template <typename T>
T loss_and_grad(const VelocityNet<T>& net, const ModelWeights<T>& w, std::span<const ModelInput<T>> batch,
                std::span<const Pyramid<T>> targets, ModelWeights<T>& grad, T grad_scale) {
  const auto mode = net.config().specialization;
  if (mode == Specialization::none) return net.loss_and_grad(w.base, batch, targets, grad.base, grad_scale);
  T total = 0;
  for (const auto& [stage, idx] : group_by_stage(batch)) {
    const auto eff = specialize_weights<T>(w.base, w.experts, stage, mode);
    std::vector<ModelInput<T>> sub;
    std::vector<Pyramid<T>> tg;
    for (auto i : idx) {
      sub.push_back(batch[i]);
      tg.push_back(targets[i]);
    }
    auto g = eff.zeros_like();
    total += net.loss_and_grad(eff, sub, tg, g, grad_scale);
    auto& ge = grad.experts[stage - 1];
    for (std::size_t i = 0; i < g.count(); ++i) {
      auto& gb = grad.base.data[i];
      const auto& gi = g.data[i];
      if (selects(mode, g.info[i].group)) {
        auto& gx = ge.data[i];
        for (std::size_t j = 0; j < gi.size(); ++j) {
          gb[j] += gi[j] / T(2);
          gx[j] += gi[j] / T(2);
        }
      } else {
        for (std::size_t j = 0; j < gi.size(); ++j) gb[j] += gi[j];
      }
    }
  }
  return total;
}

#define DFM_INSTANTIATE(T)                                                                                    \
  template class VelocityNet<T>;                                                                             \
  template ParamStore<T> specialize_weights<T>(const ParamStore<T>&, std::span<const ParamStore<T>>, int,     \
                                               Specialization);                                              \
  template void fill_uniform<T>(ParamStore<T>&, std::uint64_t, double);                                      \
  template void apply_rope<T>(std::span<T>, double, double, double, bool);                                   \
  template std::vector<std::vector<T>> patchify<T>(const Tensor<T>&, int);                                   \
  template Tensor<T> unpatchify<T>(std::span<const std::vector<T>>, int, Resolution, int);                   \
  template std::vector<Pyramid<T>> predict<T>(const VelocityNet<T>&, const ModelWeights<T>&,                 \
                                              std::span<const ModelInput<T>>);                               \
  template T loss_and_grad<T>(const VelocityNet<T>&, const ModelWeights<T>&, std::span<const ModelInput<T>>, \
                              std::span<const Pyramid<T>>, ModelWeights<T>&, T);

DFM_INSTANTIATE(float)
DFM_INSTANTIATE(double)

#undef DFM_INSTANTIATE

}  // namespace dfm
