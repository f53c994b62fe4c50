#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dfm/aligned.hpp"
#include "dfm/flow.hpp"
#include "dfm/pyramid.hpp"

namespace dfm {

/// Parameter groups that may carry per-stage experts.
enum class Specialization { none, modulation, projection, conditioning, attention, mlp, full };

std::string_view to_string(Specialization s);
Specialization parse_specialization(std::string_view s);

/// Functional role of a parameter tensor, used for specialization and weight decay.
enum class ParamGroup { projection, conditioning, modulation, attention, mlp };

bool selects(Specialization mode, ParamGroup group);

struct ModelConfig {
  ScaleSpec scales;
  std::vector<int> patch_sizes;
  int width = 128;
  int depth = 4;
  int heads = 2;
  int num_classes = 0;  // 0 = unconditional
  double class_drop_prob = 0.1;
  Specialization specialization = Specialization::none;
  bool precondition = true;
  bool input_masking = true;
  /// sigma_d per scale (size S) or a single global value; ignored when scales are standardized.
  std::vector<double> data_std{1.0};
  double norm_eps = 1e-6;
  int time_features = 256;
  int mlp_ratio = 4;
  double rope_base = 10000.0;

  void validate() const;
  int stages() const { return scales.stages(); }
  Resolution token_grid() const;
  int tokens() const {
    const auto g = token_grid();
    return g.height * g.width;
  }
  int head_dim() const { return width / heads; }
  int patch_dim(int s) const { return scales.channels * patch_sizes[s] * patch_sizes[s]; }
  double sigma_data(int s) const;
  /// Input scaling 1 / sqrt((t sigma_d)^2 + (1 - t)^2), or 1 without preconditioning.
  double c_in(int s, double t) const;
  /// Output scaling sqrt(sigma_d^2 + 1), or 1 without preconditioning.
  double c_out(int s) const;
};

struct ParamInfo {
  std::string name;
  ParamGroup group;
  std::vector<int> shape;
  bool decay;

  std::size_t numel() const {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
  }
};

/// Named flat parameter tensors sharing one layout.
template <typename T>
struct ParamStore {
  std::vector<ParamInfo> info;
  std::vector<AlignedVector<T>> data;

  std::size_t count() const { return info.size(); }
  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& d : data) n += d.size();
    return n;
  }
  int find(std::string_view name) const {
    for (std::size_t i = 0; i < info.size(); ++i) {
      if (info[i].name == name) return static_cast<int>(i);
    }
    return -1;
  }
  ParamStore zeros_like() const {
    ParamStore z;
    z.info = info;
    z.data.reserve(data.size());
    for (const auto& d : data) z.data.emplace_back(d.size(), T(0));
    return z;
  }
  void set_zero() {
    for (auto& d : data) std::fill(d.begin(), d.end(), T(0));
  }
  friend bool operator==(const ParamStore& a, const ParamStore& b) { return a.data == b.data; }
};

/// Base parameters plus one expert set per stage. Experts only hold the tensors whose
/// group is selected by the specialization mode; the others are left empty.
template <typename T>
struct ModelWeights {
  ParamStore<T> base;
  std::vector<ParamStore<T>> experts;

  ModelWeights zeros_like() const {
    ModelWeights z{base.zeros_like(), {}};
    for (const auto& e : experts) z.experts.push_back(e.zeros_like());
    return z;
  }
};

/// Effective parameters for `stage` (1-based): (base + expert) / 2 for every tensor in a
/// selected group, base elsewhere.
template <typename T>
ParamStore<T> specialize_weights(const ParamStore<T>& base, std::span<const ParamStore<T>> experts, int stage,
                                 Specialization mode);

/// Fills every tensor with U(-amplitude, amplitude) draws; used to exercise all gradient paths.
template <typename T>
void fill_uniform(ParamStore<T>& p, std::uint64_t seed, double amplitude);

/// Rotates consecutive pairs of a head vector by 2D rotary angles: the first half of the
/// dimensions encodes `row`, the second half `col`.
template <typename T>
void apply_rope(std::span<T> head, double row, double col, double base, bool inverse = false);

/// Non-overlapping patch x patch blocks, row-major over the grid, each flattened (c, dy, dx).
template <typename T>
std::vector<std::vector<T>> patchify(const Tensor<T>& level, int patch);

template <typename T>
Tensor<T> unpatchify(std::span<const std::vector<T>> tokens, int channels, Resolution res, int patch);

template <typename T>
struct ModelInput {
  const Pyramid<T>* noisy = nullptr;
  StageTimesteps t;
  LossMask mask;
  int stage = 1;                // 1-based stage index embedded into the conditioning
  std::optional<int> label;     // nullopt (or num_classes) selects the null class
};

template <typename T>
class VelocityNet {
 public:
  explicit VelocityNet(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }

  /// Parameter layout with zero values.
  ParamStore<T> layout() const;
  /// Base initialization (zero output heads and gate projections); experts start equal to base.
  ModelWeights<T> init(std::uint64_t seed) const;

  /// Velocity predictions for a batch sharing one parameter set.
  std::vector<Pyramid<T>> forward(const ParamStore<T>& w, std::span<const ModelInput<T>> batch) const;

  /// Token embedding of the (masked, preconditioned) input before any transformer block,
  /// as a (batch * tokens) x width row-major buffer.
  std::vector<T> embed_input(const ParamStore<T>& w, std::span<const ModelInput<T>> batch) const;

  /// Conditioning vector per example, (batch x width) row-major.
  std::vector<T> embed_time(const ParamStore<T>& w, std::span<const ModelInput<T>> batch) const;

  /// Sum over the batch of dfm_loss(pred, target, mask); accumulates grad_scale * d(sum)/dw
  /// into `grad` (same layout as `w`).
  T loss_and_grad(const ParamStore<T>& w, std::span<const ModelInput<T>> batch,
                  std::span<const Pyramid<T>> targets, ParamStore<T>& grad, T grad_scale = T(1)) const;

 private:
  struct Tape;

  void run_forward(const ParamStore<T>& w, std::span<const ModelInput<T>> batch, Tape& tape,
                   int stop_after = -1) const;
  void run_backward(const ParamStore<T>& w, std::span<const ModelInput<T>> batch, const Tape& tape,
                    std::span<const Pyramid<T>> dout, ParamStore<T>& grad) const;
  std::vector<Pyramid<T>> outputs(const Tape& tape) const;

  ModelConfig cfg_;
  std::vector<ParamInfo> layout_;
  std::vector<double> rope_cos_, rope_sin_;  // tokens x (head_dim / 2)

  struct BlockIdx {
    int mod_w, mod_b, qkv_w, qkv_b, proj_w, proj_b, fc1_w, fc1_b, fc2_w, fc2_b;
  };
  std::vector<int> embed_w_, embed_b_, head_w_, head_b_;
  std::vector<int> t1_w_, t1_b_, t2_w_, t2_b_;
  int stage_embed_ = -1, class_embed_ = -1, final_w_ = -1, final_b_ = -1;
  std::vector<BlockIdx> blocks_;
};

/// Predictions for a batch whose examples may sit at different stages; examples are grouped
/// by stage so each group uses its specialized weights. Output order follows the input.
template <typename T>
std::vector<Pyramid<T>> predict(const VelocityNet<T>& net, const ModelWeights<T>& w,
                                std::span<const ModelInput<T>> batch);

/// Stage-grouped loss and gradient. Returns the summed per-example loss and accumulates
/// grad_scale * gradient into `grad` (base and expert tensors).
template <typename T>
T loss_and_grad(const VelocityNet<T>& net, const ModelWeights<T>& w, std::span<const ModelInput<T>> batch,
                std::span<const Pyramid<T>> targets, ModelWeights<T>& grad, T grad_scale = T(1));

}  // namespace dfm
