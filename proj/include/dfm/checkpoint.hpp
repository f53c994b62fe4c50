#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dfm/config.hpp"
#include "dfm/train.hpp"

namespace dfm {

enum class DType { f32, f64 };

struct NamedTensor {
  std::string name;
  DType dtype = DType::f32;
  std::vector<std::int64_t> shape;
  std::vector<std::uint8_t> bytes;  // little-endian payload

  std::size_t numel() const;
};

/// File layout: "DFMCKPT1", u64 little-endian header length, JSON header, zero padding,
/// then one payload per tensor, each starting on a 64-byte boundary. Offsets in the
/// header are relative to the start of the payload section.
struct Checkpoint {
  static constexpr int kVersion = 1;

  std::string config;  // canonical config text
  std::string digest;  // sha256 of `config`
  long step = 0;
  std::map<std::string, std::string> meta;
  std::vector<NamedTensor> tensors;

  void add(const std::string& name, std::span<const float> values, std::vector<std::int64_t> shape);
  void add(const std::string& name, std::span<const double> values, std::vector<std::int64_t> shape);
  const NamedTensor& get(const std::string& name) const;
  bool has(const std::string& name) const;
  std::vector<float> floats(const std::string& name) const;
  std::vector<double> doubles(const std::string& name) const;
};

std::string encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(const std::string& bytes);
/// Writes through a temporary file and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Full training state: live and EMA weights, Adam moments, step, generator state and the
/// per-level data stds the model was built with.
Checkpoint make_checkpoint(const RunConfig& cfg, const TrainState& state, const std::vector<double>& level_stds);
/// Restores into a state whose weights already have the network's layout.
void restore_state(const Checkpoint& c, TrainState& state);
/// Live (`ema` false) or EMA weights in the layout of `net`.
ModelWeights<float> checkpoint_weights(const Checkpoint& c, const VelocityNet<float>& net, bool ema);
std::vector<double> checkpoint_level_stds(const Checkpoint& c);
RunConfig checkpoint_config(const Checkpoint& c);

}  // namespace dfm
