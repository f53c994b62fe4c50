#include "dfm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace dfm {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are written in host order");

namespace {

constexpr char kMagic[8] = {'D', 'F', 'M', 'C', 'K', 'P', 'T', '1'};
constexpr std::size_t kAlign = 64;

std::size_t align_up(std::size_t n) { return (n + kAlign - 1) / kAlign * kAlign; }

std::size_t elem_size(DType t) { return t == DType::f32 ? 4 : 8; }

const char* dtype_name(DType t) { return t == DType::f32 ? "f32" : "f64"; }

DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  throw InvalidInput("checkpoint: unknown element type '" + s + "'");
}

template <typename T>
void add_tensor(Checkpoint& c, const std::string& name, DType dt, std::span<const T> values,
                std::vector<std::int64_t> shape) {
  if (c.has(name)) throw InvalidInput("checkpoint: duplicate tensor " + name);
  NamedTensor t{name, dt, std::move(shape), {}};
  if (t.numel() != values.size()) throw InvalidInput("checkpoint: shape of " + name + " does not match its values");
  t.bytes.resize(values.size_bytes());
  if (!values.empty()) std::memcpy(t.bytes.data(), values.data(), values.size_bytes());
  c.tensors.push_back(std::move(t));
}

template <typename T>
std::vector<T> read_tensor(const Checkpoint& c, const std::string& name, DType dt) {
  const auto& t = c.get(name);
  if (t.dtype != dt) throw InvalidInput("checkpoint: tensor " + name + " has element type " + dtype_name(t.dtype));
  std::vector<T> out(t.numel());
  if (!out.empty()) std::memcpy(out.data(), t.bytes.data(), t.bytes.size());
  return out;
}

void put_weights(Checkpoint& c, const std::string& prefix, const ModelWeights<float>& w) {
  auto put = [&](const ParamStore<float>& p, const std::string& pre) {
    for (std::size_t i = 0; i < p.count(); ++i) {
      if (p.data[i].empty()) continue;
      std::vector<std::int64_t> shape(p.info[i].shape.begin(), p.info[i].shape.end());
      c.add(pre + p.info[i].name, std::span<const float>(p.data[i].data(), p.data[i].size()), shape);
    }
  };
  put(w.base, prefix + ".base.");
  for (std::size_t e = 0; e < w.experts.size(); ++e) put(w.experts[e], prefix + ".expert" + std::to_string(e) + ".");
}

void get_weights(const Checkpoint& c, const std::string& prefix, ModelWeights<float>& w) {
  auto get = [&](ParamStore<float>& p, const std::string& pre) {
    for (std::size_t i = 0; i < p.count(); ++i) {
      const auto name = pre + p.info[i].name;
      if (p.data[i].empty()) {
        if (c.has(name)) throw InvalidInput("checkpoint: unexpected tensor " + name);
        continue;
      }
      const auto v = c.floats(name);
      if (v.size() != p.data[i].size()) throw InvalidInput("checkpoint: tensor " + name + " has the wrong size");
      std::copy(v.begin(), v.end(), p.data[i].begin());
    }
  };
  get(w.base, prefix + ".base.");
  for (std::size_t e = 0; e < w.experts.size(); ++e) get(w.experts[e], prefix + ".expert" + std::to_string(e) + ".");
}

}  // namespace

std::size_t NamedTensor::numel() const {
  std::size_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw InvalidInput("checkpoint: negative dimension in " + name);
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

void Checkpoint::add(const std::string& name, std::span<const float> values, std::vector<std::int64_t> shape) {
  add_tensor(*this, name, DType::f32, values, std::move(shape));
}

void Checkpoint::add(const std::string& name, std::span<const double> values, std::vector<std::int64_t> shape) {
  add_tensor(*this, name, DType::f64, values, std::move(shape));
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return true;
  }
  return false;
}

const NamedTensor& Checkpoint::get(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw InvalidInput("checkpoint: missing tensor " + name);
}

std::vector<float> Checkpoint::floats(const std::string& name) const {
  return read_tensor<float>(*this, name, DType::f32);
}

std::vector<double> Checkpoint::doubles(const std::string& name) const {
  return read_tensor<double>(*this, name, DType::f64);
}

std::string encode_checkpoint(const Checkpoint& c) {
  nlohmann::json dir = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& t : c.tensors) {
    dir.push_back({{"name", t.name},
                   {"dtype", dtype_name(t.dtype)},
                   {"shape", t.shape},
                   {"offset", offset},
                   {"nbytes", t.bytes.size()}});
    offset = align_up(offset + t.bytes.size());
  }
  const nlohmann::json header = {{"version", Checkpoint::kVersion}, {"config_digest", c.digest},
                                 {"step", c.step},                  {"config", c.config},
                                 {"meta", c.meta},                  {"tensors", dir}};
  const std::string h = header.dump();
  const std::uint64_t hlen = h.size();

  std::string out(kMagic, sizeof kMagic);
  out.append(reinterpret_cast<const char*>(&hlen), sizeof hlen);
  out += h;
  out.resize(align_up(out.size()), '\0');
  const std::size_t base = out.size();
  for (const auto& t : c.tensors) {
    out.append(reinterpret_cast<const char*>(t.bytes.data()), t.bytes.size());
    out.resize(base + align_up(out.size() - base), '\0');
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw InvalidInput("checkpoint: bad magic");
  }
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + 8, sizeof hlen);
  if (hlen > bytes.size() - 16) throw InvalidInput("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("checkpoint: malformed header: ") + e.what());
  }
  Checkpoint c;
  try {
    const int version = header.at("version").get<int>();
    if (version != Checkpoint::kVersion) {
      throw InvalidInput("checkpoint: unsupported format version " + std::to_string(version));
    }
    c.digest = header.at("config_digest").get<std::string>();
    c.step = header.at("step").get<long>();
    c.config = header.at("config").get<std::string>();
    c.meta = header.at("meta").get<std::map<std::string, std::string>>();
    const std::size_t base = align_up(16 + hlen);
    for (const auto& e : header.at("tensors")) {
      NamedTensor t;
      t.name = e.at("name").get<std::string>();
      t.dtype = parse_dtype(e.at("dtype").get<std::string>());
      t.shape = e.at("shape").get<std::vector<std::int64_t>>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto nbytes = e.at("nbytes").get<std::size_t>();
      if (nbytes != t.numel() * elem_size(t.dtype)) throw InvalidInput("checkpoint: size mismatch for " + t.name);
      if (offset % kAlign != 0 || base + offset + nbytes > bytes.size()) {
        throw InvalidInput("checkpoint: payload of " + t.name + " is out of range");
      }
      const auto* p = reinterpret_cast<const std::uint8_t*>(bytes.data() + base + offset);
      t.bytes.assign(p, p + nbytes);
      c.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("checkpoint: malformed header: ") + e.what());
  }
  if (sha256_hex(c.config) != c.digest) throw InvalidInput("checkpoint: config digest does not match the stored config");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  const auto bytes = encode_checkpoint(c);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

Checkpoint make_checkpoint(const RunConfig& cfg, const TrainState& state, const std::vector<double>& level_stds) {
  Checkpoint c;
  c.config = serialize_config(cfg);
  c.digest = sha256_hex(c.config);
  c.step = state.step;
  std::ostringstream rng;
  rng << state.rng;
  c.meta["rng"] = rng.str();
  c.add("data.level_stds", std::span<const double>(level_stds), {static_cast<std::int64_t>(level_stds.size())});
  put_weights(c, "weights", state.weights);
  put_weights(c, "ema", state.ema);
  put_weights(c, "adam_m", state.adam_m);
  put_weights(c, "adam_v", state.adam_v);
  return c;
}

void restore_state(const Checkpoint& c, TrainState& state) {
  get_weights(c, "weights", state.weights);
  get_weights(c, "ema", state.ema);
  get_weights(c, "adam_m", state.adam_m);
  get_weights(c, "adam_v", state.adam_v);
  state.step = c.step;
  const auto it = c.meta.find("rng");
  if (it == c.meta.end()) throw InvalidInput("checkpoint: missing generator state");
  std::istringstream in(it->second);
  in >> state.rng;
  if (!in) throw InvalidInput("checkpoint: malformed generator state");
}

ModelWeights<float> checkpoint_weights(const Checkpoint& c, const VelocityNet<float>& net, bool ema) {
  auto w = net.init(0);
  get_weights(c, ema ? "ema" : "weights", w);
  return w;
}

std::vector<double> checkpoint_level_stds(const Checkpoint& c) { return c.doubles("data.level_stds"); }

RunConfig checkpoint_config(const Checkpoint& c) { return parse_config(c.config); }

}  // namespace dfm
