#include "dfm/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <openssl/evp.h>

namespace dfm {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw InvalidConfig(key + ": cannot parse '" + value + "' as " + expected);
}

template <typename I>
I to_int(const std::string& key, const std::string& value) {
  const auto v = trim(value);
  I out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size() || v.empty()) bad_value(key, value, "an integer");
  return out;
}

double to_double(const std::string& key, const std::string& value) {
  const auto v = trim(value);
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size() || v.empty()) bad_value(key, value, "a number");
  return out;
}

bool to_bool(const std::string& key, const std::string& value) {
  const auto v = trim(value);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, value, "a boolean");
}

Resolution to_resolution(const std::string& key, const std::string& value) {
  const auto v = trim(value);
  const auto x = v.find('x');
  if (x == std::string::npos) bad_value(key, value, "HxW");
  return {to_int<int>(key, v.substr(0, x)), to_int<int>(key, v.substr(x + 1))};
}

std::string fmt(double v) { return format_number(v); }

template <typename I>
std::string fmt_int(I v) {
  return std::to_string(v);
}

std::string fmt(bool v) { return v ? "true" : "false"; }

template <typename V, typename F>
std::string join(const std::vector<V>& v, F f) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ", ";
    out += f(v[i]);
  }
  return out;
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

#define DFM_INT(K, EXPR)                                                                              \
  Field {                                                                                             \
    K, [](const RunConfig& c) { return fmt_int(c.EXPR); },                                            \
        [](RunConfig& c, const std::string& k, const std::string& v) {                              \
          c.EXPR = to_int<std::remove_cvref_t<decltype(c.EXPR)>>(k, v);                               \
        }                                                                                             \
  }
#define DFM_DOUBLE(K, EXPR)                                                                           \
  Field {                                                                                             \
    K, [](const RunConfig& c) { return fmt(c.EXPR); },                                                \
        [](RunConfig& c, const std::string& k, const std::string& v) { c.EXPR = to_double(k, v); }   \
  }
#define DFM_BOOL(K, EXPR)                                                                             \
  Field {                                                                                             \
    K, [](const RunConfig& c) { return fmt(c.EXPR); },                                                \
        [](RunConfig& c, const std::string& k, const std::string& v) { c.EXPR = to_bool(k, v); }     \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"data.kind", [](const RunConfig& c) { return c.data.kind; },
       [](RunConfig& c, const std::string& k, const std::string& v) {
         const auto t = trim(v);
         if (t != "synthetic" && t != "directory") bad_value(k, v, "synthetic or directory");
         c.data.kind = t;
       }},
      {"data.path", [](const RunConfig& c) { return c.data.path; },
       [](RunConfig& c, const std::string&, const std::string& v) { c.data.path = trim(v); }},
      {"data.resolution", [](const RunConfig& c) { return c.data.synthetic.resolution.str(); },
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.data.synthetic.resolution = to_resolution(k, v);
       }},
      {"data.channels", [](const RunConfig& c) { return fmt_int(c.data.synthetic.channels); },
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.data.synthetic.channels = to_int<int>(k, v);
         c.scales.channels = c.data.synthetic.channels;
       }},
      DFM_INT("data.num_classes", data.synthetic.num_classes),
      DFM_INT("data.size", data.synthetic.size),
      DFM_INT("data.seed", data.synthetic.seed),
      DFM_DOUBLE("data.low_amplitude", data.synthetic.low_amplitude),
      DFM_DOUBLE("data.high_amplitude", data.synthetic.high_amplitude),
      DFM_INT("data.stats_samples", data.stats_samples),

      {"scales.resolutions",
       [](const RunConfig& c) { return join(c.scales.resolutions, [](const Resolution& r) { return r.str(); }); },
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.scales.resolutions.clear();
         for (const auto& item : split_list(v, ',')) c.scales.resolutions.push_back(to_resolution(k, item));
       }},
      DFM_BOOL("scales.standardize", scales.standardize),

      DFM_INT("model.patch_size", patch_size),
      {"model.compute_allocation", [](const RunConfig& c) { return std::string(to_string(c.allocation)); },
       [](RunConfig& c, const std::string&, const std::string& v) {
         c.allocation = parse_compute_allocation(trim(v));
       }},
      DFM_INT("model.width", model.width),
      DFM_INT("model.depth", model.depth),
      DFM_INT("model.heads", model.heads),
      DFM_BOOL("model.conditional", conditional),
      DFM_DOUBLE("model.class_drop_prob", model.class_drop_prob),
      {"model.specialization", [](const RunConfig& c) { return std::string(to_string(c.model.specialization)); },
       [](RunConfig& c, const std::string&, const std::string& v) {
         c.model.specialization = parse_specialization(trim(v));
       }},
      DFM_BOOL("model.precondition", model.precondition),
      DFM_BOOL("model.input_masking", model.input_masking),
      DFM_INT("model.time_features", model.time_features),
      DFM_INT("model.mlp_ratio", model.mlp_ratio),
      DFM_DOUBLE("model.rope_base", model.rope_base),
      DFM_DOUBLE("model.norm_eps", model.norm_eps),

      DFM_INT("train.steps", train.steps),
      DFM_INT("train.batch", train.batch),
      DFM_DOUBLE("train.lr", train.lr),
      DFM_INT("train.warmup_steps", train.warmup_steps),
      DFM_DOUBLE("train.beta1", train.beta1),
      DFM_DOUBLE("train.beta2", train.beta2),
      DFM_DOUBLE("train.eps_opt", train.eps_opt),
      DFM_DOUBLE("train.weight_decay", train.weight_decay),
      DFM_DOUBLE("train.grad_clip", train.grad_clip),
      DFM_DOUBLE("train.ema_beta", train.ema_beta),
      DFM_INT("train.seed", train.seed),
      {"train.variant", [](const RunConfig& c) { return std::string(to_string(c.train.variant)); },
       [](RunConfig& c, const std::string&, const std::string& v) { c.train.variant = parse_variant(trim(v)); }},
      DFM_INT("train.checkpoint_every", checkpoint_every),

      {"timesteps.stage_probs", [](const RunConfig& c) {
         return join(c.train.sampler_cfg.stage_probs, [](double p) { return fmt(p); });
       },
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.train.sampler_cfg.stage_probs.clear();
         for (const auto& item : split_list(v, ',')) c.train.sampler_cfg.stage_probs.push_back(to_double(k, item));
       }},
      DFM_DOUBLE("timesteps.current_loc", train.sampler_cfg.current_loc),
      DFM_DOUBLE("timesteps.current_scale", train.sampler_cfg.current_scale),
      DFM_DOUBLE("timesteps.prev_loc", train.sampler_cfg.prev_loc),
      DFM_DOUBLE("timesteps.prev_scale", train.sampler_cfg.prev_scale),

      {"sampler.budgets", [](const RunConfig& c) { return join(c.sampler.budgets, [](int b) { return fmt_int(b); }); },
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.sampler.budgets.clear();
         for (const auto& item : split_list(v, ',')) c.sampler.budgets.push_back(to_int<int>(k, item));
       }},
      DFM_DOUBLE("sampler.tau", sampler.tau),
      DFM_DOUBLE("sampler.cfg", sampler.cfg),
      DFM_INT("sampler.count", sampler.count),
      DFM_INT("sampler.class", sampler.class_label),
      DFM_INT("sampler.seed", sampler.seed),

      DFM_INT("eval.feature_seed", eval.feature_seed),
      DFM_INT("eval.samples", eval.samples),
      DFM_INT("eval.reference", eval.reference),

      {"output.dir", [](const RunConfig& c) { return c.output_dir; },
       [](RunConfig& c, const std::string&, const std::string& v) { c.output_dir = trim(v); }},
  };
  return table;
}

#undef DFM_INT
#undef DFM_DOUBLE
#undef DFM_BOOL

const Field* find_field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return &f;
  }
  return nullptr;
}

ScaleSpec placeholder_stds(ScaleSpec s) {
  if (s.standardize && !s.scale_stds) s.scale_stds = std::vector<double>(s.resolutions.size(), 1.0);
  return s;
}

}  // namespace

std::string format_number(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

RunConfig::RunConfig() {
  scales.resolutions = {{8, 8}, {16, 16}};
  scales.channels = data.synthetic.channels;
}

void RunConfig::validate() const {
  if (data.kind == "directory" && data.path.empty()) throw InvalidConfig("data.path is required for directory data");
  data.synthetic.validate();
  if (data.stats_samples < 2) throw InvalidConfig("data.stats_samples must be at least 2");
  const auto spec = placeholder_stds(scales);
  spec.validate();
  if (!(data.synthetic.resolution == spec.finest())) {
    throw InvalidConfig("data.resolution " + data.synthetic.resolution.str() + " differs from the finest scale " +
                        spec.finest().str());
  }
  if (data.synthetic.channels != spec.channels) throw InvalidConfig("data.channels differs from the scale channels");
  const int S = spec.stages();
  if (train.sampler_cfg.stages() != S) {
    throw InvalidConfig("timesteps.stage_probs has " + std::to_string(train.sampler_cfg.stages()) +
                        " entries for " + std::to_string(S) + " scales");
  }
  if (static_cast<int>(sampler.budgets.size()) != S) {
    throw InvalidConfig("sampler.budgets has " + std::to_string(sampler.budgets.size()) + " entries for " +
                        std::to_string(S) + " scales");
  }
  if (checkpoint_every < 1) throw InvalidConfig("train.checkpoint_every must be at least 1");
  if (sampler.count < 1) throw InvalidConfig("sampler.count must be at least 1");
  if (!(sampler.cfg >= 0.0)) throw InvalidConfig("sampler.cfg must be nonnegative");
  if (sampler.class_label < -1 || sampler.class_label >= data.synthetic.num_classes) {
    throw InvalidConfig("sampler.class must be -1 or a valid class index");
  }
  if (eval.samples < 2 || eval.reference < 2) throw InvalidConfig("eval.samples and eval.reference must be at least 2");
  if (output_dir.empty()) throw InvalidConfig("output.dir is empty");
  resolve_model(*this).validate();
  resolve_train(*this).validate();
  resolve_schedule(*this, sampler.budgets, sampler.tau);
}

RunConfig parse_config(const std::string& text) {
  boost::property_tree::ptree pt;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw InvalidConfig(std::string("config syntax: ") + e.what());
  }
  RunConfig c;
  for (const auto& [section, body] : pt) {
    if (body.empty()) throw InvalidConfig("config entry '" + section + "' is outside any section");
    for (const auto& [key, value] : body) set_config_value(c, section + "." + key, value.data());
  }
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidConfig("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const RunConfig& c) {
  std::string out, section;
  for (const auto& f : fields()) {
    const auto dot = f.key.find('.');
    const auto sec = f.key.substr(0, dot);
    if (sec != section) {
      if (!section.empty()) out += "\n";
      out += "[" + sec + "]\n";
      section = sec;
    }
    out += f.key.substr(dot + 1) + " = " + f.get(c) + "\n";
  }
  return out;
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

std::string config_digest(const RunConfig& c) { return sha256_hex(serialize_config(c)); }

void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  const auto* f = find_field(key);
  if (!f) throw InvalidConfig("unknown config key '" + key + "'");
  f->set(c, key, value);
}

bool is_config_key(const std::string& key) { return find_field(key) != nullptr; }

std::map<std::string, std::string> config_values(const RunConfig& c) {
  std::map<std::string, std::string> out;
  for (const auto& f : fields()) out[f.key] = f.get(c);
  return out;
}

std::vector<std::string> config_diff(const RunConfig& a, const RunConfig& b) {
  std::vector<std::string> out;
  for (const auto& f : fields()) {
    if (f.get(a) != f.get(b)) out.push_back(f.key);
  }
  return out;
}

ModelConfig resolve_model(const RunConfig& c, const std::vector<double>& level_stds) {
  ModelConfig m = c.model;
  m.scales = placeholder_stds(c.scales);
  m.scales.channels = c.data.synthetic.channels;
  m.num_classes = c.conditional ? c.data.synthetic.num_classes : 0;
  m.patch_sizes = allocate_compute(m.scales, c.patch_size, c.allocation).patch_sizes;
  TimestepSamplerConfig ts = c.train.sampler_cfg;
  apply_variant(c.train.variant, m, ts);
  if (c.train.variant == Variant::vanilla) m.patch_sizes = {c.patch_size};
  if (!level_stds.empty()) {
    if (static_cast<int>(level_stds.size()) != m.stages()) {
      throw InvalidConfig("level std count does not match the model scales");
    }
    m.data_std = level_stds;
    if (m.scales.standardize) m.scales.scale_stds = level_stds;
  } else {
    m.data_std = std::vector<double>(m.stages(), 1.0);
  }
  return m;
}

TrainConfig resolve_train(const RunConfig& c) {
  TrainConfig t = c.train;
  if (c.train.variant != Variant::vanilla) {
    t.batch *= allocate_compute(placeholder_stds(c.scales), c.patch_size, c.allocation).batch_multiplier;
  }
  ModelConfig m = c.model;
  m.scales = placeholder_stds(c.scales);
  m.patch_sizes = std::vector<int>(m.scales.stages(), c.patch_size);
  apply_variant(c.train.variant, m, t.sampler_cfg);
  return t;
}

SamplerSchedule resolve_schedule(const RunConfig& c, const std::vector<int>& budgets, double tau) {
  const int S = c.scales.stages();
  if (static_cast<int>(budgets.size()) != S) {
    throw InvalidConfig("need " + std::to_string(S) + " sampling budgets, got " + std::to_string(budgets.size()));
  }
  int total = 0;
  for (int b : budgets) total += b;
  switch (c.train.variant) {
    case Variant::vanilla: {
      const int one[] = {total};
      return build_schedule(1, one, 1.0);
    }
    case Variant::tied:
      return build_tied_schedule(S, total);
    case Variant::dfm:
      break;
  }
  return build_schedule(S, budgets, tau);
}

}  // namespace dfm
