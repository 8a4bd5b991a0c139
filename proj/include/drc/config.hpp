#pragma once

// Run configuration: a flat "key = value" file with a fixed schema. Unknown
// keys, malformed values and version mismatches are rejected.

#include "drc/core.hpp"

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <iomanip>
#include <map>
#include <sstream>

namespace drc {

inline constexpr int kConfigVersion = 1;
inline constexpr const char* kToolVersion = "drc 1.0.0";

struct RunConfig {
  int config_version = kConfigVersion;
  uint64_t seed = 1;

  // world
  int triplets = 15000;
  int users = 96;
  int sessions_per_user = 50;
  int history = 4;
  int references = 4;
  bool persona_jitter = false;
  int nn_pool = 64;

  // tokenizer
  int vocab = 64;
  int tokenizer_images = 3000;
  uint64_t tokenizer_seed = 7;

  // model
  int width = 64;
  int blocks = 2;
  int latent_rows = 8;
  int ffn_mult = 4;
  int context = 128;
  std::string disentangler = "attention";
  std::string fusion = "full";

  // stage 1
  double s1_lr = 1e-4;
  int s1_epochs = 10;
  long s1_max_steps = 0;
  int s1_batch = 1;
  int s1_eval_every = 5000;
  int s1_val_samples = 64;
  bool importance_sampling = true;

  // stage 2
  double s2_lr = 1e-5;
  int s2_epochs = 25;
  long s2_max_steps = 0;
  int s2_batch = 1;
  int s2_eval_every = 2000;
  int s2_val_samples = 64;
  double alpha_s = 0.2;
  bool freeze_towers = false;

  // evaluation
  int eval_sessions = 0;  // 0: whole test split
  int probe_images = 1500;
  int recon_triplets = 200;
  double infer_temperature = 0.0;  // 0: greedy

  // ablations
  int ablate_seeds = 3;
  long ablate_s1_steps = 50000;
  long ablate_s2_steps = 20000;
  int ablate_eval_sessions = 120;

  int workers = 1;  // not part of the hash: results do not depend on it

  template <class Self, class F>
  static void fields(Self& s, F&& f) {
    f("config_version", s.config_version);
    f("seed", s.seed);
    f("world.triplets", s.triplets);
    f("world.users", s.users);
    f("world.sessions_per_user", s.sessions_per_user);
    f("world.history", s.history);
    f("world.references", s.references);
    f("world.persona_jitter", s.persona_jitter);
    f("world.nn_pool", s.nn_pool);
    f("tokenizer.vocab", s.vocab);
    f("tokenizer.images", s.tokenizer_images);
    f("tokenizer.seed", s.tokenizer_seed);
    f("model.width", s.width);
    f("model.blocks", s.blocks);
    f("model.latent_rows", s.latent_rows);
    f("model.ffn_mult", s.ffn_mult);
    f("model.context", s.context);
    f("model.disentangler", s.disentangler);
    f("model.fusion", s.fusion);
    f("stage1.lr", s.s1_lr);
    f("stage1.epochs", s.s1_epochs);
    f("stage1.max_steps", s.s1_max_steps);
    f("stage1.batch", s.s1_batch);
    f("stage1.eval_every", s.s1_eval_every);
    f("stage1.val_samples", s.s1_val_samples);
    f("stage1.importance_sampling", s.importance_sampling);
    f("stage2.lr", s.s2_lr);
    f("stage2.epochs", s.s2_epochs);
    f("stage2.max_steps", s.s2_max_steps);
    f("stage2.batch", s.s2_batch);
    f("stage2.eval_every", s.s2_eval_every);
    f("stage2.val_samples", s.s2_val_samples);
    f("stage2.alpha_s", s.alpha_s);
    f("stage2.freeze_towers", s.freeze_towers);
    f("eval.sessions", s.eval_sessions);
    f("eval.probe_images", s.probe_images);
    f("eval.recon_triplets", s.recon_triplets);
    f("eval.infer_temperature", s.infer_temperature);
    f("ablate.seeds", s.ablate_seeds);
    f("ablate.stage1_steps", s.ablate_s1_steps);
    f("ablate.stage2_steps", s.ablate_s2_steps);
    f("ablate.eval_sessions", s.ablate_eval_sessions);
    f("workers", s.workers);
  }
  void set(const std::string& key, const std::string& value);
  void validate() const;
  std::string to_text(bool include_runtime = true) const;
  uint64_t hash() const { return fnv1a(to_text(false)); }
  // Hash over the seed and the keys under the given prefixes; artifacts are
  // stamped with the hash of the keys they depend on.
  uint64_t section_hash(std::initializer_list<const char*> prefixes) const;
};

namespace detail {

inline std::string trim(std::string s) {
  s.erase(0, s.find_first_not_of(" \t\r"));
  const auto e = s.find_last_not_of(" \t\r");
  s.erase(e == std::string::npos ? 0 : e + 1);
  return s;
}

template <class V>
void parse_value(const std::string& key, const std::string& text, V& out) {
  auto bad = [&] { return ConfigError("config key '" + key + "': cannot parse '" + text + "'"); };
  if constexpr (std::is_same_v<V, bool>) {
    if (text == "true" || text == "1") out = true;
    else if (text == "false" || text == "0") out = false;
    else throw bad();
  } else if constexpr (std::is_same_v<V, std::string>) {
    out = text;
  } else if constexpr (std::is_floating_point_v<V>) {
    std::size_t pos = 0;
    try {
      out = std::stod(text, &pos);
    } catch (const std::exception&) {
      throw bad();
    }
    if (pos != text.size() || !std::isfinite(out)) throw bad();
  } else {
    const auto* b = text.data();
    const auto* e = b + text.size();
    auto [p, ec] = std::from_chars(b, e, out);
    if (ec != std::errc() || p != e) throw bad();
  }
}

template <class V>
std::string format_value(const V& v) {
  if constexpr (std::is_same_v<V, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_same_v<V, std::string>) {
    return v;
  } else if constexpr (std::is_floating_point_v<V>) {
    std::ostringstream o;
    o << std::setprecision(17) << v;
    return o.str();
  } else {
    return std::to_string(v);
  }
}

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
  bool found = false;
  fields(*this, [&](const char* k, auto& v) {
    if (key == k) {
      detail::parse_value(key, value, v);
      found = true;
    }
  });
  if (!found) throw ConfigError("unknown config key '" + key + "'");
}

inline void RunConfig::validate() const {
  auto need = [](bool c, const std::string& m) {
    if (!c) throw ConfigError(m);
  };
  need(config_version == kConfigVersion, "config_version " + std::to_string(config_version) + " is not supported (expected " +
                                             std::to_string(kConfigVersion) + ")");
  need(triplets >= 10, "world.triplets must be >= 10");
  need(users >= 1 && users <= 96, "world.users must lie in [1,96]");
  need(sessions_per_user >= 1, "world.sessions_per_user must be >= 1");
  need(history >= 1 && history <= 255 && references >= 1 && references <= 95, "world.history/references out of range");
  need(nn_pool >= 1, "world.nn_pool must be >= 1");
  need(vocab >= 2, "tokenizer.vocab must be >= 2");
  need(tokenizer_images >= 1, "tokenizer.images must be >= 1");
  need(width >= 2 && blocks >= 1 && latent_rows >= 1 && ffn_mult >= 1, "model sizes must be positive");
  need(disentangler == "attention" || disentangler == "mlp", "model.disentangler must be attention|mlp");
  need(fusion == "full" || fusion == "concat", "model.fusion must be full|concat");
  need(s1_lr > 0 && s2_lr > 0, "learning rates must be positive");
  need(s1_epochs >= 1 && s2_epochs >= 1 && s1_batch >= 1 && s2_batch >= 1, "epochs and batch sizes must be positive");
  need(s1_max_steps >= 0 && s2_max_steps >= 0, "max_steps must be >= 0");
  need(s1_val_samples >= 1 && s2_val_samples >= 1, "val_samples must be >= 1");
  need(alpha_s >= 0.0 && alpha_s <= 1.0, "stage2.alpha_s must lie in [0,1]");
  need(eval_sessions >= 0 && probe_images >= 1 && recon_triplets >= 1, "eval sizes out of range");
  need(infer_temperature >= 0.0, "eval.infer_temperature must be >= 0");
  need(ablate_seeds >= 1 && ablate_s1_steps >= 1 && ablate_s2_steps >= 1 && ablate_eval_sessions >= 1,
       "ablate settings must be positive");
  need(workers >= 1, "workers must be >= 1");
}

inline std::string RunConfig::to_text(bool include_runtime) const {
  std::ostringstream o;
  fields(*this, [&](const char* k, const auto& v) {
    if (!include_runtime && std::string(k) == "workers") return;
    o << k << " = " << detail::format_value(v) << "\n";
  });
  return o.str();
}

inline uint64_t RunConfig::section_hash(std::initializer_list<const char*> prefixes) const {
  std::ostringstream o;
  fields(*this, [&](const char* k, const auto& v) {
    const std::string key(k);
    bool take = key == "config_version" || key == "seed";
    for (const char* p : prefixes) take = take || key.rfind(p, 0) == 0;
    if (take) o << key << " = " << detail::format_value(v) << "\n";
  });
  return fnv1a(o.str());
}

inline RunConfig parse_config(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    c.set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  c.validate();
  return c;
}

inline RunConfig load_config(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw MissingArtifact("cannot open config " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return parse_config(s.str());
}

// "key=value" override from the command line.
inline void apply_override(RunConfig& c, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
  c.set(detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
}

}  // namespace drc
