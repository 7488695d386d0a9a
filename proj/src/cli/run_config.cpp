// Copyright 2026 The unet-transformer Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "unet/cli/run_config.hpp"

#include <yaml-cpp/yaml.h>

#include <cctype>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

namespace unet::cli {
namespace {

struct Field {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

std::string show(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}
std::string show(bool v) { return v ? "true" : "false"; }
std::string show(Index v) { return std::to_string(v); }

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError("config: " + key + " = '" + value + "' is not " + expected);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) bad_value(key, v, "a number");
  return out;
}

Index to_index(const std::string& key, const std::string& v) {
  Index out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) bad_value(key, v, "an integer");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "yes" || v == "on" || v == "1") return true;
  if (v == "false" || v == "no" || v == "off" || v == "0") return false;
  bad_value(key, v, "a boolean");
}

template <typename Member>
Field real(const char* key, Member member) {
  return {key, [member](const RunConfig& c) { return show(static_cast<double>(member(const_cast<RunConfig&>(c)))); },
          [member, key](RunConfig& c, const std::string& v) { member(c) = to_double(key, v); }};
}
template <typename Member>
Field integer(const char* key, Member member) {
  return {key, [member](const RunConfig& c) { return show(static_cast<Index>(member(const_cast<RunConfig&>(c)))); },
          [member, key](RunConfig& c, const std::string& v) { member(c) = to_index(key, v); }};
}
template <typename Member>
Field flag(const char* key, Member member) {
  return {key, [member](const RunConfig& c) { return show(static_cast<bool>(member(const_cast<RunConfig&>(c)))); },
          [member, key](RunConfig& c, const std::string& v) { member(c) = to_bool(key, v); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"seed", [](const RunConfig& c) { return std::to_string(c.seed); },
       [](RunConfig& c, const std::string& v) {
         const Index s = to_index("seed", v);
         if (s < 0) bad_value("seed", v, "a non-negative integer");
         c.seed = static_cast<std::uint64_t>(s);
       }},
      {"data", [](const RunConfig& c) { return c.data; }, [](RunConfig& c, const std::string& v) { c.data = v; }},

      {"model.variant", [](const RunConfig& c) { return std::string(variant_name(c.model.variant)); },
       [](RunConfig& c, const std::string& v) {
         try {
           c.model.variant = parse_variant(v);
         } catch (const std::invalid_argument& e) {
           throw ConfigError(e.what());
         }
       }},
      {"model.mode", [](const RunConfig& c) { return std::string(mode_name(c.model.mode)); },
       [](RunConfig& c, const std::string& v) {
         try {
           c.model.mode = parse_mode(v);
         } catch (const std::invalid_argument& e) {
           throw ConfigError(e.what());
         }
       }},
      integer("model.n_layers", [](RunConfig& c) -> Index& { return c.model.n_layers; }),
      integer("model.n_down", [](RunConfig& c) -> Index& { return c.model.n_down; }),
      integer("model.d_model", [](RunConfig& c) -> Index& { return c.model.d_model; }),
      real("model.dropout", [](RunConfig& c) -> double& { return c.model.dropout; }),
      flag("model.segment_embeddings", [](RunConfig& c) -> bool& { return c.model.segment_embeddings; }),
      flag("model.per_layer_cross_attention", [](RunConfig& c) -> bool& { return c.model.per_layer_cross_attention; }),

      real("train.lr", [](RunConfig& c) -> double& { return c.train.lr; }),
      {"train.schedule", [](const RunConfig& c) { return std::string(c.train.noam ? "noam" : "constant"); },
       [](RunConfig& c, const std::string& v) {
         if (v != "noam" && v != "constant") bad_value("train.schedule", v, "one of: constant, noam");
         c.train.noam = v == "noam";
       }},
      integer("train.warmup", [](RunConfig& c) -> Index& { return c.train.warmup; }),
      real("train.beta1", [](RunConfig& c) -> double& { return c.train.adam.beta1; }),
      real("train.beta2", [](RunConfig& c) -> double& { return c.train.adam.beta2; }),
      real("train.eps", [](RunConfig& c) -> double& { return c.train.adam.eps; }),
      real("train.clip_norm", [](RunConfig& c) -> double& { return c.train.clip_norm; }),
      integer("train.steps", [](RunConfig& c) -> Index& { return c.train.steps; }),
      integer("train.batch_size", [](RunConfig& c) -> Index& { return c.train.batch_size; }),
      integer("train.eval_interval", [](RunConfig& c) -> Index& { return c.train.eval_interval; }),
      integer("train.log_interval", [](RunConfig& c) -> Index& { return c.train.log_interval; }),
      integer("train.patience", [](RunConfig& c) -> Index& { return c.train.patience; }),
      integer("train.eval_batch_size", [](RunConfig& c) -> Index& { return c.train.eval_batch_size; }),
      flag("train.sort_by_length", [](RunConfig& c) -> bool& { return c.train.sort_by_length; }),
      real("train.target_valid_ce", [](RunConfig& c) -> double& { return c.train.target_valid_ce; }),
      flag("train.log_wall_clock", [](RunConfig& c) -> bool& { return c.train.log_wall_clock; }),

      flag("text.lowercase", [](RunConfig& c) -> bool& { return c.text.lowercase; }),
      integer("text.vocab_cap", [](RunConfig& c) -> Index& { return c.text.vocab_cap; }),
      integer("text.max_source", [](RunConfig& c) -> Index& { return c.text.max_source; }),
      integer("text.max_target", [](RunConfig& c) -> Index& { return c.text.max_target; }),

      integer("decode.beam", [](RunConfig& c) -> Index& { return c.beam; }),
  };
  return table;
}

const Field* find_field(const std::string& key) {
  for (const auto& f : fields())
    if (key == f.key) return &f;
  return nullptr;
}

std::string keys_in(const std::string& section) {
  std::string out;
  for (const auto& f : fields()) {
    const std::string k = f.key;
    const auto dot = k.find('.');
    const std::string sec = dot == std::string::npos ? "" : k.substr(0, dot);
    if (sec != section) continue;
    out += (out.empty() ? "" : ", ") + (dot == std::string::npos ? k : k.substr(dot + 1));
  }
  return out;
}

bool is_section(const std::string& name) {
  for (const auto& f : fields()) {
    const std::string k = f.key;
    if (k.rfind(name + ".", 0) == 0) return true;
  }
  return false;
}

std::string sanitize(const std::string& s) {
  std::string out;
  for (char ch : s) out += std::isalnum(static_cast<unsigned char>(ch)) ? ch : '_';
  return out;
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.emplace_back(f.key);
  return out;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "out") {
    cfg.out = value;
    return;
  }
  const Field* f = find_field(key);
  if (!f) {
    const auto dot = key.find('.');
    const std::string section = dot == std::string::npos ? "" : key.substr(0, dot);
    if (!section.empty() && !is_section(section)) {
      throw ConfigError("config: unknown section '" + section + "' (model, train, text, decode)");
    }
    throw ConfigError("config: unknown key '" + key + "'; valid keys" +
                      (section.empty() ? std::string(" at top level: out, ") : " in " + section + ": ") +
                      keys_in(section));
  }
  f->set(cfg, value);
}

void apply_yaml_text(RunConfig& cfg, const std::string& text, const std::string& origin) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  if (root.IsNull()) return;
  if (!root.IsMap()) throw ConfigError(origin + ": top level must be a mapping");
  for (const auto& entry : root) {
    const auto name = entry.first.as<std::string>();
    const YAML::Node& node = entry.second;
    if (node.IsMap()) {
      if (!is_section(name)) throw ConfigError(origin + ": unknown section '" + name + "' (model, train, text, decode)");
      for (const auto& kv : node) {
        if (!kv.second.IsScalar()) throw ConfigError(origin + ": " + name + "." + kv.first.as<std::string>() + " must be a scalar");
        set_config_value(cfg, name + "." + kv.first.as<std::string>(), kv.second.as<std::string>());
      }
    } else if (node.IsScalar()) {
      if (is_section(name)) throw ConfigError(origin + ": '" + name + "' must be a mapping");
      set_config_value(cfg, name, node.as<std::string>());
    } else {
      throw ConfigError(origin + ": '" + name + "' has an unsupported value");
    }
  }
}

void apply_yaml_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  apply_yaml_text(cfg, ss.str(), path.string());
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "': expected key=value");
  set_config_value(cfg, assignment.substr(0, eq), assignment.substr(eq + 1));
}

void finalize(RunConfig& cfg) {
  cfg.model.seed = cfg.seed;
  cfg.train.seed = cfg.seed;
  if (!(cfg.train.lr > 0.0)) throw ConfigError("config: train.lr must be positive");
  if (cfg.train.warmup < 1) throw ConfigError("config: train.warmup must be >= 1");
  if (cfg.train.steps < 0) throw ConfigError("config: train.steps must be >= 0");
  if (cfg.train.batch_size < 1 || cfg.train.eval_batch_size < 1) throw ConfigError("config: batch sizes must be positive");
  if (cfg.train.eval_interval < 1 || cfg.train.log_interval < 1) throw ConfigError("config: intervals must be positive");
  if (cfg.train.eval_interval % cfg.train.log_interval != 0) {
    throw ConfigError("config: train.eval_interval must be a multiple of train.log_interval");
  }
  if (cfg.beam < 1) throw ConfigError("config: decode.beam must be >= 1");
  if (cfg.text.vocab_cap < kNumReserved + 1) throw ConfigError("config: text.vocab_cap must be at least 5");
  if (cfg.text.max_source < 1 || cfg.text.max_target < 1) throw ConfigError("config: text lengths must be positive");
  cfg.text.mode = cfg.model.mode == Mode::Dialogue ? DataMode::Dialogue : DataMode::Translation;
  if (cfg.model.variant == Variant::S2SA && cfg.model.n_layers != 1) {
    throw ConfigError("config: the s2sa variant is a single-layer GRU; set model.n_layers: 1");
  }
  try {
    ModelConfig probe = cfg.model;
    probe.src_vocab = probe.tgt_vocab = kNumReserved + 1;
    probe.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

namespace {

std::string render_yaml(const RunConfig& cfg, const char* skip) {
  std::ostringstream os;
  std::string section;
  for (const auto& f : fields()) {
    const std::string k = f.key;
    if (skip && k == skip) continue;
    const auto dot = k.find('.');
    const std::string sec = dot == std::string::npos ? "" : k.substr(0, dot);
    if (sec != section) {
      os << sec << ":\n";
      section = sec;
    }
    const std::string value = f.get(cfg);
    const bool quote = value.empty() || value.find_first_of(":#,[]{}&*!|>'\"%@`") != std::string::npos;
    os << (sec.empty() ? "" : "  ") << (dot == std::string::npos ? k : k.substr(dot + 1)) << ": "
       << (quote ? "\"" + value + "\"" : value) << '\n';
  }
  return os.str();
}

}  // namespace

std::string resolved_yaml(const RunConfig& cfg) { return render_yaml(cfg, nullptr); }

std::string config_hash(const RunConfig& cfg) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : render_yaml(cfg, "train.steps")) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::filesystem::path output_root() {
  const char* env = std::getenv("UNET_OUT_ROOT");
  return env && *env ? std::filesystem::path(env) : std::filesystem::path("runs");
}

std::filesystem::path run_directory(const RunConfig& cfg, const std::string& prefix) {
  if (!cfg.out.empty()) return cfg.out;
  return output_root() / (prefix + "-" + sanitize(cfg.data) + "-s" + std::to_string(cfg.seed));
}

}  // namespace unet::cli
