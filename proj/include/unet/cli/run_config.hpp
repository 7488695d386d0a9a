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

// Run configuration: a YAML file with nested sections plus command-line
// overrides, resolved into one record that is written into every run.

#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "unet/train.hpp"

namespace unet::cli {

/// Malformed or inconsistent configuration (exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string data = "synth:copy";
  ModelConfig model;  // vocabulary sizes are filled in from the data
  TrainConfig train;
  TextOptions text;
  Index beam = 1;
  std::string out;  // run directory; empty derives one under the output root
};

/// Every settable key as `section.key` (top-level keys have no section).
std::vector<std::string> config_keys();

/// Sets one key from its textual value. Unknown keys and unparsable values
/// throw ConfigError.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);

/// Applies a YAML document. Unknown sections or keys are rejected.
void apply_yaml_text(RunConfig& cfg, const std::string& text, const std::string& origin = "<config>");
void apply_yaml_file(RunConfig& cfg, const std::filesystem::path& path);

/// Applies a `key=value` override.
void apply_override(RunConfig& cfg, const std::string& assignment);

/// Copies the seed into the model and training records and checks the
/// result. Called once all sources have been applied.
void finalize(RunConfig& cfg);

/// Canonical YAML for the resolved configuration, every key present, in a
/// fixed order. Reloading it reproduces the same configuration.
std::string resolved_yaml(const RunConfig& cfg);

/// FNV-1a over the resolved YAML without train.steps, as 16 hex digits. The
/// step budget is left out so a resumed run may extend it.
std::string config_hash(const RunConfig& cfg);

/// The output root: $UNET_OUT_ROOT when set, else "runs".
std::filesystem::path output_root();

/// `cfg.out` when set, else output_root()/<prefix>-<data>-s<seed>.
std::filesystem::path run_directory(const RunConfig& cfg, const std::string& prefix);

}  // namespace unet::cli
