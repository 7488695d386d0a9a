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

// The subcommands behind the `unet` executable. Each writes its report to
// the given stream and signals failure by throwing; the executable maps
// exception types to exit codes.

#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "unet/cli/run_config.hpp"

namespace unet::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumerical = 4;

/// Loads the corpus named by `cfg.data` with the configured text options.
Corpus load_run_corpus(const RunConfig& cfg);

struct TrainSummary {
  std::filesystem::path dir;
  TrainResult result;
  double test_ce = 0.0;
  double test_ppl = 0.0;
  std::optional<double> exact_match;  // synthetic data only, greedy on the test split
};

/// Trains one model into `dir`, which receives config.yaml, seed, metrics,
/// checkpoints and summary.json. With `resume` the run continues from
/// dir/last.ckpt, whose config hash must match. Progress goes to `log`.
TrainSummary run_training(RunConfig cfg, const std::filesystem::path& dir, bool resume, std::ostream& log);

struct AblationRow {
  Variant variant;
  std::string label;
  double best_valid_ce = 0.0;
  double test_ppl = 0.0;
  std::uint64_t batch_hash = 0;
  LayerSchedule layout;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  /// layout_diff between rows i and i+1.
  std::vector<std::vector<std::string>> adjacent_diffs;
  bool identical_batches = false;
};

/// Trains the four ablation variants with the same data and seed under
/// root/<variant>, prints the comparison table to `out` and writes
/// root/ablation.csv.
AblationReport run_ablation(const RunConfig& cfg, const std::filesystem::path& root, std::ostream& out,
                            std::ostream& log);

struct EvalOptions {
  std::filesystem::path ckpt;
  std::string data;  // empty: the data recorded with the run
  std::string split = "test";
  std::string bleu_refs;  // reference file, one line per example of the split
  std::optional<Index> beam;  // default: decode.beam of the run
};
void run_eval(const EvalOptions& opt, std::ostream& out);

/// Decodes one source per line of `in` into one hypothesis per line of
/// `out`. In dialogue mode `<eos>` separates history utterances. Without
/// `beam` the run's decode.beam applies.
void run_decode(const std::filesystem::path& ckpt, std::optional<Index> beam, std::istream& in, std::ostream& out);

/// Runs the 64-bit gradient suite; returns false if any check fails.
bool run_gradcheck(std::ostream& out);

/// Per-layer schedule and cost estimates for input length n.
void print_schedule(std::ostream& out, Index n, Index d_base, Index n_down);

}  // namespace unet::cli
