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

// unet: train, ablate, eval, decode, gradcheck, schedule.

#include <CLI11.hpp>

#include <iostream>

#include "unet/cli/commands.hpp"

namespace {

using namespace unet;
using namespace unet::cli;

struct RunFlags {
  std::string config, variant, data, out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
};

void add_run_flags(CLI::App* cmd, RunFlags& f, bool with_variant) {
  cmd->add_option("--config", f.config, "YAML config file")->check(CLI::ExistingFile);
  if (with_variant) cmd->add_option("--variant", f.variant, "Model variant: " + valid_variant_names());
  cmd->add_option("--data", f.data, "Data spec: synth:<kind>[:len=..][:n=..] or file:<src>[,<tgt>]");
  cmd->add_option("--seed", f.seed, "Random seed");
  cmd->add_option("--out", f.out, "Run directory (default: $UNET_OUT_ROOT or runs/, named after the run)");
  cmd->add_option("--set", f.overrides, "Override a config key, e.g. --set train.steps=500")->allow_extra_args(false);
}

RunConfig resolve(const RunFlags& f) {
  RunConfig cfg;
  if (!f.config.empty()) apply_yaml_file(cfg, f.config);
  if (!f.variant.empty()) set_config_value(cfg, "model.variant", f.variant);
  if (!f.data.empty()) cfg.data = f.data;
  if (f.seed) cfg.seed = *f.seed;
  if (!f.out.empty()) cfg.out = f.out;
  for (const auto& o : f.overrides) apply_override(cfg, o);
  finalize(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hourglass encoder sequence-to-sequence models: training, evaluation and inspection"};
  app.require_subcommand(1);

  RunFlags train_flags;
  bool resume = false;
  auto* train = app.add_subcommand("train", "Train one model");
  add_run_flags(train, train_flags, true);
  train->add_flag("--resume", resume, "Continue from <out>/last.ckpt");

  RunFlags ablate_flags;
  auto* ablate = app.add_subcommand("ablate", "Train the four ablation variants on identical data and seed");
  add_run_flags(ablate, ablate_flags, false);

  EvalOptions eval_opt;
  auto* eval = app.add_subcommand("eval", "Cross entropy and perplexity of a checkpoint, optionally BLEU");
  eval->add_option("--ckpt", eval_opt.ckpt, "Checkpoint directory")->required();
  eval->add_option("--data", eval_opt.data, "Data spec (default: the one recorded with the run)");
  eval->add_option("--split", eval_opt.split, "train, valid or test")->check(CLI::IsMember({"train", "valid", "test"}));
  eval->add_option("--bleu", eval_opt.bleu_refs, "Reference file for BLEU, one line per example");
  eval->add_option("--beam", eval_opt.beam, "Beam width for BLEU decoding (default: decode.beam of the run)")->check(CLI::PositiveNumber);

  std::string decode_ckpt;
  std::optional<Index> decode_beam;
  auto* decode = app.add_subcommand("decode", "Decode sources from stdin, one hypothesis per line on stdout");
  decode->add_option("--ckpt", decode_ckpt, "Checkpoint directory")->required();
  decode->add_option("--beam", decode_beam, "Beam width, 1 = greedy (default: decode.beam of the run)")->check(CLI::PositiveNumber);

  auto* gradcheck = app.add_subcommand("gradcheck", "Run the 64-bit finite-difference gradient suite");

  Index sched_n = 150, sched_d = 256, sched_down = 3;
  auto* schedule = app.add_subcommand("schedule", "Print the encoder layer schedule for an input length");
  schedule->add_option("--n", sched_n, "Input length");
  schedule->add_option("--d", sched_d, "Base width");
  schedule->add_option("--down", sched_down, "Number of down layers");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train) {
      const RunConfig cfg = resolve(train_flags);
      const auto s = run_training(cfg, run_directory(cfg, unet::variant_name(cfg.model.variant)), resume, std::cerr);
      std::cout << "run " << s.dir.string() << "\n"
                << "best valid ce " << s.result.progress.best_valid_ce << " at step " << s.result.progress.best_step
                << "\n"
                << "test ce " << s.test_ce << "  ppl " << s.test_ppl << "\n";
      if (s.exact_match) std::cout << "test exact match " << *s.exact_match << "\n";
    } else if (*ablate) {
      const RunConfig cfg = resolve(ablate_flags);
      run_ablation(cfg, run_directory(cfg, "ablate"), std::cout, std::cerr);
    } else if (*eval) {
      run_eval(eval_opt, std::cout);
    } else if (*decode) {
      run_decode(decode_ckpt, decode_beam, std::cin, std::cout);
    } else if (*gradcheck) {
      return run_gradcheck(std::cout) ? kExitOk : kExitNumerical;
    } else if (*schedule) {
      print_schedule(std::cout, sched_n, sched_d, sched_down);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitOk;
}
