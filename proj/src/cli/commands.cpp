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

#include "unet/cli/commands.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "unet/decode.hpp"
#include "unet/grad_suite.hpp"

namespace unet::cli {
namespace fs = std::filesystem;

namespace {

using Real = float;

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::trunc);
  if (!f) throw DataError("cannot write " + p.string());
  f << text;
}

const std::vector<Example>& split_examples(const Corpus& c, const std::string& split) {
  if (split == "train") return c.train;
  if (split == "valid") return c.valid;
  if (split == "test") return c.test;
  throw ConfigError("unknown split '" + split + "' (train, valid, test)");
}

/// The configuration a checkpoint was trained with: config.yaml next to it
/// when present, otherwise defaults plus the model record in its manifest.
RunConfig config_for_checkpoint(const fs::path& ckpt, const LoadedCheckpoint<Real>& loaded) {
  RunConfig cfg;
  const fs::path yaml = ckpt.parent_path() / "config.yaml";
  if (fs::exists(yaml)) apply_yaml_file(cfg, yaml);
  cfg.model = loaded.model->config();
  cfg.text.mode = cfg.model.mode == Mode::Dialogue ? DataMode::Dialogue : DataMode::Translation;
  return cfg;
}

}  // namespace

Corpus load_run_corpus(const RunConfig& cfg) {
  return load_corpus(parse_data_spec(cfg.data), cfg.seed, cfg.text);
}

TrainSummary run_training(RunConfig cfg, const fs::path& dir, bool resume, std::ostream& log) {
  finalize(cfg);
  Corpus corpus = load_run_corpus(cfg);
  if (corpus.skipped > 0) log << "skipped " << corpus.skipped << " malformed or empty pairs\n";
  cfg.model.src_vocab = corpus.source_vocab.size();
  cfg.model.tgt_vocab = corpus.target_vocab.size();
  cfg.train.config_hash = config_hash(cfg);

  std::optional<LoadedCheckpoint<Real>> state;
  if (resume) {
    state = load_checkpoint<Real>(dir / "last.ckpt");
    const std::string recorded = state->manifest.get("config_hash");
    if (recorded != cfg.train.config_hash) {
      throw ConfigError("cannot resume " + dir.string() + ": checkpoint config hash " + recorded +
                        " differs from the resolved config " + cfg.train.config_hash);
    }
  }

  fs::create_directories(dir);
  write_text(dir / "config.yaml", resolved_yaml(cfg));
  write_text(dir / "seed", std::to_string(cfg.seed) + "\n");

  std::unique_ptr<Seq2SeqModel<Real>> model = state ? std::move(state->model) : build_model<Real>(cfg.model);
  log << "training " << variant_name(cfg.model.variant) << " on " << corpus.description << " ("
      << corpus.train.size() << " train, " << corpus.valid.size() << " valid, " << corpus.test.size()
      << " test) into " << dir.string() << "\n";
  auto progress = [&log](const MetricRow& r) {
    log << "step " << std::setw(6) << r.step << "  " << std::setw(5) << r.split << "  ce " << fixed(r.ce, 4)
        << "  lr " << std::setprecision(3) << r.lr << "\n";
  };

  TrainSummary summary;
  summary.dir = dir;
  summary.result = train_loop(*model, corpus, cfg.train, dir, state ? &*state : nullptr, progress);

  auto best = load_checkpoint<Real>(dir / "best.ckpt");
  summary.test_ce = evaluate_ce(*best.model, corpus.test, cfg.train.eval_batch_size, cfg.train.sort_by_length);
  summary.test_ppl = perplexity(summary.test_ce);
  if (parse_data_spec(cfg.data).synthetic) summary.exact_match = exact_match_rate(*best.model, corpus.test);

  const auto& prog = summary.result.progress;
  nlohmann::json j{{"variant", variant_name(cfg.model.variant)},
                   {"data", cfg.data},
                   {"seed", cfg.seed},
                   {"config_hash", cfg.train.config_hash},
                   {"steps", prog.step},
                   {"stopped_early", summary.result.stopped_early},
                   {"best_step", prog.best_step},
                   {"best_valid_ce", prog.best_valid_ce},
                   {"test_ce", summary.test_ce},
                   {"test_ppl", summary.test_ppl},
                   {"batch_hash", std::to_string(prog.batch_hash)}};
  if (summary.exact_match) j["test_exact_match"] = *summary.exact_match;
  write_text(dir / "summary.json", j.dump(2) + "\n");
  return summary;
}

AblationReport run_ablation(const RunConfig& cfg, const fs::path& root, std::ostream& out, std::ostream& log) {
  AblationReport report;
  for (Variant v : kAblationVariants) {
    RunConfig c = cfg;
    c.model.variant = v;
    const auto s = run_training(c, root / variant_name(v), false, log);
    ModelConfig mc = c.model;
    report.rows.push_back({v, variant_label(v), s.result.progress.best_valid_ce, s.test_ppl,
                           s.result.progress.batch_hash, encoder_layout(mc)});
  }
  report.identical_batches = true;
  for (std::size_t i = 0; i + 1 < report.rows.size(); ++i) {
    report.adjacent_diffs.push_back(layout_diff(report.rows[i].layout, report.rows[i + 1].layout));
    report.identical_batches = report.identical_batches && report.rows[i].batch_hash == report.rows[i + 1].batch_hash;
  }

  std::ofstream csv(root / "ablation.csv", std::ios::trunc);
  csv << "variant,best_valid_ce,test_ppl,batch_hash\n";
  out << std::left << std::setw(24) << "variant" << std::right << std::setw(14) << "best val CE" << std::setw(12)
      << "test PPL" << std::setw(22) << "batch hash" << "\n";
  for (const auto& r : report.rows) {
    out << std::left << std::setw(24) << r.label << std::right << std::setw(14) << fixed(r.best_valid_ce, 4)
        << std::setw(12) << fixed(r.test_ppl, 3) << std::setw(22) << r.batch_hash << "\n";
    csv << r.label << ',' << format_double(r.best_valid_ce) << ',' << format_double(r.test_ppl) << ','
        << r.batch_hash << '\n';
  }
  out << "\nlayout differences:\n";
  for (std::size_t i = 0; i < report.adjacent_diffs.size(); ++i) {
    std::string fields;
    for (const auto& f : report.adjacent_diffs[i]) fields += (fields.empty() ? "" : ", ") + f;
    out << "  " << report.rows[i].label << " -> " << report.rows[i + 1].label << ": "
        << (fields.empty() ? "(none)" : fields) << "\n";
  }
  out << "\nidentical batch sequences: " << (report.identical_batches ? "yes" : "NO") << "\n";
  const bool unet_leq = report.rows.front().best_valid_ce <= report.rows.back().best_valid_ce;
  out << "UNET best val CE <= TRANSFORMER best val CE: " << (unet_leq ? "yes" : "no") << "\n";
  return report;
}

void run_eval(const EvalOptions& opt, std::ostream& out) {
  auto loaded = load_checkpoint<Real>(opt.ckpt);
  RunConfig cfg = config_for_checkpoint(opt.ckpt, loaded);
  if (!opt.data.empty()) cfg.data = opt.data;
  const Corpus corpus = load_run_corpus(cfg);
  const auto& mc = loaded.model->config();
  if (corpus.source_vocab.size() != mc.src_vocab || corpus.target_vocab.size() != mc.tgt_vocab) {
    throw DataError("vocabulary of " + cfg.data + " (" + std::to_string(corpus.source_vocab.size()) + "/" +
                    std::to_string(corpus.target_vocab.size()) + ") does not match the checkpoint (" +
                    std::to_string(mc.src_vocab) + "/" + std::to_string(mc.tgt_vocab) + ")");
  }
  const auto& examples = split_examples(corpus, opt.split);
  if (examples.empty()) throw DataError("split " + opt.split + " of " + cfg.data + " is empty");
  const double ce = evaluate_ce(*loaded.model, examples, cfg.train.eval_batch_size, cfg.train.sort_by_length);
  out << "split " << opt.split << "  examples " << examples.size() << "  ce " << fixed(ce, 6) << "  ppl "
      << fixed(perplexity(ce), 4) << "\n";
  if (opt.bleu_refs.empty()) return;

  std::vector<std::vector<std::string>> refs;
  for (const auto& line : read_lines(opt.bleu_refs)) refs.push_back(tokenize(line, cfg.text.lowercase));
  if (refs.size() != examples.size()) {
    throw DataError("reference file has " + std::to_string(refs.size()) + " lines but split " + opt.split + " has " +
                    std::to_string(examples.size()) + " examples");
  }
  const Index beam = opt.beam.value_or(cfg.beam);
  std::vector<std::vector<std::string>> hyps;
  for (const auto& ex : examples) {
    const auto h = decode_source(*loaded.model, ex, beam);
    hyps.push_back(corpus.target_vocab.decode(h.tokens));
  }
  try {
    out << "bleu " << fixed(bleu(hyps, refs), 2) << "  (beam " << beam << ")\n";
  } catch (const std::invalid_argument& e) {
    throw DataError(e.what());
  }
}

void run_decode(const fs::path& ckpt, std::optional<Index> beam_opt, std::istream& in, std::ostream& out) {
  auto loaded = load_checkpoint<Real>(ckpt);
  const RunConfig cfg = config_for_checkpoint(ckpt, loaded);
  const Index beam = beam_opt.value_or(cfg.beam);
  if (beam < 1) throw ConfigError("beam width must be >= 1");
  const Vocab src = Vocab::load((ckpt / "source_vocab.txt").string());
  const Vocab tgt = Vocab::load((ckpt / "target_vocab.txt").string());
  const auto& mc = loaded.model->config();
  if (src.size() != mc.src_vocab || tgt.size() != mc.tgt_vocab) {
    throw CheckpointError("vocabulary files in " + ckpt.string() + " do not match the model");
  }
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto toks = tokenize(line, cfg.text.lowercase);
    if (toks.empty()) {
      out << "\n";
      continue;
    }
    Example ex;
    if (mc.mode == Mode::Dialogue) {
      std::vector<std::vector<std::string>> history(1);
      for (auto& t : toks) {
        if (t == "<eos>") {
          history.emplace_back();
        } else {
          history.back().push_back(std::move(t));
        }
      }
      ex = make_dialogue_example(src, history, {}, cfg.text.max_source);
    } else {
      if (static_cast<Index>(toks.size()) > cfg.text.max_target) toks.resize(static_cast<std::size_t>(cfg.text.max_target));
      ex.source = src.encode(toks);
      ex.segments.assign(ex.source.size(), 0);
    }
    if (ex.source.empty()) {
      out << "\n";
      continue;
    }
    const auto h = decode_source(*loaded.model, ex, beam);
    std::string text;
    for (const auto& w : tgt.decode(h.tokens)) text += (text.empty() ? "" : " ") + w;
    out << text << "\n" << std::flush;
  }
}

bool run_gradcheck(std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  for (const auto& e : run_grad_suite()) {
    out << (e.report.passed ? "ok    " : "FAIL  ") << std::left << std::setw(36) << e.name << std::right
        << " max rel err " << std::scientific << std::setprecision(2) << e.report.worst() << " (tol "
        << e.report.tolerance << ")" << std::defaultfloat << "\n";
    ok = ok && e.report.passed;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out << (ok ? "all checks passed" : "gradient check FAILED") << " in " << fixed(secs, 1) << " s\n";
  return ok;
}

void print_schedule(std::ostream& out, Index n, Index d_base, Index n_down) {
  if (n < 1) throw ConfigError("--n must be >= 1");
  if (d_base < 2 || d_base % 2 != 0) throw ConfigError("--d must be even and >= 2");
  if (n_down < 1) throw ConfigError("--down must be >= 1");
  const auto layers = build_schedule(d_base, n_down);
  const auto lengths = layer_lengths(layers, n);
  const auto costs = estimate_costs(layers, n);
  out << std::left << std::setw(7) << "layer" << std::setw(6) << "role" << std::right << std::setw(8) << "length"
      << std::setw(9) << "divisor" << std::setw(7) << "d" << std::setw(9) << "d_inner" << std::setw(7) << "d_key"
      << std::setw(7) << "heads" << std::setw(6) << "skip" << std::setw(13) << "N*d^2" << std::setw(13) << "N^2*d"
      << "\n";
  out << std::left << std::setw(7) << "input" << std::setw(6) << "-" << std::right << std::setw(8) << lengths[0]
      << std::setw(9) << 1 << std::setw(7) << d_base << "\n";
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& s = layers[i];
    const std::string skip = s.skip_from < 0 ? "-" : s.skip_from == 0 ? "emb" : "L" + std::to_string(s.skip_from);
    out << std::left << std::setw(7) << ("L" + std::to_string(i + 1)) << std::setw(6) << to_string(s.role)
        << std::right << std::setw(8) << lengths[i + 1] << std::setw(9) << s.out_divisor << std::setw(7) << s.d_out
        << std::setw(9) << s.d_inner << std::setw(7) << s.d_key << std::setw(7) << s.heads << std::setw(6) << skip
        << std::setw(13) << std::setprecision(0) << std::fixed << costs[i].nd2 << std::setw(13) << costs[i].n2d
        << std::defaultfloat << std::setprecision(6) << "\n";
  }
}

}  // namespace unet::cli
