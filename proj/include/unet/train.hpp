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

#pragma once

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "unet/data.hpp"
#include "unet/decode.hpp"

namespace unet {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- losses

/// Mean cross entropy over the valid positions of `mask`.
template <typename T>
Tensor<T> masked_cross_entropy(Tape<T>& tp, const Tensor<T>& logits, std::span<const std::int32_t> targets,
                               const PadMask& mask) {
  if (static_cast<Index>(targets.size()) != mask.batch * mask.length) {
    throw std::invalid_argument("masked_cross_entropy: targets do not match mask");
  }
  std::vector<std::int32_t> t(targets.begin(), targets.end());
  for (std::size_t i = 0; i < t.size(); ++i)
    if (!mask.valid[i]) t[i] = -1;
  if (std::find_if(t.begin(), t.end(), [](std::int32_t v) { return v >= 0; }) == t.end()) {
    throw std::invalid_argument("masked_cross_entropy: no non-pad targets");
  }
  return cross_entropy(tp, logits, t);
}

inline double perplexity(double ce) {
  if (!std::isfinite(ce)) throw NumericalError("perplexity: non-finite cross entropy");
  return std::exp(ce);
}

// ---------------------------------------------------------------- optimiser

inline double noam_lr(Index step, Index d_model = kReferenceWidth, Index warmup = 4000) {
  if (step < 1) throw std::invalid_argument("noam_lr: step must be >= 1");
  if (warmup < 1) throw std::invalid_argument("noam_lr: warmup must be >= 1");
  const double s = static_cast<double>(step), w = static_cast<double>(warmup);
  return std::pow(static_cast<double>(d_model), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

struct AdamConfig {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  Index t = 0;

  explicit AdamState(const ParameterSet<T>& ps = ParameterSet<T>()) {
    for (const auto& p : ps.tensors()) {
      m.emplace_back(static_cast<std::size_t>(p.size()), T(0));
      v.emplace_back(static_cast<std::size_t>(p.size()), T(0));
    }
  }
};

/// Global L2 norm of all gradients.
template <typename T>
double grad_norm(const ParameterSet<T>& ps) {
  double s = 0.0;
  for (const auto& p : ps.tensors())
    for (T g : p.grad()) s += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(s);
}

/// Rescales gradients so their global norm is at most `max_norm`.
template <typename T>
double clip_grad_norm(ParameterSet<T>& ps, double max_norm) {
  const double norm = grad_norm(ps);
  if (max_norm > 0.0 && norm > max_norm) {
    const T f = static_cast<T>(max_norm / norm);
    for (auto& p : ps.tensors())
      for (T& g : p.grad()) g *= f;
  }
  return norm;
}

/// Bias-corrected Adam. Every gradient is checked before any update, so a
/// non-finite gradient leaves parameters and state untouched.
template <typename T>
void adam_step(ParameterSet<T>& ps, AdamState<T>& st, double lr, const AdamConfig& cfg = {}) {
  auto& params = ps.tensors();
  if (st.m.size() != params.size()) throw std::invalid_argument("adam_step: state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (T g : params[i].grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericalError("adam_step: non-finite gradient in parameter " + ps.names()[i]);
      }
    }
  }
  st.t += 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].data();
    auto g = params[i].grad();
    auto& m = st.m[i];
    auto& v = st.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = b1 * m[k] + (T(1) - b1) * g[k];
      v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
      const double mh = static_cast<double>(m[k]) / c1, vh = static_cast<double>(v[k]) / c2;
      w[k] = static_cast<T>(static_cast<double>(w[k]) - lr * mh / (std::sqrt(vh) + cfg.eps));
    }
  }
}

// ---------------------------------------------------------------- evaluation

/// Token-weighted mean CE over `examples`, dropout off.
template <typename T>
double evaluate_ce(const Seq2SeqModel<T>& model, std::span<const Example> examples, Index batch_size,
                   bool sort_by_length = true) {
  double total = 0.0;
  Index tokens = 0;
  for (const auto& b : eval_batches(examples, batch_size, sort_by_length)) {
    Tape<T> tp(false);
    Context<T> ctx{tp};
    const Index n = b.target_tokens();
    total += static_cast<double>(model.loss(ctx, b).item()) * static_cast<double>(n);
    tokens += n;
  }
  if (tokens == 0) throw std::invalid_argument("evaluate_ce: no target tokens");
  return total / static_cast<double>(tokens);
}

/// Fraction of examples whose greedy decode reproduces the target exactly.
template <typename T>
double exact_match_rate(const Seq2SeqModel<T>& model, std::span<const Example> examples, Index beam = 1) {
  if (examples.empty()) return 0.0;
  Index hits = 0;
  for (const auto& ex : examples) {
    const auto h = decode_source(model, ex, beam);
    const std::vector<std::int32_t> body(ex.target.begin() + 1, ex.target.end() - 1);
    if (h.finished && h.tokens == body) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(examples.size());
}

// ---------------------------------------------------------------- checkpoints

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFFu));
}
inline void write_u64(std::ostream& os, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFFu));
}
inline std::uint64_t read_uint(std::istream& is, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = is.get();
    if (c == EOF) throw CheckpointError("truncated tensor file");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

inline constexpr std::uint32_t kTensorMagic = 0x534E5455;  // "UTNS" little-endian

}  // namespace detail

/// Tensor file: magic, rank, dims (u64 each), then float32 values, all
/// little-endian.
template <typename T>
void save_tensor_file(const std::filesystem::path& path, const Shape& shape, std::span<const T> values) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot write " + path.string());
  detail::write_u32(f, detail::kTensorMagic);
  detail::write_u32(f, static_cast<std::uint32_t>(shape.size()));
  for (Index d : shape) detail::write_u64(f, static_cast<std::uint64_t>(d));
  for (T v : values) {
    const float x = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &x, 4);
    detail::write_u32(f, bits);
  }
  if (!f) throw CheckpointError("failed writing " + path.string());
}

template <typename T>
std::vector<T> load_tensor_file(const std::filesystem::path& path, const Shape& expected) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("missing tensor file " + path.string());
  if (detail::read_uint(f, 4) != detail::kTensorMagic) throw CheckpointError("bad magic in " + path.string());
  const auto rank = detail::read_uint(f, 4);
  if (rank > 8) throw CheckpointError("implausible rank in " + path.string());
  Shape shape;
  for (std::uint64_t i = 0; i < rank; ++i) shape.push_back(static_cast<Index>(detail::read_uint(f, 8)));
  if (shape != expected) {
    throw CheckpointError("shape " + to_string(shape) + " in " + path.string() + " does not match " + to_string(expected));
  }
  std::vector<T> out(static_cast<std::size_t>(numel(shape)));
  for (auto& v : out) {
    const auto bits = static_cast<std::uint32_t>(detail::read_uint(f, 4));
    float x;
    std::memcpy(&x, &bits, 4);
    v = static_cast<T>(x);
  }
  if (f.peek() != EOF) throw CheckpointError("trailing bytes in " + path.string());
  return out;
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Plain-text `key value` manifest, one entry per line, order preserved.
struct Manifest {
  std::vector<std::pair<std::string, std::string>> entries;

  void set(const std::string& k, const std::string& v) {
    for (auto& [key, val] : entries)
      if (key == k) {
        val = v;
        return;
      }
    entries.emplace_back(k, v);
  }
  std::optional<std::string> find(const std::string& k) const {
    for (const auto& [key, val] : entries)
      if (key == k) return val;
    return std::nullopt;
  }
  std::string get(const std::string& k) const {
    auto v = find(k);
    if (!v) throw CheckpointError("manifest lacks '" + k + "'");
    return *v;
  }
  Index get_int(const std::string& k) const {
    try {
      return static_cast<Index>(std::stoll(get(k)));
    } catch (const std::logic_error&) {
      throw CheckpointError("manifest entry '" + k + "' is not an integer");
    }
  }
  double get_double(const std::string& k) const {
    try {
      return std::stod(get(k));
    } catch (const std::logic_error&) {
      throw CheckpointError("manifest entry '" + k + "' is not a number");
    }
  }

  void save(const std::filesystem::path& p) const {
    std::ofstream f(p);
    if (!f) throw CheckpointError("cannot write " + p.string());
    for (const auto& [k, v] : entries) f << k << ' ' << v << '\n';
  }
  static Manifest load(const std::filesystem::path& p) {
    std::ifstream f(p);
    if (!f) throw CheckpointError("missing manifest " + p.string());
    Manifest m;
    for (std::string line; std::getline(f, line);) {
      if (line.empty()) continue;
      const auto sp = line.find(' ');
      m.entries.emplace_back(line.substr(0, sp), sp == std::string::npos ? "" : line.substr(sp + 1));
    }
    return m;
  }
};

inline constexpr const char* kCheckpointFormat = "unet-checkpoint-1";

inline void write_model_config(Manifest& m, const ModelConfig& c) {
  m.set("model.variant", variant_name(c.variant));
  m.set("model.mode", mode_name(c.mode));
  m.set("model.n_layers", std::to_string(c.n_layers));
  m.set("model.n_down", std::to_string(c.n_down));
  m.set("model.d_model", std::to_string(c.d_model));
  m.set("model.src_vocab", std::to_string(c.src_vocab));
  m.set("model.tgt_vocab", std::to_string(c.tgt_vocab));
  m.set("model.dropout", format_double(c.dropout));
  m.set("model.segment_embeddings", c.segment_embeddings ? "1" : "0");
  m.set("model.per_layer_cross_attention", c.per_layer_cross_attention ? "1" : "0");
  m.set("model.seed", std::to_string(c.seed));
}

inline ModelConfig read_model_config(const Manifest& m) {
  ModelConfig c;
  try {
    c.variant = parse_variant(m.get("model.variant"));
    c.mode = parse_mode(m.get("model.mode"));
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(e.what());
  }
  c.n_layers = m.get_int("model.n_layers");
  c.n_down = m.get_int("model.n_down");
  c.d_model = m.get_int("model.d_model");
  c.src_vocab = m.get_int("model.src_vocab");
  c.tgt_vocab = m.get_int("model.tgt_vocab");
  c.dropout = m.get_double("model.dropout");
  c.segment_embeddings = m.get_int("model.segment_embeddings") != 0;
  c.per_layer_cross_attention = m.get_int("model.per_layer_cross_attention") != 0;
  c.seed = static_cast<std::uint64_t>(std::stoull(m.get("model.seed")));
  return c;
}

/// Progress that must survive a restart for the resumed trajectory to
/// match an uninterrupted one.
struct TrainProgress {
  Index step = 0;
  double best_valid_ce = std::numeric_limits<double>::infinity();
  Index best_step = -1;
  Index evals_since_best = 0;
  std::uint64_t batch_hash = 1469598103934665603ULL;  // FNV-1a offset basis
};

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const Seq2SeqModel<T>& model, const AdamState<T>& adam,
                     const TrainProgress& prog, const std::string& config_hash, const Vocab* src_vocab = nullptr,
                     const Vocab* tgt_vocab = nullptr) {
  namespace fs = std::filesystem;
  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp / "params");
  fs::create_directories(tmp / "adam");
  Manifest m;
  m.set("format", kCheckpointFormat);
  m.set("config_hash", config_hash.empty() ? "-" : config_hash);
  m.set("step", std::to_string(prog.step));
  m.set("adam_t", std::to_string(adam.t));
  m.set("best_valid_ce", format_double(prog.best_valid_ce));
  m.set("best_step", std::to_string(prog.best_step));
  m.set("evals_since_best", std::to_string(prog.evals_since_best));
  m.set("batch_hash", std::to_string(prog.batch_hash));
  m.set("rng", "derived-per-step seed=" + std::to_string(model.config().seed));
  write_model_config(m, model.config());
  const auto& ps = model.parameters();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& name = ps.names()[i];
    const auto& t = ps.tensors()[i];
    save_tensor_file<T>(tmp / "params" / (name + ".bin"), t.shape(), t.data());
    save_tensor_file<T>(tmp / "adam" / (name + ".m.bin"), t.shape(), adam.m[i]);
    save_tensor_file<T>(tmp / "adam" / (name + ".v.bin"), t.shape(), adam.v[i]);
    m.set("tensor." + name, "params/" + name + ".bin " + to_string(t.shape()));
  }
  if (src_vocab) src_vocab->save((tmp / "source_vocab.txt").string());
  if (tgt_vocab) tgt_vocab->save((tmp / "target_vocab.txt").string());
  m.save(tmp / "manifest.txt");
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

template <typename T>
struct LoadedCheckpoint {
  std::unique_ptr<Seq2SeqModel<T>> model;
  AdamState<T> adam;
  TrainProgress progress;
  Manifest manifest;
};

/// Rebuilds the model recorded in `dir` and restores its weights and
/// optimiser state.
template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw CheckpointError("no checkpoint at " + dir.string());
  LoadedCheckpoint<T> out;
  out.manifest = Manifest::load(dir / "manifest.txt");
  const auto& m = out.manifest;
  if (m.get("format") != kCheckpointFormat) throw CheckpointError("unsupported checkpoint format " + m.get("format"));
  out.model = build_model<T>(read_model_config(m));
  auto& ps = out.model->parameters();
  out.adam = AdamState<T>(ps);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& name = ps.names()[i];
    auto& t = ps.tensors()[i];
    if (!m.find("tensor." + name)) throw CheckpointError("manifest lacks tensor " + name);
    const auto w = load_tensor_file<T>(dir / "params" / (name + ".bin"), t.shape());
    std::copy(w.begin(), w.end(), t.data().begin());
    out.adam.m[i] = load_tensor_file<T>(dir / "adam" / (name + ".m.bin"), t.shape());
    out.adam.v[i] = load_tensor_file<T>(dir / "adam" / (name + ".v.bin"), t.shape());
  }
  out.adam.t = m.get_int("adam_t");
  out.progress.step = m.get_int("step");
  out.progress.best_valid_ce = m.get_double("best_valid_ce");
  out.progress.best_step = m.get_int("best_step");
  out.progress.evals_since_best = m.get_int("evals_since_best");
  out.progress.batch_hash = static_cast<std::uint64_t>(std::stoull(m.get("batch_hash")));
  return out;
}

// ---------------------------------------------------------------- training

struct TrainConfig {
  double lr = 1e-4;          // constant rate, or the Noam scale factor when `noam` is set
  bool noam = false;
  Index warmup = 4000;
  AdamConfig adam;
  double clip_norm = 1.0;
  Index steps = 2000;
  Index batch_size = 64;
  Index eval_interval = 100;
  Index log_interval = 10;
  Index patience = 10;
  Index eval_batch_size = 64;
  bool sort_by_length = true;
  double target_valid_ce = 0.0;  // stop once validation CE falls below this (0 = never)
  std::uint64_t seed = 1;
  bool log_wall_clock = false;  // real wall_ms in metrics.csv (breaks byte-identical reruns)
  std::string config_hash;
};


inline double learning_rate(const TrainConfig& cfg, Index step, Index d_model) {
  return cfg.noam ? cfg.lr * noam_lr(step, d_model, cfg.warmup) : cfg.lr;
}

struct MetricRow {
  Index step;
  std::string split;
  double ce;
  double lr;
  double wall_ms;
};

using MetricCallback = std::function<void(const MetricRow&)>;

/// Appends rows to metrics.csv and its JSONL mirror.
class MetricsLog {
 public:
  MetricsLog() = default;
  MetricsLog(const std::filesystem::path& dir, bool real_wall_clock, Index keep_up_to_step, MetricCallback on_row = {})
      : dir_(dir), real_wall_(real_wall_clock), on_row_(std::move(on_row)) {
    if (dir_.empty()) return;
    truncate(keep_up_to_step);
  }

  void write(const MetricRow& r, std::uint64_t batch_hash) {
    rows_.push_back(r);
    if (on_row_) on_row_(r);
    if (dir_.empty()) return;
    std::ofstream csv(dir_ / "metrics.csv", std::ios::app);
    csv << r.step << ',' << r.split << ',' << format_double(r.ce) << ',' << format_double(std::exp(r.ce)) << ','
        << format_double(r.lr) << ',' << (real_wall_ ? format_double(r.wall_ms) : std::string("0")) << '\n';
    nlohmann::json j{{"step", r.step},     {"split", r.split},       {"ce", r.ce}, {"ppl", std::exp(r.ce)},
                     {"lr", r.lr},         {"wall_ms", r.wall_ms},   {"batch_hash", std::to_string(batch_hash)}};
    std::ofstream jl(dir_ / "metrics.jsonl", std::ios::app);
    jl << j.dump() << '\n';
  }

  const std::vector<MetricRow>& rows() const { return rows_; }

 private:
  /// Keeps the header and rows with step <= `keep`; keep < 0 starts fresh.
  void truncate(Index keep) {
    auto filter = [&](const std::filesystem::path& p, bool header, auto step_of) {
      std::vector<std::string> kept;
      if (keep >= 0 && std::filesystem::exists(p)) {
        std::ifstream f(p);
        for (std::string line; std::getline(f, line);) {
          if (header && kept.empty()) {
            kept.push_back(line);
            continue;
          }
          if (!line.empty() && step_of(line) <= keep) kept.push_back(line);
        }
      }
      if (header && kept.empty()) kept.push_back("step,split,ce,ppl,lr,wall_ms");
      std::ofstream f(p, std::ios::trunc);
      for (const auto& l : kept) f << l << '\n';
    };
    filter(dir_ / "metrics.csv", true, [](const std::string& l) { return static_cast<Index>(std::stoll(l)); });
    filter(dir_ / "metrics.jsonl", false,
           [](const std::string& l) { return nlohmann::json::parse(l).at("step").get<Index>(); });
  }

  std::filesystem::path dir_;
  bool real_wall_ = false;
  MetricCallback on_row_;
  std::vector<MetricRow> rows_;
};

struct TrainResult {
  TrainProgress progress;
  bool stopped_early = false;  // patience exhausted or target CE reached
  std::vector<double> train_ce;  // one entry per step run in this call
  std::vector<MetricRow> metrics;
};

inline std::uint64_t fnv1a_mix(std::uint64_t h, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xFFu;
    h *= 1099511628211ULL;
  }
  return h;
}

/// Trains `model` on corpus.train, evaluating on corpus.valid every
/// `eval_interval` steps (and at step 0 and at the end). Writes metrics and
/// best/last checkpoints under `out_dir` when it is non-empty. Passing the
/// state from `load_checkpoint` as `resume` continues a run bit-exactly when
/// the checkpoint was taken at an evaluation step.
template <typename T>
TrainResult train_loop(Seq2SeqModel<T>& model, const Corpus& corpus, const TrainConfig& cfg,
                       const std::filesystem::path& out_dir = {}, LoadedCheckpoint<T>* resume = nullptr,
                       const MetricCallback& on_metric = {}) {
  namespace fs = std::filesystem;
  if (cfg.eval_interval < 1 || cfg.log_interval < 1) throw std::invalid_argument("train_loop: intervals must be >= 1");
  // Checkpoints are taken at evaluations; a partially filled logging window
  // there could not be restored on resume.
  if (cfg.eval_interval % cfg.log_interval != 0) {
    throw std::invalid_argument("train_loop: eval_interval must be a multiple of log_interval");
  }
  if (!(cfg.lr > 0.0)) throw std::invalid_argument("train_loop: learning rate must be positive");
  if (cfg.warmup < 1) throw std::invalid_argument("train_loop: warmup must be >= 1");
  if (model.config().src_vocab != corpus.source_vocab.size() || model.config().tgt_vocab != corpus.target_vocab.size()) {
    throw std::invalid_argument("train_loop: model vocabulary sizes do not match the corpus");
  }
  if (!out_dir.empty()) fs::create_directories(out_dir);
  auto& ps = model.parameters();
  AdamState<T> adam(ps);
  TrainResult res;
  if (resume) {
    adam = resume->adam;
    res.progress = resume->progress;
  }
  auto& prog = res.progress;
  MetricsLog log(out_dir, cfg.log_wall_clock, resume ? prog.step : -1, on_metric);
  const auto t0 = std::chrono::steady_clock::now();
  auto wall_ms = [&]() {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  };
  auto save = [&](const char* name) {
    if (!out_dir.empty())
      save_checkpoint(out_dir / name, model, adam, prog, cfg.config_hash, &corpus.source_vocab, &corpus.target_vocab);
  };
  // Returns true when patience is exhausted.
  auto evaluate = [&](double lr) {
    const double ce = evaluate_ce(model, corpus.valid, cfg.eval_batch_size, cfg.sort_by_length);
    log.write({prog.step, "valid", ce, lr, wall_ms()}, prog.batch_hash);
    if (!std::isfinite(ce)) throw NumericalError("validation cross entropy is not finite at step " + std::to_string(prog.step));
    if (ce < prog.best_valid_ce) {
      prog.best_valid_ce = ce;
      prog.best_step = prog.step;
      prog.evals_since_best = 0;
      save("best.ckpt");
    } else {
      ++prog.evals_since_best;
    }
    return (cfg.patience > 0 && prog.evals_since_best >= cfg.patience) || ce < cfg.target_valid_ce;
  };

  const Index d_model = model.config().d_model;
  if (!resume) {
    if (evaluate(learning_rate(cfg, 1, d_model))) res.stopped_early = true;
  }
  Batcher batcher(Batcher::source_lengths(corpus.train), cfg.batch_size, Rng::derive(cfg.seed, 0xBA7C4),
                  cfg.sort_by_length);
  const double keep = 1.0 - model.config().dropout;
  double interval_sum = 0.0;
  Index interval_n = 0;
  bool evaluated_last = true;
  while (!res.stopped_early && prog.step < cfg.steps) {
    const Index step = prog.step + 1;
    const double lr = learning_rate(cfg, step, d_model);
    for (Index i : batcher.indices(step - 1)) prog.batch_hash = fnv1a_mix(prog.batch_hash, static_cast<std::uint64_t>(i));
    const Batch batch = batcher.batch(corpus.train, step - 1);
    Rng drop_rng(Rng::derive(cfg.seed, static_cast<std::uint64_t>(step) + 0x5EED0000ULL));
    ps.zero_grad();
    double loss_value;
    {
      Tape<T> tp;
      Context<T> ctx{tp, keep, &drop_rng};
      auto loss = model.loss(ctx, batch);
      loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value)) {
        throw NumericalError("training cross entropy diverged at step " + std::to_string(step) +
                             "; last good checkpoint retained");
      }
      tp.backward(loss);
    }
    clip_grad_norm(ps, cfg.clip_norm);
    adam_step(ps, adam, lr, cfg.adam);
    prog.step = step;
    res.train_ce.push_back(loss_value);
    interval_sum += loss_value;
    ++interval_n;
    evaluated_last = false;
    if (step % cfg.log_interval == 0) {
      log.write({step, "train", interval_sum / static_cast<double>(interval_n), lr, wall_ms()}, prog.batch_hash);
      interval_sum = 0.0;
      interval_n = 0;
    }
    if (step % cfg.eval_interval == 0) {
      res.stopped_early = evaluate(lr);
      evaluated_last = true;
      save("last.ckpt");
    }
  }
  if (!evaluated_last) {
    const double lr = learning_rate(cfg, std::max<Index>(prog.step, 1), d_model);
    if (interval_n > 0) log.write({prog.step, "train", interval_sum / static_cast<double>(interval_n), lr, wall_ms()}, prog.batch_hash);
    res.stopped_early = evaluate(lr) || res.stopped_early;
  }
  save("last.ckpt");
  res.metrics = log.rows();
  return res;
}

}  // namespace unet
