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

#include <cctype>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <unordered_map>

#include "unet/batch.hpp"

namespace unet {

/// Raised for unreadable or malformed corpora and data specs.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::array<const char*, 4> kReservedTokens = {"<pad>", "<unk>", "<bos>", "<eos>"};
inline constexpr Index kDialogueMaxSource = 150;
inline constexpr Index kTranslationMaxLength = 50;

inline std::vector<std::string> tokenize(std::string_view text, bool lowercase = true) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(lowercase ? static_cast<char>(std::tolower(static_cast<unsigned char>(ch))) : ch);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

class Vocab {
 public:
  Vocab() {
    for (const char* t : kReservedTokens) add(t);
  }

  /// Reserved tokens plus the (cap - 4) most frequent others; frequency
  /// ties go to the lexicographically smaller token.
  static Vocab build(const std::map<std::string, Index>& counts, Index cap) {
    if (cap < kNumReserved + 1) throw std::invalid_argument("Vocab: cap must be at least 5, got " + std::to_string(cap));
    std::vector<std::pair<std::string, Index>> items;
    for (const auto& [tok, n] : counts)
      if (!is_reserved(tok)) items.emplace_back(tok, n);
    std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocab v;
    for (const auto& [tok, n] : items) {
      if (v.size() >= cap) break;
      v.add(tok);
    }
    return v;
  }

  static Vocab build(const std::vector<std::vector<std::string>>& sentences, Index cap) {
    std::map<std::string, Index> counts;
    for (const auto& s : sentences)
      for (const auto& t : s) ++counts[t];
    return build(counts, cap);
  }

  static bool is_reserved(std::string_view tok) {
    return std::find(kReservedTokens.begin(), kReservedTokens.end(), tok) != kReservedTokens.end();
  }

  Index size() const { return static_cast<Index>(tokens_.size()); }
  const std::string& token(std::int32_t id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("Vocab: id " + std::to_string(id) + " out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }
  std::int32_t id(const std::string& tok) const {
    auto it = ids_.find(tok);
    return it == ids_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& tok) const { return ids_.count(tok) != 0; }

  std::vector<std::int32_t> encode(const std::vector<std::string>& toks) const {
    std::vector<std::int32_t> out;
    out.reserve(toks.size());
    for (const auto& t : toks) out.push_back(id(t));
    return out;
  }

  /// Tokens for ids, stopping at eos and skipping pad/bos.
  std::vector<std::string> decode(std::span<const std::int32_t> ids) const {
    std::vector<std::string> out;
    for (auto i : ids) {
      if (i == kEos) break;
      if (i == kPad || i == kBos) continue;
      out.push_back(token(i));
    }
    return out;
  }

  /// One non-reserved token per line, in id order.
  void save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write vocabulary " + path);
    for (std::size_t i = kNumReserved; i < tokens_.size(); ++i) f << tokens_[i] << '\n';
  }

  static Vocab load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot read vocabulary " + path);
    Vocab v;
    std::string line;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      if (v.contains(line)) throw DataError("duplicate vocabulary token '" + line + "' in " + path);
      v.add(line);
    }
    return v;
  }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  void add(const std::string& tok) {
    ids_.emplace(tok, static_cast<std::int32_t>(tokens_.size()));
    tokens_.push_back(tok);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> ids_;
};

inline std::vector<std::int32_t> wrap_target(std::vector<std::int32_t> body) {
  body.insert(body.begin(), kBos);
  body.push_back(kEos);
  return body;
}

/// History utterances joined by eos, one segment index per utterance (the
/// separator belongs to the utterance it closes), keeping the last
/// `max_source` tokens.
inline Example make_dialogue_example(const Vocab& vocab, const std::vector<std::vector<std::string>>& history,
                                     const std::vector<std::string>& response, Index max_source = kDialogueMaxSource) {
  if (history.empty()) throw DataError("dialogue example needs at least one history utterance");
  Example ex;
  for (std::size_t u = 0; u < history.size(); ++u) {
    const auto ids = vocab.encode(history[u]);
    ex.source.insert(ex.source.end(), ids.begin(), ids.end());
    ex.segments.insert(ex.segments.end(), ids.size(), static_cast<std::int32_t>(u));
    if (u + 1 < history.size()) {
      ex.source.push_back(kEos);
      ex.segments.push_back(static_cast<std::int32_t>(u));
    }
  }
  if (ex.source.empty()) throw DataError("dialogue history is empty");
  if (static_cast<Index>(ex.source.size()) > max_source) {
    const auto drop = static_cast<std::ptrdiff_t>(ex.source.size()) - max_source;
    ex.source.erase(ex.source.begin(), ex.source.begin() + drop);
    ex.segments.erase(ex.segments.begin(), ex.segments.begin() + drop);
  }
  ex.target = wrap_target(vocab.encode(response));
  return ex;
}

/// Both sides truncated to `max_length`; nullopt when either side is empty.
inline std::optional<Example> make_translation_example(const Vocab& src_vocab, const Vocab& tgt_vocab,
                                                       std::vector<std::string> src, std::vector<std::string> tgt,
                                                       Index max_length = kTranslationMaxLength) {
  if (src.empty() || tgt.empty()) return std::nullopt;
  if (static_cast<Index>(src.size()) > max_length) src.resize(static_cast<std::size_t>(max_length));
  if (static_cast<Index>(tgt.size()) > max_length) tgt.resize(static_cast<std::size_t>(max_length));
  Example ex;
  ex.source = src_vocab.encode(src);
  ex.segments.assign(ex.source.size(), 0);
  ex.target = wrap_target(tgt_vocab.encode(tgt));
  return ex;
}

enum class SynthKind { Copy, Reverse, Nested };

inline const char* synth_name(SynthKind k) {
  switch (k) {
    case SynthKind::Copy: return "copy";
    case SynthKind::Reverse: return "reverse";
    default: return "nested";
  }
}

/// Depth after each bracket; `open` flags which tokens open.
inline std::vector<std::int32_t> bracket_depths(const std::vector<bool>& open) {
  std::vector<std::int32_t> depth;
  std::int32_t d = 0;
  for (bool o : open) {
    d += o ? 1 : -1;
    if (d < 0) throw std::invalid_argument("bracket_depths: unbalanced string");
    depth.push_back(d);
  }
  return depth;
}

struct SynthSpec {
  SynthKind kind = SynthKind::Copy;
  Index max_len = 10;
  Index n_train = 64;
  Index n_valid = 64;
  Index n_test = 64;
  Index vocab = 20;        // total ids, reserved included
  Index bracket_types = 2; // nested only
};

/// Token strings used by a synthetic task; the vocabulary is built from them
/// in this order so ids are stable.
inline std::vector<std::string> synth_tokens(const SynthSpec& s) {
  std::vector<std::string> toks;
  if (s.kind == SynthKind::Nested) {
    static constexpr const char* kPairs[] = {"(", ")", "[", "]", "{", "}", "<", ">"};
    if (s.bracket_types < 1 || s.bracket_types > 4) throw DataError("synth nested: types must be in [1, 4]");
    for (Index i = 0; i < 2 * s.bracket_types; ++i) toks.emplace_back(kPairs[i]);
    for (Index d = 0; d <= s.max_len / 2; ++d) toks.push_back("d" + std::to_string(d));
  } else {
    if (s.vocab <= kNumReserved) throw DataError("synth: vocab must exceed the 4 reserved ids");
    for (Index i = 0; i < s.vocab - kNumReserved; ++i) toks.push_back("w" + std::to_string(i));
  }
  return toks;
}

inline Vocab synth_vocab(const SynthSpec& s) {
  std::map<std::string, Index> counts;
  const auto toks = synth_tokens(s);
  // Descending counts keep creation order under the frequency sort.
  for (std::size_t i = 0; i < toks.size(); ++i) counts[toks[i]] = static_cast<Index>(toks.size() - i);
  return Vocab::build(counts, kNumReserved + static_cast<Index>(toks.size()));
}

/// One synthetic example drawn from `rng`.
inline Example synth_example(const SynthSpec& s, const Vocab& vocab, Rng& rng) {
  Example ex;
  if (s.kind == SynthKind::Nested) {
    if (s.max_len < 2) throw DataError("synth nested: len must be at least 2");
    const Index pairs = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(s.max_len / 2)));
    std::vector<Index> stack;
    std::vector<bool> open;
    for (Index remaining = 2 * pairs; remaining > 0; --remaining) {
      const auto depth = static_cast<Index>(stack.size());
      const bool can_open = depth + 1 <= remaining - 1;
      const bool do_open = depth == 0 || (can_open && rng.below(2) == 0);
      if (do_open) {
        const Index type = static_cast<Index>(rng.below(static_cast<std::uint64_t>(s.bracket_types)));
        stack.push_back(type);
        ex.source.push_back(vocab.id(synth_tokens(s)[static_cast<std::size_t>(2 * type)]));
      } else {
        ex.source.push_back(vocab.id(synth_tokens(s)[static_cast<std::size_t>(2 * stack.back() + 1)]));
        stack.pop_back();
      }
      open.push_back(do_open);
    }
    std::vector<std::int32_t> body;
    for (auto d : bracket_depths(open)) body.push_back(vocab.id("d" + std::to_string(d)));
    ex.target = wrap_target(body);
  } else {
    const Index len = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(s.max_len)));
    for (Index i = 0; i < len; ++i)
      ex.source.push_back(kNumReserved + static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(s.vocab - kNumReserved))));
    std::vector<std::int32_t> body = ex.source;
    if (s.kind == SynthKind::Reverse) std::reverse(body.begin(), body.end());
    ex.target = wrap_target(body);
  }
  ex.segments.assign(ex.source.size(), 0);
  return ex;
}

/// `n` examples whose sources avoid `exclude` when possible (held-out sets).
inline std::vector<Example> synth_task(const SynthSpec& s, const Vocab& vocab, Index n, std::uint64_t seed,
                                       const std::set<std::vector<std::int32_t>>* exclude = nullptr) {
  Rng rng(seed);
  std::vector<Example> out;
  for (Index i = 0; i < n; ++i) {
    Example ex = synth_example(s, vocab, rng);
    for (int attempt = 0; exclude && exclude->count(ex.source) && attempt < 100; ++attempt)
      ex = synth_example(s, vocab, rng);
    out.push_back(std::move(ex));
  }
  return out;
}

/// A corpus ready for training: vocabularies and three splits.
struct Corpus {
  Vocab source_vocab, target_vocab;
  std::vector<Example> train, valid, test;
  Index skipped = 0;  // malformed or empty pairs dropped while reading
  std::string description;
};

inline Corpus make_synth_corpus(const SynthSpec& s, std::uint64_t seed) {
  Corpus c;
  c.source_vocab = c.target_vocab = synth_vocab(s);
  c.train = synth_task(s, c.source_vocab, s.n_train, Rng::derive(seed, 1));
  std::set<std::vector<std::int32_t>> seen;
  for (const auto& ex : c.train) seen.insert(ex.source);
  c.valid = synth_task(s, c.source_vocab, s.n_valid, Rng::derive(seed, 2), &seen);
  c.test = synth_task(s, c.source_vocab, s.n_test, Rng::derive(seed, 3), &seen);
  return c;
}

enum class DataMode { Dialogue, Translation };

/// Parsed `synth:<kind>[:key=value]...` or `file:<src>[,<tgt>]`.
struct DataSpec {
  bool synthetic = true;
  SynthSpec synth;
  std::string source_path, target_path;
  std::string text;
};

inline Index parse_positive(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != value.size() || v < 1) throw DataError("data spec: " + key + " must be a positive integer, got '" + value + "'");
  return static_cast<Index>(v);
}

inline DataSpec parse_data_spec(const std::string& text) {
  DataSpec spec;
  spec.text = text;
  if (text.rfind("file:", 0) == 0) {
    spec.synthetic = false;
    const std::string rest = text.substr(5);
    const auto comma = rest.find(',');
    spec.source_path = rest.substr(0, comma);
    if (comma != std::string::npos) spec.target_path = rest.substr(comma + 1);
    if (spec.source_path.empty() || (comma != std::string::npos && spec.target_path.empty())) {
      throw DataError("data spec '" + text + "': expected file:<src>[,<tgt>]");
    }
    return spec;
  }
  if (text.rfind("synth:", 0) != 0) throw DataError("data spec '" + text + "': expected synth:<kind>... or file:<src>[,<tgt>]");
  std::vector<std::string> parts;
  std::stringstream ss(text.substr(6));
  for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
  if (parts.empty()) throw DataError("data spec '" + text + "': missing synthetic task kind");
  if (parts[0] == "copy") spec.synth.kind = SynthKind::Copy;
  else if (parts[0] == "reverse") spec.synth.kind = SynthKind::Reverse;
  else if (parts[0] == "nested") spec.synth.kind = SynthKind::Nested;
  else throw DataError("data spec: unknown synthetic kind '" + parts[0] + "' (copy, reverse, nested)");
  for (std::size_t i = 1; i < parts.size(); ++i) {
    const auto eq = parts[i].find('=');
    if (eq == std::string::npos) throw DataError("data spec: expected key=value, got '" + parts[i] + "'");
    const std::string key = parts[i].substr(0, eq), value = parts[i].substr(eq + 1);
    const Index v = parse_positive(key, value);
    if (key == "len") spec.synth.max_len = v;
    else if (key == "n") spec.synth.n_train = v;
    else if (key == "valid") spec.synth.n_valid = v;
    else if (key == "test") spec.synth.n_test = v;
    else if (key == "vocab") spec.synth.vocab = v;
    else if (key == "types") spec.synth.bracket_types = v;
    else throw DataError("data spec: unknown key '" + key + "' (len, n, valid, test, vocab, types)");
  }
  return spec;
}

struct TextOptions {
  DataMode mode = DataMode::Dialogue;
  bool lowercase = true;
  Index vocab_cap = 20000;  // per side in translation mode
  Index max_source = kDialogueMaxSource;
  Index max_target = kTranslationMaxLength;  // translation only
};

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read " + path);
  std::vector<std::string> lines;
  for (std::string line; std::getline(f, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

/// Source/target text pairs from one tab-separated file or two aligned files.
inline std::vector<std::pair<std::string, std::string>> read_pairs(const DataSpec& spec, Index& skipped) {
  std::vector<std::pair<std::string, std::string>> pairs;
  const auto src = read_lines(spec.source_path);
  if (spec.target_path.empty()) {
    for (const auto& line : src) {
      const auto tab = line.find('\t');
      if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
        ++skipped;
        continue;
      }
      pairs.emplace_back(line.substr(0, tab), line.substr(tab + 1));
    }
  } else {
    const auto tgt = read_lines(spec.target_path);
    if (tgt.size() != src.size()) {
      throw DataError("aligned files differ in line count: " + std::to_string(src.size()) + " vs " +
                      std::to_string(tgt.size()));
    }
    for (std::size_t i = 0; i < src.size(); ++i) pairs.emplace_back(src[i], tgt[i]);
  }
  return pairs;
}

/// Split rule for file corpora: of every 20 pairs, the 19th goes to
/// validation and the 20th to test.
inline int split_of(std::size_t index) {
  const std::size_t r = index % 20;
  return r == 18 ? 1 : r == 19 ? 2 : 0;
}

inline Corpus load_text_corpus(const DataSpec& spec, const TextOptions& opt) {
  Corpus c;
  const auto pairs = read_pairs(spec, c.skipped);
  struct Tokenized {
    std::vector<std::vector<std::string>> history;
    std::vector<std::string> src, tgt;
  };
  std::vector<Tokenized> items;
  for (const auto& [s, t] : pairs) {
    Tokenized it;
    it.tgt = tokenize(t, opt.lowercase);
    if (opt.mode == DataMode::Dialogue) {
      std::vector<std::string> cur;
      for (auto& tok : tokenize(s, opt.lowercase)) {
        if (tok == "<eos>") {
          it.history.push_back(std::move(cur));
          cur.clear();
        } else {
          cur.push_back(std::move(tok));
        }
      }
      it.history.push_back(std::move(cur));
      const bool any = std::any_of(it.history.begin(), it.history.end(), [](const auto& u) { return !u.empty(); });
      if (!any || it.tgt.empty()) {
        ++c.skipped;
        continue;
      }
    } else {
      it.src = tokenize(s, opt.lowercase);
      if (it.src.empty() || it.tgt.empty()) {
        ++c.skipped;
        continue;
      }
    }
    items.push_back(std::move(it));
  }
  if (items.empty()) throw DataError("corpus " + spec.text + " contains no usable pairs");
  std::vector<std::vector<std::string>> src_sents, tgt_sents;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (split_of(i) != 0) continue;
    for (const auto& u : items[i].history) src_sents.push_back(u);
    if (!items[i].src.empty()) src_sents.push_back(items[i].src);
    tgt_sents.push_back(items[i].tgt);
  }
  if (opt.mode == DataMode::Dialogue) {
    auto all = src_sents;
    all.insert(all.end(), tgt_sents.begin(), tgt_sents.end());
    c.source_vocab = c.target_vocab = Vocab::build(all, opt.vocab_cap);
  } else {
    c.source_vocab = Vocab::build(src_sents, opt.vocab_cap);
    c.target_vocab = Vocab::build(tgt_sents, opt.vocab_cap);
  }
  for (std::size_t i = 0; i < items.size(); ++i) {
    Example ex;
    if (opt.mode == DataMode::Dialogue) {
      ex = make_dialogue_example(c.source_vocab, items[i].history, items[i].tgt, opt.max_source);
    } else {
      ex = *make_translation_example(c.source_vocab, c.target_vocab, items[i].src, items[i].tgt, opt.max_target);
    }
    (split_of(i) == 0 ? c.train : split_of(i) == 1 ? c.valid : c.test).push_back(std::move(ex));
  }
  if (c.valid.empty()) c.valid = c.train;
  if (c.test.empty()) c.test = c.valid;
  return c;
}

inline Corpus load_corpus(const DataSpec& spec, std::uint64_t seed, const TextOptions& opt) {
  Corpus c = spec.synthetic ? make_synth_corpus(spec.synth, seed) : load_text_corpus(spec, opt);
  c.description = spec.text;
  return c;
}

/// Deterministic batch order: batch `step` is a pure function of
/// (seed, step). Each epoch reshuffles with a seed derived from the epoch.
/// With length sorting, the shuffled examples are stably sorted by source
/// length, cut into batches, and the batch order is shuffled again, so most
/// batches carry no source padding.
class Batcher {
 public:
  Batcher(std::vector<Index> source_lengths, Index batch_size, std::uint64_t seed, bool sort_by_length = true)
      : lengths_(std::move(source_lengths)), batch_(batch_size), seed_(seed), sort_(sort_by_length) {
    if (lengths_.empty()) throw DataError("Batcher: empty training set");
    if (batch_size < 1) throw std::invalid_argument("Batcher: batch size must be positive");
    batch_ = std::min<Index>(batch_, static_cast<Index>(lengths_.size()));
  }

  static std::vector<Index> source_lengths(std::span<const Example> examples) {
    std::vector<Index> out;
    for (const auto& ex : examples) out.push_back(static_cast<Index>(ex.source.size()));
    return out;
  }

  Index size() const { return static_cast<Index>(lengths_.size()); }
  Index batches_per_epoch() const { return (size() + batch_ - 1) / batch_; }

  std::vector<Index> indices(Index step) const {
    const Index epoch = step / batches_per_epoch(), k = step % batches_per_epoch();
    if (epoch != cached_epoch_) plan_epoch(epoch);
    const auto& b = batches_[static_cast<std::size_t>(k)];
    return {order_.begin() + b.first, order_.begin() + b.second};
  }

  Batch batch(std::span<const Example> examples, Index step) const {
    std::vector<Example> picked;
    for (Index i : indices(step)) picked.push_back(examples[static_cast<std::size_t>(i)]);
    return make_batch(picked);
  }

 private:
  void plan_epoch(Index epoch) const {
    order_.resize(lengths_.size());
    std::iota(order_.begin(), order_.end(), Index{0});
    Rng rng(Rng::derive(seed_, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order_.begin(), order_.end());
    if (sort_) {
      std::stable_sort(order_.begin(), order_.end(),
                       [&](Index a, Index b) { return lengths_[static_cast<std::size_t>(a)] < lengths_[static_cast<std::size_t>(b)]; });
    }
    batches_.clear();
    for (Index lo = 0; lo < size(); lo += batch_) batches_.emplace_back(lo, std::min(size(), lo + batch_));
    if (sort_) rng.shuffle(batches_.begin(), batches_.end());
    cached_epoch_ = epoch;
  }

  std::vector<Index> lengths_;
  Index batch_;
  std::uint64_t seed_;
  bool sort_;
  mutable Index cached_epoch_ = -1;
  mutable std::vector<Index> order_;
  mutable std::vector<std::pair<Index, Index>> batches_;
};

/// Fixed-order evaluation batches. With length sorting, examples are
/// grouped by source length first (stable), as in training.
inline std::vector<Batch> eval_batches(std::span<const Example> examples, Index batch_size, bool sort_by_length = true) {
  if (batch_size < 1) throw std::invalid_argument("eval_batches: batch size must be positive");
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (sort_by_length) {
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return examples[a].source.size() < examples[b].source.size(); });
  }
  std::vector<Batch> out;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
    std::vector<Example> picked;
    for (std::size_t j = i; j < std::min(order.size(), i + static_cast<std::size_t>(batch_size)); ++j)
      picked.push_back(examples[order[j]]);
    out.push_back(make_batch(picked));
  }
  return out;
}

}  // namespace unet
