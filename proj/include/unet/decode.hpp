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

// Greedy and beam decoding over an abstract next-token scorer, plus BLEU.

#pragma once

#include <map>

#include "unet/models.hpp"

namespace unet {

/// Next-token log-probabilities given the tokens emitted so far (bos excluded).
using StepScorer = std::function<std::vector<double>(const std::vector<std::int32_t>& prefix)>;

inline Index decode_length_cap(Index source_length) { return 2 * source_length + 5; }

/// Candidate order: higher score first; on exact ties non-reserved tokens
/// precede reserved ones, then lower id. Pad and bos are never emitted.
inline bool better_candidate(double sa, std::int32_t a, double sb, std::int32_t b) {
  if (sa != sb) return sa > sb;
  const bool ra = a < kNumReserved, rb = b < kNumReserved;
  if (ra != rb) return !ra;
  return a < b;
}

inline bool emittable(std::int32_t id) { return id != kPad && id != kBos; }

struct Hypothesis {
  std::vector<std::int32_t> tokens;  // without bos/eos
  double log_prob = 0.0;
  bool finished = false;             // ended with eos
};

inline Hypothesis greedy_decode(const StepScorer& scorer, Index max_len) {
  Hypothesis h;
  for (;;) {
    if (static_cast<Index>(h.tokens.size()) >= max_len) return h;
    const auto lp = scorer(h.tokens);
    std::int32_t best = -1;
    for (std::int32_t id = 0; id < static_cast<std::int32_t>(lp.size()); ++id) {
      if (!emittable(id)) continue;
      if (best < 0 || better_candidate(lp[id], id, lp[best], best)) best = id;
    }
    h.log_prob += lp[best];
    if (best == kEos) {
      h.finished = true;
      return h;
    }
    h.tokens.push_back(best);
  }
}

/// Beam search without length normalisation. Each step keeps the `beam`
/// best expansions of the live hypotheses; expansions ending in eos retire.
/// Search stops when no live hypothesis can beat the best retired one
/// (log-probabilities only decrease) or the length cap is hit, where live
/// hypotheses are retired as they stand.
inline Hypothesis beam_search(const StepScorer& scorer, Index max_len, Index beam) {
  if (beam < 1) throw std::invalid_argument("beam_search: beam must be >= 1");
  std::vector<Hypothesis> live{Hypothesis{}}, done;
  auto better = [](const Hypothesis& a, const Hypothesis& b) { return a.log_prob > b.log_prob; };
  while (!live.empty()) {
    if (!done.empty()) {
      const double best_done = std::max_element(done.begin(), done.end(), better)->log_prob;
      const double best_live = std::max_element(live.begin(), live.end(), better)->log_prob;
      if (best_done >= best_live) break;
    }
    if (static_cast<Index>(live.front().tokens.size()) >= max_len) {
      done.insert(done.end(), live.begin(), live.end());
      break;
    }
    struct Candidate {
      double score;
      double step;
      std::size_t parent;
      std::int32_t token;
    };
    std::vector<Candidate> cands;
    for (std::size_t p = 0; p < live.size(); ++p) {
      const auto lp = scorer(live[p].tokens);
      for (std::int32_t id = 0; id < static_cast<std::int32_t>(lp.size()); ++id)
        if (emittable(id)) cands.push_back({live[p].log_prob + lp[id], lp[id], p, id});
    }
    const auto keep = std::min<std::size_t>(static_cast<std::size_t>(beam), cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.parent != b.parent) return a.parent < b.parent;
                        return better_candidate(a.step, a.token, b.step, b.token);
                      });
    std::vector<Hypothesis> next;
    for (std::size_t i = 0; i < keep; ++i) {
      Hypothesis h = live[cands[i].parent];
      h.log_prob = cands[i].score;
      if (cands[i].token == kEos) {
        h.finished = true;
        done.push_back(std::move(h));
      } else {
        h.tokens.push_back(cands[i].token);
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
  }
  // First-retired wins exact ties, which keeps beam = 1 identical to greedy.
  return *std::max_element(done.begin(), done.end(), [](const Hypothesis& a, const Hypothesis& b) {
    return a.log_prob < b.log_prob;
  });
}

inline std::vector<double> log_softmax_row(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - m);
  const double lz = m + std::log(z);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lz;
  return out;
}

/// Scores next tokens for one source sentence with a trained model. The
/// source is encoded once; each call re-runs the decoder over the prefix.
template <typename T>
class ModelScorer {
 public:
  ModelScorer(const Seq2SeqModel<T>& model, std::vector<std::int32_t> source, std::vector<std::int32_t> segments = {})
      : model_(model), tape_(false), ctx_{tape_} {
    if (source.empty()) throw std::invalid_argument("ModelScorer: empty source");
    if (segments.empty()) segments.assign(source.size(), 0);
    source_len_ = static_cast<Index>(source.size());
    encoded_ = model_.encode(ctx_, source, segments, PadMask::all_valid(1, source_len_));
  }

  ModelScorer(const ModelScorer&) = delete;
  ModelScorer& operator=(const ModelScorer&) = delete;

  Index source_length() const { return source_len_; }

  std::vector<double> operator()(const std::vector<std::int32_t>& prefix) const {
    std::vector<std::int32_t> in{kBos};
    in.insert(in.end(), prefix.begin(), prefix.end());
    const Index len = static_cast<Index>(in.size());
    auto logits = model_.decode(ctx_, encoded_, in, PadMask::all_valid(1, len));
    const Index v = logits.dim(-1);
    std::vector<double> last(static_cast<std::size_t>(v));
    for (Index k = 0; k < v; ++k) last[k] = static_cast<double>(logits[(len - 1) * v + k]);
    return log_softmax_row(last);
  }

 private:
  const Seq2SeqModel<T>& model_;
  mutable Tape<T> tape_;
  Context<T> ctx_;
  Index source_len_ = 0;
  Encoded<T> encoded_;
};

/// Decodes one source with greedy search (beam <= 1) or beam search.
template <typename T>
Hypothesis decode_source(const Seq2SeqModel<T>& model, const Example& ex, Index beam = 1) {
  ModelScorer<T> scorer(model, ex.source, ex.segments);
  StepScorer fn = [&](const std::vector<std::int32_t>& p) { return scorer(p); };
  const Index cap = decode_length_cap(static_cast<Index>(ex.source.size()));
  return beam <= 1 ? greedy_decode(fn, cap) : beam_search(fn, cap, beam);
}

struct BleuStats {
  std::array<Index, 4> matches{};  // clipped n-gram matches
  std::array<Index, 4> totals{};   // hypothesis n-grams
  Index hyp_length = 0, ref_length = 0;

  double precision(int n) const {
    return totals[n - 1] == 0 ? 0.0 : static_cast<double>(matches[n - 1]) / static_cast<double>(totals[n - 1]);
  }
};

template <typename Tok>
BleuStats bleu_stats(const std::vector<std::vector<Tok>>& hyps, const std::vector<std::vector<Tok>>& refs) {
  if (hyps.size() != refs.size()) throw std::invalid_argument("bleu: hypothesis and reference counts differ");
  BleuStats s;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const auto& h = hyps[i];
    const auto& r = refs[i];
    if (r.empty()) throw std::invalid_argument("bleu: empty reference at line " + std::to_string(i + 1));
    s.hyp_length += static_cast<Index>(h.size());
    s.ref_length += static_cast<Index>(r.size());
    for (std::size_t n = 1; n <= 4; ++n) {
      std::map<std::vector<Tok>, Index> ref_counts, hyp_counts;
      for (std::size_t j = 0; j + n <= r.size(); ++j) ++ref_counts[{r.begin() + j, r.begin() + j + n}];
      for (std::size_t j = 0; j + n <= h.size(); ++j) ++hyp_counts[{h.begin() + j, h.begin() + j + n}];
      for (const auto& [gram, c] : hyp_counts) {
        auto it = ref_counts.find(gram);
        s.matches[n - 1] += std::min(c, it == ref_counts.end() ? Index{0} : it->second);
        s.totals[n - 1] += c;
      }
    }
  }
  return s;
}

/// Corpus BLEU-4 in [0, 100]: geometric mean of clipped precisions times the
/// brevity penalty; 0 whenever any precision is 0 (no smoothing).
template <typename Tok>
double bleu(const std::vector<std::vector<Tok>>& hyps, const std::vector<std::vector<Tok>>& refs) {
  const auto s = bleu_stats(hyps, refs);
  double log_sum = 0.0;
  for (int n = 1; n <= 4; ++n) {
    const double p = s.precision(n);
    if (p == 0.0) return 0.0;
    log_sum += std::log(p);
  }
  const double c = static_cast<double>(s.hyp_length), r = static_cast<double>(s.ref_length);
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return 100.0 * bp * std::exp(log_sum / 4.0);
}

}  // namespace unet
