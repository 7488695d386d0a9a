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

#include "unet/unet_encoder.hpp"

namespace unet {

inline constexpr std::int32_t kPad = 0;
inline constexpr std::int32_t kUnk = 1;
inline constexpr std::int32_t kBos = 2;
inline constexpr std::int32_t kEos = 3;
inline constexpr std::int32_t kNumReserved = 4;

/// One training pair. `target` is wrapped as bos ... eos.
struct Example {
  std::vector<std::int32_t> source;
  std::vector<std::int32_t> target;
  std::vector<std::int32_t> segments;  // utterance index per source token

  friend bool operator==(const Example&, const Example&) = default;
};

/// Right-padded batch. The decoder reads `target_in` (bos + tokens) and is
/// scored against `target_out` (tokens + eos); both have `target_len` columns.
struct Batch {
  Index size = 0;
  Index source_len = 0;
  Index target_len = 0;
  std::vector<std::int32_t> source;      // [size, source_len]
  std::vector<std::int32_t> segments;    // [size, source_len]
  std::vector<std::int32_t> target_in;   // [size, target_len]
  std::vector<std::int32_t> target_out;  // [size, target_len]
  PadMask source_mask;
  PadMask target_mask;

  /// target_out with pads replaced by -1, the loss-ignore marker.
  std::vector<std::int32_t> loss_targets() const {
    std::vector<std::int32_t> t = target_out;
    for (std::size_t i = 0; i < t.size(); ++i)
      if (!target_mask.valid[i]) t[i] = -1;
    return t;
  }

  Index target_tokens() const {
    return std::count(target_mask.valid.begin(), target_mask.valid.end(), std::uint8_t{1});
  }
};

/// Pads `examples` into one batch. Every source and target must be non-empty.
inline Batch make_batch(std::span<const Example> examples) {
  if (examples.empty()) throw std::invalid_argument("make_batch: empty bucket");
  Batch b;
  b.size = static_cast<Index>(examples.size());
  std::vector<Index> src_lens, tgt_lens;
  for (const auto& ex : examples) {
    if (ex.source.empty()) throw std::invalid_argument("make_batch: empty source");
    if (ex.target.size() < 2) throw std::invalid_argument("make_batch: target must hold at least bos and eos");
    src_lens.push_back(static_cast<Index>(ex.source.size()));
    tgt_lens.push_back(static_cast<Index>(ex.target.size()) - 1);
  }
  b.source_len = *std::max_element(src_lens.begin(), src_lens.end());
  b.target_len = *std::max_element(tgt_lens.begin(), tgt_lens.end());
  b.source.assign(static_cast<std::size_t>(b.size * b.source_len), kPad);
  b.segments.assign(b.source.size(), 0);
  b.target_in.assign(static_cast<std::size_t>(b.size * b.target_len), kPad);
  b.target_out.assign(b.target_in.size(), kPad);
  for (Index i = 0; i < b.size; ++i) {
    const auto& ex = examples[i];
    std::copy(ex.source.begin(), ex.source.end(), b.source.begin() + i * b.source_len);
    if (!ex.segments.empty()) {
      if (ex.segments.size() != ex.source.size()) throw std::invalid_argument("make_batch: segment count mismatch");
      std::copy(ex.segments.begin(), ex.segments.end(), b.segments.begin() + i * b.source_len);
    }
    std::copy(ex.target.begin(), ex.target.end() - 1, b.target_in.begin() + i * b.target_len);
    std::copy(ex.target.begin() + 1, ex.target.end(), b.target_out.begin() + i * b.target_len);
  }
  b.source_mask = PadMask::from_lengths(src_lens, b.source_len);
  b.target_mask = PadMask::from_lengths(tgt_lens, b.target_len);
  return b;
}

}  // namespace unet
