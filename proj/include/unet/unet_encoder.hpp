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

// Hourglass encoder. Down layers shrink the token axis with a k=3 conv and
// a stride-2 max pool, then let the pooled tokens query the pre-conv tokens.
// Up layers grow it back with a stride-2 transposed conv and receive the
// matching down-path representation as an additive skip.
//
//   emb ─ down1 ─ down2 ─ down3 ─ up1 ─ up2 ─ up3 ─ out
//    │      │       └──────(+)──┘     │     │
//    │      └───────────(+)───────────┘     │
//    └─────────────────(+)──────────────────┘

#pragma once

#include "unet/blocks.hpp"

namespace unet {

/// Per-position validity (1 = real token, 0 = pad) for a batch of
/// right-padded sequences.
struct PadMask {
  Index batch = 1;
  Index length = 1;
  std::vector<std::uint8_t> valid;

  static PadMask all_valid(Index batch, Index length) {
    return {batch, length, std::vector<std::uint8_t>(static_cast<std::size_t>(batch * length), 1)};
  }

  /// Mask for sequences of the given true lengths padded to `length`.
  static PadMask from_lengths(std::span<const Index> lengths, Index length) {
    PadMask m{static_cast<Index>(lengths.size()), length, {}};
    m.valid.assign(static_cast<std::size_t>(m.batch * length), 0);
    for (Index b = 0; b < m.batch; ++b) {
      if (lengths[b] < 1 || lengths[b] > length) throw std::invalid_argument("PadMask: bad sequence length");
      std::fill_n(m.valid.begin() + b * length, lengths[b], std::uint8_t{1});
    }
    return m;
  }

  bool is_pad(Index b, Index t) const { return valid[static_cast<std::size_t>(b * length + t)] == 0; }

  Index count(Index b) const {
    return std::count(valid.begin() + b * length, valid.begin() + (b + 1) * length, std::uint8_t{1});
  }

  void check() const {
    if (static_cast<Index>(valid.size()) != batch * length) throw std::invalid_argument("PadMask: size mismatch");
    for (Index b = 0; b < batch; ++b) {
      if (count(b) == 0) throw std::invalid_argument("PadMask: sequence " + std::to_string(b) + " is entirely padding");
    }
  }

  friend bool operator==(const PadMask&, const PadMask&) = default;
};

/// Mask after one k=3 / stride-2 down step: an output position is pad iff
/// every input in its window is pad (window edges count as pad).
inline PadMask propagate_pad(const PadMask& in) {
  PadMask out{in.batch, pooled_length(in.length), {}};
  out.valid.assign(static_cast<std::size_t>(out.batch * out.length), 0);
  for (Index b = 0; b < in.batch; ++b) {
    for (Index j = 0; j < out.length; ++j) {
      for (Index t = 2 * j - 1; t <= 2 * j + 1; ++t) {
        if (t >= 0 && t < in.length && !in.is_pad(b, t)) out.valid[b * out.length + j] = 1;
      }
    }
    if (out.count(b) == 0) {
      throw std::invalid_argument("propagate_pad: sequence " + std::to_string(b) + " vanished (all positions pad)");
    }
  }
  return out;
}

enum class LayerRole { Down, Up, Flat };
enum class Resample { None, Pool, Deconv };

inline const char* to_string(LayerRole r) {
  switch (r) {
    case LayerRole::Down: return "down";
    case LayerRole::Up: return "up";
    default: return "flat";
  }
}
inline const char* to_string(Resample r) {
  switch (r) {
    case Resample::Pool: return "pool";
    case Resample::Deconv: return "deconv";
    default: return "none";
  }
}

/// Structural description of one encoder layer.
struct LayerSpec {
  LayerRole role = LayerRole::Flat;
  Resample resample = Resample::None;
  bool conv = false;
  /// Skip source: -1 none, 0 the embedded input, i >= 1 the output of layer i.
  Index skip_from = -1;
  Index d_in = kReferenceWidth;
  Index d_out = kReferenceWidth;
  Index d_inner = kReferenceInner;
  Index d_key = kReferenceKey;
  Index d_value = kReferenceKey;
  Index heads = kHeads;
  /// Nominal token-count divisors relative to the encoder input.
  Index in_divisor = 1;
  Index out_divisor = 1;

  /// Down-style layers attend from post-conv queries to pre-conv tokens;
  /// every other layer attends over its own (post-resample, post-skip) tokens.
  bool attends_pre_conv() const { return conv && resample != Resample::Deconv; }
  Index d_kv() const { return attends_pre_conv() ? d_in : d_out; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

using LayerSchedule = std::vector<LayerSpec>;

namespace detail {

inline Index round_half_up(long double v) { return static_cast<Index>(std::floor(v + 0.5L)); }

inline LayerSpec sized(LayerSpec s) {
  const auto sz = scaled_sizes(s.d_out);
  s.d_inner = sz.d_inner;
  s.d_key = sz.d_key;
  s.d_value = sz.d_value;
  return s;
}

}  // namespace detail

/// Hourglass schedule: n_down down layers growing width by sqrt(2) per level
/// (rounded half-up), then n_down up layers mirroring the widths back to
/// d_base. Up layer j takes its skip from the down output of equal length
/// and width. n_down = 0 gives `flat_layers` length-preserving layers.
inline LayerSchedule build_schedule(Index d_base = kReferenceWidth, Index n_down = 3, Index flat_layers = 6) {
  if (d_base < 1) throw std::invalid_argument("build_schedule: d_base must be positive");
  if (n_down < 0) throw std::invalid_argument("build_schedule: n_down must be non-negative");
  LayerSchedule layers;
  if (n_down == 0) {
    for (Index i = 0; i < flat_layers; ++i) {
      layers.push_back(detail::sized({LayerRole::Flat, Resample::None, false, -1, d_base, d_base}));
    }
    return layers;
  }
  std::vector<Index> down_out;
  Index width = d_base, divisor = 1;
  for (Index k = 1; k <= n_down; ++k) {
    const Index out = detail::round_half_up(static_cast<long double>(d_base) *
                                            std::pow(std::sqrt(2.0L), static_cast<long double>(k - 1)));
    LayerSpec s{LayerRole::Down, Resample::Pool, true, -1, width, out};
    s.in_divisor = divisor;
    s.out_divisor = divisor * 2;
    layers.push_back(detail::sized(s));
    down_out.push_back(out);
    width = out;
    divisor *= 2;
  }
  for (Index j = 1; j <= n_down; ++j) {
    const Index source = n_down - j;  // 0 = embeddings, else 1-based down layer
    const Index out = source == 0 ? d_base : down_out[source - 1];
    LayerSpec s{LayerRole::Up, Resample::Deconv, true, source, width, out};
    s.in_divisor = divisor;
    s.out_divisor = divisor / 2;
    layers.push_back(detail::sized(s));
    width = out;
    divisor /= 2;
  }
  return layers;
}

/// Token counts entering the stack and leaving each layer for input length n.
inline std::vector<Index> layer_lengths(const LayerSchedule& layers, Index n) {
  std::vector<Index> lengths{n};
  for (const auto& s : layers) {
    Index len = lengths.back();
    if (s.resample == Resample::Pool) len = pooled_length(len);
    if (s.resample == Resample::Deconv) len = lengths.at(static_cast<std::size_t>(s.skip_from));
    lengths.push_back(len);
  }
  return lengths;
}

/// Multiply-accumulate estimate for one layer, split into the terms that
/// scale as N d^2 (projections, conv, feed-forward) and N^2 d (scores and
/// weighted sums).
struct LayerCost {
  Index n_queries = 0, n_keys = 0, width = 0;
  double nd2 = 0.0;        // nominal N d^2 with N, d the layer's output length and width
  double n2d = 0.0;        // nominal N^2 d
  double dense_ops = 0.0;  // estimated MACs of the N d^2 family
  double attention_ops = 0.0;
};

inline std::vector<LayerCost> estimate_costs(const LayerSchedule& layers, Index n) {
  const auto lengths = layer_lengths(layers, n);
  std::vector<LayerCost> costs;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& s = layers[i];
    const double nin = static_cast<double>(lengths[i]), nout = static_cast<double>(lengths[i + 1]);
    const double nk = s.attends_pre_conv() ? nin : nout;
    const double hk = static_cast<double>(s.heads * s.d_key), hv = static_cast<double>(s.heads * s.d_value);
    const double dq = static_cast<double>(s.d_out), dkv = static_cast<double>(s.d_kv());
    LayerCost c;
    c.n_queries = lengths[i + 1];
    c.n_keys = static_cast<Index>(nk);
    c.width = s.d_out;
    c.nd2 = nout * dq * dq;
    c.n2d = nout * nout * dq;
    double conv_ops = 0.0;
    if (s.conv) conv_ops = 3.0 * nin * static_cast<double>(s.d_in) * dq;
    c.dense_ops = conv_ops + nout * dq * hk + nk * dkv * (hk + hv) + nout * hv * dq +
                  2.0 * nout * dq * static_cast<double>(s.d_inner);
    c.attention_ops = nout * nk * (hk + hv);
    costs.push_back(c);
  }
  return costs;
}

/// One encoder layer built from a LayerSpec.
template <typename T>
class EncoderLayer {
 public:
  EncoderLayer() = default;
  EncoderLayer(ParameterSet<T>& ps, const std::string& name, const LayerSpec& spec) : spec_(spec) {
    if (spec.conv) {
      conv_w_ = ps.create(name + ".conv.w", {kKernel, spec.d_in, spec.d_out}, InitSpec::xavier());
      conv_b_ = ps.create(name + ".conv.b", {spec.d_out}, InitSpec::zeros());
    } else if (spec.d_in != spec.d_out || spec.resample != Resample::None) {
      throw std::invalid_argument("EncoderLayer: width or length change requires a convolution");
    }
    attn_ = MultiHeadAttention<T>(ps, name + ".attn",
                                  {spec.d_out, spec.d_kv(), spec.heads, spec.d_key, spec.d_value});
    norm1_ = LayerNormParams<T>(ps, name + ".norm1", spec.d_out);
    ff_ = FeedForward<T>(ps, name + ".ff", spec.d_out, spec.d_inner);
    norm2_ = LayerNormParams<T>(ps, name + ".norm2", spec.d_out);
  }

  const LayerSpec& spec() const { return spec_; }

  /// x: [B, N, d_in]; pad rows are zeroed on entry. For up layers `skip` supplies the
  /// target length and the additive skip; `out_mask` is the mask at the
  /// output length (recorded on the down path for up layers).
  Tensor<T> operator()(const Context<T>& ctx, const Tensor<T>& x, const PadMask& in_mask, const Tensor<T>& skip,
                       const PadMask& out_mask) const {
    auto& tp = ctx.tape;
    if (x.rank() != 3 || x.dim(2) != spec_.d_in || x.dim(1) != in_mask.length) {
      throw std::invalid_argument("EncoderLayer: input " + to_string(x.shape()) + " does not match layer width " +
                                  std::to_string(spec_.d_in));
    }
    const Tensor<T> xin = mask_rows(tp, x, in_mask.valid);
    Tensor<T> c = xin;
    if (spec_.conv) {
      if (spec_.resample == Resample::Deconv) {
        const Index m = x.dim(1), target = out_mask.length;
        if (target != 2 * m && target != 2 * m - 1) {
          throw std::invalid_argument("EncoderLayer: up layer cannot grow length " + std::to_string(m) + " to " +
                                      std::to_string(target));
        }
        c = crop_rows(tp, deconv1d(tp, xin, conv_w_, conv_b_), target);
      } else {
        c = conv1d(tp, xin, conv_w_, conv_b_, 1);
      }
    }
    if (spec_.resample == Resample::Pool) {
      c = max_pool1d(tp, c, in_mask.valid);
    }
    if (skip.defined()) {
      if (skip.shape() != c.shape()) {
        throw std::invalid_argument("EncoderLayer: skip shape " + to_string(skip.shape()) + " does not match " +
                                    to_string(c.shape()));
      }
      c = add(tp, c, skip);
    }
    c = mask_rows(tp, c, out_mask.valid);
    const bool pre = spec_.attends_pre_conv();
    const Tensor<T>& kv = pre ? xin : c;
    const PadMask& kv_mask = pre ? in_mask : out_mask;
    const auto mask = AttnMask::from_key_padding(kv_mask.valid, kv_mask.batch, c.dim(1), kv_mask.length);
    auto h = norm1_(tp, add(tp, c, ctx.drop(attn_(ctx, c, kv, mask))));
    auto y = norm2_(tp, add(tp, h, ctx.drop(ff_(ctx, h))));
    return mask_rows(tp, y, out_mask.valid);
  }

 private:
  LayerSpec spec_;
  Tensor<T> conv_w_, conv_b_;
  MultiHeadAttention<T> attn_;
  LayerNormParams<T> norm1_;
  FeedForward<T> ff_;
  LayerNormParams<T> norm2_;
};

template <typename T>
struct EncoderOutput {
  std::vector<Tensor<T>> levels;  // [0] = embedded input, [i] = output of layer i
  std::vector<PadMask> masks;     // mask at each level
  const Tensor<T>& out() const { return levels.back(); }
  const PadMask& mask() const { return masks.back(); }
};

/// Stack of encoder layers wired by their LayerSpecs.
template <typename T>
class EncoderStack {
 public:
  EncoderStack() = default;
  EncoderStack(ParameterSet<T>& ps, const std::string& name, LayerSchedule layers) : specs_(std::move(layers)) {
    for (std::size_t i = 0; i < specs_.size(); ++i) {
      const auto& s = specs_[i];
      if (s.skip_from > static_cast<Index>(i)) throw std::invalid_argument("EncoderStack: skip from a later layer");
      if (s.resample == Resample::Deconv && s.skip_from < 0) {
        throw std::invalid_argument("EncoderStack: up layer needs a skip source for its target length");
      }
      layers_.emplace_back(ps, name + ".layer" + std::to_string(i + 1), s);
    }
  }

  const LayerSchedule& schedule() const { return specs_; }

  EncoderOutput<T> operator()(const Context<T>& ctx, const Tensor<T>& emb, const PadMask& mask) const {
    mask.check();
    EncoderOutput<T> out;
    out.levels.push_back(mask_rows(ctx.tape, emb, mask.valid));
    out.masks.push_back(mask);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& s = specs_[i];
      const PadMask& in_mask = out.masks.back();
      PadMask out_mask = in_mask;
      if (s.resample == Resample::Pool) out_mask = propagate_pad(in_mask);
      if (s.resample == Resample::Deconv) out_mask = out.masks[static_cast<std::size_t>(s.skip_from)];
      Tensor<T> skip;
      if (s.skip_from >= 0) skip = out.levels[static_cast<std::size_t>(s.skip_from)];
      out.levels.push_back(layers_[i](ctx, out.levels.back(), in_mask, skip, out_mask));
      out.masks.push_back(std::move(out_mask));
    }
    return out;
  }

 private:
  LayerSchedule specs_;
  std::vector<EncoderLayer<T>> layers_;
};

}  // namespace unet
