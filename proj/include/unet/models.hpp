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

// Complete sequence-to-sequence models. Every Transformer-family variant
// shares the same decoder; only the encoder stack differs.

#pragma once

#include <array>
#include <optional>

#include "unet/batch.hpp"

namespace unet {

enum class Variant { Unet, UnetNoDownUp, UnetNoDownUpNoConv, Transformer, S2SA };
enum class Mode { Dialogue, Translation };

inline constexpr std::array<Variant, 5> kAllVariants = {Variant::Unet, Variant::UnetNoDownUp,
                                                        Variant::UnetNoDownUpNoConv, Variant::Transformer,
                                                        Variant::S2SA};
/// Ablation rows, from the full model down to the vanilla Transformer.
inline constexpr std::array<Variant, 4> kAblationVariants = {Variant::Unet, Variant::UnetNoDownUp,
                                                             Variant::UnetNoDownUpNoConv, Variant::Transformer};

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Unet: return "unet";
    case Variant::UnetNoDownUp: return "unet-no-downup";
    case Variant::UnetNoDownUpNoConv: return "unet-no-downup-no-conv";
    case Variant::Transformer: return "transformer";
    case Variant::S2SA: return "s2sa";
  }
  return "?";
}

/// Row label in the ablation table.
inline const char* variant_label(Variant v) {
  switch (v) {
    case Variant::Unet: return "UNET";
    case Variant::UnetNoDownUp: return "UNET - DOWN/UP";
    case Variant::UnetNoDownUpNoConv: return "UNET - DOWN/UP - CONV";
    case Variant::Transformer: return "TRANSFORMER";
    case Variant::S2SA: return "S2SA";
  }
  return "?";
}

inline std::string valid_variant_names() {
  std::string s;
  for (auto v : kAllVariants) s += (s.empty() ? "" : ", ") + std::string(variant_name(v));
  return s;
}

inline Variant parse_variant(std::string_view name) {
  for (auto v : kAllVariants)
    if (name == variant_name(v)) return v;
  throw std::invalid_argument("unknown variant '" + std::string(name) + "'; valid variants: " + valid_variant_names());
}

inline const char* mode_name(Mode m) { return m == Mode::Dialogue ? "dialogue" : "translation"; }
inline Mode parse_mode(std::string_view name) {
  if (name == "dialogue") return Mode::Dialogue;
  if (name == "translation") return Mode::Translation;
  throw std::invalid_argument("unknown mode '" + std::string(name) + "'; valid modes: dialogue, translation");
}

struct ModelConfig {
  Variant variant = Variant::Unet;
  Mode mode = Mode::Dialogue;
  Index n_layers = 6;
  Index n_down = 3;
  Index d_model = kReferenceWidth;
  Index src_vocab = 20000;
  Index tgt_vocab = 20000;
  double dropout = 0.0;
  bool segment_embeddings = true;  // honoured in dialogue mode only
  bool per_layer_cross_attention = false;
  std::uint64_t seed = 1;

  void validate() const {
    if (d_model < 2 || d_model % 2 != 0) throw std::invalid_argument("ModelConfig: d_model must be even and >= 2");
    if (src_vocab <= kNumReserved || tgt_vocab <= kNumReserved) {
      throw std::invalid_argument("ModelConfig: vocabularies must exceed the reserved tokens");
    }
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("ModelConfig: dropout must be in [0, 1)");
    if (n_layers < 1) throw std::invalid_argument("ModelConfig: n_layers must be positive");
    if (variant == Variant::Unet && 2 * n_down != n_layers) {
      throw std::invalid_argument("ModelConfig: unet needs n_layers == 2 * n_down");
    }
    if (per_layer_cross_attention && variant != Variant::Unet) {
      throw std::invalid_argument("ModelConfig: per-layer cross-attention requires the unet variant");
    }
  }
};

/// Encoder layout of a Transformer-family variant. Flat variants mirror the
/// hourglass skip pairing: layer n-k+1 receives the output of layer k-1
/// (k = 1 being the embedded input) for the second half of the stack.
inline LayerSchedule encoder_layout(const ModelConfig& cfg) {
  if (cfg.variant == Variant::S2SA) return {};
  if (cfg.variant == Variant::Unet) return build_schedule(cfg.d_model, cfg.n_down);
  LayerSchedule layers = build_schedule(cfg.d_model, 0, cfg.n_layers);
  const Index n = cfg.n_layers;
  for (Index i = 1; i <= n; ++i) {
    auto& s = layers[static_cast<std::size_t>(i - 1)];
    s.conv = cfg.variant == Variant::UnetNoDownUp;
    if (cfg.variant != Variant::Transformer && i > n - n / 2) s.skip_from = n - i;
  }
  return layers;
}

/// Names of LayerSpec fields that differ between two layouts of equal depth.
inline std::vector<std::string> layout_diff(const LayerSchedule& a, const LayerSchedule& b) {
  std::vector<std::string> fields;
  auto note = [&](bool differs, const char* name) {
    if (differs && std::find(fields.begin(), fields.end(), name) == fields.end()) fields.emplace_back(name);
  };
  if (a.size() != b.size()) return {"depth"};
  for (std::size_t i = 0; i < a.size(); ++i) {
    note(a[i].role != b[i].role, "role");
    note(a[i].resample != b[i].resample, "resample");
    note(a[i].conv != b[i].conv, "conv");
    note(a[i].skip_from != b[i].skip_from, "skip_from");
    note(a[i].d_in != b[i].d_in, "d_in");
    note(a[i].d_out != b[i].d_out, "d_out");
    note(a[i].d_inner != b[i].d_inner, "d_inner");
    note(a[i].d_key != b[i].d_key, "d_key");
    note(a[i].d_value != b[i].d_value, "d_value");
    note(a[i].heads != b[i].heads, "heads");
    note(a[i].in_divisor != b[i].in_divisor, "in_divisor");
    note(a[i].out_divisor != b[i].out_divisor, "out_divisor");
  }
  return fields;
}

/// Fields that make up the length/width schedule of a layout.
inline bool is_schedule_field(std::string_view f) {
  return f == "role" || f == "resample" || f == "d_in" || f == "d_out" || f == "d_inner" || f == "d_key" ||
         f == "d_value" || f == "in_divisor" || f == "out_divisor";
}

/// Post-norm decoder layer: causal self-attention, cross-attention over an
/// encoder representation, feed-forward.
template <typename T>
class DecoderLayer {
 public:
  DecoderLayer() = default;
  DecoderLayer(ParameterSet<T>& ps, const std::string& name, Index d, Index d_memory) {
    self_attn_ = MultiHeadAttention<T>(ps, name + ".self_attn", AttentionConfig::for_widths(d, d));
    norm1_ = LayerNormParams<T>(ps, name + ".norm1", d);
    cross_attn_ = MultiHeadAttention<T>(ps, name + ".cross_attn", AttentionConfig::for_widths(d, d_memory));
    norm2_ = LayerNormParams<T>(ps, name + ".norm2", d);
    ff_ = FeedForward<T>(ps, name + ".ff", d, scaled_sizes(d).d_inner);
    norm3_ = LayerNormParams<T>(ps, name + ".norm3", d);
  }

  Tensor<T> operator()(const Context<T>& ctx, const Tensor<T>& x, const AttnMask& self_mask, const Tensor<T>& memory,
                       const AttnMask& memory_mask) const {
    auto& tp = ctx.tape;
    auto h = norm1_(tp, add(tp, x, ctx.drop(self_attn_(ctx, x, x, self_mask))));
    h = norm2_(tp, add(tp, h, ctx.drop(cross_attn_(ctx, h, memory, memory_mask))));
    return norm3_(tp, add(tp, h, ctx.drop(ff_(ctx, h))));
  }

 private:
  MultiHeadAttention<T> self_attn_;
  LayerNormParams<T> norm1_;
  MultiHeadAttention<T> cross_attn_;
  LayerNormParams<T> norm2_;
  FeedForward<T> ff_;
  LayerNormParams<T> norm3_;
};

/// GRU cell with h' = (1 - z) * h + z * h~.
template <typename T>
class GruCell {
 public:
  GruCell() = default;
  GruCell(ParameterSet<T>& ps, const std::string& name, Index d_in, Index d) : d_(d) {
    for (const char* g : {"z", "r", "h"}) {
      w_.push_back(ps.create(name + ".w" + g, {d_in, d}, InitSpec::xavier()));
      u_.push_back(ps.create(name + ".u" + g, {d, d}, InitSpec::xavier()));
      b_.push_back(ps.create(name + ".b" + g, {d}, InitSpec::zeros()));
    }
  }

  Index width() const { return d_; }

  /// Input projections W x + b for all three gates; x may carry any leading dims.
  std::array<Tensor<T>, 3> project_inputs(Tape<T>& tp, const Tensor<T>& x) const {
    return {linear(tp, x, w_[0], b_[0]), linear(tp, x, w_[1], b_[1]), linear(tp, x, w_[2], b_[2])};
  }

  /// One step from precomputed input projections [B, d] each.
  Tensor<T> step(Tape<T>& tp, const std::array<Tensor<T>, 3>& xp, const Tensor<T>& h) const {
    const Tensor<T> none;
    auto z = sigmoid(tp, add(tp, xp[0], linear(tp, h, u_[0], none)));
    auto r = sigmoid(tp, add(tp, xp[1], linear(tp, h, u_[1], none)));
    auto cand = tanh(tp, add(tp, xp[2], linear(tp, mul(tp, r, h), u_[2], none)));
    return add(tp, h, mul(tp, z, sub(tp, cand, h)));
  }

  Tensor<T> operator()(Tape<T>& tp, const Tensor<T>& x, const Tensor<T>& h) const {
    return step(tp, project_inputs(tp, x), h);
  }

  /// Gate tensors for inspection: (u_z, b_z).
  const Tensor<T>& update_recurrent() const { return u_[0]; }
  const Tensor<T>& update_bias() const { return b_[0]; }

 private:
  Index d_ = 0;
  std::vector<Tensor<T>> w_, u_, b_;
};

template <typename T>
struct Encoded {
  EncoderOutput<T> stack;
  Tensor<T> final_state;  // S2SA only: last non-pad encoder state, [B, d]
};

template <typename T>
class Seq2SeqModel {
 public:
  explicit Seq2SeqModel(const ModelConfig& cfg) : cfg_(cfg), params_(cfg.seed) {
    cfg_.validate();
    const Index d = cfg_.d_model;
    const bool segments = cfg_.mode == Mode::Dialogue && cfg_.segment_embeddings;
    if (cfg_.variant == Variant::S2SA) {
      src_words_ = params_.create("encoder.words", {cfg_.src_vocab, d}, InitSpec::xavier());
      enc_gru_ = GruCell<T>(params_, "encoder.gru", d, d);
      tgt_words_ = params_.create("decoder.words", {cfg_.tgt_vocab, d}, InitSpec::xavier());
      dec_gru_ = GruCell<T>(params_, "decoder.gru", d, d);
      s2sa_attn_ = MultiHeadAttention<T>(params_, "decoder.attn", AttentionConfig::for_widths(d, d));
    } else {
      src_embed_ = TokenEmbedding<T>(params_, "encoder.embed", cfg_.src_vocab, d, segments);
      encoder_ = EncoderStack<T>(params_, "encoder", encoder_layout(cfg_));
      tgt_embed_ = TokenEmbedding<T>(params_, "decoder.embed", cfg_.tgt_vocab, d, false);
      const auto& layout = encoder_.schedule();
      if (cfg_.per_layer_cross_attention && static_cast<Index>(layout.size()) != cfg_.n_layers) {
        throw std::invalid_argument("Seq2SeqModel: per-layer cross-attention needs equal encoder/decoder depth");
      }
      for (Index i = 0; i < cfg_.n_layers; ++i) {
        const Index mem = cfg_.per_layer_cross_attention ? layout[static_cast<std::size_t>(i)].d_out : d;
        dec_layers_.emplace_back(params_, "decoder.layer" + std::to_string(i + 1), d, mem);
      }
    }
    out_w_ = params_.create("decoder.out.w", {d, cfg_.tgt_vocab}, InitSpec::xavier());
    out_b_ = params_.create("decoder.out.b", {cfg_.tgt_vocab}, InitSpec::zeros());
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }
  LayerSchedule layout() const { return cfg_.variant == Variant::S2SA ? LayerSchedule{} : encoder_.schedule(); }

  /// Source ids/segments are [B, N] row-major, matching `mask`.
  Encoded<T> encode(const Context<T>& ctx, std::span<const std::int32_t> ids, std::span<const std::int32_t> segments,
                    const PadMask& mask) const {
    mask.check();
    auto& tp = ctx.tape;
    Encoded<T> enc;
    if (cfg_.variant != Variant::S2SA) {
      auto emb = src_embed_(ctx, ids, segments, mask.valid, mask.batch, mask.length);
      enc.stack = encoder_(ctx, emb, mask);
      return enc;
    }
    auto emb = ctx.drop(embedding_gather(tp, src_words_, ids, Shape{mask.batch, mask.length}));
    emb = mask_rows(tp, emb, mask.valid);
    const auto xp = enc_gru_.project_inputs(tp, emb);
    Tensor<T> h(Shape{mask.batch, cfg_.d_model});
    std::vector<Tensor<T>> states;
    std::vector<std::uint8_t> step_valid(static_cast<std::size_t>(mask.batch));
    for (Index t = 0; t < mask.length; ++t) {
      for (Index b = 0; b < mask.batch; ++b) step_valid[b] = mask.valid[b * mask.length + t];
      std::array<Tensor<T>, 3> xt{take_step(tp, xp[0], t), take_step(tp, xp[1], t), take_step(tp, xp[2], t)};
      auto next = enc_gru_.step(tp, xt, h);
      h = select_rows(tp, step_valid, next, h);
      states.push_back(h);
    }
    enc.stack.levels = {emb, mask_rows(tp, stack_steps(tp, states), mask.valid)};
    enc.stack.masks = {mask, mask};
    enc.final_state = h;
    return enc;
  }

  /// Teacher-forced logits [B, T, V] for decoder inputs [B, T].
  Tensor<T> decode(const Context<T>& ctx, const Encoded<T>& enc, std::span<const std::int32_t> target_in,
                   const PadMask& target_mask) const {
    auto& tp = ctx.tape;
    const Index bsz = target_mask.batch, len = target_mask.length;
    if (static_cast<Index>(target_in.size()) != bsz * len) {
      throw std::invalid_argument("decode: target ids do not match target mask");
    }
    const auto& memory_mask = enc.stack.mask();
    if (memory_mask.batch != bsz) throw std::invalid_argument("decode: encoder and decoder batch sizes differ");
    Tensor<T> h;
    if (cfg_.variant == Variant::S2SA) {
      auto emb = ctx.drop(embedding_gather(tp, tgt_words_, target_in, Shape{bsz, len}));
      const auto xp = dec_gru_.project_inputs(tp, emb);
      Tensor<T> state = enc.final_state;
      std::vector<Tensor<T>> states;
      for (Index t = 0; t < len; ++t) {
        std::array<Tensor<T>, 3> xt{take_step(tp, xp[0], t), take_step(tp, xp[1], t), take_step(tp, xp[2], t)};
        state = dec_gru_.step(tp, xt, state);
        states.push_back(state);
      }
      auto hs = stack_steps(tp, states);
      const auto mask = AttnMask::from_key_padding(memory_mask.valid, bsz, len, memory_mask.length);
      h = add(tp, hs, ctx.drop(s2sa_attn_(ctx, hs, enc.stack.out(), mask)));
    } else {
      std::vector<std::int32_t> no_segments;
      h = tgt_embed_(ctx, target_in, no_segments, target_mask.valid, bsz, len);
      const auto self_mask = AttnMask::causal(target_mask.valid, bsz, len);
      for (std::size_t i = 0; i < dec_layers_.size(); ++i) {
        const std::size_t level = cfg_.per_layer_cross_attention ? i + 1 : enc.stack.levels.size() - 1;
        const auto& mem = enc.stack.levels[level];
        const auto& mem_mask = enc.stack.masks[level];
        const auto cross = AttnMask::from_key_padding(mem_mask.valid, bsz, len, mem_mask.length);
        h = dec_layers_[i](ctx, h, self_mask, mem, cross);
      }
    }
    return linear(tp, h, out_w_, out_b_);
  }

  Tensor<T> logits(const Context<T>& ctx, const Batch& batch) const {
    auto enc = encode(ctx, batch.source, batch.segments, batch.source_mask);
    return decode(ctx, enc, batch.target_in, batch.target_mask);
  }

  /// Mean cross entropy over non-pad target tokens.
  Tensor<T> loss(const Context<T>& ctx, const Batch& batch) const {
    const auto targets = batch.loss_targets();
    return cross_entropy(ctx.tape, logits(ctx, batch), targets);
  }

 private:
  ModelConfig cfg_;
  ParameterSet<T> params_;
  // Transformer family
  TokenEmbedding<T> src_embed_;
  EncoderStack<T> encoder_;
  TokenEmbedding<T> tgt_embed_;
  std::vector<DecoderLayer<T>> dec_layers_;
  // S2SA
  Tensor<T> src_words_, tgt_words_;
  GruCell<T> enc_gru_, dec_gru_;
  MultiHeadAttention<T> s2sa_attn_;
  // Shared output projection
  Tensor<T> out_w_, out_b_;
};

template <typename T>
std::unique_ptr<Seq2SeqModel<T>> build_model(const ModelConfig& cfg) {
  return std::make_unique<Seq2SeqModel<T>>(cfg);
}

}  // namespace unet
