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

#include <map>

#include "unet/sequence_ops.hpp"

namespace unet {

inline constexpr Index kHeads = 8;
inline constexpr Index kReferenceWidth = 256;
inline constexpr Index kReferenceInner = 1024;
inline constexpr Index kReferenceKey = 64;
inline constexpr Index kMaxSegments = 32;

enum class InitScheme { Xavier, Kaiming, XavierScaled, Zeros, Ones };

struct InitSpec {
  InitScheme scheme = InitScheme::Xavier;
  double gain = 1.0;

  static InitSpec xavier() { return {InitScheme::Xavier, 1.0}; }
  static InitSpec kaiming() { return {InitScheme::Kaiming, 1.0}; }
  /// Xavier shrunk by 1/100, used on attention and feed-forward outputs.
  static InitSpec xavier_scaled() { return {InitScheme::XavierScaled, 0.01}; }
  static InitSpec zeros() { return {InitScheme::Zeros, 1.0}; }
  static InitSpec ones() { return {InitScheme::Ones, 1.0}; }
};

/// (fan_in, fan_out) of a weight. Matrices are stored [in, out]; conv
/// kernels [k, in, out] count every tap.
inline std::pair<Index, Index> fans(const Shape& shape) {
  if (shape.size() == 1) return {shape[0], shape[0]};
  Index receptive = 1;
  for (std::size_t i = 0; i + 2 < shape.size(); ++i) receptive *= shape[i];
  return {receptive * shape[shape.size() - 2], receptive * shape.back()};
}

inline double init_stddev(const InitSpec& spec, const Shape& shape) {
  const auto [fan_in, fan_out] = fans(shape);
  switch (spec.scheme) {
    case InitScheme::Xavier:
      return spec.gain * std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
    case InitScheme::XavierScaled:
      return spec.gain * std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
    case InitScheme::Kaiming:
      return spec.gain * std::sqrt(2.0 / static_cast<double>(fan_in));
    default:
      return 0.0;
  }
}

template <typename T>
Tensor<T> init_parameter(const InitSpec& spec, const Shape& shape, Rng& rng) {
  if (!(spec.gain > 0.0)) throw std::invalid_argument("init_parameter: gain must be positive");
  if (spec.scheme == InitScheme::Zeros) return Tensor<T>(shape, T(0), true);
  if (spec.scheme == InitScheme::Ones) return Tensor<T>(shape, T(1), true);
  const double sd = init_stddev(spec, shape);
  Tensor<T> t(shape, T(0), true);
  for (T& v : t.data()) v = static_cast<T>(sd * rng.normal());
  return t;
}

struct ScaledSizes {
  Index d_inner, d_key, d_value;
  friend bool operator==(const ScaledSizes&, const ScaledSizes&) = default;
};

/// Inner/key/value widths scaled in proportion to the 256-wide reference
/// layer (1024 inner, 64 key/value), rounded half-up.
inline ScaledSizes scaled_sizes(Index d) {
  if (d < 1) throw std::invalid_argument("scaled_sizes: width must be positive");
  auto scaled = [d](Index ref) {
    return std::max<Index>(1, (2 * ref * d + kReferenceWidth) / (2 * kReferenceWidth));
  };
  return {scaled(kReferenceInner), scaled(kReferenceKey), scaled(kReferenceKey)};
}

/// Owns every trainable tensor of a model under a stable name, in
/// creation order.
template <typename T>
class ParameterSet {
 public:
  explicit ParameterSet(std::uint64_t seed = 0) : rng_(seed) {}

  Tensor<T> create(const std::string& name, const Shape& shape, const InitSpec& spec) {
    if (index_.count(name)) throw std::invalid_argument("ParameterSet: duplicate parameter " + name);
    Tensor<T> t = init_parameter<T>(spec, shape, rng_);
    index_[name] = names_.size();
    names_.push_back(name);
    tensors_.push_back(t);
    return t;
  }

  std::size_t size() const { return tensors_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor<T>>& tensors() { return tensors_; }
  const std::vector<Tensor<T>>& tensors() const { return tensors_; }

  Tensor<T> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParameterSet: no parameter " + name);
    return tensors_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Index count() const {
    Index n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& t : tensors_) t.grad(), t.zero_grad();
  }

  Rng& rng() { return rng_; }

 private:
  Rng rng_;
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
  std::map<std::string, std::size_t> index_;
};

/// Forward-pass context: tape, dropout state and train/eval switch.
template <typename T>
struct Context {
  Tape<T>& tape;
  double keep = 1.0;
  Rng* rng = nullptr;

  Tensor<T> drop(const Tensor<T>& x) const { return keep < 1.0 ? dropout(tape, x, keep, *rng) : x; }
};

struct AttentionConfig {
  Index d_query = kReferenceWidth;
  Index d_kv = kReferenceWidth;
  Index heads = kHeads;
  Index d_key = kReferenceKey;
  Index d_value = kReferenceKey;

  static AttentionConfig for_widths(Index d_query, Index d_kv) {
    const auto sizes = scaled_sizes(d_query);
    return {d_query, d_kv, kHeads, sizes.d_key, sizes.d_value};
  }
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gain, bias;

  LayerNormParams() = default;
  LayerNormParams(ParameterSet<T>& ps, const std::string& name, Index d)
      : gain(ps.create(name + ".gain", {d}, InitSpec::ones())), bias(ps.create(name + ".bias", {d}, InitSpec::zeros())) {}

  Tensor<T> operator()(Tape<T>& tp, const Tensor<T>& x) const { return layer_norm(tp, x, gain, bias, T(1e-5)); }
};

/// Multi-head attention whose queries and keys/values may come from
/// streams of different width and length; output has the query width.
template <typename T>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterSet<T>& ps, const std::string& name, const AttentionConfig& cfg) : cfg_(cfg) {
    if (cfg.d_query < 1 || cfg.d_kv < 1 || cfg.heads < 1 || cfg.d_key < 1 || cfg.d_value < 1) {
      throw std::invalid_argument("MultiHeadAttention: widths must be positive");
    }
    const Index hk = cfg.heads * cfg.d_key, hv = cfg.heads * cfg.d_value;
    wq_ = ps.create(name + ".wq", {cfg.d_query, hk}, InitSpec::xavier());
    bq_ = ps.create(name + ".bq", {hk}, InitSpec::zeros());
    wk_ = ps.create(name + ".wk", {cfg.d_kv, hk}, InitSpec::xavier());
    bk_ = ps.create(name + ".bk", {hk}, InitSpec::zeros());
    wv_ = ps.create(name + ".wv", {cfg.d_kv, hv}, InitSpec::xavier());
    bv_ = ps.create(name + ".bv", {hv}, InitSpec::zeros());
    wo_ = ps.create(name + ".wo", {hv, cfg.d_query}, InitSpec::xavier_scaled());
    bo_ = ps.create(name + ".bo", {cfg.d_query}, InitSpec::zeros());
  }

  const AttentionConfig& config() const { return cfg_; }

  Tensor<T> operator()(const Context<T>& ctx, const Tensor<T>& q_in, const Tensor<T>& kv_in, const AttnMask& mask,
                       std::vector<T>* weights_out = nullptr) const {
    auto& tp = ctx.tape;
    auto q = linear(tp, q_in, wq_, bq_);
    auto k = linear(tp, kv_in, wk_, bk_);
    auto v = linear(tp, kv_in, wv_, bv_);
    auto a = attention(tp, q, k, v, cfg_.heads, mask, ctx.keep, ctx.rng, weights_out);
    return linear(tp, a, wo_, bo_);
  }

 private:
  AttentionConfig cfg_;
  Tensor<T> wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_;
};

/// linear(d -> d_inner) -> ReLU -> linear(d_inner -> d).
template <typename T>
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParameterSet<T>& ps, const std::string& name, Index d, Index d_inner)
      : w1_(ps.create(name + ".w1", {d, d_inner}, InitSpec::kaiming())),
        b1_(ps.create(name + ".b1", {d_inner}, InitSpec::zeros())),
        w2_(ps.create(name + ".w2", {d_inner, d}, InitSpec::xavier_scaled())),
        b2_(ps.create(name + ".b2", {d}, InitSpec::zeros())) {}

  Tensor<T> operator()(const Context<T>& ctx, const Tensor<T>& x) const {
    auto& tp = ctx.tape;
    return linear(tp, relu(tp, linear(tp, x, w1_, b1_)), w2_, b2_);
  }

 private:
  Tensor<T> w1_, b1_, w2_, b2_;
};

/// PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(same).
template <typename T>
Tensor<T> sinusoidal_encoding(Index n, Index d) {
  if (d % 2 != 0) throw std::invalid_argument("sinusoidal_encoding: width must be even, got " + std::to_string(d));
  Tensor<T> pe(Shape{n, d});
  T* p = pe.ptr();
  for (Index pos = 0; pos < n; ++pos) {
    for (Index i = 0; i < d / 2; ++i) {
      const double angle = static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d));
      p[pos * d + 2 * i] = static_cast<T>(std::sin(angle));
      p[pos * d + 2 * i + 1] = static_cast<T>(std::cos(angle));
    }
  }
  return pe;
}

/// Learned per-utterance offsets; indices at or beyond kMaxSegments share
/// the last row.
template <typename T>
class SegmentEmbedding {
 public:
  SegmentEmbedding() = default;
  SegmentEmbedding(ParameterSet<T>& ps, const std::string& name, Index d)
      : table_(ps.create(name, {kMaxSegments, d}, InitSpec::xavier())) {}

  bool enabled() const { return table_.defined(); }

  Tensor<T> operator()(Tape<T>& tp, std::span<const std::int32_t> utterance_ids, Shape prefix) const {
    std::vector<std::int32_t> clamped(utterance_ids.begin(), utterance_ids.end());
    for (auto& id : clamped) {
      if (id < 0) throw std::invalid_argument("segment_embedding: negative utterance index");
      id = std::min<std::int32_t>(id, kMaxSegments - 1);
    }
    return embedding_gather(tp, table_, clamped, std::move(prefix));
  }

  const Tensor<T>& table() const { return table_; }

 private:
  Tensor<T> table_;
};

/// Word embedding + sinusoidal positions (+ segments); pad rows zeroed.
template <typename T>
class TokenEmbedding {
 public:
  TokenEmbedding() = default;
  TokenEmbedding(ParameterSet<T>& ps, const std::string& name, Index vocab, Index d, bool segments)
      : d_(d), words_(ps.create(name + ".words", {vocab, d}, InitSpec::xavier())) {
    if (segments) segments_ = SegmentEmbedding<T>(ps, name + ".segments", d);
  }

  Index width() const { return d_; }
  Index vocab() const { return words_.dim(0); }

  /// ids, segment ids and valid flags are all [B * N], row-major.
  Tensor<T> operator()(const Context<T>& ctx, std::span<const std::int32_t> ids, std::span<const std::int32_t> seg,
                       std::span<const std::uint8_t> valid, Index batch, Index length) const {
    auto& tp = ctx.tape;
    auto x = embedding_gather(tp, words_, ids, Shape{batch, length});
    Tensor<T> pe(Shape{batch, length, d_});
    const auto table = sinusoidal_encoding<T>(length, d_);
    for (Index b = 0; b < batch; ++b) std::copy_n(table.ptr(), length * d_, pe.ptr() + b * length * d_);
    x = add(tp, x, pe);
    if (segments_.enabled() && !seg.empty()) x = add(tp, x, segments_(tp, seg, Shape{batch, length}));
    x = ctx.drop(x);
    return mask_rows(tp, x, valid);
  }

 private:
  Index d_ = 0;
  Tensor<T> words_;
  SegmentEmbedding<T> segments_;
};

}  // namespace unet
