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

// The 64-bit gradient suite shared by the `gradcheck` command and the tests.

#pragma once

#include <string>

#include "unet/grad_check.hpp"
#include "unet/models.hpp"

namespace unet {

struct GradSuiteEntry {
  std::string name;
  GradCheckReport report;
};

/// Central-difference step for the layer-level checks, where a 1e-5 step
/// leaves too few significant digits after a dozen chained matmuls.
inline constexpr double kLayerCheckEps = 1e-4;

/// The 0.01-gain output projections shrink every upstream gradient toward
/// rounding noise; scale them back to unit gain before checking.
inline void lift_small_gain(ParameterSet<double>& ps) {
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& name = ps.names()[i];
    if (name.ends_with(".wo") || name.ends_with(".w2"))
      for (auto& v : ps.tensors()[i].data()) v *= 100.0;
  }
}

namespace detail {

inline Tensor<double> normal_tensor(Shape shape, Rng& rng) {
  Tensor<double> t(std::move(shape));
  for (double& v : t.data()) v = rng.normal();
  return t;
}

}  // namespace detail

inline std::vector<GradSuiteEntry> primitive_grad_checks(std::uint64_t seed = 8) {
  using D = double;
  using detail::normal_tensor;
  Rng rng(seed);
  std::vector<GradSuiteEntry> out;
  auto add_entry = [&](std::string name, GradCheckReport rep) { out.push_back({std::move(name), std::move(rep)}); };

  {
    auto a = normal_tensor({3, 4}, rng), b = normal_tensor({3, 4}, rng), w = normal_tensor({3, 4}, rng);
    add_entry("add", grad_check([&](Tape<D>& t) { return weighted_sum(t, add(t, a, b), w); }, {a, b}));
    add_entry("sub", grad_check([&](Tape<D>& t) { return weighted_sum(t, sub(t, a, b), w); }, {a, b}));
    add_entry("mul", grad_check([&](Tape<D>& t) { return weighted_sum(t, mul(t, a, b), w); }, {a, b}));
    add_entry("scale", grad_check([&](Tape<D>& t) { return weighted_sum(t, scale(t, a, 0.7), w); }, {a}));
    add_entry("sum", grad_check([&](Tape<D>& t) { return sum(t, mul(t, a, a)); }, {a}));
    add_entry("mean", grad_check([&](Tape<D>& t) { return mean(t, mul(t, a, b)); }, {a, b}));
  }
  {
    auto a = normal_tensor({3, 4}, rng), b = normal_tensor({4, 5}, rng), w = normal_tensor({3, 5}, rng);
    add_entry("matmul", grad_check([&](Tape<D>& t) { return weighted_sum(t, matmul(t, a, b), w); }, {a, b}));
    auto x = normal_tensor({2, 3, 4}, rng), bias = normal_tensor({5}, rng), w3 = normal_tensor({2, 3, 5}, rng);
    add_entry("linear", grad_check([&](Tape<D>& t) { return weighted_sum(t, linear(t, x, b, bias), w3); }, {x, b, bias}));
  }
  {
    auto x = normal_tensor({3, 6}, rng), w = normal_tensor({3, 6}, rng);
    add_entry("softmax", grad_check([&](Tape<D>& t) { return weighted_sum(t, softmax(t, x, -1), w); }, {x}));
    auto wc = normal_tensor({3, 6}, rng);
    add_entry("softmax/axis0", grad_check([&](Tape<D>& t) { return weighted_sum(t, softmax(t, x, 0), wc); }, {x}));
  }
  {
    auto x = normal_tensor({4, 6}, rng), g = normal_tensor({6}, rng), b = normal_tensor({6}, rng);
    auto w = normal_tensor({4, 6}, rng);
    add_entry("layer_norm",
              grad_check([&](Tape<D>& t) { return weighted_sum(t, layer_norm(t, x, g, b), w); }, {x, g, b}));
  }
  {
    auto x = normal_tensor({2, 5, 3}, rng), k = normal_tensor({3, 3, 4}, rng), b = normal_tensor({4}, rng);
    auto w1 = normal_tensor({2, 5, 4}, rng), w2 = normal_tensor({2, 3, 4}, rng);
    add_entry("conv1d", grad_check([&](Tape<D>& t) { return weighted_sum(t, conv1d(t, x, k, b, 1), w1); }, {x, k, b}));
    add_entry("conv1d/stride2",
              grad_check([&](Tape<D>& t) { return weighted_sum(t, conv1d(t, x, k, b, 2), w2); }, {x, k, b}));
  }
  {
    // Distinct values keep every window away from ties.
    Tensor<D> x({7, 2});
    for (Index i = 0; i < x.size(); ++i) x.data()[i] = 0.37 * static_cast<double>((i * 5) % 14) - 2.0;
    auto w = normal_tensor({4, 2}, rng);
    add_entry("max_pool1d", grad_check([&](Tape<D>& t) { return weighted_sum(t, max_pool1d(t, x), w); }, {x}));
  }
  {
    auto x = normal_tensor({2, 3, 3}, rng), k = normal_tensor({3, 3, 2}, rng), b = normal_tensor({2}, rng);
    auto w = normal_tensor({2, 6, 2}, rng);
    add_entry("deconv1d", grad_check([&](Tape<D>& t) { return weighted_sum(t, deconv1d(t, x, k, b), w); }, {x, k, b}));
  }
  {
    auto x = normal_tensor({5, 4}, rng);
    std::vector<std::int32_t> tg{0, 3, -1, 2, 1};
    add_entry("cross_entropy", grad_check([&](Tape<D>& t) { return cross_entropy(t, x, tg); }, {x}));
  }
  {
    auto x = normal_tensor({6}, rng), w = normal_tensor({6}, rng);
    add_entry("sigmoid", grad_check([&](Tape<D>& t) { return weighted_sum(t, sigmoid(t, x), w); }, {x}));
    add_entry("tanh", grad_check([&](Tape<D>& t) { return weighted_sum(t, tanh(t, x), w); }, {x}));
    add_entry("relu", grad_check([&](Tape<D>& t) { return weighted_sum(t, relu(t, x), w); }, {x}));
  }
  {
    auto x = normal_tensor({2, 3, 4}, rng), y = normal_tensor({2, 3, 4}, rng), w = normal_tensor({2, 3, 4}, rng);
    std::vector<std::uint8_t> keep{1, 0, 1, 1, 1, 0};
    add_entry("mask_rows", grad_check([&](Tape<D>& t) { return weighted_sum(t, mask_rows(t, x, keep), w); }, {x}));
    add_entry("select_rows",
              grad_check([&](Tape<D>& t) { return weighted_sum(t, select_rows(t, keep, x, y), w); }, {x, y}));
    auto w2 = normal_tensor({2, 2, 4}, rng), ws = normal_tensor({2, 4}, rng);
    add_entry("crop_rows", grad_check([&](Tape<D>& t) { return weighted_sum(t, crop_rows(t, x, 2), w2); }, {x}));
    add_entry("take_step", grad_check([&](Tape<D>& t) { return weighted_sum(t, take_step(t, x, 1), ws); }, {x}));
    auto a = normal_tensor({2, 4}, rng), b = normal_tensor({2, 4}, rng), wst = normal_tensor({2, 2, 4}, rng);
    add_entry("stack_steps",
              grad_check([&](Tape<D>& t) { return weighted_sum(t, stack_steps(t, {a, b}), wst); }, {a, b}));
    add_entry("dropout", grad_check(
                             [&](Tape<D>& t) {
                               Rng r(9);  // same mask on every evaluation
                               return weighted_sum(t, dropout(t, x, 0.6, r), w);
                             },
                             {x}));
  }
  {
    auto table = normal_tensor({5, 3}, rng), w = normal_tensor({2, 2, 3}, rng);
    std::vector<std::int32_t> ids{4, 1, 1, 0};
    add_entry("embedding_gather",
              grad_check([&](Tape<D>& t) { return weighted_sum(t, embedding_gather(t, table, ids, {2, 2}), w); },
                         {table}));
  }
  {
    auto q = normal_tensor({2, 3, 4}, rng), k = normal_tensor({2, 5, 4}, rng), v = normal_tensor({2, 5, 6}, rng);
    auto w = normal_tensor({2, 3, 6}, rng);
    std::vector<std::uint8_t> kv{1, 1, 1, 0, 0, 1, 1, 1, 1, 1};
    auto mask = AttnMask::from_key_padding(kv, 2, 3, 5);
    add_entry("attention",
              grad_check([&](Tape<D>& t) { return weighted_sum(t, attention(t, q, k, v, 2, mask), w); }, {q, k, v}));
  }
  return out;
}

inline GradCheckReport feed_forward_grad_check() {
  ParameterSet<double> ps(4);
  FeedForward<double> ff(ps, "ff", 4, 6);
  Rng rng(5);
  auto x = detail::normal_tensor({2, 3, 4}, rng);
  auto w = detail::normal_tensor({2, 3, 4}, rng);
  lift_small_gain(ps);
  std::vector<Tensor<double>> inputs = ps.tensors();
  inputs.push_back(x);
  return grad_check(
      [&](Tape<double>& tp) {
        Context<double> ctx{tp};
        return weighted_sum(tp, ff(ctx, x), w);
      },
      inputs);
}

/// One encoder layer at d_base = 8 on a single unpadded sequence.
inline GradCheckReport encoder_layer_grad_check(const LayerSpec& spec, Index n_in, Index n_out, bool with_skip) {
  ParameterSet<double> ps(21);
  EncoderLayer<double> layer(ps, "layer", spec);
  lift_small_gain(ps);
  Rng rng(22);
  auto x = detail::normal_tensor({1, n_in, spec.d_in}, rng);
  auto w = detail::normal_tensor({1, n_out, spec.d_out}, rng);
  Tensor<double> skip;
  std::vector<Tensor<double>> inputs = ps.tensors();
  inputs.push_back(x);
  if (with_skip) {
    skip = detail::normal_tensor({1, n_out, spec.d_out}, rng);
    inputs.push_back(skip);
  }
  const auto in_mask = PadMask::all_valid(1, n_in), out_mask = PadMask::all_valid(1, n_out);
  return grad_check(
      [&](Tape<double>& tp) {
        Context<double> ctx{tp};
        return weighted_sum(tp, layer(ctx, x, in_mask, skip, out_mask), w);
      },
      inputs, kLayerCheckEps);
}

inline GradCheckReport down_layer_grad_check() { return encoder_layer_grad_check(build_schedule(8, 1)[0], 5, 3, false); }

/// Up layer whose deconvolution output (4) is cropped to an odd length (3).
inline GradCheckReport up_layer_grad_check() { return encoder_layer_grad_check(build_schedule(8, 2)[2], 2, 3, true); }

inline GradCheckReport encoder_grad_check(Index n = 6) {
  ParameterSet<double> ps(31);
  EncoderStack<double> enc(ps, "enc", build_schedule(8, 3));
  lift_small_gain(ps);
  Rng rng(32);
  auto x = detail::normal_tensor({1, n, 8}, rng);
  auto w = detail::normal_tensor({1, n, 8}, rng);
  std::vector<Tensor<double>> inputs = ps.tensors();
  inputs.push_back(x);
  const auto mask = PadMask::all_valid(1, n);
  return grad_check(
      [&](Tape<double>& tp) {
        Context<double> ctx{tp};
        return weighted_sum(tp, enc(ctx, x, mask).out(), w);
      },
      inputs, kLayerCheckEps);
}

inline GradCheckReport gru_unroll_grad_check(int steps = 3) {
  ParameterSet<double> ps(5);
  GruCell<double> cell(ps, "gru", 3, 4);
  Rng rng(6);
  std::vector<Tensor<double>> xs;
  for (int t = 0; t < steps; ++t) xs.push_back(detail::normal_tensor({2, 3}, rng));
  auto h0 = detail::normal_tensor({2, 4}, rng);
  auto w = detail::normal_tensor({2, 4}, rng);
  std::vector<Tensor<double>> inputs = ps.tensors();
  inputs.insert(inputs.end(), xs.begin(), xs.end());
  inputs.push_back(h0);
  return grad_check(
      [&](Tape<double>& tp) {
        Tensor<double> h = h0;
        for (const auto& x : xs) h = cell(tp, x, h);
        return weighted_sum(tp, h, w);
      },
      inputs);
}

/// Every check in order: primitives, feed-forward, down layer, up layer,
/// whole encoder (d_base = 8, N = 6), three-step GRU unroll.
inline std::vector<GradSuiteEntry> run_grad_suite() {
  auto out = primitive_grad_checks();
  for (auto& e : out) e.name = "primitive/" + e.name;
  out.push_back({"feed_forward", feed_forward_grad_check()});
  out.push_back({"down_layer", down_layer_grad_check()});
  out.push_back({"up_layer", up_layer_grad_check()});
  out.push_back({"encoder", encoder_grad_check()});
  out.push_back({"gru_unroll", gru_unroll_grad_check()});
  return out;
}

}  // namespace unet
