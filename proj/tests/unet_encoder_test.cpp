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

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "unet/grad_suite.hpp"
#include "unet/unet_encoder.hpp"

namespace unet {
namespace {

using testing::random_tensor;
using D = double;

std::vector<Index> widths(const LayerSchedule& s) {
  std::vector<Index> w;
  for (const auto& l : s) w.push_back(l.d_out);
  return w;
}

std::string failures(const GradCheckReport& rep) {
  std::string out;
  for (std::size_t i = 0; i < rep.max_rel_error.size(); ++i)
    if (!(rep.max_rel_error[i] < rep.tolerance)) out += "input " + std::to_string(i) + ": " + std::to_string(rep.max_rel_error[i]) + "\n";
  return out;
}

Tensor<D> zero_pads(Tensor<D> x, const PadMask& m) {
  const Index d = x.dim(-1);
  for (Index i = 0; i < m.batch * m.length; ++i)
    if (!m.valid[i]) std::fill_n(x.ptr() + i * d, d, 0.0);
  return x;
}

TEST(PadMask, FromLengths) {
  std::vector<Index> lens{3, 5};
  auto m = PadMask::from_lengths(lens, 5);
  EXPECT_EQ(m.valid, (std::vector<std::uint8_t>{1, 1, 1, 0, 0, 1, 1, 1, 1, 1}));
  EXPECT_EQ(m.count(0), 3);
  EXPECT_TRUE(m.is_pad(0, 3));
  std::vector<Index> zero{0};
  EXPECT_THROW(PadMask::from_lengths(zero, 2), std::invalid_argument);
}

TEST(PropagatePad, HandCases) {
  EXPECT_EQ(propagate_pad(PadMask::all_valid(1, 4)).valid, (std::vector<std::uint8_t>{1, 1}));
  PadMask m{1, 6, {1, 1, 1, 0, 0, 0}};
  EXPECT_EQ(propagate_pad(m).valid, (std::vector<std::uint8_t>{1, 1, 0}));
}

TEST(PropagatePad, MatchesWindowRuleForEveryMaskUpToLengthTen) {
  for (Index n = 1; n <= 10; ++n) {
    for (std::uint32_t bits = 0; bits < (1u << n); ++bits) {
      PadMask m{1, n, {}};
      std::vector<bool> is_pad;
      for (Index t = 0; t < n; ++t) {
        const bool pad = (bits >> t) & 1u;
        is_pad.push_back(pad);
        m.valid.push_back(pad ? 0 : 1);
      }
      const auto expected = testing::naive_pad_rule(is_pad);
      const bool vanishes = std::all_of(expected.begin(), expected.end(), [](bool p) { return p; });
      if (vanishes) {
        EXPECT_THROW(propagate_pad(m), std::invalid_argument);
        continue;
      }
      const auto out = propagate_pad(m);
      ASSERT_EQ(out.length, static_cast<Index>(expected.size()));
      for (std::size_t j = 0; j < expected.size(); ++j) ASSERT_EQ(out.valid[j] == 0, expected[j]) << n << " " << bits;
    }
  }
}

TEST(Schedule, ReferenceWidthsAndSizes) {
  const auto s = build_schedule();
  ASSERT_EQ(s.size(), 6u);
  EXPECT_EQ(widths(s), (std::vector<Index>{256, 362, 512, 362, 256, 256}));
  EXPECT_EQ(s[0].d_in, 256);
  EXPECT_EQ(s[3].d_in, 512);
  EXPECT_EQ(s[1].d_inner, 1448);
  EXPECT_EQ(s[2].d_key, 128);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(s[i].role, LayerRole::Down);
    EXPECT_TRUE(s[i].attends_pre_conv());
    EXPECT_EQ(s[i].skip_from, -1);
  }
  EXPECT_EQ(s[3].skip_from, 2);
  EXPECT_EQ(s[4].skip_from, 1);
  EXPECT_EQ(s[5].skip_from, 0);
  EXPECT_FALSE(s[3].attends_pre_conv());
  EXPECT_EQ((std::vector<Index>{s[0].out_divisor, s[1].out_divisor, s[2].out_divisor, s[3].out_divisor,
                                s[4].out_divisor, s[5].out_divisor}),
            (std::vector<Index>{2, 4, 8, 4, 2, 1}));
}

TEST(Schedule, OtherDepthsAndBases) {
  EXPECT_EQ(widths(build_schedule(128, 3)), (std::vector<Index>{128, 181, 256, 181, 128, 128}));
  EXPECT_EQ(widths(build_schedule(128, 2)), (std::vector<Index>{128, 181, 128, 128}));
  const auto flat = build_schedule(64, 0, 4);
  ASSERT_EQ(flat.size(), 4u);
  for (const auto& l : flat) {
    EXPECT_EQ(l.role, LayerRole::Flat);
    EXPECT_FALSE(l.conv);
    EXPECT_EQ(l.d_out, 64);
  }
}

TEST(Schedule, LengthsFor150) {
  EXPECT_EQ(layer_lengths(build_schedule(), 150), (std::vector<Index>{150, 75, 38, 19, 38, 75, 150}));
  EXPECT_EQ(layer_lengths(build_schedule(), 7), (std::vector<Index>{7, 4, 2, 1, 2, 4, 7}));
  EXPECT_EQ(layer_lengths(build_schedule(), 1), (std::vector<Index>{1, 1, 1, 1, 1, 1, 1}));
}

TEST(Costs, DenseTermStaysWithinTwoFoldAcrossDownLevels) {
  const auto s = build_schedule();
  const auto c = estimate_costs(s, 150);
  ASSERT_EQ(c.size(), 6u);
  double lo = 1e300, hi = 0.0;
  for (int i = 0; i < 3; ++i) {
    lo = std::min(lo, c[i].nd2);
    hi = std::max(hi, c[i].nd2);
  }
  EXPECT_LE(hi / lo, 2.0);
  // nd2 is N d^2 of the layer's output: 75 * 256^2 at layer 1.
  EXPECT_DOUBLE_EQ(c[0].nd2, 75.0 * 256 * 256);
  EXPECT_DOUBLE_EQ(c[2].n2d, 19.0 * 19 * 512);
}

TEST(Costs, ScaleAsNdSquaredPlusNSquaredD) {
  const auto s = build_schedule(64, 0, 1);
  const auto small = estimate_costs(s, 100)[0], big = estimate_costs(s, 200)[0];
  EXPECT_DOUBLE_EQ(big.dense_ops / small.dense_ops, 2.0);
  EXPECT_DOUBLE_EQ(big.attention_ops / small.attention_ops, 4.0);
  const auto wide = estimate_costs(build_schedule(128, 0, 1), 100)[0];
  EXPECT_DOUBLE_EQ(wide.dense_ops / small.dense_ops, 4.0);
  EXPECT_DOUBLE_EQ(wide.attention_ops / small.attention_ops, 2.0);
}

TEST(EncoderLayer, RejectsWidthChangeWithoutConv) {
  ParameterSet<D> ps;
  LayerSpec s{LayerRole::Flat, Resample::None, false, -1, 8, 16};
  EXPECT_THROW(EncoderLayer<D>(ps, "l", s), std::invalid_argument);
}

TEST(EncoderLayer, RejectsMismatchedSkip) {
  ParameterSet<D> ps(1);
  auto spec = build_schedule(8, 1)[1];  // up layer 11 -> 8
  EncoderLayer<D> layer(ps, "up", spec);
  Rng rng(2);
  Tape<D> tp(false);
  Context<D> ctx{tp};
  auto x = random_tensor({1, 2, spec.d_in}, rng);
  auto skip = random_tensor({1, 4, 9}, rng);
  EXPECT_THROW(layer(ctx, x, PadMask::all_valid(1, 2), skip, PadMask::all_valid(1, 4)), std::invalid_argument);
}

TEST(EncoderLayer, FreshPostNormLayerIsNearLayerNorm) {
  ParameterSet<D> ps(3);
  const auto spec = build_schedule(256, 0, 1)[0];
  EncoderLayer<D> layer(ps, "flat", spec);
  Rng rng(4);
  auto x = random_tensor({1, 10, 256}, rng);
  Tape<D> tp(false);
  Context<D> ctx{tp};
  const auto mask = PadMask::all_valid(1, 10);
  auto y = layer(ctx, x, mask, {}, mask);
  auto ref = layer_norm(tp, x, Tensor<D>({256}, 1.0), Tensor<D>({256}, 0.0));
  double dot = 0, ny = 0, nr = 0;
  for (Index i = 0; i < y.size(); ++i) {
    dot += y[i] * ref[i];
    ny += y[i] * y[i];
    nr += ref[i] * ref[i];
  }
  EXPECT_GT(dot / std::sqrt(ny * nr), 0.99);
}

TEST(EncoderGrad, DownLayer) {
  auto rep = down_layer_grad_check();
  EXPECT_TRUE(rep.passed) << failures(rep);
}

TEST(EncoderGrad, UpLayerWithOddCrop) {
  auto rep = up_layer_grad_check();
  EXPECT_TRUE(rep.passed) << failures(rep);
}

TEST(EncoderGrad, WholeEncoderAtBaseWidthEight) {
  auto rep = encoder_grad_check(6);
  EXPECT_TRUE(rep.passed) << failures(rep);
}

TEST(EncoderStack, ShapesAtReferenceWidth) {
  ParameterSet<float> ps(41);
  EncoderStack<float> enc(ps, "enc", build_schedule());
  Rng rng(42);
  for (Index n : {1, 7, 16, 50, 150}) {
    Tape<float> tp(false);
    Context<float> ctx{tp};
    auto out = enc(ctx, testing::random_tensor_t<float>({1, n, 256}, rng), PadMask::all_valid(1, n));
    EXPECT_EQ(out.out().shape(), (Shape{1, n, 256}));
    if (n == 150) {
      std::vector<Index> lens, ws;
      for (std::size_t i = 1; i < out.levels.size(); ++i) {
        lens.push_back(out.levels[i].dim(1));
        ws.push_back(out.levels[i].dim(2));
      }
      EXPECT_EQ(lens, (std::vector<Index>{75, 38, 19, 38, 75, 150}));
      EXPECT_EQ(ws, (std::vector<Index>{256, 362, 512, 362, 256, 256}));
    }
  }
}

TEST(EncoderStack, PadContentNeverLeaksIntoRealPositions) {
  ParameterSet<D> ps(51);
  EncoderStack<D> enc(ps, "enc", build_schedule(16, 3));
  Rng rng(52);
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 4 + static_cast<Index>(rng.below(13));
    std::vector<Index> lens{1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(n))), n};
    const auto mask = PadMask::from_lengths(lens, n);
    auto x = zero_pads(random_tensor({2, n, 16}, rng), mask);
    Tape<D> tp(false);
    Context<D> ctx{tp};
    auto base = enc(ctx, x, mask);
    auto noisy = x.clone();
    for (Index i = 0; i < 2 * n; ++i)
      if (!mask.valid[i])
        for (Index k = 0; k < 16; ++k) noisy.ptr()[i * 16 + k] = 1e3 * rng.normal();
    auto pert = enc(ctx, noisy, mask);
    for (std::size_t lvl = 1; lvl < base.levels.size(); ++lvl) {
      const auto& m = base.masks[lvl];
      const Index d = base.levels[lvl].dim(2);
      for (Index i = 0; i < m.batch * m.length; ++i) {
        for (Index k = 0; k < d; ++k) {
          const double a = base.levels[lvl][i * d + k], b = pert.levels[lvl][i * d + k];
          if (m.valid[i]) {
            ASSERT_EQ(a, b) << "trial " << trial << " level " << lvl;
          } else {
            ASSERT_EQ(a, 0.0);
            ASSERT_EQ(b, 0.0);
          }
        }
      }
    }
  }
}

TEST(EncoderStack, BatchRowsAreIndependent) {
  ParameterSet<D> ps(61);
  EncoderStack<D> enc(ps, "enc", build_schedule(16, 3));
  Rng rng(62);
  auto x = random_tensor({2, 9, 16}, rng);
  Tape<D> tp(false);
  Context<D> ctx{tp};
  auto both = enc(ctx, x, PadMask::all_valid(2, 9)).out();
  Tensor<D> first({1, 9, 16}, std::vector<D>(x.data().begin(), x.data().begin() + 9 * 16));
  auto alone = enc(ctx, first, PadMask::all_valid(1, 9)).out();
  for (Index i = 0; i < 9 * 16; ++i) EXPECT_NEAR(both[i], alone[i], 1e-12);
}

}  // namespace
}  // namespace unet
