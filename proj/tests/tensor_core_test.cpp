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
#include "unet/grad_check.hpp"
#include "unet/sequence_ops.hpp"

namespace unet {
namespace {

using testing::random_tensor;
using D = double;

std::vector<double> values(const Tensor<D>& t) { return {t.data().begin(), t.data().end()}; }

TEST(Matmul, IdentityAndHandProduct) {
  Tape<D> tp;
  Tensor<D> eye({2, 2}, {1, 0, 0, 1});
  Tensor<D> m({2, 2}, {2, 3, 4, 5});
  EXPECT_EQ(values(matmul(tp, eye, m)), (std::vector<double>{2, 3, 4, 5}));
  Tensor<D> row({1, 2}, {1, 2});
  Tensor<D> col({2, 1}, {3, 4});
  EXPECT_EQ(matmul(tp, row, col).item(), 11.0);
}

TEST(Matmul, ShapeMismatchReportsBothShapes) {
  Tape<D> tp;
  Tensor<D> a({2, 3}), b({2, 2});
  try {
    matmul(tp, a, b);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[2,2]"), std::string::npos);
  }
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
  Rng rng(1);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  a.set_requires_grad(true);
  Tape<D> tp;
  tp.backward(sum(tp, matmul(tp, a, b)));
  for (Index i = 0; i < 3; ++i)
    for (Index k = 0; k < 4; ++k) EXPECT_NEAR(a.grad()[i * 4 + k], b[k * 2] + b[k * 2 + 1], 1e-12);
  auto rep = grad_check([&](Tape<D>& t) { return sum(t, matmul(t, a, b)); }, {a, b});
  EXPECT_TRUE(rep.passed) << rep.worst();
}

TEST(Softmax, HandValues) {
  Tape<D> tp;
  EXPECT_EQ(values(softmax(tp, Tensor<D>({2}, {0, 0}))), (std::vector<double>{0.5, 0.5}));
  auto p = softmax(tp, Tensor<D>({2}, {0, std::log(3.0)}));
  EXPECT_NEAR(p[0], 0.25, 1e-15);
  EXPECT_NEAR(p[1], 0.75, 1e-15);
  auto big = softmax(tp, Tensor<D>({2}, {1000, 0}));
  EXPECT_TRUE(std::isfinite(big[0]) && std::isfinite(big[1]));
  EXPECT_NEAR(big[0], 1.0, 1e-15);
  EXPECT_LT(big[1], 1e-300 + 1e-200);
}

TEST(Softmax, RowsSumToOneAlongAnyAxis) {
  Rng rng(2);
  auto x = random_tensor({3, 4, 5}, rng, 10.0);
  for (Index axis = 0; axis < 3; ++axis) {
    Tape<D> tp;
    auto y = softmax(tp, x, axis);
    const Index stride = axis == 0 ? 20 : axis == 1 ? 5 : 1;
    const Index n = x.dim(axis);
    for (Index base = 0; base < 60; ++base) {
      if ((base / stride) % n != 0) continue;
      double s = 0.0;
      for (Index i = 0; i < n; ++i) s += y[base + i * stride];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Conv1d, HandExamples) {
  Tape<D> tp;
  Tensor<D> x({4, 1}, {1, 2, 3, 4});
  EXPECT_EQ(values(conv1d(tp, x, Tensor<D>({3, 1, 1}, {1, 1, 1}), Tensor<D>())), (std::vector<double>{3, 6, 9, 7}));
  EXPECT_EQ(values(conv1d(tp, x, Tensor<D>({3, 1, 1}, {0, 1, 0}), Tensor<D>())), (std::vector<double>{1, 2, 3, 4}));
  Tensor<D> zero({4, 1});
  EXPECT_EQ(values(conv1d(tp, zero, Tensor<D>({3, 1, 1}, {1, 2, 3}), Tensor<D>({1}, {0.5}))),
            (std::vector<double>(4, 0.5)));
}

TEST(Conv1d, RejectsOtherKernelSizes) {
  Tape<D> tp;
  EXPECT_THROW(conv1d(tp, Tensor<D>({4, 1}), Tensor<D>({5, 1, 1}), Tensor<D>()), std::invalid_argument);
}

TEST(Conv1d, MatchesNaiveOracleBothStrides) {
  Rng rng(3);
  for (Index stride : {1, 2})
    for (Index n : {1, 2, 5, 8}) {
      auto x = random_tensor({2, n, 3}, rng);
      auto w = random_tensor({3, 3, 4}, rng);
      auto b = random_tensor({4}, rng);
      Tape<D> tp;
      auto y = conv1d(tp, x, w, b, stride);
      const Index m = stride == 1 ? n : (n + 1) / 2;
      ASSERT_EQ(y.shape(), (Shape{2, m, 4}));
      for (Index bi = 0; bi < 2; ++bi) {
        std::vector<double> xb(x.data().begin() + bi * n * 3, x.data().begin() + (bi + 1) * n * 3);
        auto ref = testing::naive_conv1d(xb, n, 3, values(w), 4, values(b), stride);
        for (Index i = 0; i < m * 4; ++i) EXPECT_NEAR(y[bi * m * 4 + i], ref[i], 1e-12);
      }
    }
}

TEST(MaxPool1d, HandExamples) {
  Tape<D> tp;
  EXPECT_EQ(values(max_pool1d(tp, Tensor<D>({5, 1}, {1, 5, 2, 4, 3}))), (std::vector<double>{5, 5, 4}));
  EXPECT_EQ(values(max_pool1d(tp, Tensor<D>({6, 1}, 2.5))), (std::vector<double>(3, 2.5)));
  auto one = max_pool1d(tp, Tensor<D>({1, 1}, {-7}));
  EXPECT_EQ(one.shape(), (Shape{1, 1}));
  EXPECT_EQ(one.item(), -7);
}

TEST(MaxPool1d, MatchesNaiveOracleAndTiesGoToLowestIndex) {
  Rng rng(4);
  for (Index n : {1, 2, 3, 7, 10}) {
    auto x = random_tensor({n, 3}, rng);
    Tape<D> tp;
    auto y = max_pool1d(tp, x);
    EXPECT_EQ(values(y), testing::naive_max_pool(values(x), n, 3));
  }
  Tensor<D> ties({3, 1}, {2, 2, 2}, true);
  Tape<D> tp;
  tp.backward(sum(tp, max_pool1d(tp, ties)));
  // Window {0,1} -> index 0; window {1,2} -> index 1.
  EXPECT_EQ(values(Tensor<D>({3}, {ties.grad()[0], ties.grad()[1], ties.grad()[2]})),
            (std::vector<double>{1, 1, 0}));
}

TEST(MaxPool1d, InvalidPositionsActAsEdgePadding) {
  Tape<D> tp;
  Tensor<D> x({4, 1}, {1, 9, 8, 100});
  std::vector<std::uint8_t> valid{1, 1, 1, 0};
  EXPECT_EQ(values(max_pool1d(tp, x, valid)), (std::vector<double>{9, 9}));
}

TEST(Deconv1d, HandExamplesAndLength) {
  Tape<D> tp;
  EXPECT_EQ(values(deconv1d(tp, Tensor<D>({2, 1}, {1, 2}), Tensor<D>({3, 1, 1}, {1, 1, 1}))),
            (std::vector<double>{1, 3, 2, 2}));
  EXPECT_EQ(values(deconv1d(tp, Tensor<D>({3, 2}), Tensor<D>({3, 2, 2}, 1.0))), (std::vector<double>(12, 0.0)));
  for (Index m : {1, 2, 5, 19}) {
    EXPECT_EQ(deconv1d(tp, Tensor<D>({m, 2}, 1.0), Tensor<D>({3, 2, 3}, 1.0)).shape(), (Shape{2 * m, 3}));
  }
}

TEST(Deconv1d, MatchesNaiveOracle) {
  Rng rng(5);
  for (Index m : {1, 3, 6}) {
    auto x = random_tensor({m, 3}, rng);
    auto w = random_tensor({3, 3, 2}, rng);
    Tape<D> tp;
    auto y = deconv1d(tp, x, w);
    auto ref = testing::naive_deconv1d(values(x), m, 3, values(w), 2);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[static_cast<Index>(i)], ref[i], 1e-12);
  }
}

// Forward of deconv1d equals the input-gradient of a stride-2 conv1d whose
// taps are the transposed deconv taps.
TEST(Deconv1d, IsAdjointOfStrideTwoConv) {
  Rng rng(6);
  for (Index m : {1, 2, 5, 9}) {
    auto x = random_tensor({m, 4}, rng);
    auto w = random_tensor({3, 4, 3}, rng);
    Tensor<D> wt({3, 3, 4});
    for (Index r = 0; r < 3; ++r)
      for (Index i = 0; i < 4; ++i)
        for (Index o = 0; o < 3; ++o) wt.data()[(r * 3 + o) * 4 + i] = w[(r * 4 + i) * 3 + o];
    Tensor<D> probe({2 * m, 3}, 0.0, true);
    Tape<D> tp;
    auto y = conv1d(tp, probe, wt, Tensor<D>(), 2);
    ASSERT_EQ(y.shape(), (Shape{m, 4}));
    tp.backward(weighted_sum(tp, y, x));
    Tape<D> plain(false);
    auto d = deconv1d(plain, x, w);
    for (Index i = 0; i < d.size(); ++i) EXPECT_NEAR(d[i], probe.grad()[i], 1e-10);
  }
}

TEST(Primitives, ReluLayerNormCrossEntropy) {
  Tape<D> tp;
  EXPECT_EQ(values(relu(tp, Tensor<D>({2}, {-2, 3}))), (std::vector<double>{0, 3}));
  auto ln = layer_norm(tp, Tensor<D>({1, 4}, 7.0), Tensor<D>({4}, 1.0), Tensor<D>({4}, 0.0));
  for (double v : ln.data()) EXPECT_EQ(v, 0.0);
  for (std::int32_t target : {0, 1, 2, 3}) {
    EXPECT_NEAR(cross_entropy_row(tp, Tensor<D>({4}, 0.25), target).item(), std::log(4.0), 1e-12);
  }
}

TEST(Primitives, DropoutScalesSurvivors) {
  Rng rng(7);
  Tape<D> tp;
  Tensor<D> x({1000}, 1.0);
  auto y = dropout(tp, x, 0.8, rng);
  int kept = 0;
  for (double v : y.data()) {
    EXPECT_TRUE(v == 0.0 || std::abs(v - 1.25) < 1e-12);
    kept += v != 0.0;
  }
  EXPECT_NEAR(kept / 1000.0, 0.8, 0.05);
  EXPECT_TRUE(dropout(tp, x, 1.0, rng).same(x));
}

TEST(Primitives, EmbeddingGatherRejectsOutOfRangeIds) {
  Tape<D> tp;
  Tensor<D> table({5, 2});
  std::vector<std::int32_t> ids{1, 7};
  try {
    embedding_gather(tp, table, ids, Shape{2});
    FAIL();
  } catch (const std::out_of_range& e) {
    EXPECT_NE(std::string(e.what()).find("7"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("5"), std::string::npos);
  }
}

TEST(Primitives, EmbeddingBackwardAccumulatesRows) {
  Tensor<D> table({3, 2}, 0.0, true);
  std::vector<std::int32_t> ids{2, 0, 2};
  Tape<D> tp;
  tp.backward(sum(tp, embedding_gather(tp, table, ids, Shape{3})));
  EXPECT_EQ(values(Tensor<D>({6}, std::vector<double>(table.grad().begin(), table.grad().end()))),
            (std::vector<double>{1, 1, 0, 0, 2, 2}));
}

TEST(Backward, HandGradients) {
  Tensor<D> x({2, 3}, 1.5, true);
  {
    Tape<D> tp;
    tp.backward(sum(tp, x));
    for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  }
  Tensor<D> y({2}, {1, 2}, true);
  Tensor<D> unused({2}, 1.0, true);
  Tape<D> tp;
  tp.backward(sum(tp, mul(tp, y, y)));
  EXPECT_EQ(y.grad()[0], 2.0);
  EXPECT_EQ(y.grad()[1], 4.0);
  for (double g : unused.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  Tensor<D> x({2}, 1.0, true);
  Tape<D> tp;
  auto y = scale(tp, x, 2.0);
  EXPECT_THROW(tp.backward(y), std::invalid_argument);
}

TEST(Backward, VisitsEachRecordOnce) {
  Tensor<D> x({1}, 3.0, true);
  Tape<D> tp;
  auto y = mul(tp, x, x);
  auto z = add(tp, y, y);
  EXPECT_EQ(tp.size(), 2u);
  tp.backward(sum(tp, z));
  EXPECT_EQ(tp.size(), 0u);
  EXPECT_EQ(x.grad()[0], 12.0);
}

TEST(GradCheck, SquareAtThreePasses) {
  Tensor<D> x({1}, 3.0);
  auto rep = grad_check([&](Tape<D>& tp) { return sum(tp, mul(tp, x, x)); }, {x});
  EXPECT_TRUE(rep.passed);
  EXPECT_NEAR(x.grad()[0], 6.0, 1e-12);
}

TEST(GradCheck, PrimitivesPassOnRandomInputs) {
  Rng rng(8);
  auto check = [](const char* name, const GradCheckReport& rep) {
    EXPECT_TRUE(rep.passed) << name << " worst " << rep.worst();
  };
  {
    auto a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng), w = random_tensor({3, 5}, rng);
    check("matmul", grad_check([&](Tape<D>& t) { return weighted_sum(t, matmul(t, a, b), w); }, {a, b}));
  }
  {
    auto x = random_tensor({3, 6}, rng), w = random_tensor({3, 6}, rng);
    check("softmax", grad_check([&](Tape<D>& t) { return weighted_sum(t, softmax(t, x, -1), w); }, {x}));
  }
  {
    auto x = random_tensor({4, 6}, rng), g = random_tensor({6}, rng), b = random_tensor({6}, rng);
    auto w = random_tensor({4, 6}, rng);
    check("layer_norm", grad_check([&](Tape<D>& t) { return weighted_sum(t, layer_norm(t, x, g, b), w); }, {x, g, b}));
  }
  {
    auto x = random_tensor({2, 5, 3}, rng), k = random_tensor({3, 3, 4}, rng), b = random_tensor({4}, rng);
    auto w1 = random_tensor({2, 5, 4}, rng), w2 = random_tensor({2, 3, 4}, rng);
    check("conv1d", grad_check([&](Tape<D>& t) { return weighted_sum(t, conv1d(t, x, k, b, 1), w1); }, {x, k, b}));
    check("conv1d/2", grad_check([&](Tape<D>& t) { return weighted_sum(t, conv1d(t, x, k, b, 2), w2); }, {x, k, b}));
  }
  {
    // Distinct values keep every window away from ties.
    Tensor<D> x({7, 2});
    for (Index i = 0; i < x.size(); ++i) x.data()[i] = 0.37 * static_cast<double>((i * 5) % 14) - 2.0;
    auto w = random_tensor({4, 2}, rng);
    check("max_pool1d", grad_check([&](Tape<D>& t) { return weighted_sum(t, max_pool1d(t, x), w); }, {x}));
  }
  {
    auto x = random_tensor({2, 3, 3}, rng), k = random_tensor({3, 3, 2}, rng), b = random_tensor({2}, rng);
    auto w = random_tensor({2, 6, 2}, rng);
    check("deconv1d", grad_check([&](Tape<D>& t) { return weighted_sum(t, deconv1d(t, x, k, b), w); }, {x, k, b}));
  }
  {
    auto x = random_tensor({5, 4}, rng);
    std::vector<std::int32_t> tg{0, 3, -1, 2, 1};
    check("cross_entropy", grad_check([&](Tape<D>& t) { return cross_entropy(t, x, tg); }, {x}));
  }
  {
    auto x = random_tensor({6}, rng), w = random_tensor({6}, rng);
    check("sigmoid", grad_check([&](Tape<D>& t) { return weighted_sum(t, sigmoid(t, x), w); }, {x}));
    check("tanh", grad_check([&](Tape<D>& t) { return weighted_sum(t, tanh(t, x), w); }, {x}));
    check("relu", grad_check([&](Tape<D>& t) { return weighted_sum(t, relu(t, x), w); }, {x}));
  }
  {
    auto q = random_tensor({2, 3, 4}, rng), k = random_tensor({2, 5, 4}, rng), v = random_tensor({2, 5, 6}, rng);
    auto w = random_tensor({2, 3, 6}, rng);
    std::vector<std::uint8_t> kv{1, 1, 1, 0, 0, 1, 1, 1, 1, 1};
    auto mask = AttnMask::from_key_padding(kv, 2, 3, 5);
    check("attention",
          grad_check([&](Tape<D>& t) { return weighted_sum(t, attention(t, q, k, v, 2, mask), w); }, {q, k, v}));
  }
}

// Identity on the forward pass whose backward negates the incoming gradient.
Tensor<D> flip_gradient(Tape<D>& tp, const Tensor<D>& x) {
  Tensor<D> out = tp.output(x.shape(), {&x});
  std::copy(x.data().begin(), x.data().end(), out.data().begin());
  tp.record("flip", out, [x, out]() mutable {
    auto gx = x.grad();
    auto gy = out.grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] -= gy[i];
  });
  return out;
}

TEST(GradCheck, CorruptedConvBackwardFails) {
  Rng rng(9);
  auto x = random_tensor({5, 2}, rng), k = random_tensor({3, 2, 2}, rng), w = random_tensor({5, 2}, rng);
  auto rep = grad_check(
      [&](Tape<D>& t) { return weighted_sum(t, conv1d(t, flip_gradient(t, x), k, Tensor<D>()), w); }, {x});
  EXPECT_FALSE(rep.passed);
}

TEST(Attention, MatchesNaiveOracleWithMask) {
  Rng rng(10);
  auto q = random_tensor({3, 4}, rng), k = random_tensor({5, 4}, rng), v = random_tensor({5, 2}, rng);
  std::vector<std::uint8_t> allowed(15, 1);
  allowed[4] = 0;
  allowed[5 + 0] = 0;
  AttnMask mask{1, 3, 5, allowed};
  Tape<D> tp;
  std::vector<double> weights;
  auto y = attention(tp, q, k, v, 1, mask, 1.0, nullptr, &weights);
  auto ref = testing::naive_attention(values(q), 3, values(k), values(v), 5, 4, 2, allowed);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[static_cast<Index>(i)], ref[i], 1e-12);
  for (Index i = 0; i < 3; ++i) {
    double s = 0.0;
    for (Index j = 0; j < 5; ++j) s += weights[i * 5 + j];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_EQ(weights[4], 0.0);
  EXPECT_EQ(weights[5], 0.0);
}

TEST(Attention, FullyMaskedRowIsRejected) {
  Tape<D> tp;
  Tensor<D> q({1, 2}), k({2, 2}), v({2, 2});
  AttnMask mask{1, 1, 2, {0, 0}};
  EXPECT_THROW(attention(tp, q, k, v, 1, mask), std::invalid_argument);
}

TEST(Rng, SameSeedSameSequence) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) {
    EXPECT_EQ(a.next_u64(), b.next_u64());
    EXPECT_EQ(a.normal(), b.normal());
  }
  Rng c(42);
  c.normal();
  Rng d(0);
  d.set_state(c.state());
  EXPECT_EQ(c.normal(), d.normal());
  EXPECT_EQ(c.uniform(), d.uniform());
}

TEST(Invariants, ForwardOutputsFiniteOnFiniteInputs) {
  Rng rng(11);
  auto x = random_tensor({2, 9, 4}, rng, 50.0);
  auto k = random_tensor({3, 4, 4}, rng, 10.0);
  Tape<D> tp;
  for (const auto& y : {conv1d(tp, x, k, Tensor<D>()), max_pool1d(tp, x), deconv1d(tp, x, k), softmax(tp, x, 1),
                        layer_norm(tp, x, Tensor<D>({4}, 1.0), Tensor<D>({4}, 0.0))}) {
    for (double v : y.data()) EXPECT_TRUE(std::isfinite(v));
  }
}

}  // namespace
}  // namespace unet
