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

// Token-axis kernels over [B, N, d] (or unbatched [N, d]) activations:
// k=3 convolution, k=3/stride-2 max pooling, stride-2 transposed
// convolution and masked scaled dot-product attention.

#pragma once

#include "unet/tensor.hpp"

namespace unet {

inline constexpr Index kKernel = 3;

/// Output length of a k=3, stride-2 window with one position of padding.
inline Index pooled_length(Index n) { return (n + 1) / 2; }

namespace detail {

struct SeqDims {
  Index batch, length, width;
  bool batched;
};

template <typename T>
SeqDims seq_dims(std::string_view op, const Tensor<T>& x) {
  if (x.rank() == 2) return {1, x.dim(0), x.dim(1), false};
  if (x.rank() == 3) return {x.dim(0), x.dim(1), x.dim(2), true};
  throw std::invalid_argument(std::string(op) + ": expected [N,d] or [B,N,d], got " + to_string(x.shape()));
}

inline Shape seq_shape(const SeqDims& s, Index length, Index width) {
  return s.batched ? Shape{s.batch, length, width} : Shape{length, width};
}

}  // namespace detail

/// y[j] = sum_r x[stride*j + r - 1] . w[r] + bias, zero outside [0, N).
/// Output length is N for stride 1 and ceil(N/2) for stride 2.
template <typename T>
Tensor<T> conv1d(Tape<T>& tp, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, Index stride = 1) {
  const auto s = detail::seq_dims("conv1d", x);
  if (w.rank() != 3 || w.dim(0) != kKernel) {
    throw std::invalid_argument("conv1d: only kernel size 3 is supported, weight shape " + to_string(w.shape()));
  }
  if (w.dim(1) != s.width) {
    throw std::invalid_argument("conv1d: input " + to_string(x.shape()) + " vs weight " + to_string(w.shape()));
  }
  if (stride != 1 && stride != 2) throw std::invalid_argument("conv1d: stride must be 1 or 2");
  const Index din = s.width, dout = w.dim(2), n = s.length;
  const Index m = stride == 1 ? n : pooled_length(n);
  if (bias.defined() && bias.size() != dout) throw std::invalid_argument("conv1d: bias width mismatch");
  Tensor<T> out = tp.output(detail::seq_shape(s, m, dout), {&x, &w, &bias});

  // Output rows j whose tap r lands inside the input: contiguous range.
  auto tap_range = [=](Index r) {
    Index lo = 0;
    while (lo < m && stride * lo + r - 1 < 0) ++lo;
    Index hi = m;
    while (hi > lo && stride * (hi - 1) + r - 1 >= n) --hi;
    return std::pair{lo, hi};
  };

  for (Index b = 0; b < s.batch; ++b) {
    const T* xb = x.ptr() + b * n * din;
    auto yb = mat(out.ptr() + b * m * dout, m, dout);
    if (bias.defined()) {
      yb.rowwise() = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.ptr(), dout);
    }
    for (Index r = 0; r < kKernel; ++r) {
      auto [lo, hi] = tap_range(r);
      if (hi <= lo) continue;
      const Index t0 = stride * lo + r - 1;
      yb.middleRows(lo, hi - lo).noalias() +=
          mat(xb + t0 * din, hi - lo, din, stride * din) * mat(w.ptr() + r * din * dout, din, dout);
    }
  }
  tp.record("conv1d", out, [x, w, bias, out, s, din, dout, n, m, stride, tap_range]() mutable {
    for (Index b = 0; b < s.batch; ++b) {
      auto gy = mat(out.grad().data() + b * m * dout, m, dout);
      const T* xb = x.ptr() + b * n * din;
      if (bias.defined() && bias.requires_grad()) {
        unet::detail::add_column_sums(bias.grad().data(), out.grad().data() + b * m * dout, m, dout);
      }
      for (Index r = 0; r < kKernel; ++r) {
        auto [lo, hi] = tap_range(r);
        if (hi <= lo) continue;
        const Index t0 = stride * lo + r - 1;
        auto gy_rows = gy.middleRows(lo, hi - lo);
        if (x.requires_grad()) {
          mat(x.grad().data() + b * n * din + t0 * din, hi - lo, din, stride * din).noalias() +=
              gy_rows * mat(w.ptr() + r * din * dout, din, dout).transpose();
        }
        if (w.requires_grad()) {
          mat(w.grad().data() + r * din * dout, din, dout).noalias() +=
              mat(xb + t0 * din, hi - lo, din, stride * din).transpose() * gy_rows;
        }
      }
    }
  });
  return out;
}

/// Stride-2 transposed convolution: scatters x[j] . w[r] into position
/// t = 2j + r - 1, keeping t in [0, 2M). The forward map is the adjoint of a
/// same-padded stride-2 conv1d whose per-tap weights are w[r] transposed.
template <typename T>
Tensor<T> deconv1d(Tape<T>& tp, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias = {}) {
  const auto s = detail::seq_dims("deconv1d", x);
  if (w.rank() != 3 || w.dim(0) != kKernel) {
    throw std::invalid_argument("deconv1d: only kernel size 3 is supported, weight shape " + to_string(w.shape()));
  }
  if (w.dim(1) != s.width) {
    throw std::invalid_argument("deconv1d: input " + to_string(x.shape()) + " vs weight " + to_string(w.shape()));
  }
  const Index din = s.width, dout = w.dim(2), m = s.length, n = 2 * m;
  if (bias.defined() && bias.size() != dout) throw std::invalid_argument("deconv1d: bias width mismatch");
  Tensor<T> out = tp.output(detail::seq_shape(s, n, dout), {&x, &w, &bias});
  // Input rows j contributing through tap r, and the first target row.
  auto tap_range = [=](Index r) {
    const Index lo = r == 0 ? 1 : 0;
    return std::pair{lo, m};
  };
  for (Index b = 0; b < s.batch; ++b) {
    const T* xb = x.ptr() + b * m * din;
    T* yb = out.ptr() + b * n * dout;
    if (bias.defined()) {
      mat(yb, n, dout).rowwise() = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.ptr(), dout);
    }
    for (Index r = 0; r < kKernel; ++r) {
      auto [lo, hi] = tap_range(r);
      if (hi <= lo) continue;
      const Index t0 = 2 * lo + r - 1;
      mat(yb + t0 * dout, hi - lo, dout, 2 * dout).noalias() +=
          mat(xb + lo * din, hi - lo, din) * mat(w.ptr() + r * din * dout, din, dout);
    }
  }
  tp.record("deconv1d", out, [x, w, bias, out, s, din, dout, m, n, tap_range]() mutable {
    for (Index b = 0; b < s.batch; ++b) {
      const T* gyb = out.grad().data() + b * n * dout;
      if (bias.defined() && bias.requires_grad()) {
        unet::detail::add_column_sums(bias.grad().data(), gyb, n, dout);
      }
      for (Index r = 0; r < kKernel; ++r) {
        auto [lo, hi] = tap_range(r);
        if (hi <= lo) continue;
        const Index t0 = 2 * lo + r - 1;
        auto gy_rows = mat(gyb + t0 * dout, hi - lo, dout, 2 * dout);
        if (x.requires_grad()) {
          mat(x.grad().data() + b * m * din + lo * din, hi - lo, din).noalias() +=
              gy_rows * mat(w.ptr() + r * din * dout, din, dout).transpose();
        }
        if (w.requires_grad()) {
          mat(w.grad().data() + r * din * dout, din, dout).noalias() +=
              mat(x.ptr() + b * m * din + lo * din, hi - lo, din).transpose() * gy_rows;
        }
      }
    }
  });
  return out;
}

/// k=3, stride-2 max pool with -inf edge padding; output length ceil(N/2).
/// Positions whose `valid` flag is 0 act like the edge sentinel. A window
/// with no valid position yields 0 and routes no gradient. Ties go to the
/// lowest index.
template <typename T>
Tensor<T> max_pool1d(Tape<T>& tp, const Tensor<T>& x, std::span<const std::uint8_t> valid = {}) {
  const auto s = detail::seq_dims("max_pool1d", x);
  const Index n = s.length, d = s.width, m = pooled_length(n);
  if (!valid.empty() && static_cast<Index>(valid.size()) != s.batch * n) {
    throw std::invalid_argument("max_pool1d: validity mask has " + std::to_string(valid.size()) + " entries for " +
                                std::to_string(s.batch * n) + " positions");
  }
  Tensor<T> out = tp.output(detail::seq_shape(s, m, d), {&x});
  std::vector<std::int32_t> arg(static_cast<std::size_t>(s.batch * m * d), -1);
  for (Index b = 0; b < s.batch; ++b) {
    const T* xb = x.ptr() + b * n * d;
    T* yb = out.ptr() + b * m * d;
    std::int32_t* ab = arg.data() + b * m * d;
    for (Index j = 0; j < m; ++j) {
      for (Index t = 2 * j - 1; t <= 2 * j + 1; ++t) {
        if (t < 0 || t >= n) continue;
        if (!valid.empty() && !valid[b * n + t]) continue;
        for (Index c = 0; c < d; ++c) {
          const T v = xb[t * d + c];
          std::int32_t& a = ab[j * d + c];
          if (a < 0 || v > xb[a * d + c]) a = static_cast<std::int32_t>(t);
        }
      }
      for (Index c = 0; c < d; ++c) {
        const std::int32_t a = ab[j * d + c];
        yb[j * d + c] = a < 0 ? T(0) : xb[a * d + c];
      }
    }
  }
  tp.record("max_pool1d", out, [x, out, arg = std::move(arg), s, n, m, d]() mutable {
    if (!x.requires_grad()) return;
    auto gx = x.grad();
    auto gy = out.grad();
    for (Index b = 0; b < s.batch; ++b)
      for (Index j = 0; j < m; ++j)
        for (Index c = 0; c < d; ++c) {
          const std::int32_t a = arg[(b * m + j) * d + c];
          if (a >= 0) gx[(b * n + a) * d + c] += gy[(b * m + j) * d + c];
        }
  });
  return out;
}

/// Pairwise attention permissions, [B, Nq, Nk], 1 = permitted.
struct AttnMask {
  Index batch = 1, queries = 1, keys = 1;
  std::vector<std::uint8_t> allowed;

  static AttnMask full(Index batch, Index queries, Index keys) {
    return {batch, queries, keys, std::vector<std::uint8_t>(static_cast<std::size_t>(batch * queries * keys), 1)};
  }

  /// Every query may see exactly the non-pad keys of its own sequence.
  static AttnMask from_key_padding(std::span<const std::uint8_t> key_valid, Index batch, Index queries, Index keys) {
    if (static_cast<Index>(key_valid.size()) != batch * keys) {
      throw std::invalid_argument("AttnMask: key mask size mismatch");
    }
    AttnMask m{batch, queries, keys, std::vector<std::uint8_t>(static_cast<std::size_t>(batch * queries * keys))};
    for (Index b = 0; b < batch; ++b)
      for (Index q = 0; q < queries; ++q)
        for (Index k = 0; k < keys; ++k) m.allowed[(b * queries + q) * keys + k] = key_valid[b * keys + k];
    return m;
  }

  /// Causal (k <= q) intersected with key padding; queries == keys.
  static AttnMask causal(std::span<const std::uint8_t> key_valid, Index batch, Index length) {
    AttnMask m = from_key_padding(key_valid, batch, length, length);
    for (Index b = 0; b < batch; ++b)
      for (Index q = 0; q < length; ++q)
        for (Index k = q + 1; k < length; ++k) m.allowed[(b * length + q) * length + k] = 0;
    return m;
  }

  bool at(Index b, Index q, Index k) const { return allowed[(b * queries + q) * keys + k] != 0; }
};

/// Multi-head scaled dot-product attention on pre-projected inputs.
/// q: [B, Nq, H*dk], k: [B, Nk, H*dk], v: [B, Nk, H*dv] -> [B, Nq, H*dv].
/// Masked weights are exactly zero. `weights_out`, when given, receives the
/// post-softmax weights laid out [B, H, Nq, Nk].
template <typename T>
Tensor<T> attention(Tape<T>& tp, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, Index heads,
                    const AttnMask& mask, double keep = 1.0, Rng* rng = nullptr,
                    std::vector<T>* weights_out = nullptr) {
  const auto sq = detail::seq_dims("attention", q);
  const auto sk = detail::seq_dims("attention", k);
  const auto sv = detail::seq_dims("attention", v);
  if (sq.batch != sk.batch || sk.batch != sv.batch || sk.length != sv.length || sq.width != sk.width) {
    throw std::invalid_argument("attention: incompatible q/k/v shapes " + to_string(q.shape()) + " " +
                                to_string(k.shape()) + " " + to_string(v.shape()));
  }
  if (heads < 1 || sq.width % heads != 0 || sv.width % heads != 0) {
    throw std::invalid_argument("attention: widths not divisible by head count");
  }
  const Index bsz = sq.batch, nq = sq.length, nk = sk.length;
  const Index dk = sq.width / heads, dv = sv.width / heads;
  if (mask.batch != bsz || mask.queries != nq || mask.keys != nk) {
    throw std::invalid_argument("attention: mask [" + std::to_string(mask.batch) + "," + std::to_string(mask.queries) +
                                "," + std::to_string(mask.keys) + "] does not match scores [" + std::to_string(bsz) +
                                "," + std::to_string(nq) + "," + std::to_string(nk) + "]");
  }
  for (Index b = 0; b < bsz; ++b)
    for (Index i = 0; i < nq; ++i) {
      const auto* row = mask.allowed.data() + (b * nq + i) * nk;
      if (std::none_of(row, row + nk, [](std::uint8_t a) { return a != 0; })) {
        throw std::invalid_argument("attention: query " + std::to_string(i) + " of sequence " + std::to_string(b) +
                                    " has no permitted key");
      }
    }
  const bool drop = keep < 1.0;
  if (drop && rng == nullptr) throw std::invalid_argument("attention: dropout requires an Rng");
  const T scl = T(1) / std::sqrt(static_cast<T>(dk));

  Tensor<T> out = tp.output(sq.batched ? Shape{bsz, nq, heads * dv} : Shape{nq, heads * dv}, {&q, &k, &v});
  std::vector<T> probs(static_cast<std::size_t>(bsz * heads * nq * nk));
  std::vector<T> dmask;
  if (drop) dmask.resize(probs.size());
  RowMatrix<T> scores(nq, nk);
  for (Index b = 0; b < bsz; ++b) {
    for (Index h = 0; h < heads; ++h) {
      auto qh = mat(q.ptr() + b * nq * sq.width + h * dk, nq, dk, sq.width);
      auto kh = mat(k.ptr() + b * nk * sk.width + h * dk, nk, dk, sk.width);
      auto vh = mat(v.ptr() + b * nk * sv.width + h * dv, nk, dv, sv.width);
      scores.noalias() = (qh * kh.transpose()) * scl;
      T* p = probs.data() + ((b * heads + h) * nq) * nk;
      for (Index i = 0; i < nq; ++i) {
        const auto* allow = mask.allowed.data() + (b * nq + i) * nk;
        T mx = -std::numeric_limits<T>::infinity();
        for (Index j = 0; j < nk; ++j)
          if (allow[j]) mx = std::max(mx, scores(i, j));
        T z = T(0);
        for (Index j = 0; j < nk; ++j) {
          p[i * nk + j] = allow[j] ? std::exp(scores(i, j) - mx) : T(0);
          z += p[i * nk + j];
        }
        for (Index j = 0; j < nk; ++j) p[i * nk + j] /= z;
      }
      auto pm = mat(p, nq, nk);
      auto oh = mat(out.ptr() + b * nq * heads * dv + h * dv, nq, dv, heads * dv);
      if (drop) {
        T* dm = dmask.data() + ((b * heads + h) * nq) * nk;
        const T s = static_cast<T>(1.0 / keep);
        for (Index i = 0; i < nq * nk; ++i) dm[i] = rng->uniform() < keep ? s : T(0);
        oh.noalias() = (pm.array() * mat(dm, nq, nk).array()).matrix() * vh;
      } else {
        oh.noalias() = pm * vh;
      }
    }
  }
  if (weights_out) *weights_out = probs;
  tp.record("attention", out, [q, k, v, out, probs = std::move(probs), dmask = std::move(dmask), bsz, heads, nq, nk,
                               dk, dv, scl, wq = sq.width, wv = sv.width]() mutable {
    RowMatrix<T> dp(nq, nk), pd(nq, nk);
    for (Index b = 0; b < bsz; ++b) {
      for (Index h = 0; h < heads; ++h) {
        const T* p = probs.data() + ((b * heads + h) * nq) * nk;
        auto pm = mat(p, nq, nk);
        auto go = mat(out.grad().data() + b * nq * heads * dv + h * dv, nq, dv, heads * dv);
        auto qh = mat(q.ptr() + b * nq * wq + h * dk, nq, dk, wq);
        auto kh = mat(k.ptr() + b * nk * wq + h * dk, nk, dk, wq);
        auto vh = mat(v.ptr() + b * nk * wv + h * dv, nk, dv, wv);
        if (!dmask.empty()) {
          pd = pm.array() * mat(dmask.data() + ((b * heads + h) * nq) * nk, nq, nk).array();
        } else {
          pd = pm;
        }
        if (v.requires_grad()) {
          mat(v.grad().data() + b * nk * wv + h * dv, nk, dv, wv).noalias() += pd.transpose() * go;
        }
        if (!q.requires_grad() && !k.requires_grad()) continue;
        dp.noalias() = go * vh.transpose();
        if (!dmask.empty()) dp.array() *= mat(dmask.data() + ((b * heads + h) * nq) * nk, nq, nk).array();
        // Softmax backward, then the 1/sqrt(dk) scale.
        for (Index i = 0; i < nq; ++i) {
          T dot = T(0);
          for (Index j = 0; j < nk; ++j) dot += dp(i, j) * p[i * nk + j];
          for (Index j = 0; j < nk; ++j) dp(i, j) = p[i * nk + j] * (dp(i, j) - dot) * scl;
        }
        if (q.requires_grad()) {
          mat(q.grad().data() + b * nq * wq + h * dk, nq, dk, wq).noalias() += dp * kh;
        }
        if (k.requires_grad()) {
          mat(k.grad().data() + b * nk * wq + h * dk, nk, dk, wq).noalias() += dp.transpose() * qh;
        }
      }
    }
  });
  return out;
}

}  // namespace unet
