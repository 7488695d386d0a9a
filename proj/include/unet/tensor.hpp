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

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <new>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace unet {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Error raised when a computation produces or receives non-finite values.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Deterministic generator. Only the 64-bit Mersenne Twister engine is used,
/// whose output sequence is fixed by the C++ standard; the distributions are
/// implemented here so draws do not depend on the standard library vendor.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Standard normal draw (Box-Muller, second value cached).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * 3.14159265358979323846 * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  /// Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v = 0;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % n;
  }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      std::swap(first[i - 1], first[below(i)]);
    }
  }

  /// Independent stream seed derived from a base seed (splitmix64 finalizer).
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::string state() const {
    std::ostringstream os;
    os << seed_ << ' ' << has_spare_ << ' ';
    os.precision(17);
    os << spare_ << ' ' << engine_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> seed_ >> has_spare_ >> spare_ >> engine_;
    if (!is) throw std::invalid_argument("Rng::set_state: malformed state");
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Cache-line aligned storage. Vectorised kernels choose their peeling from
/// the buffer address, so a fixed alignment keeps results independent of
/// where the heap happens to place a tensor.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Storage = std::vector<T, AlignedAllocator<T>>;

template <typename T>
struct TensorNode {
  Shape shape;
  Storage<T> data;
  Storage<T> grad;  // empty until first touched by backward
  bool requires_grad = false;
};

/// Shared handle to a dense row-major array. Copies alias the same storage.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    validate(shape);
    node_->data.assign(static_cast<std::size_t>(numel(shape)), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    validate(shape);
    if (static_cast<Index>(values.size()) != numel(shape)) {
      throw std::invalid_argument("Tensor: " + std::to_string(values.size()) +
                                  " values do not fill shape " + to_string(shape));
    }
    node_->data.assign(values.begin(), values.end());
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(Index i) const {
    if (i < 0) i += rank();
    return node_->shape.at(static_cast<std::size_t>(i));
  }
  Index size() const { return static_cast<Index>(node_->data.size()); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  T* ptr() { return node_->data.data(); }
  const T* ptr() const { return node_->data.data(); }
  T item() const {
    if (size() != 1) throw std::invalid_argument("Tensor::item on shape " + to_string(shape()));
    return node_->data[0];
  }
  T operator[](Index i) const { return node_->data[static_cast<std::size_t>(i)]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer, zero-filled on first access. Gradients are the one
  /// part of a tensor that stays writable through a const handle.
  std::span<T> grad() const {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
    return node_->grad;
  }
  void zero_grad() const { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }
  void drop_grad() const { node_->grad.clear(); }

  const void* id() const { return node_.get(); }

  /// Deep copy, detached from any graph.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(shape(), std::vector<T>(node_->data.begin(), node_->data.end()), requires_grad);
  }

  bool same(const Tensor& other) const { return node_ == other.node_; }

 private:
  static void validate(const Shape& shape) {
    if (shape.empty()) throw std::invalid_argument("Tensor: empty shape");
    for (Index e : shape) {
      if (e <= 0) throw std::invalid_argument("Tensor: non-positive extent in " + to_string(shape));
    }
  }

  std::shared_ptr<TensorNode<T>> node_;
};

/// Ordered record of differentiable operations. Records are appended in
/// execution order, so the sequence is already topologically sorted and a
/// single reverse sweep visits each record once.
template <typename T>
class Tape {
 public:
  struct Record {
    std::string_view op;
    const void* output;
    std::function<void()> backward;
  };

  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }

  /// Allocates an op output that requires grad iff recording and any input does.
  Tensor<T> output(Shape shape, std::initializer_list<const Tensor<T>*> inputs) {
    bool rg = false;
    if (recording_) {
      for (const auto* in : inputs) rg = rg || (in->defined() && in->requires_grad());
    }
    return Tensor<T>(std::move(shape), T(0), rg);
  }

  void record(std::string_view op, const Tensor<T>& out, std::function<void()> backward) {
    if (!out.requires_grad()) return;
    records_.push_back(Record{op, out.id(), std::move(backward)});
  }

  /// Reverse sweep from a scalar loss. The tape is consumed.
  void backward(Tensor<T> loss) {
    if (loss.size() != 1) {
      throw std::invalid_argument("backward: loss must be scalar, got shape " + to_string(loss.shape()));
    }
    const bool on_tape = std::any_of(records_.begin(), records_.end(),
                                     [&](const Record& r) { return r.output == loss.id(); });
    if (!on_tape && !loss.requires_grad()) {
      throw std::invalid_argument("backward: loss is not on the tape");
    }
    loss.grad()[0] += T(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->backward();
    records_.clear();
  }

  void clear() { records_.clear(); }

 private:
  bool recording_;
  std::vector<Record> records_;
};

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>, 0, Eigen::OuterStride<>>;

template <typename T>
MatMap<T> mat(T* p, Index rows, Index cols, Index ld = -1) {
  return MatMap<T>(p, rows, cols, Eigen::OuterStride<>(ld < 0 ? cols : ld));
}
template <typename T>
ConstMatMap<T> mat(const T* p, Index rows, Index cols, Index ld = -1) {
  return ConstMatMap<T>(p, rows, cols, Eigen::OuterStride<>(ld < 0 ? cols : ld));
}

namespace detail {

inline void require_same_shape(std::string_view op, const Shape& a, const Shape& b) {
  if (a != b) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + to_string(a) + " vs " +
                                to_string(b));
  }
}

/// dst[c] += sum over r of src[r * cols + c], rows in order. Eigen's
/// colwise sums peel by pointer alignment, which made results depend on
/// where the heap placed a buffer.
template <typename T>
void add_column_sums(T* dst, const T* src, Index rows, Index cols) {
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) dst[c] += src[r * cols + c];
}

template <typename T>
void accumulate(const Tensor<T>& dst, std::span<const T> src) {
  auto g = dst.grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
}

template <typename T, typename F>
Tensor<T> unary(Tape<T>& tp, std::string_view op, const Tensor<T>& x, F&& fwd_and_deriv) {
  Tensor<T> out = tp.output(x.shape(), {&x});
  auto y = out.data();
  auto xs = x.data();
  std::vector<T> deriv(out.requires_grad() ? xs.size() : 0);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    auto [v, d] = fwd_and_deriv(xs[i]);
    y[i] = v;
    if (!deriv.empty()) deriv[i] = d;
  }
  tp.record(op, out, [x, out, deriv = std::move(deriv)]() mutable {
    if (!x.requires_grad()) return;
    auto gx = x.grad();
    auto gy = out.grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * deriv[i];
  });
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reductions

template <typename T>
Tensor<T> add(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a.shape(), b.shape());
  Tensor<T> out = tp.output(a.shape(), {&a, &b});
  auto y = out.data();
  auto as = a.data();
  auto bs = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = as[i] + bs[i];
  tp.record("add", out, [a, b, out]() mutable {
    auto gy = out.grad();
    if (a.requires_grad()) detail::accumulate<T>(a, gy);
    if (b.requires_grad()) detail::accumulate<T>(b, gy);
  });
  return out;
}

template <typename T>
Tensor<T> sub(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a.shape(), b.shape());
  Tensor<T> out = tp.output(a.shape(), {&a, &b});
  auto y = out.data();
  auto as = a.data();
  auto bs = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = as[i] - bs[i];
  tp.record("sub", out, [a, b, out]() mutable {
    auto gy = out.grad();
    if (a.requires_grad()) detail::accumulate<T>(a, gy);
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= gy[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a.shape(), b.shape());
  Tensor<T> out = tp.output(a.shape(), {&a, &b});
  auto y = out.data();
  auto as = a.data();
  auto bs = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = as[i] * bs[i];
  tp.record("mul", out, [a, b, out]() mutable {
    auto gy = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad();
      auto bs = b.data();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * bs[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      auto as = a.data();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * as[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& tp, const Tensor<T>& x, T factor) {
  return detail::unary(tp, "scale", x, [factor](T v) { return std::pair{v * factor, factor}; });
}

template <typename T>
Tensor<T> relu(Tape<T>& tp, const Tensor<T>& x) {
  return detail::unary(tp, "relu", x, [](T v) {
    return v > T(0) ? std::pair{v, T(1)} : std::pair{T(0), T(0)};
  });
}

template <typename T>
Tensor<T> sigmoid(Tape<T>& tp, const Tensor<T>& x) {
  return detail::unary(tp, "sigmoid", x, [](T v) {
    const T s = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
    return std::pair{s, s * (T(1) - s)};
  });
}

template <typename T>
Tensor<T> tanh(Tape<T>& tp, const Tensor<T>& x) {
  return detail::unary(tp, "tanh", x, [](T v) {
    const T t = std::tanh(v);
    return std::pair{t, T(1) - t * t};
  });
}

template <typename T>
Tensor<T> sum(Tape<T>& tp, const Tensor<T>& x) {
  Tensor<T> out = tp.output(Shape{1}, {&x});
  T acc = T(0);
  for (T v : x.data()) acc += v;
  out.data()[0] = acc;
  tp.record("sum", out, [x, out]() mutable {
    if (!x.requires_grad()) return;
    const T g = out.grad()[0];
    for (T& v : x.grad()) v += g;
  });
  return out;
}

template <typename T>
Tensor<T> mean(Tape<T>& tp, const Tensor<T>& x) {
  return scale(tp, sum(tp, x), T(1) / static_cast<T>(x.size()));
}

/// Sum of x * w for a constant weight tensor w; handy as a generic test loss.
template <typename T>
Tensor<T> weighted_sum(Tape<T>& tp, const Tensor<T>& x, const Tensor<T>& w) {
  return sum(tp, mul(tp, x, w));
}

// ---------------------------------------------------------------------------
// Products

template <typename T>
Tensor<T> matmul(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                                to_string(b.shape()));
  }
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out = tp.output(Shape{m, n}, {&a, &b});
  mat(out.ptr(), m, n).noalias() = mat(a.ptr(), m, k) * mat(b.ptr(), k, n);
  tp.record("matmul", out, [a, b, out, m, k, n]() mutable {
    auto gy = mat(out.grad().data(), m, n);
    if (a.requires_grad()) mat(a.grad().data(), m, k).noalias() += gy * mat(b.ptr(), k, n).transpose();
    if (b.requires_grad()) mat(b.grad().data(), k, n).noalias() += mat(a.ptr(), m, k).transpose() * gy;
  });
  return out;
}

/// x[..., d_in] @ w[d_in, d_out] + bias[d_out]; bias may be undefined.
template <typename T>
Tensor<T> linear(Tape<T>& tp, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  if (w.rank() != 2 || x.dim(-1) != w.dim(0)) {
    throw std::invalid_argument("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                                to_string(w.shape()));
  }
  const Index din = w.dim(0), dout = w.dim(1);
  if (bias.defined() && bias.size() != dout) {
    throw std::invalid_argument("linear: bias " + to_string(bias.shape()) + " for width " +
                                std::to_string(dout));
  }
  const Index rows = x.size() / din;
  Shape shape = x.shape();
  shape.back() = dout;
  Tensor<T> out = tp.output(std::move(shape), {&x, &w, &bias});
  auto y = mat(out.ptr(), rows, dout);
  y.noalias() = mat(x.ptr(), rows, din) * mat(w.ptr(), din, dout);
  if (bias.defined()) {
    y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.ptr(), dout);
  }
  tp.record("linear", out, [x, w, bias, out, rows, din, dout]() mutable {
    auto gy = mat(out.grad().data(), rows, dout);
    if (x.requires_grad()) mat(x.grad().data(), rows, din).noalias() += gy * mat(w.ptr(), din, dout).transpose();
    if (w.requires_grad()) mat(w.grad().data(), din, dout).noalias() += mat(x.ptr(), rows, din).transpose() * gy;
    if (bias.defined() && bias.requires_grad()) {
      detail::add_column_sums(bias.grad().data(), out.grad().data(), rows, dout);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Normalizers and losses

/// Softmax along `axis` with max subtraction.
template <typename T>
Tensor<T> softmax(Tape<T>& tp, const Tensor<T>& x, Index axis = -1) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) throw std::invalid_argument("softmax: bad axis");
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= x.dim(i);
  for (Index i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const Index n = x.dim(axis);
  Tensor<T> out = tp.output(x.shape(), {&x});
  const T* xs = x.ptr();
  T* ys = out.ptr();
  for (Index o = 0; o < outer; ++o) {
    for (Index in = 0; in < inner; ++in) {
      const Index base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (Index i = 0; i < n; ++i) mx = std::max(mx, xs[base + i * inner]);
      T z = T(0);
      for (Index i = 0; i < n; ++i) {
        ys[base + i * inner] = std::exp(xs[base + i * inner] - mx);
        z += ys[base + i * inner];
      }
      for (Index i = 0; i < n; ++i) ys[base + i * inner] /= z;
    }
  }
  tp.record("softmax", out, [x, out, outer, inner, n]() mutable {
    if (!x.requires_grad()) return;
    auto gx = x.grad();
    auto gy = out.grad();
    const T* ys = out.ptr();
    for (Index o = 0; o < outer; ++o) {
      for (Index in = 0; in < inner; ++in) {
        const Index base = o * n * inner + in;
        T dot = T(0);
        for (Index i = 0; i < n; ++i) dot += gy[base + i * inner] * ys[base + i * inner];
        for (Index i = 0; i < n; ++i) {
          gx[base + i * inner] += ys[base + i * inner] * (gy[base + i * inner] - dot);
        }
      }
    }
  });
  return out;
}

/// Normalizes each row over the last dimension, then applies gain and bias.
template <typename T>
Tensor<T> layer_norm(Tape<T>& tp, const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
  const Index d = x.dim(-1);
  if (gain.size() != d || bias.size() != d) {
    throw std::invalid_argument("layer_norm: gain/bias do not match width " + std::to_string(d));
  }
  const Index rows = x.size() / d;
  Tensor<T> out = tp.output(x.shape(), {&x, &gain, &bias});
  std::vector<T> xhat(static_cast<std::size_t>(x.size()));
  std::vector<T> rstd(static_cast<std::size_t>(rows));
  const T* xs = x.ptr();
  const T* g = gain.ptr();
  const T* bb = bias.ptr();
  T* ys = out.ptr();
  for (Index r = 0; r < rows; ++r) {
    const T* row = xs + r * d;
    T mu = T(0);
    for (Index j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (Index j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[static_cast<std::size_t>(r)] = rs;
    for (Index j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * rs;
      xhat[static_cast<std::size_t>(r * d + j)] = h;
      ys[r * d + j] = h * g[j] + bb[j];
    }
  }
  if (!out.requires_grad()) return out;
  tp.record("layer_norm", out, [x, gain, bias, out, xhat = std::move(xhat), rstd = std::move(rstd), rows, d]() mutable {
    auto gy = out.grad();
    const T* g = gain.ptr();
    if (gain.requires_grad()) {
      auto gg = gain.grad();
      for (Index r = 0; r < rows; ++r)
        for (Index j = 0; j < d; ++j) gg[j] += gy[r * d + j] * xhat[r * d + j];
    }
    if (bias.requires_grad()) {
      auto gb = bias.grad();
      for (Index r = 0; r < rows; ++r)
        for (Index j = 0; j < d; ++j) gb[j] += gy[r * d + j];
    }
    if (!x.requires_grad()) return;
    auto gx = x.grad();
    std::vector<T> dh(static_cast<std::size_t>(d));
    for (Index r = 0; r < rows; ++r) {
      T mean_dh = T(0), mean_dh_h = T(0);
      for (Index j = 0; j < d; ++j) {
        dh[j] = gy[r * d + j] * g[j];
        mean_dh += dh[j];
        mean_dh_h += dh[j] * xhat[r * d + j];
      }
      mean_dh /= static_cast<T>(d);
      mean_dh_h /= static_cast<T>(d);
      for (Index j = 0; j < d; ++j) {
        gx[r * d + j] += rstd[r] * (dh[j] - mean_dh - xhat[r * d + j] * mean_dh_h);
      }
    }
  });
  return out;
}

/// Mean negative log-likelihood over rows of logits[..., V]. A target of -1
/// marks a row that is excluded (padding).
template <typename T>
Tensor<T> cross_entropy(Tape<T>& tp, const Tensor<T>& logits, std::span<const std::int32_t> targets) {
  const Index v = logits.dim(-1);
  const Index rows = logits.size() / v;
  if (static_cast<Index>(targets.size()) != rows) {
    throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                std::to_string(rows) + " rows");
  }
  Index counted = 0;
  for (auto t : targets) {
    if (t >= v) throw std::invalid_argument("cross_entropy: target " + std::to_string(t) + " >= " + std::to_string(v));
    if (t >= 0) ++counted;
  }
  if (counted == 0) throw std::invalid_argument("cross_entropy: no non-pad targets");
  Tensor<T> out = tp.output(Shape{1}, {&logits});
  std::vector<T> probs(static_cast<std::size_t>(logits.size()));
  const T* ls = logits.ptr();
  T total = T(0);
  for (Index r = 0; r < rows; ++r) {
    if (targets[r] < 0) continue;
    const T* row = ls + r * v;
    const T mx = *std::max_element(row, row + v);
    T z = T(0);
    for (Index j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    const T logz = mx + std::log(z);
    total += logz - row[targets[r]];
    for (Index j = 0; j < v; ++j) probs[r * v + j] = std::exp(row[j] - logz);
  }
  out.data()[0] = total / static_cast<T>(counted);
  std::vector<std::int32_t> tg(targets.begin(), targets.end());
  tp.record("cross_entropy", out, [logits, out, probs = std::move(probs), tg = std::move(tg), rows, v, counted]() mutable {
    if (!logits.requires_grad()) return;
    const T g = out.grad()[0] / static_cast<T>(counted);
    auto gl = logits.grad();
    for (Index r = 0; r < rows; ++r) {
      if (tg[r] < 0) continue;
      for (Index j = 0; j < v; ++j) gl[r * v + j] += g * probs[r * v + j];
      gl[r * v + tg[r]] -= g;
    }
  });
  return out;
}

/// Cross entropy of a single logit vector against one class.
template <typename T>
Tensor<T> cross_entropy_row(Tape<T>& tp, const Tensor<T>& logits, std::int32_t target) {
  std::int32_t t[1] = {target};
  return cross_entropy(tp, logits, std::span<const std::int32_t>(t, 1));
}

// ---------------------------------------------------------------------------
// Lookup, regularization and row plumbing

/// Rows of table[V, d] selected by ids; result shape is prefix + [d].
template <typename T>
Tensor<T> embedding_gather(Tape<T>& tp, const Tensor<T>& table, std::span<const std::int32_t> ids, Shape prefix) {
  const Index vocab = table.dim(0), d = table.dim(1);
  if (numel(prefix) != static_cast<Index>(ids.size())) {
    throw std::invalid_argument("embedding_gather: prefix " + to_string(prefix) + " does not hold " +
                                std::to_string(ids.size()) + " ids");
  }
  for (auto id : ids) {
    if (id < 0 || id >= vocab) {
      throw std::out_of_range("embedding_gather: token id " + std::to_string(id) + " outside vocabulary of size " +
                              std::to_string(vocab));
    }
  }
  prefix.push_back(d);
  Tensor<T> out = tp.output(std::move(prefix), {&table});
  T* ys = out.ptr();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(table.ptr() + ids[i] * d, d, ys + static_cast<Index>(i) * d);
  }
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  tp.record("embedding_gather", out, [table, out, idv = std::move(idv), d]() mutable {
    if (!table.requires_grad()) return;
    auto gt = table.grad();
    auto gy = out.grad();
    for (std::size_t i = 0; i < idv.size(); ++i)
      for (Index j = 0; j < d; ++j) gt[idv[i] * d + j] += gy[static_cast<Index>(i) * d + j];
  });
  return out;
}

/// Inverted dropout; survivors are scaled by 1/keep.
template <typename T>
Tensor<T> dropout(Tape<T>& tp, const Tensor<T>& x, double keep, Rng& rng) {
  if (keep <= 0.0 || keep > 1.0) throw std::invalid_argument("dropout: keep probability must be in (0, 1]");
  if (keep >= 1.0) return x;
  std::vector<T> m(static_cast<std::size_t>(x.size()));
  const T s = static_cast<T>(1.0 / keep);
  for (T& v : m) v = rng.uniform() < keep ? s : T(0);
  Tensor<T> out = tp.output(x.shape(), {&x});
  auto y = out.data();
  auto xs = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xs[i] * m[i];
  tp.record("dropout", out, [x, out, m = std::move(m)]() mutable {
    if (!x.requires_grad()) return;
    auto gx = x.grad();
    auto gy = out.grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * m[i];
  });
  return out;
}

/// Sets rows (over the last dimension) whose flag is 0 to exactly zero.
/// Selection, not multiplication, so non-finite pad contents cannot leak.
template <typename T>
Tensor<T> mask_rows(Tape<T>& tp, const Tensor<T>& x, std::span<const std::uint8_t> keep) {
  const Index d = x.dim(-1);
  const Index rows = x.size() / d;
  if (static_cast<Index>(keep.size()) != rows) {
    throw std::invalid_argument("mask_rows: " + std::to_string(keep.size()) + " flags for " + std::to_string(rows) +
                                " rows");
  }
  Tensor<T> out = tp.output(x.shape(), {&x});
  for (Index r = 0; r < rows; ++r) {
    if (keep[r]) std::copy_n(x.ptr() + r * d, d, out.ptr() + r * d);
  }
  std::vector<std::uint8_t> k(keep.begin(), keep.end());
  tp.record("mask_rows", out, [x, out, k = std::move(k), d, rows]() mutable {
    if (!x.requires_grad()) return;
    auto gx = x.grad();
    auto gy = out.grad();
    for (Index r = 0; r < rows; ++r)
      if (k[r])
        for (Index j = 0; j < d; ++j) gx[r * d + j] += gy[r * d + j];
  });
  return out;
}

/// Row-wise choice: out[r] = flag[r] ? a[r] : b[r].
template <typename T>
Tensor<T> select_rows(Tape<T>& tp, std::span<const std::uint8_t> flag, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("select_rows", a.shape(), b.shape());
  const Index d = a.dim(-1);
  const Index rows = a.size() / d;
  if (static_cast<Index>(flag.size()) != rows) throw std::invalid_argument("select_rows: flag count mismatch");
  Tensor<T> out = tp.output(a.shape(), {&a, &b});
  for (Index r = 0; r < rows; ++r) std::copy_n((flag[r] ? a.ptr() : b.ptr()) + r * d, d, out.ptr() + r * d);
  std::vector<std::uint8_t> f(flag.begin(), flag.end());
  tp.record("select_rows", out, [a, b, out, f = std::move(f), d, rows]() mutable {
    auto gy = out.grad();
    for (Index r = 0; r < rows; ++r) {
      const Tensor<T>& dst = f[r] ? a : b;
      if (!dst.requires_grad()) continue;
      auto g = dst.grad();
      for (Index j = 0; j < d; ++j) g[r * d + j] += gy[r * d + j];
    }
  });
  return out;
}

/// Leading `length` positions of x[B, N, d] (or x[N, d]).
template <typename T>
Tensor<T> crop_rows(Tape<T>& tp, const Tensor<T>& x, Index length) {
  const bool batched = x.rank() == 3;
  const Index b = batched ? x.dim(0) : 1, n = x.dim(-2), d = x.dim(-1);
  if (length < 1 || length > n) {
    throw std::invalid_argument("crop_rows: cannot crop length " + std::to_string(n) + " to " + std::to_string(length));
  }
  if (length == n) return x;
  Shape shape = batched ? Shape{b, length, d} : Shape{length, d};
  Tensor<T> out = tp.output(std::move(shape), {&x});
  for (Index i = 0; i < b; ++i) std::copy_n(x.ptr() + i * n * d, length * d, out.ptr() + i * length * d);
  tp.record("crop_rows", out, [x, out, b, n, d, length]() mutable {
    if (!x.requires_grad()) return;
    auto gx = x.grad();
    auto gy = out.grad();
    for (Index i = 0; i < b; ++i)
      for (Index j = 0; j < length * d; ++j) gx[i * n * d + j] += gy[i * length * d + j];
  });
  return out;
}

/// x[B, T, d] -> x[:, t, :] as [B, d].
template <typename T>
Tensor<T> take_step(Tape<T>& tp, const Tensor<T>& x, Index t) {
  const Index b = x.dim(0), steps = x.dim(1), d = x.dim(2);
  Tensor<T> out = tp.output(Shape{b, d}, {&x});
  for (Index i = 0; i < b; ++i) std::copy_n(x.ptr() + (i * steps + t) * d, d, out.ptr() + i * d);
  tp.record("take_step", out, [x, out, b, steps, d, t]() mutable {
    if (!x.requires_grad()) return;
    auto gx = x.grad();
    auto gy = out.grad();
    for (Index i = 0; i < b; ++i)
      for (Index j = 0; j < d; ++j) gx[(i * steps + t) * d + j] += gy[i * d + j];
  });
  return out;
}

/// Stacks per-step [B, d] tensors into [B, T, d].
template <typename T>
Tensor<T> stack_steps(Tape<T>& tp, const std::vector<Tensor<T>>& steps) {
  if (steps.empty()) throw std::invalid_argument("stack_steps: no steps");
  const Index b = steps[0].dim(0), d = steps[0].dim(1);
  const Index n = static_cast<Index>(steps.size());
  bool rg = false;
  for (const auto& s : steps) {
    detail::require_same_shape("stack_steps", s.shape(), steps[0].shape());
    rg = rg || s.requires_grad();
  }
  Tensor<T> out(Shape{b, n, d}, T(0), rg && tp.recording());
  for (Index t = 0; t < n; ++t)
    for (Index i = 0; i < b; ++i) std::copy_n(steps[t].ptr() + i * d, d, out.ptr() + (i * n + t) * d);
  tp.record("stack_steps", out, [steps, out, b, n, d]() mutable {
    auto gy = out.grad();
    for (Index t = 0; t < n; ++t) {
      if (!steps[t].requires_grad()) continue;
      auto g = steps[t].grad();
      for (Index i = 0; i < b; ++i)
        for (Index j = 0; j < d; ++j) g[i * d + j] += gy[(i * n + t) * d + j];
    }
  });
  return out;
}

}  // namespace unet
