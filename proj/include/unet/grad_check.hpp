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

#include "unet/tensor.hpp"

namespace unet {

struct GradCheckReport {
  std::vector<double> max_rel_error;  // one per input
  double tolerance = 0.0;
  bool passed = false;

  double worst() const {
    return max_rel_error.empty() ? 0.0 : *std::max_element(max_rel_error.begin(), max_rel_error.end());
  }
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences (f(x+eps) - f(x-eps)) / 2eps, element by element.
/// Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps
/// gradients that are exactly zero in theory (a key bias under softmax)
/// from turning rounding noise into a relative failure. `fn` must be
/// deterministic and build its graph from `inputs` on the tape it is given.
template <typename Fn>
GradCheckReport grad_check(Fn&& fn, std::vector<Tensor<double>> inputs, double eps = 1e-5, double tol = 1e-4,
                           double floor = 1e-6) {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.drop_grad();
  }
  {
    Tape<double> tape;
    Tensor<double> loss = fn(tape);
    tape.backward(loss);
  }
  GradCheckReport report;
  report.tolerance = tol;
  report.passed = true;
  auto eval = [&]() {
    Tape<double> tape(false);
    return fn(tape).item();
  };
  for (auto& in : inputs) {
    std::vector<double> analytic(in.grad().begin(), in.grad().end());
    double worst = 0.0;
    auto values = in.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = eval();
      values[i] = saved - eps;
      const double down = eval();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    report.max_rel_error.push_back(worst);
    if (!(worst < tol)) report.passed = false;
  }
  return report;
}

}  // namespace unet
