// Copyright 2026 The predmask Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "predmask/optim.h"

#include <cmath>

#include "predmask/error.h"

namespace predmask {

void AdamStep(const std::vector<Parameter*>& params, const AdamOptions& opt) {
  for (Parameter* p : params) {
    if (p->adam_m.shape() != p->value.shape()) p->adam_m = Tensor(p->value.shape());
    if (p->adam_v.shape() != p->value.shape()) p->adam_v = Tensor(p->value.shape());
    if (p->grad.shape() != p->value.shape()) {
      throw ShapeError("adam: gradient of " + p->name + " has shape " +
                       ShapeToString(p->grad.shape()));
    }
    ++p->adam_step;
    const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(p->adam_step));
    const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(p->adam_step));
    for (int64_t i = 0; i < p->value.size(); ++i) {
      const double g = p->grad[i] + opt.weight_decay * p->value[i];
      double& m = p->adam_m[i];
      double& v = p->adam_v[i];
      m = opt.beta1 * m + (1.0 - opt.beta1) * g;
      v = opt.beta2 * v + (1.0 - opt.beta2) * g * g;
      p->value[i] -= opt.lr * (m / c1) / (std::sqrt(v / c2) + opt.eps);
    }
  }
}

void ZeroGrads(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) {
    if (p->grad.shape() != p->value.shape()) {
      p->grad = Tensor(p->value.shape());
    } else {
      p->ZeroGrad();
    }
  }
}

double ClipGradNorm(const std::vector<Parameter*>& params, double max_norm) {
  double ss = 0.0;
  for (const Parameter* p : params)
    for (double g : p->grad.values()) ss += g * g;
  const double norm = std::sqrt(ss);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (Parameter* p : params)
      for (double& g : p->grad.values()) g *= s;
  }
  return norm;
}

void SignDescentStep(Tensor& x, const Tensor& grad, double step) {
  if (x.shape() != grad.shape()) {
    throw ShapeError("sign step: " + ShapeToString(x.shape()) + " vs " +
                     ShapeToString(grad.shape()));
  }
  for (int64_t i = 0; i < x.size(); ++i) {
    const double g = grad[i];
    if (g > 0.0) {
      x[i] -= step;
    } else if (g < 0.0) {
      x[i] += step;
    }
  }
}

void RoundToFloat32(Tensor& t) {
  for (double& v : t.values()) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace predmask
