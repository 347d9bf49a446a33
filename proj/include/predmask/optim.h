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

#ifndef PREDMASK_OPTIM_H_
#define PREDMASK_OPTIM_H_

#include <vector>

#include "predmask/autodiff.h"

namespace predmask {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// One bias-corrected Adam update from the accumulated gradients. Gradients
// are left untouched; call ZeroGrads() before the next accumulation.
void AdamStep(const std::vector<Parameter*>& params, const AdamOptions& opt);
void ZeroGrads(const std::vector<Parameter*>& params);
// Scales all gradients so their joint L2 norm is at most max_norm. Returns
// the norm before clipping.
double ClipGradNorm(const std::vector<Parameter*>& params, double max_norm);

// x <- x - step * sign(grad), with sign(0) = 0.
void SignDescentStep(Tensor& x, const Tensor& grad, double step);

// Rounds every value to the nearest float32 so a float32 checkpoint
// reproduces the parameter exactly.
void RoundToFloat32(Tensor& t);

}  // namespace predmask

#endif  // PREDMASK_OPTIM_H_
