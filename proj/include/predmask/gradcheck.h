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

// Randomized central-difference checks of every differentiable op.

#ifndef PREDMASK_GRADCHECK_H_
#define PREDMASK_GRADCHECK_H_

#include <string>
#include <vector>

namespace predmask {

struct GradCheckResult {
  std::string op;
  int trials = 0;
  // Largest norm-wise relative error ||analytic - numeric|| /
  // max(||analytic||, ||numeric||, 1e-8) over trials and inputs.
  double worst_error = 0.0;
};

// Names of the op groups covered.
std::vector<std::string> GradCheckOps();
// Random instances of one op group, each contracted with a random projection
// to a scalar. Throws ConfigError on an unknown name.
GradCheckResult RunGradCheck(const std::string& op, int trials = 50, double step = 1e-5);

}  // namespace predmask

#endif  // PREDMASK_GRADCHECK_H_
