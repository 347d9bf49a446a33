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

#include "predmask/autodiff.h"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "predmask/error.h"
#include "predmask/gradcheck.h"
#include "predmask/optim.h"

namespace predmask {
namespace {

Tensor Random(const Shape& s, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(s);
  for (double& v : t.values()) v = n(rng);
  return t;
}

class GradCheckTest : public ::testing::TestWithParam<std::string> {};

TEST_P(GradCheckTest, MatchesCentralDifferences) {
  const GradCheckResult r = RunGradCheck(GetParam(), 50);
  EXPECT_EQ(r.trials, 50);
  EXPECT_LT(r.worst_error, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(AllOps, GradCheckTest, ::testing::ValuesIn(GradCheckOps()),
                         [](const auto& info) { return info.param; });

TEST(GradCheck, UnknownOpThrows) { EXPECT_THROW(RunGradCheck("nope"), ConfigError); }

TEST(Tape, ParameterGradientsAccumulate) {
  Parameter w("w", Tensor({2, 1}, std::vector<double>{1.0, -2.0}));
  w.ZeroGrad();
  for (int i = 0; i < 2; ++i) {
    Tape tape;
    Var x = tape.Constant(Tensor({1, 2}, std::vector<double>{3.0, 4.0}));
    tape.Backward(ad::Mean(ad::MatMul(x, tape.Bind(w))));
  }
  EXPECT_DOUBLE_EQ(w.grad[0], 6.0);
  EXPECT_DOUBLE_EQ(w.grad[1], 8.0);
}

TEST(Tape, FrozenParameterGetsNoGradient) {
  Parameter w("w", Tensor({2, 1}, 1.0));
  w.ZeroGrad();
  Tape tape;
  Var x = tape.Leaf(Tensor({1, 2}, 1.0));
  tape.Backward(ad::Mean(ad::MatMul(x, tape.Bind(w, /*trainable=*/false))));
  EXPECT_EQ(w.grad.MaxAbs(), 0.0);
  EXPECT_DOUBLE_EQ(tape.Grad(x)[0], 1.0);
}

TEST(Tape, NonScalarLossThrows) {
  Tape tape;
  Var x = tape.Leaf(Tensor({2}, 1.0));
  EXPECT_THROW(tape.Backward(x), ShapeError);
}

TEST(Ops, ShapeErrorsNameTheOp) {
  Tape tape;
  Var a = tape.Leaf(Tensor({2, 3}));
  Var b = tape.Leaf(Tensor({3, 2}));
  try {
    ad::Add(a, b);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("add"), std::string::npos);
  }
  EXPECT_THROW(ad::MatMul(a, a), ShapeError);
  EXPECT_THROW(ad::ReflectionPad2d(tape.Leaf(Tensor({1, 1, 1, 4})), 1, 1), ShapeError);
  EXPECT_THROW(ad::Conv2d(tape.Leaf(Tensor({1, 1, 2, 2})), tape.Leaf(Tensor({1, 1, 3, 3})),
                          Var(), {}),
               ShapeError);
}

TEST(Ops, ConvMatchesDirectSum) {
  std::mt19937_64 rng(12);
  Tensor x = Random({1, 2, 5, 6}, rng), w = Random({3, 2, 3, 3}, rng);
  Tape tape;
  ad::Conv2dOptions opt{2, 1, 1, 1};
  Var y = ad::Conv2d(tape.Constant(x), tape.Constant(w), Var(), opt);
  ASSERT_EQ(y.shape(), (Shape{1, 3, 3, 6}));
  for (int o = 0; o < 3; ++o)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 6; ++j) {
        double s = 0.0;
        for (int c = 0; c < 2; ++c)
          for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) {
              const int yy = 2 * i - 1 + a, xx = j - 1 + b;
              if (yy < 0 || yy >= 5 || xx < 0 || xx >= 6) continue;
              s += w[((o * 2 + c) * 3 + a) * 3 + b] * x[(c * 5 + yy) * 6 + xx];
            }
        EXPECT_NEAR(y.value()[(o * 3 + i) * 6 + j], s, 1e-12);
      }
}

TEST(Ops, BatchNormUpdatesRunningStats) {
  Tape tape;
  Parameter g("g", Tensor({1}, 1.0)), b("b", Tensor({1}, 0.0));
  ad::BatchNormStats stats{Parameter("m", Tensor({1}, 0.0)), Parameter("v", Tensor({1}, 1.0))};
  Var x = tape.Constant(Tensor({1, 1, 1, 4}, std::vector<double>{1, 2, 3, 4}));
  ad::BatchNorm2d(x, tape.Bind(g), tape.Bind(b), stats, true, 0.5);
  EXPECT_DOUBLE_EQ(stats.running_mean.value[0], 1.25);
  EXPECT_NEAR(stats.running_var.value[0], 0.5 + 0.5 * (5.0 / 3.0), 1e-12);
}

TEST(Optim, AdamFirstStepMovesByLearningRate) {
  Parameter p("p", Tensor({2}, std::vector<double>{1.0, 1.0}));
  p.grad = Tensor({2}, std::vector<double>{0.5, -3.0});
  AdamOptions opt;
  opt.lr = 0.1;
  AdamStep({&p}, opt);
  EXPECT_NEAR(p.value[0], 0.9, 1e-6);
  EXPECT_NEAR(p.value[1], 1.1, 1e-6);
}

TEST(Optim, SignStepTreatsZeroAsZero) {
  Tensor x({3}, 0.0);
  SignDescentStep(x, Tensor({3}, std::vector<double>{2.0, 0.0, -1e-30}), 0.25);
  EXPECT_EQ(x[0], -0.25);
  EXPECT_EQ(x[1], 0.0);
  EXPECT_EQ(x[2], 0.25);
}

}  // namespace
}  // namespace predmask
