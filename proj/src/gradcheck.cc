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

#include "predmask/gradcheck.h"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <random>

#include "predmask/autodiff.h"
#include "predmask/error.h"

namespace predmask {
namespace {

using Rng64 = std::mt19937_64;
using Maker = std::function<std::vector<Tensor>(Rng64&)>;
// Builds the op output from the input Vars.
using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

struct OpSuite {
  Maker make;
  Builder build;
  uint64_t seed;
};

Tensor Random(const Shape& s, Rng64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(s);
  for (double& v : t.values()) v = n(rng);
  return t;
}

int Int(Rng64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

double Evaluate(const Builder& build, const std::vector<Tensor>& inputs, const Tensor& proj) {
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(tape.Constant(t));
  Var out = build(tape, vars);
  double s = 0.0;
  for (int64_t i = 0; i < out.value().size(); ++i) s += out.value()[i] * proj[i];
  return s;
}

double CheckOnce(const Builder& build, std::vector<Tensor> inputs, Rng64& rng, double step) {
  Tensor proj;
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& t : inputs) vars.push_back(tape.Leaf(t));
    Var out = build(tape, vars);
    proj = Random(out.shape(), rng);
    Var loss = ad::Scale(ad::Mean(ad::Mul(out, proj)), static_cast<double>(proj.size()));
    tape.Backward(loss);
    for (const Var& v : vars) analytic.push_back(tape.Grad(v));
  }
  double worst = 0.0;
  for (size_t k = 0; k < inputs.size(); ++k) {
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (int64_t i = 0; i < inputs[k].size(); ++i) {
      const double orig = inputs[k][i];
      inputs[k][i] = orig + step;
      const double fp = Evaluate(build, inputs, proj);
      inputs[k][i] = orig - step;
      const double fm = Evaluate(build, inputs, proj);
      inputs[k][i] = orig;
      const double num = (fp - fm) / (2 * step);
      const double a = analytic[k][i];
      diff += (a - num) * (a - num);
      na += a * a;
      nn += num * num;
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-8});
    worst = std::max(worst, std::sqrt(diff) / denom);
  }
  return worst;
}

Var BatchNormOp(const std::vector<Var>& v, bool training) {
  const int c = v[1].dim(0);
  ad::BatchNormStats stats{Parameter("m", Tensor({c}, 0.3)), Parameter("v", Tensor({c}, 1.7))};
  return ad::BatchNorm2d(v[0], v[1], v[2], stats, training);
}

std::vector<Tensor> BatchNormInputs(Rng64& rng) {
  const int c = Int(rng, 1, 3);
  Tensor x = Random({Int(rng, 1, 3), c, Int(rng, 2, 4), Int(rng, 2, 4)}, rng, 2.0);
  Tensor gamma = Random({c}, rng);
  return {x, gamma, Random({c}, rng)};
}

const std::map<std::string, OpSuite>& Suites() {
  static const std::map<std::string, OpSuite> suites = {
      {"add_sub_scale",
       {[](Rng64& rng) {
          Shape s = {Int(rng, 1, 4), Int(rng, 1, 5)};
          return std::vector<Tensor>{Random(s, rng), Random(s, rng)};
        },
        [](Tape&, const std::vector<Var>& v) {
          Var d = ad::Sub(ad::Add(v[0], v[1]), ad::Affine(v[1], 3.0, 0.4));
          return ad::Transpose(ad::Scale(d, -0.7));
        },
        1}},
      {"matmul_add_bias",
       {[](Rng64& rng) {
          const int m = Int(rng, 1, 4), k = Int(rng, 1, 5), n = Int(rng, 1, 4);
          return std::vector<Tensor>{Random({m, k}, rng), Random({k, n}, rng), Random({n}, rng)};
        },
        [](Tape&, const std::vector<Var>& v) { return ad::AddBias(ad::MatMul(v[0], v[1]), v[2]); },
        2}},
      {"conv2d",
       {[](Rng64& rng) {
          const int n = Int(rng, 1, 2), c = Int(rng, 1, 3), o = Int(rng, 1, 3);
          const int k = Int(rng, 1, 3);
          return std::vector<Tensor>{Random({n, c, Int(rng, k, 7), Int(rng, k, 7)}, rng),
                                     Random({o, c, k, k}, rng), Random({o}, rng)};
        },
        [](Tape&, const std::vector<Var>& v) {
          ad::Conv2dOptions opt;
          opt.stride_h = 1 + v[0].dim(2) % 2;
          opt.stride_w = 1 + v[0].dim(3) % 3 % 2;
          opt.pad_h = v[1].dim(2) / 2;
          opt.pad_w = v[1].dim(3) / 2;
          return ad::Conv2d(v[0], v[1], v[2], opt);
        },
        3}},
      {"conv_transpose2d",
       {[](Rng64& rng) {
          const int n = Int(rng, 1, 2), c = Int(rng, 1, 3), o = Int(rng, 1, 3);
          return std::vector<Tensor>{Random({n, c, Int(rng, 1, 5), Int(rng, 1, 5)}, rng),
                                     Random({c, o, 3, 3}, rng), Random({o}, rng)};
        },
        [](Tape&, const std::vector<Var>& v) {
          ad::ConvTranspose2dOptions opt;
          opt.stride_h = 2;
          opt.stride_w = 1 + v[0].dim(3) % 2;
          opt.pad_h = opt.pad_w = 1;
          opt.output_pad_h = 1;
          opt.output_pad_w = opt.stride_w - 1;
          return ad::ConvTranspose2d(v[0], v[1], v[2], opt);
        },
        4}},
      {"reflection_pad2d",
       {[](Rng64& rng) {
          return std::vector<Tensor>{
              Random({Int(rng, 1, 2), Int(rng, 1, 2), Int(rng, 2, 5), Int(rng, 2, 5)}, rng)};
        },
        [](Tape&, const std::vector<Var>& v) { return ad::ReflectionPad2d(v[0], 1, 1); }, 5}},
      {"batch_norm_train",
       {BatchNormInputs, [](Tape&, const std::vector<Var>& v) { return BatchNormOp(v, true); },
        6}},
      {"batch_norm_eval",
       {BatchNormInputs, [](Tape&, const std::vector<Var>& v) { return BatchNormOp(v, false); },
        12}},
      {"activations",
       {[](Rng64& rng) {
          return std::vector<Tensor>{Random({Int(rng, 1, 4), Int(rng, 1, 6)}, rng),
                                     Random({1}, rng, 0.3)};
        },
        [](Tape&, const std::vector<Var>& v) {
          return ad::Tanh(ad::LeakyRelu(ad::PRelu(v[0], v[1]), 0.2));
        },
        7}},
      {"losses_and_norms",
       {[](Rng64& rng) {
          Shape s = {Int(rng, 1, 4), Int(rng, 2, 6)};
          return std::vector<Tensor>{Random(s, rng), Random(s, rng)};
        },
        [](Tape&, const std::vector<Var>& v) {
          Var cos = ad::Mean(ad::CosineSimilarity(v[0], v[1]));
          Var mse = ad::Mse(ad::L2NormalizeRows(v[0]), v[1]);
          return ad::Add(cos, mse);
        },
        8}},
      {"softmax_cross_entropy",
       {[](Rng64& rng) {
          return std::vector<Tensor>{Random({Int(rng, 1, 5), Int(rng, 2, 6)}, rng, 3.0)};
        },
        [](Tape&, const std::vector<Var>& v) {
          std::vector<int> labels;
          for (int r = 0; r < v[0].dim(0); ++r) labels.push_back((r * 7 + 3) % v[0].dim(1));
          return ad::SoftmaxCrossEntropy(v[0], labels);
        },
        9}},
      {"pooling_and_grouping",
       {[](Rng64& rng) {
          return std::vector<Tensor>{Random({4, Int(rng, 1, 3), Int(rng, 1, 3), 5}, rng)};
        },
        [](Tape&, const std::vector<Var>& v) {
          Var m = ad::MeanLastAxis(v[0]);
          Var flat = ad::Reshape(m, {4, static_cast<int>(m.value().size() / 4)});
          Var both = ad::ConcatRows({flat, ad::Scale(flat, 2.0)});
          return ad::GroupMeanRows(both, {3, 1, 4});
        },
        10}},
      {"time_axis",
       {[](Rng64& rng) {
          const int h = Int(rng, 1, 4);
          return std::vector<Tensor>{Random({h, Int(rng, 6, 12)}, rng), Random({h, 3}, rng)};
        },
        [](Tape&, const std::vector<Var>& v) {
          const int t = v[0].dim(1);
          Var joined = ad::ConcatColumns({v[0], v[1]});
          Var win = ad::Windows(joined, {0, 2, t - 1}, 4);
          Var cols = ad::ChunksToColumns(win);
          return ad::SliceColumns(cols, 1, 9);
        },
        11}},
  };
  return suites;
}

}  // namespace

std::vector<std::string> GradCheckOps() {
  std::vector<std::string> names;
  for (const auto& [name, suite] : Suites()) names.push_back(name);
  return names;
}

GradCheckResult RunGradCheck(const std::string& op, int trials, double step) {
  const auto it = Suites().find(op);
  if (it == Suites().end()) throw ConfigError("gradcheck: unknown op '" + op + "'");
  if (trials < 1) throw ConfigError("gradcheck: trials must be >= 1");
  Rng64 rng(it->second.seed);
  GradCheckResult r;
  r.op = op;
  r.trials = trials;
  for (int t = 0; t < trials; ++t) {
    r.worst_error = std::max(r.worst_error, CheckOnce(it->second.build, it->second.make(rng), rng, step));
  }
  return r;
}

}  // namespace predmask
