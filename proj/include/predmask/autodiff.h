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

// Reverse-mode automatic differentiation over dense double tensors.
//
// A Tape records every operation applied to its Vars. Nodes are appended in
// creation order, which is a topological order, so Backward() walks the node
// list once in reverse. Each Tape is single-threaded; independent Tapes may
// run concurrently over shared read-only Parameters.
//
//   Tape tape;
//   Var w = tape.Bind(weight);
//   Var x = tape.Constant(input);
//   Var loss = ad::Mse(ad::MatMul(x, w), tape.Constant(target));
//   tape.Backward(loss);   // weight.grad += dloss/dweight

#ifndef PREDMASK_AUTODIFF_H_
#define PREDMASK_AUTODIFF_H_

#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "predmask/tensor.h"

namespace predmask {

// A trainable tensor with its gradient accumulator and Adam moments.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name, Tensor value);

  void ZeroGrad() { grad.Fill(0.0); }

  std::string name;
  Tensor value;
  Tensor grad;
  Tensor adam_m;
  Tensor adam_v;
  int64_t adam_step = 0;
};

class Tape;

// Handle to a node on a Tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  int dim(int i) const { return value().dim(i); }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  // Propagates the gradient of node `self` into its inputs.
  using BackwardFn = std::function<void(Tape& tape, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var Constant(Tensor value);
  // Differentiable input whose gradient is read back with Grad().
  Var Leaf(Tensor value);
  // References `p.value` without copying. When trainable, Backward() adds the
  // node gradient into p.grad; otherwise the parameter acts as a constant.
  Var Bind(Parameter& p, bool trainable = true);
  // Constant view of a parameter that is never updated through this tape.
  Var BindConst(const Parameter& p);

  // Requires a scalar (single-element) loss. Node gradients are recomputed
  // from scratch on every call; parameter gradients accumulate.
  void Backward(const Var& loss);
  // Gradient of the last Backward() call; zeros if the node was unreachable.
  Tensor Grad(const Var& v) const;

  int size() const { return static_cast<int>(nodes_.size()); }

  // Op-author interface.
  Var Record(Tensor value, std::vector<int> inputs, BackwardFn backward);
  const Tensor& ValueOf(int id) const;
  bool RequiresGrad(int id) const { return nodes_[id].requires_grad; }
  // Gradient buffer of node `id`, zero-initialized on first access.
  Tensor& GradOf(int id);
  bool HasGrad(int id) const { return !nodes_[id].grad.empty(); }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    std::vector<int> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    Parameter* param = nullptr;
  };

  std::deque<Node> nodes_;
};

namespace ad {

struct Conv2dOptions {
  int stride_h = 1;
  int stride_w = 1;
  int pad_h = 0;
  int pad_w = 0;
};

struct ConvTranspose2dOptions {
  int stride_h = 1;
  int stride_w = 1;
  int pad_h = 0;
  int pad_w = 0;
  int output_pad_h = 0;
  int output_pad_w = 0;
};

// Running statistics of a batch-norm layer. Stored as Parameters so they
// travel with checkpoints; never bound as trainable.
struct BatchNormStats {
  Parameter running_mean;
  Parameter running_var;
};

// Output size of a convolution along one spatial dimension.
int ConvOutputSize(int in, int kernel, int stride, int pad);
int ConvTransposeOutputSize(int in, int kernel, int stride, int pad, int output_pad);

Var Add(const Var& a, const Var& b);
Var Sub(const Var& a, const Var& b);
Var Scale(const Var& a, double s);
// a * s + shift, elementwise.
Var Affine(const Var& a, double s, double shift);
// Elementwise product with a constant tensor of the same shape.
Var Mul(const Var& a, const Tensor& c);
// (M x K) * (K x N).
Var MatMul(const Var& a, const Var& b);
Var Transpose(const Var& a);
// Adds a length-F bias to every row of an (N x F) input.
Var AddBias(const Var& x, const Var& bias);

// x: N x C x H x W, weight: O x C x kh x kw, bias: O (or invalid Var).
Var Conv2d(const Var& x, const Var& weight, const Var& bias, const Conv2dOptions& opt);
// x: N x Cin x H x W, weight: Cin x Cout x kh x kw, bias: Cout (or invalid Var).
Var ConvTranspose2d(const Var& x, const Var& weight, const Var& bias,
                    const ConvTranspose2dOptions& opt);
Var ReflectionPad2d(const Var& x, int pad_h, int pad_w);
// Train mode normalizes with batch statistics and folds them into `stats`
// with the given momentum; eval mode is the affine map from running stats.
Var BatchNorm2d(const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats,
                bool training, double momentum = 0.1, double eps = 1e-5);

Var PRelu(const Var& x, const Var& slope);
Var LeakyRelu(const Var& x, double slope = 0.01);
Var Tanh(const Var& x);

// Mean squared error over all elements.
Var Mse(const Var& a, const Var& b);
// Row-wise cosine similarity of two (N x F) inputs; result has shape N.
Var CosineSimilarity(const Var& a, const Var& b, double eps = 1e-12);
// Mean over all elements (scalar result).
Var Mean(const Var& x);
// Mean softmax cross-entropy of (N x K) logits against class labels.
Var SoftmaxCrossEntropy(const Var& logits, const std::vector<int>& labels);

// Row-wise x / sqrt(|x|^2 + eps).
Var L2NormalizeRows(const Var& x, double eps = 1e-12);
// Mean over the last axis of an (N x C x H x W) input -> (N x C x H).
Var MeanLastAxis(const Var& x);
Var Reshape(const Var& x, Shape shape);
// Averages consecutive row groups of an (N x F) input; sizes sum to N.
Var GroupMeanRows(const Var& x, const std::vector<int>& group_sizes);
// Concatenates (Ni x ...) inputs along the first axis.
Var ConcatRows(const std::vector<Var>& parts);

// Column-major time-axis helpers for (H x T) spectrogram-like inputs.
// Windows: N windows of `length` columns -> (N x 1 x H x length).
Var Windows(const Var& x, const std::vector<int>& starts, int length);
Var ConcatColumns(const std::vector<Var>& parts);
Var SliceColumns(const Var& x, int start, int length);
// (N x 1 x H x C) chunks laid end to end -> (H x N*C).
Var ChunksToColumns(const Var& x);

}  // namespace ad
}  // namespace predmask

#endif  // PREDMASK_AUTODIFF_H_
