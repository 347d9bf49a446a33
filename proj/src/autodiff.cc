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

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "predmask/error.h"

namespace predmask {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMajor>;
using ConstMapMat = Eigen::Map<const RowMajor>;

Parameter::Parameter(std::string name, Tensor value)
    : name(std::move(name)),
      value(std::move(value)),
      grad(this->value.shape()),
      adam_m(this->value.shape()),
      adam_v(this->value.shape()) {}

const Tensor& Var::value() const { return tape_->ValueOf(id_); }

Var Tape::Constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, size() - 1);
}

Var Tape::Leaf(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var(this, size() - 1);
}

Var Tape::Bind(Parameter& p, bool trainable) {
  Node n;
  n.external = &p.value;
  n.requires_grad = trainable;
  if (trainable) {
    if (p.grad.shape() != p.value.shape()) p.grad = Tensor(p.value.shape());
    n.param = &p;
  }
  nodes_.push_back(std::move(n));
  return Var(this, size() - 1);
}

Var Tape::BindConst(const Parameter& p) {
  Node n;
  n.external = &p.value;
  nodes_.push_back(std::move(n));
  return Var(this, size() - 1);
}

Var Tape::Record(Tensor value, std::vector<int> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [this](int id) { return nodes_[id].requires_grad; });
  if (n.requires_grad) n.backward = std::move(backward);
  n.inputs = std::move(inputs);
  nodes_.push_back(std::move(n));
  return Var(this, size() - 1);
}

const Tensor& Tape::ValueOf(int id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.value;
}

Tensor& Tape::GradOf(int id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(ValueOf(id).shape());
  return n.grad;
}

void Tape::Backward(const Var& loss) {
  if (loss.tape() != this) throw Error("backward: loss belongs to another tape");
  if (ValueOf(loss.id()).size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " +
                     ShapeToString(ValueOf(loss.id()).shape()));
  }
  for (Node& n : nodes_) n.grad = Tensor();
  GradOf(loss.id())[0] = 1.0;
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param) {
      double* g = n.param->grad.data();
      const double* src = n.grad.data();
      for (int64_t i = 0; i < n.grad.size(); ++i) g[i] += src[i];
    }
  }
}

Tensor Tape::Grad(const Var& v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.empty()) return Tensor(ValueOf(v.id()).shape());
  return n.grad;
}

namespace ad {
namespace {

void Require(bool cond, const std::string& op, const std::string& detail) {
  if (!cond) throw ShapeError(op + ": " + detail);
}

void RequireSameShape(const Var& a, const Var& b, const std::string& op) {
  Require(a.tape() == b.tape(), op, "operands on different tapes");
  Require(a.shape() == b.shape(), op,
          "shape mismatch " + ShapeToString(a.shape()) + " vs " + ShapeToString(b.shape()));
}

void AddInto(Tensor& dst, const Tensor& src, double scale = 1.0) {
  double* d = dst.data();
  const double* s = src.data();
  for (int64_t i = 0; i < src.size(); ++i) d[i] += scale * s[i];
}

struct ConvGeometry {
  int channels, height, width;  // image
  int kh, kw, sh, sw, ph, pw;
  int out_h, out_w;             // sliding positions
};

// cols is (C*kh*kw) x (out_h*out_w), row-major.
void Im2Col(const double* img, const ConvGeometry& g, double* cols) {
  const int positions = g.out_h * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        double* row = cols + static_cast<int64_t>((c * g.kh + i) * g.kw + j) * positions;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int y = oy * g.sh - g.ph + i;
          double* dst = row + oy * g.out_w;
          if (y < 0 || y >= g.height) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = img + (static_cast<int64_t>(c) * g.height + y) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int x = ox * g.sw - g.pw + j;
            dst[ox] = (x < 0 || x >= g.width) ? 0.0 : src[x];
          }
        }
      }
    }
  }
}

// Accumulates cols back into img (adjoint of Im2Col).
void Col2Im(const double* cols, const ConvGeometry& g, double* img) {
  const int positions = g.out_h * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        const double* row =
            cols + static_cast<int64_t>((c * g.kh + i) * g.kw + j) * positions;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int y = oy * g.sh - g.ph + i;
          if (y < 0 || y >= g.height) continue;
          double* dst = img + (static_cast<int64_t>(c) * g.height + y) * g.width;
          const double* src = row + oy * g.out_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int x = ox * g.sw - g.pw + j;
            if (x >= 0 && x < g.width) dst[x] += src[ox];
          }
        }
      }
    }
  }
}

int Reflect(int i, int n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * (n - 1) - i;
  return i;
}

// Rows x cols view of a tensor whose first axis is the row axis.
int64_t RowWidth(const Shape& s) {
  int64_t w = 1;
  for (size_t i = 1; i < s.size(); ++i) w *= s[i];
  return w;
}

}  // namespace

int ConvOutputSize(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

int ConvTransposeOutputSize(int in, int kernel, int stride, int pad, int output_pad) {
  return (in - 1) * stride - 2 * pad + kernel + output_pad;
}

Var Add(const Var& a, const Var& b) {
  RequireSameShape(a, b, "add");
  Tensor out = a.value();
  AddInto(out, b.value());
  const int ia = a.id(), ib = b.id();
  return a.tape()->Record(std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Tensor& g = t.GradOf(self);
    if (t.RequiresGrad(ia)) AddInto(t.GradOf(ia), g);
    if (t.RequiresGrad(ib)) AddInto(t.GradOf(ib), g);
  });
}

Var Sub(const Var& a, const Var& b) {
  RequireSameShape(a, b, "sub");
  Tensor out = a.value();
  AddInto(out, b.value(), -1.0);
  const int ia = a.id(), ib = b.id();
  return a.tape()->Record(std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Tensor& g = t.GradOf(self);
    if (t.RequiresGrad(ia)) AddInto(t.GradOf(ia), g);
    if (t.RequiresGrad(ib)) AddInto(t.GradOf(ib), g, -1.0);
  });
}

Var Scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= s;
  const int ia = a.id();
  return a.tape()->Record(std::move(out), {ia}, [ia, s](Tape& t, int self) {
    AddInto(t.GradOf(ia), t.GradOf(self), s);
  });
}

Var Affine(const Var& a, double s, double shift) {
  Tensor out = a.value();
  for (double& v : out.values()) v = v * s + shift;
  const int ia = a.id();
  return a.tape()->Record(std::move(out), {ia}, [ia, s](Tape& t, int self) {
    AddInto(t.GradOf(ia), t.GradOf(self), s);
  });
}

Var Transpose(const Var& a) {
  Require(a.value().ndim() == 2, "transpose", "expected 2-d input, got " + ShapeToString(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  MapMat(out.data(), n, m) = ConstMapMat(a.value().data(), m, n).transpose();
  const int ia = a.id();
  return a.tape()->Record(std::move(out), {ia}, [ia, m, n](Tape& t, int self) {
    MapMat(t.GradOf(ia).data(), m, n) += ConstMapMat(t.GradOf(self).data(), n, m).transpose();
  });
}

Var Mul(const Var& a, const Tensor& c) {
  Require(a.shape() == c.shape(), "mul",
          "shape mismatch " + ShapeToString(a.shape()) + " vs " + ShapeToString(c.shape()));
  Tensor out = a.value();
  for (int64_t i = 0; i < out.size(); ++i) out[i] *= c[i];
  const int ia = a.id();
  return a.tape()->Record(std::move(out), {ia}, [ia, c](Tape& t, int self) {
    const Tensor& g = t.GradOf(self);
    Tensor& ga = t.GradOf(ia);
    for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c[i];
  });
}

Var MatMul(const Var& a, const Var& b) {
  Require(a.tape() == b.tape(), "matmul", "operands on different tapes");
  Require(a.value().ndim() == 2 && b.value().ndim() == 2 && a.dim(1) == b.dim(0), "matmul",
          "cannot multiply " + ShapeToString(a.shape()) + " by " + ShapeToString(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  MapMat(out.data(), m, n).noalias() =
      ConstMapMat(a.value().data(), m, k) * ConstMapMat(b.value().data(), k, n);
  const int ia = a.id(), ib = b.id();
  return a.tape()->Record(std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape& t, int self) {
    ConstMapMat g(t.GradOf(self).data(), m, n);
    if (t.RequiresGrad(ia)) {
      MapMat(t.GradOf(ia).data(), m, k).noalias() +=
          g * ConstMapMat(t.ValueOf(ib).data(), k, n).transpose();
    }
    if (t.RequiresGrad(ib)) {
      MapMat(t.GradOf(ib).data(), k, n).noalias() +=
          ConstMapMat(t.ValueOf(ia).data(), m, k).transpose() * g;
    }
  });
}

Var AddBias(const Var& x, const Var& bias) {
  Require(x.tape() == bias.tape(), "add_bias", "operands on different tapes");
  Require(x.value().ndim() == 2 && bias.value().ndim() == 1 && bias.dim(0) == x.dim(1),
          "add_bias",
          "bias " + ShapeToString(bias.shape()) + " does not fit " + ShapeToString(x.shape()));
  const int rows = x.dim(0), cols = x.dim(1);
  Tensor out = x.value();
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out.at(r, c) += bias.value()[c];
  const int ix = x.id(), ib = bias.id();
  return x.tape()->Record(std::move(out), {ix, ib}, [ix, ib, rows, cols](Tape& t, int self) {
    const Tensor& g = t.GradOf(self);
    if (t.RequiresGrad(ix)) AddInto(t.GradOf(ix), g);
    if (t.RequiresGrad(ib)) {
      Tensor& gb = t.GradOf(ib);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) gb[c] += g.at(r, c);
    }
  });
}

Var Conv2d(const Var& x, const Var& weight, const Var& bias, const Conv2dOptions& opt) {
  const Tensor& X = x.value();
  const Tensor& W = weight.value();
  Require(X.ndim() == 4 && W.ndim() == 4, "conv2d",
          "expected 4-d input and weight, got " + ShapeToString(X.shape()) + " and " +
              ShapeToString(W.shape()));
  Require(X.dim(1) == W.dim(1), "conv2d",
          "input channels " + ShapeToString(X.shape()) + " vs weight " +
              ShapeToString(W.shape()));
  Require(opt.stride_h > 0 && opt.stride_w > 0, "conv2d", "stride must be positive");
  const int n_batch = X.dim(0), out_ch = W.dim(0);
  ConvGeometry g{X.dim(1), X.dim(2), X.dim(3), W.dim(2), W.dim(3), opt.stride_h,
                 opt.stride_w, opt.pad_h, opt.pad_w, 0, 0};
  g.out_h = ConvOutputSize(g.height, g.kh, g.sh, g.ph);
  g.out_w = ConvOutputSize(g.width, g.kw, g.sw, g.pw);
  Require(g.out_h > 0 && g.out_w > 0, "conv2d",
          "kernel " + ShapeToString(W.shape()) + " larger than padded input " +
              ShapeToString(X.shape()));
  const bool has_bias = bias.valid();
  if (has_bias) {
    Require(bias.value().ndim() == 1 && bias.dim(0) == out_ch, "conv2d",
            "bias " + ShapeToString(bias.shape()) + " for " + std::to_string(out_ch) +
                " output channels");
  }
  const int k = g.channels * g.kh * g.kw;
  const int p = g.out_h * g.out_w;
  const int64_t in_stride = static_cast<int64_t>(g.channels) * g.height * g.width;
  auto cols = std::make_shared<std::vector<double>>(static_cast<int64_t>(n_batch) * k * p);
  Tensor out({n_batch, out_ch, g.out_h, g.out_w});
  ConstMapMat wm(W.data(), out_ch, k);
  for (int n = 0; n < n_batch; ++n) {
    double* cn = cols->data() + static_cast<int64_t>(n) * k * p;
    Im2Col(X.data() + n * in_stride, g, cn);
    MapMat on(out.data() + static_cast<int64_t>(n) * out_ch * p, out_ch, p);
    on.noalias() = wm * ConstMapMat(cn, k, p);
    if (has_bias) {
      for (int o = 0; o < out_ch; ++o) on.row(o).array() += bias.value()[o];
    }
  }
  std::vector<int> inputs = {x.id(), weight.id()};
  if (has_bias) inputs.push_back(bias.id());
  const int ix = x.id(), iw = weight.id(), ib = has_bias ? bias.id() : -1;
  return x.tape()->Record(
      std::move(out), inputs,
      [=](Tape& t, int self) {
        const Tensor& go = t.GradOf(self);
        ConstMapMat wm(t.ValueOf(iw).data(), out_ch, k);
        std::vector<double> dcols(static_cast<int64_t>(k) * p);
        for (int n = 0; n < n_batch; ++n) {
          ConstMapMat gn(go.data() + static_cast<int64_t>(n) * out_ch * p, out_ch, p);
          const double* cn = cols->data() + static_cast<int64_t>(n) * k * p;
          if (t.RequiresGrad(iw)) {
            MapMat(t.GradOf(iw).data(), out_ch, k).noalias() +=
                gn * ConstMapMat(cn, k, p).transpose();
          }
          if (ib >= 0 && t.RequiresGrad(ib)) {
            Tensor& gb = t.GradOf(ib);
            for (int o = 0; o < out_ch; ++o) gb[o] += gn.row(o).sum();
          }
          if (t.RequiresGrad(ix)) {
            MapMat(dcols.data(), k, p).noalias() = wm.transpose() * gn;
            Col2Im(dcols.data(), g, t.GradOf(ix).data() + n * in_stride);
          }
        }
      });
}

Var ConvTranspose2d(const Var& x, const Var& weight, const Var& bias,
                    const ConvTranspose2dOptions& opt) {
  const Tensor& X = x.value();
  const Tensor& W = weight.value();
  Require(X.ndim() == 4 && W.ndim() == 4, "conv_transpose2d",
          "expected 4-d input and weight, got " + ShapeToString(X.shape()) + " and " +
              ShapeToString(W.shape()));
  Require(X.dim(1) == W.dim(0), "conv_transpose2d",
          "input channels " + ShapeToString(X.shape()) + " vs weight " +
              ShapeToString(W.shape()));
  Require(opt.stride_h > 0 && opt.stride_w > 0, "conv_transpose2d",
          "stride must be positive");
  Require(opt.output_pad_h < opt.stride_h && opt.output_pad_w < opt.stride_w &&
              opt.output_pad_h >= 0 && opt.output_pad_w >= 0,
          "conv_transpose2d", "output padding must be in [0, stride)");
  const int n_batch = X.dim(0), in_ch = X.dim(1), out_ch = W.dim(1);
  const int in_h = X.dim(2), in_w = X.dim(3);
  ConvGeometry g{out_ch,
                 ConvTransposeOutputSize(in_h, W.dim(2), opt.stride_h, opt.pad_h,
                                         opt.output_pad_h),
                 ConvTransposeOutputSize(in_w, W.dim(3), opt.stride_w, opt.pad_w,
                                         opt.output_pad_w),
                 W.dim(2), W.dim(3), opt.stride_h, opt.stride_w, opt.pad_h, opt.pad_w,
                 in_h, in_w};
  Require(g.height > 0 && g.width > 0, "conv_transpose2d",
          "non-positive output size for input " + ShapeToString(X.shape()));
  const bool has_bias = bias.valid();
  if (has_bias) {
    Require(bias.value().ndim() == 1 && bias.dim(0) == out_ch, "conv_transpose2d",
            "bias " + ShapeToString(bias.shape()) + " for " + std::to_string(out_ch) +
                " output channels");
  }
  const int k = out_ch * g.kh * g.kw;
  const int p = in_h * in_w;
  const int64_t out_stride = static_cast<int64_t>(out_ch) * g.height * g.width;
  Tensor out({n_batch, out_ch, g.height, g.width});
  ConstMapMat wm(W.data(), in_ch, k);
  std::vector<double> cols(static_cast<int64_t>(k) * p);
  for (int n = 0; n < n_batch; ++n) {
    MapMat(cols.data(), k, p).noalias() =
        wm.transpose() * ConstMapMat(X.data() + static_cast<int64_t>(n) * in_ch * p, in_ch, p);
    double* on = out.data() + n * out_stride;
    Col2Im(cols.data(), g, on);
    if (has_bias) {
      const int plane = g.height * g.width;
      for (int o = 0; o < out_ch; ++o)
        for (int q = 0; q < plane; ++q) on[o * plane + q] += bias.value()[o];
    }
  }
  std::vector<int> inputs = {x.id(), weight.id()};
  if (has_bias) inputs.push_back(bias.id());
  const int ix = x.id(), iw = weight.id(), ib = has_bias ? bias.id() : -1;
  return x.tape()->Record(std::move(out), inputs, [=](Tape& t, int self) {
    const Tensor& go = t.GradOf(self);
    ConstMapMat wm(t.ValueOf(iw).data(), in_ch, k);
    std::vector<double> dcols(static_cast<int64_t>(k) * p);
    const int plane = g.height * g.width;
    for (int n = 0; n < n_batch; ++n) {
      const double* gn = go.data() + n * out_stride;
      Im2Col(gn, g, dcols.data());
      ConstMapMat dc(dcols.data(), k, p);
      if (t.RequiresGrad(ix)) {
        MapMat(t.GradOf(ix).data() + static_cast<int64_t>(n) * in_ch * p, in_ch, p)
            .noalias() += wm * dc;
      }
      if (t.RequiresGrad(iw)) {
        MapMat(t.GradOf(iw).data(), in_ch, k).noalias() +=
            ConstMapMat(t.ValueOf(ix).data() + static_cast<int64_t>(n) * in_ch * p, in_ch, p) *
            dc.transpose();
      }
      if (ib >= 0 && t.RequiresGrad(ib)) {
        Tensor& gb = t.GradOf(ib);
        for (int o = 0; o < out_ch; ++o) {
          double s = 0.0;
          for (int q = 0; q < plane; ++q) s += gn[o * plane + q];
          gb[o] += s;
        }
      }
    }
  });
}

Var ReflectionPad2d(const Var& x, int pad_h, int pad_w) {
  const Tensor& X = x.value();
  Require(X.ndim() == 4, "reflection_pad2d", "expected 4-d input, got " + ShapeToString(X.shape()));
  Require(pad_h >= 0 && pad_w >= 0 && pad_h < X.dim(2) && pad_w < X.dim(3), "reflection_pad2d",
          "padding (" + std::to_string(pad_h) + "," + std::to_string(pad_w) +
              ") must be smaller than spatial dims of " + ShapeToString(X.shape()));
  const int planes = X.dim(0) * X.dim(1), h = X.dim(2), w = X.dim(3);
  const int oh = h + 2 * pad_h, ow = w + 2 * pad_w;
  Tensor out({X.dim(0), X.dim(1), oh, ow});
  for (int pl = 0; pl < planes; ++pl) {
    const double* src = X.data() + static_cast<int64_t>(pl) * h * w;
    double* dst = out.data() + static_cast<int64_t>(pl) * oh * ow;
    for (int i = 0; i < oh; ++i) {
      const int si = Reflect(i - pad_h, h);
      for (int j = 0; j < ow; ++j) dst[i * ow + j] = src[si * w + Reflect(j - pad_w, w)];
    }
  }
  const int ix = x.id();
  return x.tape()->Record(std::move(out), {ix}, [=](Tape& t, int self) {
    const Tensor& go = t.GradOf(self);
    Tensor& gx = t.GradOf(ix);
    for (int pl = 0; pl < planes; ++pl) {
      const double* src = go.data() + static_cast<int64_t>(pl) * oh * ow;
      double* dst = gx.data() + static_cast<int64_t>(pl) * h * w;
      for (int i = 0; i < oh; ++i) {
        const int si = Reflect(i - pad_h, h);
        for (int j = 0; j < ow; ++j) dst[si * w + Reflect(j - pad_w, w)] += src[i * ow + j];
      }
    }
  });
}

Var BatchNorm2d(const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats,
                bool training, double momentum, double eps) {
  const Tensor& X = x.value();
  Require(X.ndim() == 4, "batch_norm2d", "expected 4-d input, got " + ShapeToString(X.shape()));
  const int n_batch = X.dim(0), ch = X.dim(1), plane = X.dim(2) * X.dim(3);
  Require(gamma.value().size() == ch && beta.value().size() == ch &&
              stats.running_mean.value.size() == ch && stats.running_var.value.size() == ch,
          "batch_norm2d", "per-channel parameters do not match " + ShapeToString(X.shape()));
  const int64_t count = static_cast<int64_t>(n_batch) * plane;
  std::vector<double> mean(ch), inv_std(ch);
  if (training) {
    Require(count > 1, "batch_norm2d", "training mode needs more than one value per channel");
    for (int c = 0; c < ch; ++c) {
      double s = 0.0;
      for (int n = 0; n < n_batch; ++n) {
        const double* p = X.data() + (static_cast<int64_t>(n) * ch + c) * plane;
        for (int q = 0; q < plane; ++q) s += p[q];
      }
      const double mu = s / count;
      double ss = 0.0;
      for (int n = 0; n < n_batch; ++n) {
        const double* p = X.data() + (static_cast<int64_t>(n) * ch + c) * plane;
        for (int q = 0; q < plane; ++q) ss += (p[q] - mu) * (p[q] - mu);
      }
      const double var = ss / count;
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + eps);
      double& rm = stats.running_mean.value[c];
      double& rv = stats.running_var.value[c];
      rm = (1.0 - momentum) * rm + momentum * mu;
      rv = (1.0 - momentum) * rv + momentum * ss / (count - 1);
    }
  } else {
    for (int c = 0; c < ch; ++c) {
      mean[c] = stats.running_mean.value[c];
      inv_std[c] = 1.0 / std::sqrt(stats.running_var.value[c] + eps);
    }
  }
  Tensor xhat(X.shape());
  Tensor out(X.shape());
  for (int n = 0; n < n_batch; ++n) {
    for (int c = 0; c < ch; ++c) {
      const int64_t off = (static_cast<int64_t>(n) * ch + c) * plane;
      const double gm = gamma.value()[c], bt = beta.value()[c];
      for (int q = 0; q < plane; ++q) {
        const double h = (X[off + q] - mean[c]) * inv_std[c];
        xhat[off + q] = h;
        out[off + q] = gm * h + bt;
      }
    }
  }
  const int ix = x.id(), ig = gamma.id(), ibt = beta.id();
  return x.tape()->Record(
      std::move(out), {ix, ig, ibt},
      [=, xhat = std::move(xhat)](Tape& t, int self) {
        const Tensor& go = t.GradOf(self);
        const Tensor& gm = t.ValueOf(ig);
        for (int c = 0; c < ch; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (int n = 0; n < n_batch; ++n) {
            const int64_t off = (static_cast<int64_t>(n) * ch + c) * plane;
            for (int q = 0; q < plane; ++q) {
              sum_g += go[off + q];
              sum_gx += go[off + q] * xhat[off + q];
            }
          }
          if (t.RequiresGrad(ig)) t.GradOf(ig)[c] += sum_gx;
          if (t.RequiresGrad(ibt)) t.GradOf(ibt)[c] += sum_g;
          if (!t.RequiresGrad(ix)) continue;
          Tensor& gx = t.GradOf(ix);
          const double scale = gm[c] * inv_std[c];
          for (int n = 0; n < n_batch; ++n) {
            const int64_t off = (static_cast<int64_t>(n) * ch + c) * plane;
            for (int q = 0; q < plane; ++q) {
              if (training) {
                gx[off + q] += scale * (go[off + q] - sum_g / count -
                                        xhat[off + q] * sum_gx / count);
              } else {
                gx[off + q] += scale * go[off + q];
              }
            }
          }
        }
      });
}

Var PRelu(const Var& x, const Var& slope) {
  Require(slope.value().size() == 1, "prelu",
          "slope must be a single scalar, got " + ShapeToString(slope.shape()));
  const double a = slope.value()[0];
  Tensor out = x.value();
  for (double& v : out.values())
    if (v < 0.0) v *= a;
  const int ix = x.id(), is = slope.id();
  return x.tape()->Record(std::move(out), {ix, is}, [ix, is](Tape& t, int self) {
    const Tensor& g = t.GradOf(self);
    const Tensor& xv = t.ValueOf(ix);
    const double a = t.ValueOf(is)[0];
    if (t.RequiresGrad(ix)) {
      Tensor& gx = t.GradOf(ix);
      for (int64_t i = 0; i < g.size(); ++i) gx[i] += xv[i] < 0.0 ? a * g[i] : g[i];
    }
    if (t.RequiresGrad(is)) {
      double s = 0.0;
      for (int64_t i = 0; i < g.size(); ++i)
        if (xv[i] < 0.0) s += xv[i] * g[i];
      t.GradOf(is)[0] += s;
    }
  });
}

Var LeakyRelu(const Var& x, double slope) {
  Tensor out = x.value();
  for (double& v : out.values())
    if (v < 0.0) v *= slope;
  const int ix = x.id();
  return x.tape()->Record(std::move(out), {ix}, [ix, slope](Tape& t, int self) {
    const Tensor& g = t.GradOf(self);
    const Tensor& xv = t.ValueOf(ix);
    Tensor& gx = t.GradOf(ix);
    for (int64_t i = 0; i < g.size(); ++i) gx[i] += xv[i] < 0.0 ? slope * g[i] : g[i];
  });
}

Var Tanh(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = std::tanh(v);
  const int ix = x.id();
  return x.tape()->Record(std::move(out), {ix}, [ix](Tape& t, int self) {
    const Tensor& g = t.GradOf(self);
    const Tensor& yv = t.ValueOf(self);
    Tensor& gx = t.GradOf(ix);
    for (int64_t i = 0; i < g.size(); ++i) gx[i] += (1.0 - yv[i] * yv[i]) * g[i];
  });
}

Var Mse(const Var& a, const Var& b) {
  RequireSameShape(a, b, "mse");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const int64_t n = av.size();
  Require(n > 0, "mse", "empty operands");
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
  const int ia = a.id(), ib = b.id();
  return a.tape()->Record(Tensor::Scalar(s / n), {ia, ib}, [ia, ib, n](Tape& t, int self) {
    const double g = t.GradOf(self)[0];
    const Tensor& av = t.ValueOf(ia);
    const Tensor& bv = t.ValueOf(ib);
    const double k = 2.0 * g / n;
    if (t.RequiresGrad(ia)) {
      Tensor& ga = t.GradOf(ia);
      for (int64_t i = 0; i < n; ++i) ga[i] += k * (av[i] - bv[i]);
    }
    if (t.RequiresGrad(ib)) {
      Tensor& gb = t.GradOf(ib);
      for (int64_t i = 0; i < n; ++i) gb[i] -= k * (av[i] - bv[i]);
    }
  });
}

Var CosineSimilarity(const Var& a, const Var& b, double eps) {
  RequireSameShape(a, b, "cosine_similarity");
  Require(a.value().ndim() == 2, "cosine_similarity",
          "expected (N x F) operands, got " + ShapeToString(a.shape()));
  const int rows = a.dim(0), cols = a.dim(1);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  std::vector<double> na(rows), nb(rows), dot(rows);
  Tensor out({rows});
  for (int r = 0; r < rows; ++r) {
    double saa = 0.0, sbb = 0.0, sab = 0.0;
    for (int c = 0; c < cols; ++c) {
      saa += av.at(r, c) * av.at(r, c);
      sbb += bv.at(r, c) * bv.at(r, c);
      sab += av.at(r, c) * bv.at(r, c);
    }
    na[r] = std::sqrt(saa + eps);
    nb[r] = std::sqrt(sbb + eps);
    dot[r] = sab;
    out[r] = sab / (na[r] * nb[r]);
  }
  const int ia = a.id(), ib = b.id();
  return a.tape()->Record(std::move(out), {ia, ib}, [=](Tape& t, int self) {
    const Tensor& g = t.GradOf(self);
    const Tensor& av = t.ValueOf(ia);
    const Tensor& bv = t.ValueOf(ib);
    for (int r = 0; r < rows; ++r) {
      const double cs = dot[r] / (na[r] * nb[r]);
      const double inv = 1.0 / (na[r] * nb[r]);
      if (t.RequiresGrad(ia)) {
        Tensor& ga = t.GradOf(ia);
        for (int c = 0; c < cols; ++c)
          ga.at(r, c) += g[r] * (bv.at(r, c) * inv - cs * av.at(r, c) / (na[r] * na[r]));
      }
      if (t.RequiresGrad(ib)) {
        Tensor& gb = t.GradOf(ib);
        for (int c = 0; c < cols; ++c)
          gb.at(r, c) += g[r] * (av.at(r, c) * inv - cs * bv.at(r, c) / (nb[r] * nb[r]));
      }
    }
  });
}

Var Mean(const Var& x) {
  const int64_t n = x.value().size();
  Require(n > 0, "mean", "empty input");
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  const int ix = x.id();
  return x.tape()->Record(Tensor::Scalar(s / n), {ix}, [ix, n](Tape& t, int self) {
    const double g = t.GradOf(self)[0] / n;
    for (double& v : t.GradOf(ix).values()) v += g;
  });
}

Var SoftmaxCrossEntropy(const Var& logits, const std::vector<int>& labels) {
  const Tensor& z = logits.value();
  Require(z.ndim() == 2 && z.dim(0) == static_cast<int>(labels.size()), "softmax_cross_entropy",
          "logits " + ShapeToString(z.shape()) + " vs " + std::to_string(labels.size()) +
              " labels");
  const int rows = z.dim(0), classes = z.dim(1);
  Tensor prob(z.shape());
  double loss = 0.0;
  for (int r = 0; r < rows; ++r) {
    Require(labels[r] >= 0 && labels[r] < classes, "softmax_cross_entropy",
            "label out of range");
    double mx = z.at(r, 0);
    for (int c = 1; c < classes; ++c) mx = std::max(mx, z.at(r, c));
    double s = 0.0;
    for (int c = 0; c < classes; ++c) s += std::exp(z.at(r, c) - mx);
    const double lse = mx + std::log(s);
    for (int c = 0; c < classes; ++c) prob.at(r, c) = std::exp(z.at(r, c) - lse);
    loss += lse - z.at(r, labels[r]);
  }
  const int iz = logits.id();
  return logits.tape()->Record(
      Tensor::Scalar(loss / rows), {iz},
      [iz, rows, classes, labels, prob = std::move(prob)](Tape& t, int self) {
        const double g = t.GradOf(self)[0] / rows;
        Tensor& gz = t.GradOf(iz);
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < classes; ++c)
            gz.at(r, c) += g * (prob.at(r, c) - (c == labels[r] ? 1.0 : 0.0));
      });
}

Var L2NormalizeRows(const Var& x, double eps) {
  const Tensor& xv = x.value();
  Require(xv.ndim() == 2, "l2_normalize_rows", "expected (N x F), got " + ShapeToString(xv.shape()));
  const int rows = xv.dim(0), cols = xv.dim(1);
  std::vector<double> norm(rows);
  Tensor out(xv.shape());
  for (int r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int c = 0; c < cols; ++c) s += xv.at(r, c) * xv.at(r, c);
    norm[r] = std::sqrt(s + eps);
    for (int c = 0; c < cols; ++c) out.at(r, c) = xv.at(r, c) / norm[r];
  }
  const int ix = x.id();
  return x.tape()->Record(std::move(out), {ix}, [=](Tape& t, int self) {
    const Tensor& g = t.GradOf(self);
    const Tensor& xv = t.ValueOf(ix);
    Tensor& gx = t.GradOf(ix);
    for (int r = 0; r < rows; ++r) {
      double xg = 0.0;
      for (int c = 0; c < cols; ++c) xg += xv.at(r, c) * g.at(r, c);
      const double n = norm[r], n3 = n * n * n;
      for (int c = 0; c < cols; ++c) gx.at(r, c) += g.at(r, c) / n - xv.at(r, c) * xg / n3;
    }
  });
}

Var MeanLastAxis(const Var& x) {
  const Shape& s = x.shape();
  Require(s.size() >= 2, "mean_last_axis", "expected at least 2-d input");
  const int last = s.back();
  Require(last > 0, "mean_last_axis", "empty last axis");
  Shape out_shape(s.begin(), s.end() - 1);
  const int64_t rows = NumElements(out_shape);
  Tensor out(out_shape);
  const Tensor& xv = x.value();
  for (int64_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int c = 0; c < last; ++c) acc += xv[r * last + c];
    out[r] = acc / last;
  }
  const int ix = x.id();
  return x.tape()->Record(std::move(out), {ix}, [ix, rows, last](Tape& t, int self) {
    const Tensor& g = t.GradOf(self);
    Tensor& gx = t.GradOf(ix);
    for (int64_t r = 0; r < rows; ++r) {
      const double v = g[r] / last;
      for (int c = 0; c < last; ++c) gx[r * last + c] += v;
    }
  });
}

Var Reshape(const Var& x, Shape shape) {
  Tensor out = x.value().Reshaped(std::move(shape));
  const int ix = x.id();
  return x.tape()->Record(std::move(out), {ix}, [ix](Tape& t, int self) {
    AddInto(t.GradOf(ix), t.GradOf(self));
  });
}

Var GroupMeanRows(const Var& x, const std::vector<int>& group_sizes) {
  const Tensor& xv = x.value();
  Require(xv.ndim() >= 1, "group_mean_rows", "scalar input");
  const int total = std::accumulate(group_sizes.begin(), group_sizes.end(), 0);
  Require(total == xv.dim(0) &&
              std::all_of(group_sizes.begin(), group_sizes.end(), [](int g) { return g > 0; }),
          "group_mean_rows",
          "group sizes must be positive and sum to " + std::to_string(xv.dim(0)));
  const int64_t width = RowWidth(xv.shape());
  Shape out_shape = xv.shape();
  out_shape[0] = static_cast<int>(group_sizes.size());
  Tensor out(out_shape);
  int row = 0;
  for (size_t gi = 0; gi < group_sizes.size(); ++gi) {
    for (int r = 0; r < group_sizes[gi]; ++r, ++row)
      for (int64_t c = 0; c < width; ++c) out[gi * width + c] += xv[row * width + c];
    for (int64_t c = 0; c < width; ++c) out[gi * width + c] /= group_sizes[gi];
  }
  const int ix = x.id();
  return x.tape()->Record(std::move(out), {ix}, [ix, group_sizes, width](Tape& t, int self) {
    const Tensor& g = t.GradOf(self);
    Tensor& gx = t.GradOf(ix);
    int row = 0;
    for (size_t gi = 0; gi < group_sizes.size(); ++gi) {
      const double inv = 1.0 / group_sizes[gi];
      for (int r = 0; r < group_sizes[gi]; ++r, ++row)
        for (int64_t c = 0; c < width; ++c) gx[row * width + c] += g[gi * width + c] * inv;
    }
  });
}

Var ConcatRows(const std::vector<Var>& parts) {
  Require(!parts.empty(), "concat_rows", "no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  int rows = 0;
  std::vector<int> ids;
  for (const Var& p : parts) {
    Require(p.tape() == parts[0].tape(), "concat_rows", "operands on different tapes");
    Require(Shape(p.shape().begin() + 1, p.shape().end()) == tail, "concat_rows",
            "trailing shape mismatch " + ShapeToString(p.shape()) + " vs " +
                ShapeToString(parts[0].shape()));
    rows += p.dim(0);
    ids.push_back(p.id());
  }
  Shape out_shape = parts[0].shape();
  out_shape[0] = rows;
  Tensor out(out_shape);
  int64_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().values().begin(), p.value().values().end(), out.data() + off);
    off += p.value().size();
  }
  return parts[0].tape()->Record(std::move(out), ids, [ids](Tape& t, int self) {
    const Tensor& g = t.GradOf(self);
    int64_t off = 0;
    for (int id : ids) {
      const int64_t n = t.ValueOf(id).size();
      if (t.RequiresGrad(id)) {
        Tensor& gi = t.GradOf(id);
        for (int64_t i = 0; i < n; ++i) gi[i] += g[off + i];
      }
      off += n;
    }
  });
}

Var Windows(const Var& x, const std::vector<int>& starts, int length) {
  const Tensor& xv = x.value();
  Require(xv.ndim() == 2, "windows", "expected (H x T) input, got " + ShapeToString(xv.shape()));
  const int h = xv.dim(0), cols = xv.dim(1);
  Require(length > 0 && !starts.empty(), "windows", "empty window request");
  for (int s : starts) {
    Require(s >= 0 && s + length <= cols, "windows",
            "window [" + std::to_string(s) + ", " + std::to_string(s + length) +
                ") outside " + ShapeToString(xv.shape()));
  }
  const int n = static_cast<int>(starts.size());
  Tensor out({n, 1, h, length});
  for (int w = 0; w < n; ++w)
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < length; ++c)
        out[(static_cast<int64_t>(w) * h + r) * length + c] = xv.at(r, starts[w] + c);
  const int ix = x.id();
  return x.tape()->Record(std::move(out), {ix}, [=](Tape& t, int self) {
    const Tensor& g = t.GradOf(self);
    Tensor& gx = t.GradOf(ix);
    for (int w = 0; w < n; ++w)
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < length; ++c)
          gx.at(r, starts[w] + c) += g[(static_cast<int64_t>(w) * h + r) * length + c];
  });
}

Var ConcatColumns(const std::vector<Var>& parts) {
  Require(!parts.empty(), "concat_columns", "no inputs");
  const int h = parts[0].dim(0);
  int cols = 0;
  std::vector<int> ids, widths;
  for (const Var& p : parts) {
    Require(p.tape() == parts[0].tape(), "concat_columns", "operands on different tapes");
    Require(p.value().ndim() == 2 && p.dim(0) == h, "concat_columns",
            "row mismatch " + ShapeToString(p.shape()) + " vs " +
                ShapeToString(parts[0].shape()));
    ids.push_back(p.id());
    widths.push_back(p.dim(1));
    cols += p.dim(1);
  }
  Tensor out({h, cols});
  int off = 0;
  for (const Var& p : parts) {
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < p.dim(1); ++c) out.at(r, off + c) = p.value().at(r, c);
    off += p.dim(1);
  }
  return parts[0].tape()->Record(std::move(out), ids, [ids, widths, h](Tape& t, int self) {
    const Tensor& g = t.GradOf(self);
    int off = 0;
    for (size_t i = 0; i < ids.size(); ++i) {
      if (t.RequiresGrad(ids[i])) {
        Tensor& gi = t.GradOf(ids[i]);
        for (int r = 0; r < h; ++r)
          for (int c = 0; c < widths[i]; ++c) gi.at(r, c) += g.at(r, off + c);
      }
      off += widths[i];
    }
  });
}

Var SliceColumns(const Var& x, int start, int length) {
  const Tensor& xv = x.value();
  Require(xv.ndim() == 2, "slice_columns", "expected (H x T), got " + ShapeToString(xv.shape()));
  Require(start >= 0 && length > 0 && start + length <= xv.dim(1), "slice_columns",
          "slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
              ") outside " + ShapeToString(xv.shape()));
  const int h = xv.dim(0);
  Tensor out({h, length});
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < length; ++c) out.at(r, c) = xv.at(r, start + c);
  const int ix = x.id();
  return x.tape()->Record(std::move(out), {ix}, [=](Tape& t, int self) {
    const Tensor& g = t.GradOf(self);
    Tensor& gx = t.GradOf(ix);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < length; ++c) gx.at(r, start + c) += g.at(r, c);
  });
}

Var ChunksToColumns(const Var& x) {
  const Tensor& xv = x.value();
  Require(xv.ndim() == 4 && xv.dim(1) == 1, "chunks_to_columns",
          "expected (N x 1 x H x C), got " + ShapeToString(xv.shape()));
  const int n = xv.dim(0), h = xv.dim(2), c = xv.dim(3);
  Tensor out({h, n * c});
  for (int k = 0; k < n; ++k)
    for (int r = 0; r < h; ++r)
      for (int j = 0; j < c; ++j)
        out.at(r, k * c + j) = xv[(static_cast<int64_t>(k) * h + r) * c + j];
  const int ix = x.id();
  return x.tape()->Record(std::move(out), {ix}, [=](Tape& t, int self) {
    const Tensor& g = t.GradOf(self);
    Tensor& gx = t.GradOf(ix);
    for (int k = 0; k < n; ++k)
      for (int r = 0; r < h; ++r)
        for (int j = 0; j < c; ++j)
          gx[(static_cast<int64_t>(k) * h + r) * c + j] += g.at(r, k * c + j);
  });
}

}  // namespace ad
}  // namespace predmask
