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

#ifndef PREDMASK_TENSOR_H_
#define PREDMASK_TENSOR_H_

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace predmask {

using Shape = std::vector<int>;

int64_t NumElements(const Shape& shape);
std::string ShapeToString(const Shape& shape);

// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor Scalar(double v) { return Tensor({1}, v); }

  const Shape& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(i); }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](int64_t i) { return data_[i]; }
  double operator[](int64_t i) const { return data_[i]; }

  // 2-D element access for (rows, cols) tensors.
  double& at(int r, int c) { return data_[static_cast<int64_t>(r) * shape_[1] + c]; }
  double at(int r, int c) const {
    return data_[static_cast<int64_t>(r) * shape_[1] + c];
  }

  void Fill(double v);
  // Same data, new shape; throws ShapeError when element counts differ.
  Tensor Reshaped(Shape shape) const;
  bool AllFinite() const;
  double MaxAbs() const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

}  // namespace predmask

#endif  // PREDMASK_TENSOR_H_
