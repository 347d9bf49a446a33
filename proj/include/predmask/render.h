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


// Injection of mel-domain perturbations into a waveform.
//
// A mel column of log gains is mapped to per-bin log gains through the
// filterbank and realized as a minimum-phase FIR. Filters of adjacent
// columns are crossfaded sample by sample between frame centers, so the
// output at sample n depends only on inputs up to n and on filters already
// known. Offline rendering and the streaming runtime share TimeVaryingFir.

#ifndef PREDMASK_RENDER_H_
#define PREDMASK_RENDER_H_

#include <cstdint>
#include <map>
#include <memory>
#include <vector>

#include <Eigen/Dense>

#include "predmask/spectral.h"
#include "predmask/tensor.h"

namespace predmask {

using Fir = std::vector<double>;  // empty means identity

class GainRenderer {
 public:
  explicit GainRenderer(std::shared_ptr<const SpectralFrontend> frontend, int taps = 256);

  const SpectralFrontend& frontend() const { return *fe_; }
  int taps() const { return taps_; }
  // Sample offset of a column's frame center from its frame start.
  int center() const { return fe_->config().fft_size / 2; }

  // Filterbank-weighted average of the mel log gains covering each bin;
  // bins outside every filter take the nearest filter's gain.
  Eigen::VectorXd BinLogGains(const std::vector<double>& mel_log_gain) const;
  // Minimum-phase FIR whose magnitude response is exp(bin log gains).
  // All-zero gains give the identity (empty) filter.
  Fir Design(const std::vector<double>& mel_log_gain) const;
  // One filter per column of an (n_mels x T) log-gain matrix.
  std::vector<Fir> DesignColumns(const Tensor& mel_log_gain) const;

  // Applies `mel_log_gain` with column j centered at origin + j*hop + center().
  // The last column's filter holds through the end of x.
  std::vector<double> Render(const std::vector<double>& x, const Tensor& mel_log_gain,
                             int64_t origin = 0) const;

 private:
  std::shared_ptr<const SpectralFrontend> fe_;
  int taps_;
  Eigen::MatrixXd bin_weights_;  // bins x n_mels, rows sum to 1
};

// Sample-by-sample filter whose coefficients move between per-column FIRs.
// Sample n blends column floor((n - origin - center)/hop) and the next one
// linearly; between the origin and the first center column 0 applies as is.
// Samples before the origin and columns without a filter pass unchanged.
class TimeVaryingFir {
 public:
  TimeVaryingFir(int taps, int hop, int center);

  void SetOrigin(int64_t origin) { origin_ = origin; }
  int64_t origin() const { return origin_; }
  // Columns may be set in any order before the clock reaches them.
  void SetFilter(int64_t column, Fir h);
  bool HasFilter(int64_t column) const { return filters_.count(column) != 0; }
  // Drops filters of columns >= column; the output then fades to pass-through.
  void ClearFiltersFrom(int64_t column) { filters_.erase(filters_.lower_bound(column), filters_.end()); }
  // Filters one input sample; the clock advances by one.
  double Process(double x);
  int64_t clock() const { return clock_; }
  // Drops history and filters; the clock and origin restart at zero.
  void Reset();

 private:
  const Fir* Find(int64_t column) const;

  int taps_, hop_, center_;
  int64_t clock_ = 0;
  int64_t origin_ = 0;
  std::vector<double> history_;  // doubled ring buffer
  int pos_ = 0;
  std::map<int64_t, Fir> filters_;
};

}  // namespace predmask

#endif  // PREDMASK_RENDER_H_
