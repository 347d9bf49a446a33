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


#include "predmask/render.h"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>

#include "predmask/error.h"

namespace predmask {

GainRenderer::GainRenderer(std::shared_ptr<const SpectralFrontend> frontend, int taps)
    : fe_(std::move(frontend)), taps_(taps) {
  const SpectralConfig& cfg = fe_->config();
  if (taps_ < 1 || taps_ > cfg.fft_size / 2) {
    throw ConfigError("renderer: taps must be in [1, fft_size/2]");
  }
  const Eigen::MatrixXd& fb = fe_->filterbank();  // n_mels x bins
  const int bins = cfg.num_bins();
  bin_weights_ = Eigen::MatrixXd::Zero(bins, cfg.n_mels);
  const std::vector<double>& centers = fe_->centers();
  for (int b = 0; b < bins; ++b) {
    const double total = fb.col(b).sum();
    if (total > 1e-9) {
      bin_weights_.row(b) = fb.col(b).transpose() / total;
      continue;
    }
    const double hz = static_cast<double>(b) * cfg.sample_rate / cfg.fft_size;
    int nearest = 0;
    for (int m = 1; m < cfg.n_mels; ++m) {
      if (std::abs(centers[m] - hz) < std::abs(centers[nearest] - hz)) nearest = m;
    }
    bin_weights_(b, nearest) = 1.0;
  }
}

Eigen::VectorXd GainRenderer::BinLogGains(const std::vector<double>& mel_log_gain) const {
  if (static_cast<int>(mel_log_gain.size()) != fe_->config().n_mels) {
    throw ShapeError("renderer: expected " + std::to_string(fe_->config().n_mels) +
                     " mel gains, got " + std::to_string(mel_log_gain.size()));
  }
  return bin_weights_ * Eigen::Map<const Eigen::VectorXd>(mel_log_gain.data(),
                                                          mel_log_gain.size());
}

Fir GainRenderer::Design(const std::vector<double>& mel_log_gain) const {
  if (std::all_of(mel_log_gain.begin(), mel_log_gain.end(), [](double v) { return v == 0.0; })) {
    return {};
  }
  const Eigen::VectorXd g = BinLogGains(mel_log_gain);
  const int n = fe_->config().fft_size;
  const int half = n / 2;
  // Real cepstrum of the even log-magnitude, folded onto positive quefrency.
  std::vector<std::complex<double>> spec(n);
  for (int k = 0; k <= half; ++k) spec[k] = g[k];
  for (int k = half + 1; k < n; ++k) spec[k] = g[n - k];
  thread_local Eigen::FFT<double> fft;
  std::vector<std::complex<double>> cep;
  fft.inv(cep, spec);
  std::vector<std::complex<double>> folded(n, 0.0);
  folded[0] = cep[0].real();
  for (int k = 1; k < half; ++k) folded[k] = 2.0 * cep[k].real();
  folded[half] = cep[half].real();
  std::vector<std::complex<double>> logh;
  fft.fwd(logh, folded);
  for (auto& v : logh) v = std::exp(v);
  std::vector<std::complex<double>> h;
  fft.inv(h, logh);
  Fir out(taps_);
  for (int k = 0; k < taps_; ++k) out[k] = h[k].real();
  return out;
}

std::vector<Fir> GainRenderer::DesignColumns(const Tensor& mel_log_gain) const {
  if (mel_log_gain.ndim() != 2 || mel_log_gain.dim(0) != fe_->config().n_mels) {
    throw ShapeError("renderer: expected n_mels x T gains, got " +
                     ShapeToString(mel_log_gain.shape()));
  }
  const int rows = mel_log_gain.dim(0), cols = mel_log_gain.dim(1);
  std::vector<Fir> out(cols);
  std::vector<double> col(rows);
  for (int j = 0; j < cols; ++j) {
    for (int r = 0; r < rows; ++r) col[r] = mel_log_gain.at(r, j);
    out[j] = Design(col);
  }
  return out;
}

std::vector<double> GainRenderer::Render(const std::vector<double>& x, const Tensor& mel_log_gain,
                                         int64_t origin) const {
  std::vector<Fir> firs = DesignColumns(mel_log_gain);
  TimeVaryingFir filter(taps_, fe_->config().hop, center());
  filter.SetOrigin(origin);
  // The last column also covers the tail after its frame center.
  const int hop = fe_->config().hop;
  const int64_t tail_cols = firs.empty() ? 0
      : std::max<int64_t>(0, (static_cast<int64_t>(x.size()) - origin - center()) / hop + 2 -
                                 static_cast<int64_t>(firs.size()));
  for (int64_t k = 0; k < tail_cols; ++k) firs.push_back(firs.back());
  for (size_t j = 0; j < firs.size(); ++j) filter.SetFilter(j, std::move(firs[j]));
  std::vector<double> y(x.size());
  for (size_t n = 0; n < x.size(); ++n) y[n] = filter.Process(x[n]);
  return y;
}

TimeVaryingFir::TimeVaryingFir(int taps, int hop, int center)
    : taps_(taps), hop_(hop), center_(center), history_(2 * taps, 0.0) {
  if (taps < 1 || hop < 1) throw ConfigError("time-varying FIR: taps and hop must be positive");
}

void TimeVaryingFir::SetFilter(int64_t column, Fir h) {
  if (!h.empty() && static_cast<int>(h.size()) != taps_) {
    throw ShapeError("time-varying FIR: filter has " + std::to_string(h.size()) + " taps, want " +
                     std::to_string(taps_));
  }
  std::reverse(h.begin(), h.end());  // stored oldest-first for a contiguous dot product
  filters_[column] = std::move(h);
}

const Fir* TimeVaryingFir::Find(int64_t column) const {
  auto it = filters_.find(column);
  if (it == filters_.end() || it->second.empty()) return nullptr;
  return &it->second;
}

double TimeVaryingFir::Process(double x) {
  history_[pos_] = x;
  history_[pos_ + taps_] = x;
  const double* oldest = history_.data() + pos_ + 1;  // the last taps inputs, in order
  pos_ = (pos_ + 1) % taps_;

  const int64_t rel = clock_ - origin_;
  ++clock_;
  if (rel < 0) return x;
  const int64_t p = rel - center_;
  int64_t j = 0;
  double a = 0.0;
  if (p >= 0) {
    j = p / hop_;
    a = static_cast<double>(p - j * hop_) / hop_;
  }
  // Forget columns that can no longer be reached.
  while (!filters_.empty() && filters_.begin()->first < j) filters_.erase(filters_.begin());

  auto apply = [&](const Fir* h) {
    if (h == nullptr) return x;
    return Eigen::Map<const Eigen::VectorXd>(h->data(), taps_)
        .dot(Eigen::Map<const Eigen::VectorXd>(oldest, taps_));
  };
  const Fir* h0 = Find(j);
  const Fir* h1 = a > 0.0 ? Find(j + 1) : nullptr;
  if (h0 == nullptr && h1 == nullptr) return x;
  const double y0 = apply(h0);
  if (a == 0.0) return y0;
  return (1.0 - a) * y0 + a * apply(h1);
}

void TimeVaryingFir::Reset() {
  std::fill(history_.begin(), history_.end(), 0.0);
  pos_ = 0;
  clock_ = 0;
  origin_ = 0;
  filters_.clear();
}

}  // namespace predmask
