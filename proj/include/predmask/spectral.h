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

// STFT, mel filterbank and mel inversion.
//
// Frames are not centered: frame f covers samples [f*hop, f*hop + fft_size)
// and a signal of n samples has floor((n - fft_size) / hop) + 1 frames. The
// analysis window is a periodic Hann of win_length samples centered inside
// the FFT frame; win_length = 3*hop makes the squared window sum to a
// constant, so ISTFT with squared-window normalization is exact.

#ifndef PREDMASK_SPECTRAL_H_
#define PREDMASK_SPECTRAL_H_

#include <complex>
#include <cstdint>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "predmask/tensor.h"

namespace predmask {

struct Waveform {
  std::vector<double> samples;
  int sample_rate = 16000;

  int64_t size() const { return static_cast<int64_t>(samples.size()); }
  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
};

struct SpectralConfig {
  int sample_rate = 16000;
  int fft_size = 512;
  int hop = 160;
  int win_length = 480;
  int n_mels = 80;
  double fmin = 0.0;
  double fmax = 8000.0;
  // Mel magnitudes are taken on the 16-bit PCM amplitude scale before
  // log(1 + m), so only near-digital silence is flattened by the +1.
  double magnitude_scale = 32768.0;

  // Throws ConfigError.
  void Validate() const;
  int num_bins() const { return fft_size / 2 + 1; }
  bool operator==(const SpectralConfig&) const = default;
};

void to_json(nlohmann::json& j, const SpectralConfig& c);
void from_json(const nlohmann::json& j, SpectralConfig& c);

// bins x frames.
using ComplexSpec = Eigen::MatrixXcd;

enum class Band { kLow = 0, kMid = 1, kHigh = 2 };

struct BandPartition {
  std::vector<int> low;
  std::vector<int> mid;
  std::vector<int> high;
  // Band of every mel row, indexed by row.
  std::vector<Band> row_band;
};

double HzToMel(double hz);
double MelToHz(double mel);

// Immutable front end; caches window, filterbank and its pseudo-inverse.
class SpectralFrontend {
 public:
  explicit SpectralFrontend(SpectralConfig cfg);

  const SpectralConfig& config() const { return cfg_; }
  // Throws InputTooShortError when fewer than fft_size samples.
  int NumFrames(int64_t num_samples) const;
  // Samples spanned by `frames` frames.
  int64_t NumSamples(int frames) const;

  ComplexSpec Stft(const std::vector<double>& x) const;
  // Weighted overlap-add; output spans NumSamples(frames) samples.
  std::vector<double> Istft(const ComplexSpec& spec) const;

  // log(1 + scale * M |S|), shape n_mels x frames.
  Tensor Mel(const std::vector<double>& x) const;
  Tensor MagnitudeToMel(const Eigen::MatrixXd& magnitude) const;
  // Linear magnitude from a log-mel via the filterbank pseudo-inverse,
  // clamped at zero.
  Eigen::MatrixXd MelToMagnitude(const Tensor& mel) const;
  // Phase from the hint when given, else Griffin-Lim.
  std::vector<double> MelToWav(const Tensor& mel, const ComplexSpec* phase_hint = nullptr,
                               int griffin_lim_iters = 32) const;
  std::vector<double> GriffinLim(const Eigen::MatrixXd& magnitude, int iters) const;

  // n_mels x bins, triangular with unit peaks.
  const Eigen::MatrixXd& filterbank() const { return fb_; }
  const Eigen::MatrixXd& filterbank_pinv() const { return fb_pinv_; }
  // Peak frequency of each mel filter in Hz.
  const std::vector<double>& centers() const { return centers_; }
  // Length fft_size (zero outside the centered Hann).
  const std::vector<double>& window() const { return window_; }

  // Rows split by center frequency into [0, low), [low, high), [high, inf).
  BandPartition Bands(double low_edge = 1600.0, double high_edge = 4000.0) const;

 private:
  SpectralConfig cfg_;
  std::vector<double> window_;
  Eigen::MatrixXd fb_;
  Eigen::MatrixXd fb_pinv_;
  std::vector<double> centers_;
};

ComplexSpec Stft(const Waveform& w, const SpectralConfig& cfg);
Waveform Istft(const ComplexSpec& spec, const SpectralConfig& cfg);
Tensor WavToMel(const Waveform& w, const SpectralConfig& cfg);
Waveform MelToWav(const Tensor& mel, const SpectralConfig& cfg,
                  const ComplexSpec* phase_hint = nullptr);
BandPartition MakeBandPartition(const SpectralConfig& cfg, double low_edge = 1600.0,
                                double high_edge = 4000.0);

// Linear-interpolation resampling.
std::vector<double> ResampleLinear(const std::vector<double>& x, int from_rate, int to_rate);

}  // namespace predmask

#endif  // PREDMASK_SPECTRAL_H_
