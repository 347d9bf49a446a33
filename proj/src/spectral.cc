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

#include "predmask/spectral.h"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "predmask/error.h"

namespace predmask {
namespace {

using Fft = Eigen::FFT<double>;

Fft MakeFft() {
  Fft fft;
  fft.SetFlag(Fft::HalfSpectrum);
  return fft;
}

// Squared-window overlap sum below this fraction of its steady value is
// treated as uncovered, which keeps the first and last few samples of a
// modified spectrogram from blowing up.
constexpr double kMinCoverage = 0.1;

}  // namespace

void SpectralConfig::Validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("spectral config: " + m); };
  if (sample_rate <= 0) fail("sample_rate must be positive");
  if (fft_size < 2) fail("fft_size must be at least 2");
  if (hop <= 0 || hop > fft_size) fail("hop must be in [1, fft_size]");
  if (win_length <= 0 || win_length > fft_size) fail("win_length must be in [1, fft_size]");
  if (n_mels < 1 || n_mels > num_bins()) {
    fail("n_mels must be in [1, fft_size/2 + 1], got " + std::to_string(n_mels));
  }
  if (fmin < 0.0 || fmin >= fmax || fmax > sample_rate / 2.0) {
    fail("need 0 <= fmin < fmax <= sample_rate/2");
  }
  if (!(magnitude_scale > 0.0)) fail("magnitude_scale must be positive");
  // Squared periodic Hann must overlap-add to a constant at this hop.
  std::vector<double> acc(hop, 0.0);
  for (int n = 0; n < win_length; ++n) {
    const double w = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * n / win_length);
    acc[n % hop] += w * w;
  }
  const auto [lo, hi] = std::minmax_element(acc.begin(), acc.end());
  if (*hi - *lo > 1e-6 * *hi) {
    fail("window of " + std::to_string(win_length) + " samples is not COLA at hop " +
         std::to_string(hop));
  }
}

void to_json(nlohmann::json& j, const SpectralConfig& c) {
  j = nlohmann::json{{"sample_rate", c.sample_rate}, {"fft_size", c.fft_size},
                     {"hop", c.hop},                 {"win_length", c.win_length},
                     {"n_mels", c.n_mels},           {"fmin", c.fmin},
                     {"fmax", c.fmax},               {"magnitude_scale", c.magnitude_scale}};
}

void from_json(const nlohmann::json& j, SpectralConfig& c) {
  j.at("sample_rate").get_to(c.sample_rate);
  j.at("fft_size").get_to(c.fft_size);
  j.at("hop").get_to(c.hop);
  j.at("win_length").get_to(c.win_length);
  j.at("n_mels").get_to(c.n_mels);
  j.at("fmin").get_to(c.fmin);
  j.at("fmax").get_to(c.fmax);
  j.at("magnitude_scale").get_to(c.magnitude_scale);
}

double HzToMel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double MelToHz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

SpectralFrontend::SpectralFrontend(SpectralConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.Validate();
  const int n_fft = cfg_.fft_size, bins = cfg_.num_bins();
  window_.assign(n_fft, 0.0);
  const int offset = (n_fft - cfg_.win_length) / 2;
  for (int n = 0; n < cfg_.win_length; ++n) {
    window_[offset + n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * n / cfg_.win_length);
  }

  const double mel_lo = HzToMel(cfg_.fmin), mel_hi = HzToMel(cfg_.fmax);
  std::vector<double> edges(cfg_.n_mels + 2);
  for (int i = 0; i < cfg_.n_mels + 2; ++i) {
    edges[i] = MelToHz(mel_lo + (mel_hi - mel_lo) * i / (cfg_.n_mels + 1));
  }
  fb_ = Eigen::MatrixXd::Zero(cfg_.n_mels, bins);
  centers_.resize(cfg_.n_mels);
  for (int m = 0; m < cfg_.n_mels; ++m) {
    const double l = edges[m], c = edges[m + 1], r = edges[m + 2];
    centers_[m] = c;
    for (int b = 0; b < bins; ++b) {
      const double f = static_cast<double>(b) * cfg_.sample_rate / n_fft;
      fb_(m, b) = std::max(0.0, std::min((f - l) / (c - l), (r - f) / (r - c)));
    }
  }
  fb_pinv_ = fb_.completeOrthogonalDecomposition().pseudoInverse();
}

int SpectralFrontend::NumFrames(int64_t num_samples) const {
  if (num_samples < cfg_.fft_size) {
    throw InputTooShortError("need at least " + std::to_string(cfg_.fft_size) +
                             " samples, got " + std::to_string(num_samples));
  }
  return static_cast<int>((num_samples - cfg_.fft_size) / cfg_.hop + 1);
}

int64_t SpectralFrontend::NumSamples(int frames) const {
  return static_cast<int64_t>(frames - 1) * cfg_.hop + cfg_.fft_size;
}

ComplexSpec SpectralFrontend::Stft(const std::vector<double>& x) const {
  const int frames = NumFrames(static_cast<int64_t>(x.size()));
  const int n_fft = cfg_.fft_size;
  ComplexSpec spec(cfg_.num_bins(), frames);
  Fft fft = MakeFft();
  std::vector<double> buf(n_fft);
  std::vector<std::complex<double>> out;
  for (int f = 0; f < frames; ++f) {
    const double* src = x.data() + static_cast<int64_t>(f) * cfg_.hop;
    for (int n = 0; n < n_fft; ++n) buf[n] = src[n] * window_[n];
    fft.fwd(out, buf);
    for (int b = 0; b < cfg_.num_bins(); ++b) spec(b, f) = out[b];
  }
  return spec;
}

std::vector<double> SpectralFrontend::Istft(const ComplexSpec& spec) const {
  if (spec.rows() != cfg_.num_bins() || spec.cols() < 1) {
    throw ShapeError("istft: expected " + std::to_string(cfg_.num_bins()) + " bins, got " +
                     std::to_string(spec.rows()) + "x" + std::to_string(spec.cols()));
  }
  const int frames = static_cast<int>(spec.cols()), n_fft = cfg_.fft_size;
  const int64_t len = NumSamples(frames);
  std::vector<double> y(len, 0.0), norm(len, 0.0);
  Fft fft = MakeFft();
  std::vector<std::complex<double>> half(cfg_.num_bins());
  std::vector<double> frame;
  for (int f = 0; f < frames; ++f) {
    for (int b = 0; b < cfg_.num_bins(); ++b) half[b] = spec(b, f);
    fft.inv(frame, half, n_fft);
    const int64_t off = static_cast<int64_t>(f) * cfg_.hop;
    for (int n = 0; n < n_fft; ++n) {
      y[off + n] += window_[n] * frame[n];
      norm[off + n] += window_[n] * window_[n];
    }
  }
  double steady = 0.0;
  for (double w : window_) steady += w * w;
  steady /= cfg_.hop;
  const double floor = kMinCoverage * steady;
  for (int64_t i = 0; i < len; ++i) y[i] = norm[i] > 0.0 ? y[i] / std::max(norm[i], floor) : 0.0;
  return y;
}

Tensor SpectralFrontend::MagnitudeToMel(const Eigen::MatrixXd& magnitude) const {
  if (magnitude.rows() != cfg_.num_bins()) {
    throw ShapeError("mel: expected " + std::to_string(cfg_.num_bins()) + " bins, got " +
                     std::to_string(magnitude.rows()));
  }
  const Eigen::MatrixXd m = cfg_.magnitude_scale * (fb_ * magnitude);
  Tensor out({cfg_.n_mels, static_cast<int>(magnitude.cols())});
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c) out.at(r, c) = std::log1p(m(r, c));
  return out;
}

Tensor SpectralFrontend::Mel(const std::vector<double>& x) const {
  return MagnitudeToMel(Stft(x).cwiseAbs());
}

Eigen::MatrixXd SpectralFrontend::MelToMagnitude(const Tensor& mel) const {
  if (mel.ndim() != 2 || mel.dim(0) != cfg_.n_mels) {
    throw ShapeError("mel_to_wav: expected " + std::to_string(cfg_.n_mels) + " mel rows, got " +
                     ShapeToString(mel.shape()));
  }
  if (!mel.AllFinite()) throw Error("mel_to_wav: non-finite mel values");
  const int frames = mel.dim(1);
  Eigen::MatrixXd lin(cfg_.n_mels, frames);
  for (int r = 0; r < cfg_.n_mels; ++r)
    for (int c = 0; c < frames; ++c) lin(r, c) = std::expm1(mel.at(r, c)) / cfg_.magnitude_scale;
  return (fb_pinv_ * lin).cwiseMax(0.0);
}

std::vector<double> SpectralFrontend::MelToWav(const Tensor& mel, const ComplexSpec* phase_hint,
                                               int griffin_lim_iters) const {
  const Eigen::MatrixXd mag = MelToMagnitude(mel);
  if (!phase_hint) return GriffinLim(mag, griffin_lim_iters);
  if (phase_hint->rows() != mag.rows() || phase_hint->cols() != mag.cols()) {
    throw ShapeError("mel_to_wav: phase hint is " + std::to_string(phase_hint->rows()) + "x" +
                     std::to_string(phase_hint->cols()) + ", mel implies " +
                     std::to_string(mag.rows()) + "x" + std::to_string(mag.cols()));
  }
  ComplexSpec spec(mag.rows(), mag.cols());
  for (int c = 0; c < mag.cols(); ++c) {
    for (int r = 0; r < mag.rows(); ++r) {
      const std::complex<double> h = (*phase_hint)(r, c);
      const double a = std::abs(h);
      spec(r, c) = a > 0.0 ? mag(r, c) * (h / a) : std::complex<double>(mag(r, c), 0.0);
    }
  }
  return Istft(spec);
}

std::vector<double> SpectralFrontend::GriffinLim(const Eigen::MatrixXd& magnitude,
                                                 int iters) const {
  std::mt19937_64 rng(0x5eedULL);
  std::uniform_real_distribution<double> u(-std::numbers::pi, std::numbers::pi);
  ComplexSpec spec(magnitude.rows(), magnitude.cols());
  for (int c = 0; c < magnitude.cols(); ++c)
    for (int r = 0; r < magnitude.rows(); ++r) spec(r, c) = std::polar(magnitude(r, c), u(rng));
  for (int it = 0; it < iters; ++it) {
    const ComplexSpec est = Stft(Istft(spec));
    for (int c = 0; c < magnitude.cols(); ++c) {
      for (int r = 0; r < magnitude.rows(); ++r) {
        const double a = std::abs(est(r, c));
        spec(r, c) = a > 0.0 ? magnitude(r, c) * (est(r, c) / a)
                             : std::complex<double>(magnitude(r, c), 0.0);
      }
    }
  }
  return Istft(spec);
}

BandPartition SpectralFrontend::Bands(double low_edge, double high_edge) const {
  if (!(low_edge > 0.0 && low_edge < high_edge && high_edge < cfg_.fmax)) {
    throw ConfigError("band edges must satisfy 0 < low < high < fmax");
  }
  BandPartition p;
  for (int m = 0; m < cfg_.n_mels; ++m) {
    Band b = Band::kHigh;
    if (centers_[m] < low_edge) {
      b = Band::kLow;
      p.low.push_back(m);
    } else if (centers_[m] < high_edge) {
      b = Band::kMid;
      p.mid.push_back(m);
    } else {
      p.high.push_back(m);
    }
    p.row_band.push_back(b);
  }
  return p;
}

ComplexSpec Stft(const Waveform& w, const SpectralConfig& cfg) {
  return SpectralFrontend(cfg).Stft(w.samples);
}

Waveform Istft(const ComplexSpec& spec, const SpectralConfig& cfg) {
  return Waveform{SpectralFrontend(cfg).Istft(spec), cfg.sample_rate};
}

Tensor WavToMel(const Waveform& w, const SpectralConfig& cfg) {
  return SpectralFrontend(cfg).Mel(w.samples);
}

Waveform MelToWav(const Tensor& mel, const SpectralConfig& cfg, const ComplexSpec* phase_hint) {
  return Waveform{SpectralFrontend(cfg).MelToWav(mel, phase_hint), cfg.sample_rate};
}

BandPartition MakeBandPartition(const SpectralConfig& cfg, double low_edge, double high_edge) {
  return SpectralFrontend(cfg).Bands(low_edge, high_edge);
}

std::vector<double> ResampleLinear(const std::vector<double>& x, int from_rate, int to_rate) {
  if (from_rate <= 0 || to_rate <= 0) throw ConfigError("resample: rates must be positive");
  if (from_rate == to_rate || x.empty()) return x;
  const int64_t n_out = static_cast<int64_t>(
      std::llround(static_cast<double>(x.size()) * to_rate / from_rate));
  std::vector<double> y(std::max<int64_t>(n_out, 1));
  const double ratio = static_cast<double>(from_rate) / to_rate;
  const int64_t last = static_cast<int64_t>(x.size()) - 1;
  for (int64_t i = 0; i < static_cast<int64_t>(y.size()); ++i) {
    const double t = i * ratio;
    const int64_t k = std::min<int64_t>(static_cast<int64_t>(t), last);
    const double frac = t - k;
    y[i] = k >= last ? x[last] : x[k] * (1.0 - frac) + x[k + 1] * frac;
  }
  return y;
}

}  // namespace predmask
