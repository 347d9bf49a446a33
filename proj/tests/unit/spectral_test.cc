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

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "predmask/error.h"
#include "predmask/wav_io.h"

namespace predmask {
namespace {

std::vector<double> Sine(double hz, int n, int sr = 16000, double amp = 0.5) {
  std::vector<double> x(n);
  for (int i = 0; i < n; ++i) x[i] = amp * std::sin(2.0 * std::numbers::pi * hz * i / sr);
  return x;
}

std::vector<double> Noise(int n, std::mt19937_64& rng, double amp = 0.3) {
  std::uniform_real_distribution<double> u(-amp, amp);
  std::vector<double> x(n);
  for (double& v : x) v = u(rng);
  return x;
}

// Dominant frequency by direct DFT scan at 1 Hz resolution.
double DominantHz(const std::vector<double>& x, int sr, double lo, double hi) {
  double best = lo, best_p = -1.0;
  for (double f = lo; f <= hi; f += 1.0) {
    double re = 0.0, im = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
      re += x[i] * std::cos(2.0 * std::numbers::pi * f * i / sr);
      im += x[i] * std::sin(2.0 * std::numbers::pi * f * i / sr);
    }
    if (re * re + im * im > best_p) {
      best_p = re * re + im * im;
      best = f;
    }
  }
  return best;
}

double InteriorSnrDb(const std::vector<double>& ref, const std::vector<double>& out, int edge) {
  double s = 0.0, e = 0.0;
  for (size_t i = edge; i + edge < std::min(ref.size(), out.size()); ++i) {
    s += ref[i] * ref[i];
    e += (ref[i] - out[i]) * (ref[i] - out[i]);
  }
  return 10.0 * std::log10(s / std::max(e, 1e-300));
}

double RelFrobenius(const Tensor& a, const Tensor& b) {
  double d = 0.0, n = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) {
    d += (a[i] - b[i]) * (a[i] - b[i]);
    n += a[i] * a[i];
  }
  return std::sqrt(d / n);
}

TEST(Stft, ZeroInputAndFrameCount) {
  SpectralFrontend fe(SpectralConfig{});
  ComplexSpec s = fe.Stft(std::vector<double>(16000, 0.0));
  EXPECT_EQ(s.rows(), 257);
  EXPECT_EQ(s.cols(), (16000 - 512) / 160 + 1);
  EXPECT_EQ(s.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_THROW(fe.Stft(std::vector<double>(511, 0.0)), InputTooShortError);
}

TEST(Stft, SineLandsOnClosedFormBin) {
  SpectralFrontend fe(SpectralConfig{});
  ComplexSpec s = fe.Stft(Sine(1000.0, 16000));
  const int expected = static_cast<int>(1000.0 * 512 / 16000);
  for (int f = 0; f < s.cols(); ++f) {
    Eigen::Index arg;
    s.col(f).cwiseAbs().maxCoeff(&arg);
    EXPECT_EQ(arg, expected);
  }
}

TEST(Stft, Linearity) {
  std::mt19937_64 rng(3);
  SpectralFrontend fe(SpectralConfig{});
  std::vector<double> x = Noise(8000, rng), half = x;
  for (double& v : half) v *= 0.5;
  Eigen::MatrixXd a = fe.Stft(x).cwiseAbs(), b = fe.Stft(half).cwiseAbs();
  EXPECT_LT((0.5 * a - b).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Istft, RoundtripSnrOnRandomClips) {
  std::mt19937_64 rng(11);
  SpectralFrontend fe(SpectralConfig{});
  for (int trial = 0; trial < 100; ++trial) {
    const int n = std::uniform_int_distribution<int>(2000, 12000)(rng);
    std::vector<double> x = Noise(n, rng);
    std::vector<double> y = fe.Istft(fe.Stft(x));
    ASSERT_GT(InteriorSnrDb(x, y, 512), 40.0) << "trial " << trial;
  }
}

TEST(Istft, ZeroAndSine) {
  SpectralFrontend fe(SpectralConfig{});
  ComplexSpec zero = ComplexSpec::Zero(257, 20);
  for (double v : fe.Istft(zero)) EXPECT_EQ(v, 0.0);
  std::vector<double> y = fe.Istft(fe.Stft(Sine(440.0, 8000)));
  EXPECT_NEAR(DominantHz(y, 16000, 300, 600), 440.0, 16000.0 / 512);
  EXPECT_THROW(fe.Istft(ComplexSpec::Zero(100, 3)), ShapeError);
}

TEST(Mel, HzToMelClosedForm) {
  EXPECT_NEAR(HzToMel(700.0), 2595.0 * std::log10(2.0), 1e-9);
  EXPECT_NEAR(HzToMel(700.0), 781.17, 0.01);
  EXPECT_NEAR(MelToHz(HzToMel(1234.5)), 1234.5, 1e-9);
}

TEST(Mel, FilterbankStructure) {
  for (SpectralConfig cfg : {SpectralConfig{}, SpectralConfig{16000, 1024, 160, 480, 512, 0, 8000}}) {
    SpectralFrontend fe(cfg);
    const auto& c = fe.centers();
    for (size_t i = 1; i < c.size(); ++i) EXPECT_GT(c[i], c[i - 1]);
    Eigen::VectorXd total = fe.filterbank().colwise().sum();
    for (int b = 1; b < cfg.num_bins() - 1; ++b) {
      const double f = static_cast<double>(b) * cfg.sample_rate / cfg.fft_size;
      if (f > cfg.fmin && f < cfg.fmax) {
        EXPECT_GT(total(b), 0.0) << "bin " << b;
      }
    }
    // Unit-height triangles tile to one between the first and last peaks.
    for (int b = 0; b < cfg.num_bins(); ++b) {
      const double f = static_cast<double>(b) * cfg.sample_rate / cfg.fft_size;
      if (f >= c.front() && f <= c.back()) {
        EXPECT_NEAR(total(b), 1.0, 1e-9);
      }
    }
  }
}

TEST(Mel, SineArgmaxAtFilterContainingTone) {
  SpectralConfig cfg;
  SpectralFrontend fe(cfg);
  // Independent construction of the peak that covers 1 kHz most strongly.
  const double lo = 0.0, hi = 2595.0 * std::log10(1.0 + 8000.0 / 700.0);
  int expected = -1;
  double best = -1.0;
  for (int m = 0; m < cfg.n_mels; ++m) {
    auto hz = [&](int i) {
      return 700.0 * (std::pow(10.0, (lo + (hi - lo) * i / (cfg.n_mels + 1)) / 2595.0) - 1.0);
    };
    const double l = hz(m), c = hz(m + 1), r = hz(m + 2);
    const double w = std::max(0.0, std::min((1000.0 - l) / (c - l), (r - 1000.0) / (r - c)));
    if (w > best) {
      best = w;
      expected = m;
    }
  }
  Tensor mel = fe.Mel(Sine(1000.0, 16000));
  for (int f = 0; f < mel.dim(1); ++f) {
    int arg = 0;
    for (int m = 1; m < mel.dim(0); ++m)
      if (mel.at(m, f) > mel.at(arg, f)) arg = m;
    EXPECT_EQ(arg, expected);
  }
  Tensor zero = fe.Mel(std::vector<double>(4000, 0.0));
  EXPECT_EQ(zero.MaxAbs(), 0.0);
}

TEST(MelToWav, RoundtripWithPhaseHint) {
  std::mt19937_64 rng(5);
  SpectralFrontend fe(SpectralConfig{});
  std::vector<double> x(16000, 0.0);
  for (int h = 1; h <= 20; ++h) {
    std::vector<double> s = Sine(150.0 * h, 16000, 16000, 0.3 / h);
    for (int i = 0; i < 16000; ++i) x[i] += s[i];
  }
  std::vector<double> n = Noise(16000, rng, 0.02);
  for (int i = 0; i < 16000; ++i) x[i] += n[i];
  const ComplexSpec spec = fe.Stft(x);
  const Tensor mel = fe.MagnitudeToMel(spec.cwiseAbs());
  const std::vector<double> y = fe.MelToWav(mel, &spec);
  EXPECT_EQ(static_cast<int64_t>(y.size()), fe.NumSamples(mel.dim(1)));
  EXPECT_LT(RelFrobenius(mel, fe.Mel(y)), 0.1);
}

TEST(MelToWav, ZeroMelIsSilent) {
  SpectralFrontend fe(SpectralConfig{});
  for (double v : fe.MelToWav(Tensor({80, 12}))) EXPECT_EQ(v, 0.0);
}

TEST(MelToWav, GriffinLimKeepsSineBand) {
  SpectralFrontend fe(SpectralConfig{});
  const Tensor mel = fe.Mel(Sine(1000.0, 8000));
  const std::vector<double> y = fe.MelToWav(mel);
  const double f = DominantHz(y, 16000, 200, 4000);
  // Nearest filter peak to the recovered tone must neighbor the 1 kHz filter.
  auto nearest = [&](double hz) {
    int best = 0;
    for (int m = 1; m < 80; ++m)
      if (std::abs(fe.centers()[m] - hz) < std::abs(fe.centers()[best] - hz)) best = m;
    return best;
  };
  EXPECT_LE(std::abs(nearest(f) - nearest(1000.0)), 1);
}

TEST(Bands, PartitionAndTieBreak) {
  SpectralFrontend fe(SpectralConfig{});
  BandPartition p = fe.Bands();
  EXPECT_EQ(p.low.size() + p.mid.size() + p.high.size(), 80u);
  std::vector<int> seen(80, 0);
  for (auto* v : {&p.low, &p.mid, &p.high})
    for (int m : *v) ++seen[m];
  for (int s : seen) EXPECT_EQ(s, 1);
  for (int m = 0; m < 80; ++m) {
    const double c = fe.centers()[m];
    if (c >= 1600 && c < 4000) {
      EXPECT_EQ(p.row_band[m], Band::kMid);
    }
  }
  const int k = p.mid.front() + 2;
  BandPartition tie = fe.Bands(fe.centers()[k], 4000.0);
  EXPECT_EQ(tie.row_band[k], Band::kMid);
  EXPECT_EQ(tie.row_band[k - 1], Band::kLow);
  EXPECT_THROW(fe.Bands(4000.0, 1600.0), ConfigError);
}

TEST(Config, RejectsNonColaWindowAndBadMelCount) {
  SpectralConfig cfg;
  cfg.win_length = 512;
  EXPECT_THROW(cfg.Validate(), ConfigError);
  cfg = SpectralConfig{};
  cfg.n_mels = 300;
  EXPECT_THROW(cfg.Validate(), ConfigError);
  EXPECT_NO_THROW(SpectralConfig{}.Validate());
}

TEST(Wav, RoundtripAndResample) {
  std::mt19937_64 rng(9);
  Waveform w{Noise(1000, rng, 0.9), 16000};
  Waveform back = DecodeWav(EncodeWav(w));
  ASSERT_EQ(back.size(), w.size());
  for (int64_t i = 0; i < w.size(); ++i) EXPECT_NEAR(back.samples[i], w.samples[i], 1.0 / 32767);
  Waveform re = DecodeWav(EncodeWav(Waveform{Sine(200.0, 8000, 8000), 8000}), 16000);
  EXPECT_EQ(re.sample_rate, 16000);
  EXPECT_EQ(re.size(), 16000);
  EXPECT_NEAR(DominantHz(re.samples, 16000, 100, 300), 200.0, 1.0);
}

TEST(Wav, RejectsStereoAndGarbage) {
  std::vector<uint8_t> b = EncodeWav(Waveform{{0.0, 0.1}, 16000});
  b[22] = 2;
  EXPECT_THROW(DecodeWav(b), FormatError);
  EXPECT_THROW(DecodeWav(std::vector<uint8_t>(10, 0)), FormatError);
  EXPECT_THROW(ReadWav("/nonexistent/x.wav"), MissingArtifactError);
}

}  // namespace
}  // namespace predmask
