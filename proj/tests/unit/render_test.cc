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

#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <memory>

#include <unsupported/Eigen/FFT>

#include "predmask/random.h"

namespace predmask {
namespace {

std::shared_ptr<const SpectralFrontend> Frontend() {
  static const auto fe = std::make_shared<const SpectralFrontend>(SpectralConfig{});
  return fe;
}

std::vector<double> Noise(int n, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> x(n);
  for (double& v : x) v = Uniform(rng, -0.5, 0.5);
  return x;
}

TEST(GainRendererTest, ZeroGainIsExactIdentity) {
  GainRenderer r(Frontend());
  const std::vector<double> x = Noise(8000, 1);
  const int cols = Frontend()->NumFrames(x.size());
  EXPECT_TRUE(r.Design(std::vector<double>(80, 0.0)).empty());
  EXPECT_EQ(r.Render(x, Tensor({80, cols})), x);
}

TEST(GainRendererTest, ConstantGainScalesSignal) {
  GainRenderer r(Frontend());
  const double g = 0.4;
  const Fir h = r.Design(std::vector<double>(80, g));
  ASSERT_EQ(h.size(), 256u);
  EXPECT_NEAR(h[0], std::exp(g), 1e-9);
  for (size_t i = 1; i < h.size(); ++i) EXPECT_NEAR(h[i], 0.0, 1e-9);

  const std::vector<double> x = Noise(8000, 2);
  const int cols = Frontend()->NumFrames(x.size());
  const std::vector<double> y = r.Render(x, Tensor({80, cols}, g));
  for (size_t n = 0; n < x.size(); ++n) ASSERT_NEAR(y[n], std::exp(g) * x[n], 1e-9) << n;
}

TEST(GainRendererTest, BinGainsInterpolateMelGains) {
  GainRenderer r(Frontend());
  std::vector<double> g(80);
  for (int i = 0; i < 80; ++i) g[i] = 0.01 * i;
  const Eigen::VectorXd bins = r.BinLogGains(g);
  ASSERT_EQ(bins.size(), 257);
  // Monotone mel gains give monotone bin gains within the mel gain range.
  for (int k = 1; k < bins.size(); ++k) EXPECT_GE(bins[k], bins[k - 1] - 1e-12);
  EXPECT_NEAR(bins[0], 0.0, 1e-12);
  EXPECT_NEAR(bins[256], 0.79, 1e-12);
}

TEST(GainRendererTest, MagnitudeResponseFollowsSmoothGains) {
  GainRenderer r(Frontend());
  std::vector<double> g(80);
  for (int i = 0; i < 80; ++i) g[i] = 0.5 * std::sin(2.0 * M_PI * i / 40.0);
  const Fir h = r.Design(g);
  const Eigen::VectorXd want = r.BinLogGains(g);
  std::vector<double> padded(h);
  padded.resize(512, 0.0);
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> spec;
  fft.fwd(spec, padded);
  double worst = 0.0;
  for (int k = 0; k < 257; ++k) worst = std::max(worst, std::abs(std::log(std::abs(spec[k])) - want[k]));
  EXPECT_LT(worst, 0.02);  // nats
}

TEST(GainRendererTest, MinimumPhaseEnergyIsFrontLoaded) {
  GainRenderer r(Frontend());
  std::vector<double> g(80);
  for (int i = 0; i < 80; ++i) g[i] = (i % 20 < 10) ? 0.6 : -0.6;
  const Fir h = r.Design(g);
  double head = 0.0, total = 0.0;
  for (size_t i = 0; i < h.size(); ++i) {
    total += h[i] * h[i];
    if (i < 64) head += h[i] * h[i];
  }
  EXPECT_GT(head / total, 0.9);
}

TEST(GainRendererTest, OutputIsCausal) {
  GainRenderer r(Frontend());
  std::vector<double> x = Noise(6000, 3);
  const int cols = Frontend()->NumFrames(x.size());
  Rng rng(4);
  Tensor gains({80, cols});
  for (double& v : gains.values()) v = Uniform(rng, -0.6, 0.6);
  const std::vector<double> y = r.Render(x, gains);
  const int n0 = 3000;
  x[n0] += 1.0;
  const std::vector<double> y2 = r.Render(x, gains);
  for (int n = 0; n < n0; ++n) ASSERT_EQ(y[n], y2[n]) << n;
  EXPECT_NE(y[n0], y2[n0]);
}

TEST(TimeVaryingFirTest, CrossfadesBetweenColumnCenters) {
  const int hop = 160, center = 256;
  TimeVaryingFir f(1, hop, center);
  f.SetFilter(0, {2.0});
  f.SetFilter(1, {4.0});
  for (int n = 0; n <= center + 2 * hop; ++n) {
    const double y = f.Process(1.0);
    double want;
    if (n <= center) {
      want = 2.0;
    } else if (n <= center + hop) {
      const double a = static_cast<double>(n - center) / hop;
      want = 2.0 * (1 - a) + 4.0 * a;
    } else {
      // Column 2 is unknown, so the output fades toward pass-through.
      const double a = static_cast<double>(n - center - hop) / hop;
      want = 4.0 * (1 - a) + 1.0 * a;
    }
    ASSERT_NEAR(y, want, 1e-12) << n;
  }
}

TEST(TimeVaryingFirTest, SamplesBeforeOriginAndMissingColumnsPass) {
  TimeVaryingFir f(1, 160, 256);
  f.SetOrigin(100);
  f.SetFilter(0, {3.0});
  for (int n = 0; n < 100; ++n) ASSERT_EQ(f.Process(0.5), 0.5);
  EXPECT_EQ(f.Process(0.5), 1.5);
  TimeVaryingFir g(1, 160, 256);
  for (int n = 0; n < 1000; ++n) ASSERT_EQ(g.Process(0.25), 0.25);
}

TEST(TimeVaryingFirTest, StreamingMatchesOfflineRender) {
  GainRenderer r(Frontend());
  const std::vector<double> x = Noise(7000, 5);
  const int cols = Frontend()->NumFrames(x.size());
  Rng rng(6);
  Tensor gains({80, cols});
  for (double& v : gains.values()) v = Uniform(rng, -0.5, 0.5);
  const int64_t origin = 800;
  const std::vector<double> offline = r.Render(x, gains, origin);
  const std::vector<Fir> firs = r.DesignColumns(gains);
  TimeVaryingFir f(r.taps(), 160, r.center());
  f.SetOrigin(origin);
  for (int j = 0; j < cols; ++j) f.SetFilter(j, firs[j]);
  for (size_t n = 0; n < x.size(); ++n) ASSERT_EQ(f.Process(x[n]), offline[n]) << n;
}

}  // namespace
}  // namespace predmask
