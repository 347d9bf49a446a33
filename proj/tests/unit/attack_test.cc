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

#include "predmask/attack.h"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <memory>

#include "predmask/error.h"
#include "predmask/random.h"

namespace predmask {
namespace {

const SpectralFrontend& Frontend() {
  static const SpectralFrontend fe{SpectralConfig{}};
  return fe;
}

BandBounds Bounds(double eps, BandWeights w = {}) { return BandBounds(Frontend().Bands(), eps, w); }

const Encoder& SmallEncoder() {
  static const Encoder e = [] {
    EncoderConfig cfg = TargetEncoderConfig();
    cfg.n_speakers = 4;
    Encoder enc(cfg, 11);
    enc.SetNormalization(3.0, 2.0);
    return enc;
  }();
  return e;
}

Waveform Voice(int speaker, uint64_t seed, double duration) {
  const ToySpeakerSpec s = SampleSpeakers(4, 3)[speaker];
  UtteranceSpec u = SampleUtterance(seed, duration, duration);
  Waveform w = Synthesize(s, u);
  return w;
}

TEST(BandBoundsTest, MultipliersPerBand) {
  const BandBounds b = Bounds(0.5);
  EXPECT_DOUBLE_EQ(b.band(Band::kLow), 0.575);
  EXPECT_DOUBLE_EQ(b.band(Band::kMid), 0.425);
  EXPECT_DOUBLE_EQ(b.band(Band::kHigh), 0.5);
  const BandPartition& p = b.partition();
  for (int r : p.low) EXPECT_EQ(b.row(r), 0.575);
  for (int r : p.mid) EXPECT_EQ(b.row(r), 0.425);
  for (int r : p.high) EXPECT_EQ(b.row(r), 0.5);
  EXPECT_EQ(p.low.size() + p.mid.size() + p.high.size(), 80u);
  EXPECT_THROW(BandBounds(p, 0.5, {1.0, 0.0, 1.0}), ConfigError);
  EXPECT_THROW(BandBounds(p, -0.1, {}), ConfigError);
}

TEST(BandBoundsTest, ProjectionClampsExactlyAndIsIdempotent) {
  const BandBounds b = Bounds(0.3);
  Rng rng(1);
  Tensor d({80, 50});
  for (double& v : d.values()) v = Uniform(rng, -1.0, 1.0);
  const Tensor before = d;
  b.Project(d);
  for (int r = 0; r < 80; ++r) {
    for (int c = 0; c < 50; ++c) {
      const double x = before.at(r, c), lim = b.row(r);
      ASSERT_EQ(d.at(r, c), x > lim ? lim : (x < -lim ? -lim : x));
    }
  }
  EXPECT_TRUE(b.Satisfied(d));
  Tensor again = d;
  b.Project(again);
  EXPECT_EQ(again.values(), d.values());
  const auto m = b.BandMax(d);
  EXPECT_DOUBLE_EQ(m[0], b.band(Band::kLow));
  EXPECT_FALSE(b.Satisfied(before));
  Tensor wrong({79, 5});
  EXPECT_THROW(b.Project(wrong), ShapeError);
}

TEST(PerturbMelTest, GainModelMatchesClosedForm) {
  Tensor m({1, 3}, std::vector<double>{0.0, 1.0, 5.0});
  Tensor d({1, 3}, std::vector<double>{0.7, -0.2, 0.3});
  const Tensor g = PerturbMel(m, d, MelPerturbation::kGain);
  for (int c = 0; c < 3; ++c) {
    EXPECT_NEAR(g[c], std::log1p(std::exp(d[c]) * std::expm1(m[c])), 1e-12);
  }
  EXPECT_EQ(g[0], 0.0);  // silence stays silent
  const Tensor a = PerturbMel(m, d, MelPerturbation::kAdditive);
  for (int c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(a[c], m[c] + d[c]);
}

// Central differences on a 4 x 10 mel through both perturbation models.
TEST(PerturbMelTest, GradientMatchesFiniteDifferences) {
  Rng rng(2);
  Tensor mel({4, 10}), delta({4, 10}), w({4, 10});
  for (double& v : mel.values()) v = Uniform(rng, 0.0, 6.0);
  for (double& v : delta.values()) v = Uniform(rng, -0.6, 0.6);
  for (double& v : w.values()) v = Uniform(rng, -1.0, 1.0);
  for (MelPerturbation model : {MelPerturbation::kGain, MelPerturbation::kAdditive}) {
    auto f = [&](const Tensor& d) {
      const Tensor y = PerturbMel(mel, d, model);
      double s = 0.0;
      for (int64_t i = 0; i < y.size(); ++i) s += (y[i] - w[i]) * (y[i] - w[i]);
      return s / y.size();
    };
    Tape tape;
    Var d = tape.Leaf(delta);
    Var loss = ad::Mse(PerturbMel(tape, mel, d, model), tape.Constant(w));
    tape.Backward(loss);
    const Tensor g = tape.Grad(d);
    for (int64_t i = 0; i < delta.size(); ++i) {
      Tensor p = delta, q = delta;
      p[i] += 1e-6;
      q[i] -= 1e-6;
      ASSERT_NEAR(g[i], (f(p) - f(q)) / 2e-6, 1e-8) << i;
    }
  }
}

TEST(AttackLossTest, DirectionalGradientMatchesFiniteDifferences) {
  const Encoder& enc = SmallEncoder();
  const Tensor mel = enc.Mel(Voice(0, 5, 1.6));
  const Tensor target = enc.Embed(enc.Mel(Voice(1, 6, 1.6)));
  const Tensor victim = enc.Embed(mel);
  Rng rng(3);
  Tensor delta(mel.shape()), dir(mel.shape());
  for (double& v : delta.values()) v = Uniform(rng, -0.3, 0.3);
  for (double& v : dir.values()) v = Uniform(rng, -1.0, 1.0);
  Tape tape;
  Var d = tape.Leaf(delta);
  Var loss = AttackLoss(tape, enc, {mel}, {d}, target, victim, 1.0, MelPerturbation::kGain);
  tape.Backward(loss);
  const Tensor g = tape.Grad(d);
  double analytic = 0.0;
  for (int64_t i = 0; i < g.size(); ++i) analytic += g[i] * dir[i];
  const double h = 1e-5;
  Tensor p = delta, q = delta;
  for (int64_t i = 0; i < p.size(); ++i) {
    p[i] += h * dir[i];
    q[i] -= h * dir[i];
  }
  const double numeric = (AttackLoss(enc, mel, p, target, victim, 1.0, MelPerturbation::kGain) -
                          AttackLoss(enc, mel, q, target, victim, 1.0, MelPerturbation::kGain)) /
                         (2 * h);
  EXPECT_NEAR(analytic, numeric, 1e-6 + 1e-4 * std::abs(numeric));
  EXPECT_NEAR(loss.value()[0], AttackLoss(enc, mel, delta, target, victim, 1.0, MelPerturbation::kGain),
              1e-12);
}

TEST(RealizationOffsetTest, ZeroForZeroDelta) {
  auto fe = std::make_shared<const SpectralFrontend>(SpectralConfig{});
  GainRenderer r(fe);
  const Waveform w = Voice(0, 7, 1.5);
  const Tensor mel = fe->Mel(w.samples);
  const Tensor off = RealizationOffset(r, w.samples, mel, Tensor(mel.shape()), MelPerturbation::kGain);
  EXPECT_EQ(off.MaxAbs(), 0.0);
}

TEST(RealizationOffsetTest, ZeroForConstantGain) {
  auto fe = std::make_shared<const SpectralFrontend>(SpectralConfig{});
  GainRenderer r(fe);
  const Waveform w = Voice(0, 8, 1.5);
  const Tensor mel = fe->Mel(w.samples);
  Tensor delta(mel.shape(), 0.3);
  const Tensor off = RealizationOffset(r, w.samples, mel, delta, MelPerturbation::kGain);
  // A constant gain is a pure scaling, which the gain model describes exactly.
  EXPECT_LT(off.MaxAbs(), 1e-9);
}

AttackConfig SmallAttack(int iterations) {
  AttackConfig cfg;
  cfg.iterations = iterations;
  cfg.step_divisor = 10.0;
  cfg.realize_every = 5;
  return cfg;
}

TEST(PgdTest, LossDecreasesWithinBounds) {
  const Encoder& enc = SmallEncoder();
  GainRenderer r(std::make_shared<const SpectralFrontend>(enc.config().spectral));
  const Waveform clip = Voice(0, 9, 1.6);
  const Tensor victim = enc.EmbedWave(clip);
  const Tensor target = enc.EmbedWave(Voice(1, 10, 1.6));
  const BandBounds b = Bounds(0.6);
  const PgdResult res = PgdOffline(enc, r, clip, target, victim, SmallAttack(20), b);
  ASSERT_EQ(res.trace.loss.size(), 21u);
  EXPECT_LT(res.final_loss, res.initial_loss);
  EXPECT_TRUE(b.Satisfied(res.delta));
  EXPECT_GT(res.delta.MaxAbs(), 0.0);
  const std::string csv = res.trace.ToCsv();
  EXPECT_EQ(csv.rfind("iteration,loss,max_low,max_mid,max_high\n", 0), 0u);
}

TEST(PgdTest, ZeroEpsilonIsNoOp) {
  const Encoder& enc = SmallEncoder();
  GainRenderer r(std::make_shared<const SpectralFrontend>(enc.config().spectral));
  const Waveform clip = Voice(2, 11, 1.5);
  const Tensor victim = enc.EmbedWave(clip);
  const Tensor target = enc.EmbedWave(Voice(3, 12, 1.5));
  AttackConfig cfg = SmallAttack(6);
  cfg.epsilon = 0.0;
  const PgdResult res = PgdOffline(enc, r, clip, target, victim, cfg, Bounds(0.0));
  EXPECT_EQ(res.delta.MaxAbs(), 0.0);
  for (double l : res.trace.loss) EXPECT_EQ(l, res.initial_loss);
  EXPECT_EQ(RandomNoiseDelta(80, 10, 0.0, 1).MaxAbs(), 0.0);
}

TEST(PgdTest, RejectsShortClip) {
  const Encoder& enc = SmallEncoder();
  GainRenderer r(std::make_shared<const SpectralFrontend>(enc.config().spectral));
  Waveform shortw;
  shortw.samples.assign(8000, 0.01);
  const Tensor e = enc.Embed(Tensor({80, 122}, 1.0));
  EXPECT_THROW(PgdOffline(enc, r, shortw, e, e, SmallAttack(2), Bounds(0.5)), InputTooShortError);
}

TEST(HeaderTest, NeedsTenClips) {
  const Encoder& enc = SmallEncoder();
  GainRenderer r(std::make_shared<const SpectralFrontend>(enc.config().spectral));
  std::vector<Waveform> clips(9, Voice(0, 13, 1.65));
  const Tensor e = enc.EmbedWave(clips[0]);
  EXPECT_THROW(TrainHeader(enc, r, clips, e, e, SmallAttack(2), Bounds(0.5)), ConfigError);
}

TEST(HeaderTest, TrainsWithinBoundsAndRoundTrips) {
  const Encoder& enc = SmallEncoder();
  GainRenderer r(std::make_shared<const SpectralFrontend>(enc.config().spectral));
  const int64_t n = Frontend().NumSamples(165);
  std::vector<Waveform> clips;
  for (int i = 0; i < 10; ++i) {
    Waveform w = Voice(0, 20 + i, 2.0);
    w.samples.resize(n);
    clips.push_back(w);
  }
  const Tensor victim = MeanEmbedding(enc, clips);
  const Tensor target = enc.EmbedWave(Voice(1, 40, 2.0));
  AttackConfig cfg = SmallAttack(1);
  cfg.header_iterations = 8;
  cfg.header_batch = 4;
  AttackTrace trace;
  const BandBounds b = Bounds(0.6);
  Header h = TrainHeader(enc, r, clips, target, victim, cfg, b, &trace);
  ASSERT_EQ(h.delta.shape(), (Shape{80, 165}));
  EXPECT_TRUE(b.Satisfied(h.delta));
  EXPECT_EQ(trace.loss.size(), 8u);
  EXPECT_LT(trace.loss.back(), trace.loss.front());

  h.victim_id = 0;
  h.target_id = 1;
  const std::string path = (std::filesystem::temp_directory_path() / "attack_test_header.ckpt").string();
  SaveHeader(path, h);
  const Header back = LoadHeader(path);
  EXPECT_EQ(back.victim_id, 0);
  EXPECT_EQ(back.target_id, 1);
  for (int64_t i = 0; i < h.delta.size(); ++i) {
    ASSERT_EQ(back.delta[i], static_cast<double>(static_cast<float>(h.delta[i])));
  }
  std::filesystem::remove(path);
}

TEST(BaselineTest, PeriodicTilesHeaderAtEpsilon) {
  Rng rng(5);
  Tensor header({80, 165});
  for (double& v : header.values()) v = Uniform(rng, -0.4, 0.4);
  const int cols = Frontend().NumFrames(5 * 16000);
  ASSERT_EQ(cols, 497);
  const Tensor p = PeriodicDelta(header, cols, 0.8);
  EXPECT_NEAR(p.MaxAbs(), 0.8, 1e-12);
  const double scale = 0.8 / header.MaxAbs();
  int tiles = 0;
  for (int start = 0; start < cols; start += 165) {
    ++tiles;
    for (int c = start; c < std::min(cols, start + 165); ++c) {
      for (int r = 0; r < 80; r += 7) ASSERT_DOUBLE_EQ(p.at(r, c), scale * header.at(r, c - start));
    }
  }
  EXPECT_EQ(tiles, 4);
}

TEST(BaselineTest, RandomNoiseUniformWithinEpsilon) {
  const Tensor t = RandomNoiseDelta(80, 300, 0.5, 9);
  EXPECT_LE(t.MaxAbs(), 0.5);
  double mean = 0.0, sq = 0.0;
  for (double v : t.values()) {
    mean += v;
    sq += v * v;
  }
  mean /= t.size();
  sq /= t.size();
  EXPECT_NEAR(mean, 0.0, 0.01);
  EXPECT_NEAR(sq, 0.25 / 3.0, 0.005);  // variance of U(-a, a) is a^2 / 3
  EXPECT_EQ(RandomNoiseDelta(80, 300, 0.5, 9).values(), t.values());
}

TEST(AttackConfigTest, JsonRoundTripAndValidation) {
  AttackConfig c;
  c.lambda = 0.5;
  c.model = MelPerturbation::kAdditive;
  c.realize_every = 3;
  nlohmann::json j = c;
  EXPECT_EQ(j["model"], "additive");
  const AttackConfig back = j.get<AttackConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  c.realize_every = 0;
  EXPECT_THROW(c.Validate(), ConfigError);
  j["model"] = "bogus";
  EXPECT_THROW(j.get<AttackConfig>(), ConfigError);
}

}  // namespace
}  // namespace predmask
