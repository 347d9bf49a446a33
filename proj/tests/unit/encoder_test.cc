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

#include "predmask/encoder.h"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <type_traits>

#include "predmask/checkpoint.h"
#include "predmask/error.h"
#include "predmask/random.h"

namespace predmask {
namespace {

static_assert(!std::is_convertible_v<Verifier, Encoder>);
static_assert(!std::is_convertible_v<Verifier&, Encoder&>);

double Norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.values()) s += v * v;
  return std::sqrt(s);
}

const Corpus& SmallCorpus() {
  static const Corpus corpus = [] {
    CorpusOptions opt;
    opt.n_speakers = 8;
    opt.clips_per_speaker = 12;
    opt.train_per_speaker = 8;
    opt.validation_per_speaker = 2;
    return GenerateCorpus(opt);
  }();
  return corpus;
}

EncoderConfig SmallConfig() {
  EncoderConfig cfg = TargetEncoderConfig();
  cfg.n_speakers = 8;
  return cfg;
}

struct Trained {
  Encoder encoder;
  EncoderReport report;
};

const Trained& SmallTrained() {
  static const Trained t = [] {
    EncoderTrainOptions opt;
    opt.steps = 60;
    opt.batch = 16;
    opt.log_every = 0;
    EncoderReport r;
    Encoder e = TrainEncoder(SmallCorpus(), SmallConfig(), opt, &r);
    return Trained{std::move(e), r};
  }();
  return t;
}

std::string ReadBytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

TEST(Similarity, BasicProperties) {
  Rng rng(3);
  auto unit = [&] {
    Tensor t({16});
    for (double& v : t.values()) v = Uniform(rng, -1.0, 1.0);
    const double n = Norm(t);
    for (double& v : t.values()) v /= n;
    return t;
  };
  const Tensor a = unit();
  EXPECT_NEAR(Similarity(a, a), 1.0, 1e-12);
  for (int i = 0; i < 20; ++i) {
    const Tensor b = unit(), c = unit();
    EXPECT_DOUBLE_EQ(Similarity(b, c), Similarity(c, b));
  }
  Tensor e0({4}), e1({4});
  e0[0] = 1.0;
  e1[1] = 1.0;
  EXPECT_EQ(Similarity(e0, e1), 0.0);
}

TEST(Verify, ThresholdIsStrict) {
  auto pair_with = [](double s) {
    Tensor a({2}), b({2});
    a[0] = 1.0;
    b[0] = s;
    b[1] = std::sqrt(1.0 - s * s);
    return std::make_pair(a, b);
  };
  auto [a1, b1] = pair_with(0.780);
  EXPECT_TRUE(Verify(a1, b1));
  auto [a2, b2] = pair_with(0.077);
  EXPECT_FALSE(Verify(a2, b2));
  Tensor a({1}, 0.5), b({1}, 0.5);  // similarity exactly 0.25
  EXPECT_FALSE(Verify(a, b, 0.25));
}

TEST(WindowStarts, EvenCoverage) {
  EXPECT_EQ(WindowStarts(122, 122), std::vector<int>{0});
  EXPECT_EQ(WindowStarts(123, 122), (std::vector<int>{0, 1}));
  const std::vector<int> s = WindowStarts(500, 122);
  ASSERT_EQ(s.size(), 5u);
  EXPECT_EQ(s.front(), 0);
  EXPECT_EQ(s.back(), 500 - 122);
  EXPECT_THROW(WindowStarts(121, 122), InputTooShortError);
}

TEST(Encoder, ShapesForAllPresets) {
  for (const EncoderConfig& cfg :
       {TargetEncoderConfig(), AlternateEncoderConfig(), VerifierEncoderConfig()}) {
    Encoder enc(cfg, 5);
    Tape tape;
    Var x = tape.Constant(Tensor({3, 1, cfg.spectral.n_mels, cfg.window_frames}, 0.3));
    Var e = enc.Forward(tape, x);
    ASSERT_EQ(e.shape(), (Shape{3, cfg.embedding_dim}));
    EXPECT_THROW(enc.Forward(tape, tape.Constant(Tensor({1, 1, 7, cfg.window_frames}))),
                 ShapeError);
  }
}

TEST(Encoder, EmbeddingIsUnitAndDeterministic) {
  Encoder enc(TargetEncoderConfig(), 11);
  Rng rng(4);
  Tensor mel({80, 300});
  for (double& v : mel.values()) v = Uniform(rng, 0.0, 3.0);
  const Tensor a = enc.Embed(mel), b = enc.Embed(mel);
  EXPECT_NEAR(Norm(a), 1.0, 1e-6);
  EXPECT_EQ(a.values(), b.values());
  EXPECT_NEAR(Similarity(a, b), 1.0, 1e-12);
  const Tensor z = enc.Embed(Tensor({80, 122}));
  EXPECT_TRUE(z.AllFinite());
  EXPECT_NEAR(Norm(z), 1.0, 1e-6);
  EXPECT_THROW(enc.Embed(Tensor({80, 100})), InputTooShortError);
}

TEST(Encoder, EmbedMelsGradientFlowsToInput) {
  Encoder enc(TargetEncoderConfig(), 2);
  Rng rng(9);
  Tensor mel({80, 130});
  for (double& v : mel.values()) v = Uniform(rng, 0.0, 2.0);
  Tape tape;
  Var m = tape.Leaf(mel);
  Var e = enc.EmbedMels(tape, {m});
  Var loss = ad::Mse(e, tape.Constant(Tensor({1, 64}, 0.1)));
  tape.Backward(loss);
  const Tensor g = tape.Grad(m);
  EXPECT_GT(g.MaxAbs(), 0.0);

  // Directional finite difference through the window averaging.
  Tensor dir({80, 130});
  for (double& v : dir.values()) v = Uniform(rng, -1.0, 1.0);
  auto eval = [&](double h) {
    Tensor x = mel;
    for (int64_t i = 0; i < x.size(); ++i) x[i] += h * dir[i];
    Tape t;
    return ad::Mse(enc.EmbedMels(t, {t.Constant(x)}), t.Constant(Tensor({1, 64}, 0.1)))
        .value()[0];
  };
  const double h = 1e-5;
  const double numeric = (eval(h) - eval(-h)) / (2 * h);
  double analytic = 0.0;
  for (int64_t i = 0; i < g.size(); ++i) analytic += g[i] * dir[i];
  EXPECT_NEAR(analytic, numeric, 1e-4 * std::max(1e-8, std::abs(numeric)) + 1e-9);
}

TEST(Verification, BalancedAccuracyOracle) {
  // Two tight clusters: perfect separation at the searched threshold.
  std::vector<Tensor> e;
  std::vector<int> spk;
  for (int i = 0; i < 6; ++i) {
    Tensor t({2});
    const double ang = (i < 3 ? 0.0 : 1.5) + 0.01 * i;
    t[0] = std::cos(ang);
    t[1] = std::sin(ang);
    e.push_back(t);
    spk.push_back(i < 3 ? 0 : 1);
  }
  const VerificationStats best = EvaluateVerification(e, spk);
  EXPECT_DOUBLE_EQ(best.balanced_accuracy, 1.0);
  // Threshold above every score: only different pairs are right.
  EXPECT_DOUBLE_EQ(EvaluateVerification(e, spk, 1.0).balanced_accuracy, 0.5);
}

TEST(TargetSelection, OppositeClassFarthest) {
  Tensor victim({2}, std::vector<double>{1.0, 0.0});
  auto cand = [](int id, PitchClass c, double ang) {
    return TargetCandidate{id, c, Tensor({2}, std::vector<double>{std::cos(ang), std::sin(ang)})};
  };
  std::vector<TargetCandidate> pool = {cand(1, PitchClass::kHigh, 1.0),
                                       cand(2, PitchClass::kLow, 3.0),
                                       cand(3, PitchClass::kHigh, 2.0),
                                       cand(5, PitchClass::kHigh, 0.5)};
  EXPECT_EQ(SelectTargetSpeaker(victim, PitchClass::kLow, pool), 3);
  // Exhaustive check of the returned distance.
  for (const auto& c : pool) {
    if (c.pitch_class == PitchClass::kHigh) {
      EXPECT_GE(1.0 - Similarity(victim, pool[2].mean_embedding),
                1.0 - Similarity(victim, c.mean_embedding));
    }
  }
  EXPECT_EQ(SelectTargetSpeaker(victim, PitchClass::kLow, {pool[0]}), 1);
  pool.push_back(cand(0, PitchClass::kHigh, 2.0));
  EXPECT_EQ(SelectTargetSpeaker(victim, PitchClass::kLow, pool), 0);
  EXPECT_THROW(SelectTargetSpeaker(victim, PitchClass::kLow, {}), ConfigError);
}

TEST(TrainEncoder, LossDropsAndSameSpeakerCloser) {
  const Trained& t = SmallTrained();
  const EncoderReport& r = t.report;
  ASSERT_EQ(r.loss.size(), 60u);
  EXPECT_LT(r.final_loss, r.initial_loss);
  EXPECT_GT(r.same_mean - r.different_mean, 0.3);

  // Random triples (anchor, same-speaker, different-speaker) over test clips.
  const Corpus& c = SmallCorpus();
  const std::vector<size_t> test = c.ClipsIn(Split::kTest);
  std::vector<Tensor> emb;
  for (size_t i : test) emb.push_back(t.encoder.EmbedWave(c.Audio(i)));
  Rng rng(21);
  int ok = 0, total = 0;
  while (total < 200) {
    const int a = UniformInt(rng, 0, static_cast<int>(test.size()) - 1);
    const int p = UniformInt(rng, 0, static_cast<int>(test.size()) - 1);
    const int n = UniformInt(rng, 0, static_cast<int>(test.size()) - 1);
    const int sa = c.clips[test[a]].speaker_id;
    if (a == p || c.clips[test[p]].speaker_id != sa || c.clips[test[n]].speaker_id == sa) continue;
    ok += Similarity(emb[a], emb[p]) > Similarity(emb[a], emb[n]);
    ++total;
  }
  EXPECT_GE(ok, 180);
}

TEST(TrainEncoder, SameSeedGivesIdenticalCheckpoint) {
  EncoderTrainOptions opt;
  opt.steps = 4;
  opt.batch = 4;
  opt.log_every = 0;
  const auto dir = std::filesystem::temp_directory_path() / "predmask_encoder_test";
  std::filesystem::create_directories(dir);
  const std::string a = (dir / "a.ckpt").string(), b = (dir / "b.ckpt").string();
  TrainEncoder(SmallCorpus(), SmallConfig(), opt, nullptr).Save(a);
  TrainEncoder(SmallCorpus(), SmallConfig(), opt, nullptr).Save(b);
  EXPECT_EQ(ReadBytes(a), ReadBytes(b));
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, EncoderRoundtripIsBitExact) {
  const auto dir = std::filesystem::temp_directory_path() / "predmask_ckpt_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "enc.ckpt").string();
  const Encoder& enc = SmallTrained().encoder;
  enc.Save(path, {{"note", "x"}});
  const Encoder back = Encoder::Load(path);
  const Waveform w = SmallCorpus().Audio(0);
  EXPECT_EQ(enc.EmbedWave(w).values(), back.EmbedWave(w).values());
  const std::string again = (dir / "again.ckpt").string();
  back.Save(again, {{"note", "x"}});
  EXPECT_EQ(ReadBytes(path), ReadBytes(again));

  EXPECT_THROW(Encoder::Load((dir / "missing.ckpt").string()), MissingArtifactError);
  {
    std::ofstream bad(dir / "bad.ckpt", std::ios::binary);
    bad << "not a checkpoint";
  }
  EXPECT_THROW(Encoder::Load((dir / "bad.ckpt").string()), FormatError);
  std::filesystem::remove_all(dir);
}

TEST(TrainEncoder, RejectsMismatchedSpeakerCount) {
  EncoderConfig cfg = SmallConfig();
  cfg.n_speakers = 5;
  EXPECT_THROW(TrainEncoder(SmallCorpus(), cfg, {}, nullptr), ConfigError);
}

}  // namespace
}  // namespace predmask
