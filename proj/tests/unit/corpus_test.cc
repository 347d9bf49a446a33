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

#include "predmask/corpus.h"

#include <gtest/gtest.h>

#include <unsupported/Eigen/FFT>

#include <cmath>
#include <filesystem>

#include "predmask/error.h"
#include "predmask/wav_io.h"

namespace predmask {
namespace {

// Harmonic-sum pitch estimate from the magnitude spectrum of the whole clip,
// interpolated between FFT bins.
double EstimatePitch(const std::vector<double>& x, int sr) {
  const int n = 1 << 20;
  std::vector<double> buf(n, 0.0);
  std::copy(x.begin(), x.begin() + std::min<size_t>(x.size(), n), buf.begin());
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> spec;
  fft.fwd(spec, buf);
  const double df = static_cast<double>(sr) / n;
  auto mag = [&](double hz) {
    const double b = hz / df;
    const int i = static_cast<int>(b);
    const double f = b - i;
    return (1 - f) * std::abs(spec[i]) + f * std::abs(spec[i + 1]);
  };
  double best = 0.0, best_score = -1.0;
  for (double f = 80.0; f <= 280.0; f += 0.05) {
    double s = 0.0;
    for (int k = 1; k <= 6; ++k) s += mag(k * f);
    if (s > best_score) {
      best_score = s;
      best = f;
    }
  }
  return best;
}

TEST(Speakers, ClassesAndDistinctness) {
  auto sp = SampleSpeakers(20, 7);
  ASSERT_EQ(sp.size(), 20u);
  for (const auto& s : sp) {
    EXPECT_GE(s.pitch_hz, 90.0);
    EXPECT_LE(s.pitch_hz, 260.0);
    EXPECT_EQ(s.pitch_class(), s.speaker_id % 2 == 0 ? PitchClass::kLow : PitchClass::kHigh);
  }
  for (size_t i = 0; i < sp.size(); ++i)
    for (size_t j = i + 1; j < sp.size(); ++j) EXPECT_TRUE(SpeakersDistinct(sp[i], sp[j]));
}

TEST(Synthesize, FundamentalMatchesSpec) {
  auto sp = SampleSpeakers(8, 3);
  for (const auto& s : sp) {
    Waveform w = Synthesize(s, SampleUtterance(100 + s.speaker_id));
    EXPECT_NEAR(EstimatePitch(w.samples, 16000), s.pitch_hz, 2.0) << "speaker " << s.speaker_id;
  }
}

TEST(Synthesize, DeterministicAndBounded) {
  auto sp = SampleSpeakers(4, 1);
  UtteranceSpec u = SampleUtterance(42);
  EXPECT_GE(u.duration(), 3.0);
  EXPECT_LE(u.duration(), 8.0);
  Waveform a = Synthesize(sp[1], u), b = Synthesize(sp[1], u);
  EXPECT_EQ(EncodeWav(a), EncodeWav(b));
  double peak = 0.0;
  for (double v : a.samples) peak = std::max(peak, std::abs(v));
  EXPECT_NEAR(peak, 0.5, 1e-12);
  // Leading silence sits near the noise floor.
  double lead = 0.0, body = 0.0;
  const int n_lead = static_cast<int>(0.15 * 16000);
  for (int i = 0; i < n_lead; ++i) lead += a.samples[i] * a.samples[i];
  for (size_t i = n_lead; i < a.samples.size(); ++i) body += a.samples[i] * a.samples[i];
  EXPECT_LT(10 * std::log10((lead / n_lead) / (body / (a.samples.size() - n_lead))), -20.0);
}

TEST(TiltPole, HitsRequestedSlope) {
  for (double tilt : {-3.0, -6.0, -9.0}) {
    const double a = TiltPole(tilt, 16000);
    auto mag = [&](double f) {
      const double w = 2 * M_PI * f / 16000;
      return (1 - a) / std::sqrt(1 - 2 * a * std::cos(w) + a * a);
    };
    EXPECT_NEAR(40 * std::log10(mag(2000) / mag(1000)), tilt, 1e-6);
  }
}

TEST(Corpus, FullSizeShapeAndSplits) {
  Corpus c = GenerateCorpus(CorpusOptions{});
  ASSERT_EQ(c.clips.size(), 800u);
  for (size_t i = 0; i < c.clips.size(); ++i) {
    EXPECT_GE(c.audio[i].size(), 3u * 16000);
  }
  EXPECT_EQ(c.ClipsOf(3, Split::kTrain).size(), 24u);
  EXPECT_EQ(c.ClipsOf(3, Split::kValidation).size(), 8u);
  EXPECT_EQ(c.ClipsOf(3, Split::kTest).size(), 8u);
}

TEST(Corpus, WriteLoadRoundtripIsExact) {
  CorpusOptions opt;
  opt.n_speakers = 4;
  opt.clips_per_speaker = 4;
  opt.train_per_speaker = 2;
  opt.validation_per_speaker = 1;
  Corpus a = GenerateCorpus(opt);
  Corpus again = GenerateCorpus(opt);
  EXPECT_EQ(a.audio, again.audio);
  const auto dir = std::filesystem::temp_directory_path() / "predmask_corpus_test";
  std::filesystem::remove_all(dir);
  WriteCorpus(a, dir.string());
  Corpus b = LoadCorpus(dir.string());
  EXPECT_EQ(a.audio, b.audio);
  EXPECT_EQ(a.speakers, b.speakers);
  ASSERT_EQ(a.clips.size(), b.clips.size());
  EXPECT_EQ(a.clips[5].utterance, b.clips[5].utterance);
  EXPECT_THROW(LoadCorpus((dir / "missing").string()), MissingArtifactError);
  std::filesystem::remove_all(dir);
}

TEST(Corpus, RejectsTinyCorpus) {
  CorpusOptions opt;
  opt.n_speakers = 3;
  EXPECT_THROW(GenerateCorpus(opt), ConfigError);
}

}  // namespace
}  // namespace predmask
