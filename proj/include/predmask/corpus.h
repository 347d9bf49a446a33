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

// Parametric toy speakers: a band-limited pulse train at the speaker's pitch
// with vibrato, passed through three time-varying formant resonators and a
// two-section one-pole spectral tilt, plus a -30 dB noise floor.

#ifndef PREDMASK_CORPUS_H_
#define PREDMASK_CORPUS_H_

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "predmask/spectral.h"

namespace predmask {

enum class PitchClass { kLow, kHigh };

// Boundary between the low and high pitch classes, Hz.
inline constexpr double kPitchClassEdge = 160.0;

struct ToySpeakerSpec {
  int speaker_id = 0;
  double pitch_hz = 120.0;
  // Formants of the neutral vowel; other vowels scale from these.
  std::array<double, 3> formants_hz = {500.0, 1500.0, 2500.0};
  std::array<double, 3> bandwidths_hz = {80.0, 100.0, 140.0};
  double vibrato_rate_hz = 5.0;
  double vibrato_depth = 0.01;  // fraction of pitch
  double tilt_db_per_octave = -6.0;

  PitchClass pitch_class() const {
    return pitch_hz < kPitchClassEdge ? PitchClass::kLow : PitchClass::kHigh;
  }
  bool operator==(const ToySpeakerSpec&) const = default;
};

struct Segment {
  char vowel = 'a';       // one of a e i o u
  double duration = 0.2;  // s
  double gap_after = 0.0; // s of silence
  double level = 1.0;
  bool operator==(const Segment&) const = default;
};

struct UtteranceSpec {
  double leading_silence = 0.3;
  double trailing_silence = 0.2;
  std::vector<Segment> segments;
  uint64_t noise_seed = 0;

  double duration() const;
  bool operator==(const UtteranceSpec&) const = default;
};

void to_json(nlohmann::json& j, const ToySpeakerSpec& s);
void from_json(const nlohmann::json& j, ToySpeakerSpec& s);
void to_json(nlohmann::json& j, const Segment& s);
void from_json(const nlohmann::json& j, Segment& s);
void to_json(nlohmann::json& j, const UtteranceSpec& u);
void from_json(const nlohmann::json& j, UtteranceSpec& u);

// Speakers alternate pitch class by id (even low, odd high) and are redrawn
// until every pair differs by >= 10 Hz in pitch or >= 50 Hz in F1.
std::vector<ToySpeakerSpec> SampleSpeakers(int n_speakers, uint64_t seed);
UtteranceSpec SampleUtterance(uint64_t seed, double min_duration = 3.0,
                              double max_duration = 8.0);
bool SpeakersDistinct(const ToySpeakerSpec& a, const ToySpeakerSpec& b);

// Deterministic; output peak-normalized to 0.5.
Waveform Synthesize(const ToySpeakerSpec& speaker, const UtteranceSpec& utt,
                    int sample_rate = 16000);

// Coefficient of two cascaded identical one-pole lowpass sections whose
// combined magnitude drops by `tilt_db` between 1 and 2 kHz.
double TiltPole(double tilt_db, int sample_rate);

enum class Split { kTrain, kValidation, kTest };
const char* SplitName(Split s);

struct ClipRecord {
  std::string path;  // relative to the corpus directory
  int speaker_id = 0;
  int utterance_index = 0;
  Split split = Split::kTrain;
  UtteranceSpec utterance;
  double duration = 0.0;
};

struct CorpusOptions {
  int n_speakers = 20;
  int clips_per_speaker = 40;
  int train_per_speaker = 24;
  int validation_per_speaker = 8;
  uint64_t seed = 7;
  int sample_rate = 16000;
};

// Clip audio is held as 16-bit codes, exactly as stored on disk.
struct Corpus {
  std::vector<ToySpeakerSpec> speakers;
  std::vector<ClipRecord> clips;
  std::vector<std::vector<int16_t>> audio;
  int sample_rate = 16000;

  Waveform Audio(size_t clip) const;
  const ToySpeakerSpec& Speaker(int id) const;
  std::vector<size_t> ClipsOf(int speaker_id, Split split) const;
  std::vector<size_t> ClipsIn(Split split) const;
};

Corpus GenerateCorpus(const CorpusOptions& opt);
// Writes wav/*.wav, speakers.json and manifest.jsonl.
void WriteCorpus(const Corpus& corpus, const std::string& dir);
Corpus LoadCorpus(const std::string& dir);

}  // namespace predmask

#endif  // PREDMASK_CORPUS_H_
