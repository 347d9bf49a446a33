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

#include <glog/logging.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "predmask/error.h"
#include "predmask/random.h"
#include "predmask/wav_io.h"

namespace predmask {
namespace {

constexpr double kPi = std::numbers::pi;
constexpr std::array<double, 3> kNeutral = {500.0, 1500.0, 2500.0};

std::array<double, 3> VowelFormants(char v) {
  switch (v) {
    case 'a': return {730.0, 1090.0, 2440.0};
    case 'e': return {530.0, 1840.0, 2480.0};
    case 'i': return {270.0, 2290.0, 3010.0};
    case 'o': return {570.0, 840.0, 2410.0};
    case 'u': return {300.0, 870.0, 2240.0};
    default: throw ConfigError(std::string("unknown vowel '") + v + "'");
  }
}

// Two-pole resonator with roughly unit peak gain.
struct Resonator {
  double y1 = 0.0, y2 = 0.0;
  double a1 = 0.0, a2 = 0.0, g = 0.0;

  void Tune(double freq, double bw, int sr) {
    const double r = std::exp(-kPi * bw / sr);
    const double theta = 2.0 * kPi * freq / sr;
    a1 = 2.0 * r * std::cos(theta);
    a2 = -r * r;
    g = (1.0 - r) * std::sqrt(1.0 - 2.0 * r * std::cos(2.0 * theta) + r * r);
  }
  double Step(double x) {
    const double y = g * x + a1 * y1 + a2 * y2;
    y2 = y1;
    y1 = y;
    return y;
  }
};

double OnePoleMagnitude(double a, double f, int sr) {
  const double w = 2.0 * kPi * f / sr;
  return (1.0 - a) / std::sqrt(1.0 - 2.0 * a * std::cos(w) + a * a);
}

std::string ClipName(int speaker, int index) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "wav/spk%02d_%03d.wav", speaker, index);
  return buf;
}

}  // namespace

double UtteranceSpec::duration() const {
  double d = leading_silence + trailing_silence;
  for (const Segment& s : segments) d += s.duration + s.gap_after;
  return d;
}

void to_json(nlohmann::json& j, const ToySpeakerSpec& s) {
  j = nlohmann::json{{"speaker_id", s.speaker_id},
                     {"pitch_hz", s.pitch_hz},
                     {"formants_hz", s.formants_hz},
                     {"bandwidths_hz", s.bandwidths_hz},
                     {"vibrato_rate_hz", s.vibrato_rate_hz},
                     {"vibrato_depth", s.vibrato_depth},
                     {"tilt_db_per_octave", s.tilt_db_per_octave}};
}

void from_json(const nlohmann::json& j, ToySpeakerSpec& s) {
  j.at("speaker_id").get_to(s.speaker_id);
  j.at("pitch_hz").get_to(s.pitch_hz);
  j.at("formants_hz").get_to(s.formants_hz);
  j.at("bandwidths_hz").get_to(s.bandwidths_hz);
  j.at("vibrato_rate_hz").get_to(s.vibrato_rate_hz);
  j.at("vibrato_depth").get_to(s.vibrato_depth);
  j.at("tilt_db_per_octave").get_to(s.tilt_db_per_octave);
}

void to_json(nlohmann::json& j, const Segment& s) {
  j = nlohmann::json{{"vowel", std::string(1, s.vowel)},
                     {"duration", s.duration},
                     {"gap_after", s.gap_after},
                     {"level", s.level}};
}

void from_json(const nlohmann::json& j, Segment& s) {
  const std::string v = j.at("vowel").get<std::string>();
  if (v.size() != 1) throw FormatError("segment vowel must be one character");
  s.vowel = v[0];
  j.at("duration").get_to(s.duration);
  j.at("gap_after").get_to(s.gap_after);
  j.at("level").get_to(s.level);
}

void to_json(nlohmann::json& j, const UtteranceSpec& u) {
  j = nlohmann::json{{"leading_silence", u.leading_silence},
                     {"trailing_silence", u.trailing_silence},
                     {"segments", u.segments},
                     {"noise_seed", u.noise_seed}};
}

void from_json(const nlohmann::json& j, UtteranceSpec& u) {
  j.at("leading_silence").get_to(u.leading_silence);
  j.at("trailing_silence").get_to(u.trailing_silence);
  j.at("segments").get_to(u.segments);
  j.at("noise_seed").get_to(u.noise_seed);
}

bool SpeakersDistinct(const ToySpeakerSpec& a, const ToySpeakerSpec& b) {
  return std::abs(a.pitch_hz - b.pitch_hz) >= 10.0 ||
         std::abs(a.formants_hz[0] - b.formants_hz[0]) >= 50.0;
}

std::vector<ToySpeakerSpec> SampleSpeakers(int n_speakers, uint64_t seed) {
  if (n_speakers < 1) throw ConfigError("need at least one speaker");
  Rng rng(MixSeed(seed, 0x5eaca1ULL));
  std::vector<ToySpeakerSpec> out;
  for (int id = 0; id < n_speakers; ++id) {
    const bool low = id % 2 == 0;
    for (int attempt = 0;; ++attempt) {
      if (attempt > 10000) throw ConfigError("cannot place distinct speakers; too many requested");
      ToySpeakerSpec s;
      s.speaker_id = id;
      s.pitch_hz = low ? Uniform(rng, 90.0, kPitchClassEdge) : Uniform(rng, kPitchClassEdge, 260.0);
      // Shorter vocal tracts in the high class.
      const double tract = low ? Uniform(rng, 0.85, 1.05) : Uniform(rng, 1.0, 1.2);
      for (int k = 0; k < 3; ++k) s.formants_hz[k] = kNeutral[k] * tract * Uniform(rng, 0.95, 1.05);
      s.bandwidths_hz = {Uniform(rng, 60.0, 110.0), Uniform(rng, 80.0, 140.0),
                         Uniform(rng, 110.0, 200.0)};
      s.vibrato_rate_hz = Uniform(rng, 4.0, 7.0);
      s.vibrato_depth = Uniform(rng, 0.005, 0.015);
      s.tilt_db_per_octave = Uniform(rng, -9.0, -3.0);
      const bool ok = std::all_of(out.begin(), out.end(),
                                  [&](const ToySpeakerSpec& o) { return SpeakersDistinct(s, o); });
      if (ok) {
        out.push_back(s);
        break;
      }
    }
  }
  return out;
}

UtteranceSpec SampleUtterance(uint64_t seed, double min_duration, double max_duration) {
  static constexpr char kVowels[] = {'a', 'e', 'i', 'o', 'u'};
  Rng rng(seed);
  UtteranceSpec u;
  u.noise_seed = MixSeed(seed, 0x4015eULL);
  const double total = Uniform(rng, min_duration, max_duration);
  u.leading_silence = Uniform(rng, 0.2, 0.4);
  const double trailing_min = Uniform(rng, 0.1, 0.3);
  double remaining = total - u.leading_silence - trailing_min;
  for (;;) {
    Segment s;
    s.vowel = kVowels[UniformInt(rng, 0, 4)];
    s.duration = Uniform(rng, 0.12, 0.35);
    s.gap_after = Uniform(rng, 0.0, 1.0) < 0.3 ? Uniform(rng, 0.03, 0.12) : 0.0;
    s.level = Uniform(rng, 0.6, 1.0);
    if (s.duration + s.gap_after > remaining) break;
    remaining -= s.duration + s.gap_after;
    u.segments.push_back(s);
  }
  if (!u.segments.empty()) u.segments.back().gap_after = 0.0;
  u.trailing_silence = total - u.leading_silence;
  for (const Segment& s : u.segments) u.trailing_silence -= s.duration + s.gap_after;
  return u;
}

double TiltPole(double tilt_db, int sample_rate) {
  const double target = std::pow(10.0, tilt_db / 20.0);
  double lo = 0.0, hi = 0.995;
  for (int it = 0; it < 60; ++it) {
    const double a = 0.5 * (lo + hi);
    const double one = OnePoleMagnitude(a, 2000.0, sample_rate) /
                       OnePoleMagnitude(a, 1000.0, sample_rate);
    const double ratio = one * one;
    if (ratio > target) {
      lo = a;
    } else {
      hi = a;
    }
  }
  return 0.5 * (lo + hi);
}

Waveform Synthesize(const ToySpeakerSpec& sp, const UtteranceSpec& utt, int sr) {
  if (sp.pitch_hz <= 0.0) throw ConfigError("synthesize: pitch must be positive");
  const int64_t n = std::llround(utt.duration() * sr);
  if (n <= 0) throw ConfigError("synthesize: empty utterance");

  // Per-sample targets for level and formants; formants hold through gaps.
  std::vector<double> level(n, 0.0);
  std::vector<int> segment(n, -1);
  std::vector<std::array<double, 3>> formant(n);
  std::array<double, 3> current = sp.formants_hz;
  if (!utt.segments.empty()) {
    const auto v = VowelFormants(utt.segments.front().vowel);
    for (int k = 0; k < 3; ++k) current[k] = v[k] / kNeutral[k] * sp.formants_hz[k];
  }
  int64_t pos = 0;
  auto fill = [&](double seconds, double lvl, int seg) {
    const int64_t end = std::min<int64_t>(n, pos + std::llround(seconds * sr));
    for (; pos < end; ++pos) {
      level[pos] = lvl;
      segment[pos] = seg;
      formant[pos] = current;
    }
  };
  fill(utt.leading_silence, 0.0, -1);
  for (size_t si = 0; si < utt.segments.size(); ++si) {
    const Segment& s = utt.segments[si];
    const auto v = VowelFormants(s.vowel);
    for (int k = 0; k < 3; ++k) current[k] = v[k] / kNeutral[k] * sp.formants_hz[k];
    fill(s.duration, s.level, static_cast<int>(si));
    fill(s.gap_after, 0.0, -1);
  }
  fill(static_cast<double>(n), 0.0, -1);

  const double amp_coef = std::exp(-1.0 / (0.008 * sr));
  const double fmt_coef = std::exp(-1.0 / (0.015 * sr));
  const double max_f0 = sp.pitch_hz * (1.0 + sp.vibrato_depth);
  const int harmonics = std::max(1, static_cast<int>((sr / 2.0 - 200.0) / max_f0));
  const double tilt = TiltPole(sp.tilt_db_per_octave, sr);

  std::array<Resonator, 3> res;
  std::array<double, 3> f_state = formant[0];
  double amp = 0.0, phase = 0.0, tilt_a = 0.0, tilt_b = 0.0;
  std::vector<double> out(n);
  for (int64_t i = 0; i < n; ++i) {
    amp = amp_coef * amp + (1.0 - amp_coef) * level[i];
    for (int k = 0; k < 3; ++k) f_state[k] = fmt_coef * f_state[k] + (1.0 - fmt_coef) * formant[i][k];
    if (i % 16 == 0) {
      for (int k = 0; k < 3; ++k) res[k].Tune(f_state[k], sp.bandwidths_hz[k], sr);
    }
    const double t = static_cast<double>(i) / sr;
    const double f0 =
        sp.pitch_hz * (1.0 + sp.vibrato_depth * std::sin(2.0 * kPi * sp.vibrato_rate_hz * t));
    phase += 2.0 * kPi * f0 / sr;
    if (phase > 2.0 * kPi) phase -= 2.0 * kPi;
    // Band-limited pulse: mean of cos(k*phase), k = 1..harmonics.
    const double half = std::sin(0.5 * phase);
    double pulse;
    if (std::abs(half) < 1e-9) {
      pulse = 1.0;
    } else {
      pulse = (std::sin((harmonics + 0.5) * phase) / (2.0 * half) - 0.5) / harmonics;
    }
    double x = amp * pulse;
    for (Resonator& r : res) x = r.Step(x);
    tilt_a = tilt * tilt_a + (1.0 - tilt) * x;
    tilt_b = tilt * tilt_b + (1.0 - tilt) * tilt_a;
    out[i] = tilt_b;
  }

  // Resonator gain differs by up to ~20 dB across vowels; equalize segment RMS
  // so that `level` alone sets loudness. The gain is smoothed like the envelope.
  const size_t n_seg = utt.segments.size();
  std::vector<double> seg_energy(n_seg, 0.0), seg_count(n_seg, 0.0);
  for (int64_t i = 0; i < n; ++i) {
    if (segment[i] < 0) continue;
    seg_energy[segment[i]] += out[i] * out[i] / (level[i] * level[i]);
    seg_count[segment[i]] += 1.0;
  }
  std::vector<double> seg_gain(n_seg, 1.0);
  for (size_t s = 0; s < n_seg; ++s) {
    if (seg_energy[s] > 0.0) seg_gain[s] = std::sqrt(seg_count[s] / seg_energy[s]);
  }
  if (n_seg > 0) {
    double held = seg_gain[0], g = seg_gain[0];
    for (int64_t i = 0; i < n; ++i) {
      if (segment[i] >= 0) held = seg_gain[segment[i]];
      g = amp_coef * g + (1.0 - amp_coef) * held;
      out[i] *= g;
    }
  }

  double voiced_energy = 0.0;
  int64_t voiced = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (level[i] > 0.0) {
      voiced_energy += out[i] * out[i];
      ++voiced;
    }
  }
  const double rms = voiced ? std::sqrt(voiced_energy / voiced) : 1e-3;
  Rng rng(utt.noise_seed);
  std::normal_distribution<double> noise(0.0, rms * std::pow(10.0, -30.0 / 20.0));
  double peak = 0.0;
  for (double& v : out) {
    v += noise(rng);
    peak = std::max(peak, std::abs(v));
  }
  if (peak > 0.0)
    for (double& v : out) v *= 0.5 / peak;
  return Waveform{std::move(out), sr};
}

const char* SplitName(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValidation: return "validation";
    case Split::kTest: return "test";
  }
  return "?";
}

namespace {
Split ParseSplit(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "validation") return Split::kValidation;
  if (s == "test") return Split::kTest;
  throw FormatError("unknown split " + s);
}
}  // namespace

Waveform Corpus::Audio(size_t clip) const {
  Waveform w;
  w.sample_rate = sample_rate;
  w.samples.reserve(audio.at(clip).size());
  for (int16_t v : audio[clip]) w.samples.push_back(FromPcm16(v));
  return w;
}

const ToySpeakerSpec& Corpus::Speaker(int id) const {
  for (const ToySpeakerSpec& s : speakers)
    if (s.speaker_id == id) return s;
  throw ConfigError("no speaker with id " + std::to_string(id));
}

std::vector<size_t> Corpus::ClipsOf(int speaker_id, Split split) const {
  std::vector<size_t> out;
  for (size_t i = 0; i < clips.size(); ++i)
    if (clips[i].speaker_id == speaker_id && clips[i].split == split) out.push_back(i);
  return out;
}

std::vector<size_t> Corpus::ClipsIn(Split split) const {
  std::vector<size_t> out;
  for (size_t i = 0; i < clips.size(); ++i)
    if (clips[i].split == split) out.push_back(i);
  return out;
}

Corpus GenerateCorpus(const CorpusOptions& opt) {
  if (opt.n_speakers < 4) throw ConfigError("corpus needs at least 4 speakers");
  if (opt.train_per_speaker + opt.validation_per_speaker >= opt.clips_per_speaker ||
      opt.train_per_speaker < 1 || opt.validation_per_speaker < 1) {
    throw ConfigError("corpus split sizes leave no test clips");
  }
  Corpus c;
  c.sample_rate = opt.sample_rate;
  c.speakers = SampleSpeakers(opt.n_speakers, opt.seed);
  for (const ToySpeakerSpec& sp : c.speakers) {
    for (int j = 0; j < opt.clips_per_speaker; ++j) {
      ClipRecord rec;
      rec.speaker_id = sp.speaker_id;
      rec.utterance_index = j;
      rec.path = ClipName(sp.speaker_id, j);
      rec.split = j < opt.train_per_speaker ? Split::kTrain
                  : j < opt.train_per_speaker + opt.validation_per_speaker ? Split::kValidation
                                                                            : Split::kTest;
      rec.utterance = SampleUtterance(MixSeed(opt.seed, 1000u * sp.speaker_id + j));
      const Waveform w = Synthesize(sp, rec.utterance, opt.sample_rate);
      rec.duration = w.duration();
      std::vector<int16_t> pcm(w.samples.size());
      for (size_t i = 0; i < pcm.size(); ++i) pcm[i] = ToPcm16(w.samples[i]);
      c.clips.push_back(std::move(rec));
      c.audio.push_back(std::move(pcm));
    }
  }
  return c;
}

void WriteCorpus(const Corpus& c, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "wav");
  {
    std::ofstream os(fs::path(dir) / "speakers.json");
    os << nlohmann::json{{"sample_rate", c.sample_rate}, {"speakers", c.speakers}}.dump(2) << "\n";
  }
  std::ofstream manifest(fs::path(dir) / "manifest.jsonl");
  for (size_t i = 0; i < c.clips.size(); ++i) {
    const ClipRecord& r = c.clips[i];
    const ToySpeakerSpec& sp = c.Speaker(r.speaker_id);
    Waveform w = c.Audio(i);
    WriteWav((fs::path(dir) / r.path).string(), w);
    manifest << nlohmann::json{{"path", r.path},
                               {"speaker_id", r.speaker_id},
                               {"utterance_index", r.utterance_index},
                               {"split", SplitName(r.split)},
                               {"duration", r.duration},
                               {"pitch", sp.pitch_hz},
                               {"formants", sp.formants_hz},
                               {"utterance", r.utterance}}
                    .dump()
             << "\n";
  }
  if (!manifest) throw Error("failed writing corpus manifest in " + dir);
  LOG(INFO) << "wrote " << c.clips.size() << " clips to " << dir;
}

Corpus LoadCorpus(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  std::ifstream sp(root / "speakers.json");
  std::ifstream mf(root / "manifest.jsonl");
  if (!sp || !mf) throw MissingArtifactError("no corpus in " + dir + " (run gen-corpus first)");
  Corpus c;
  try {
    const nlohmann::json meta = nlohmann::json::parse(sp);
    c.sample_rate = meta.at("sample_rate").get<int>();
    c.speakers = meta.at("speakers").get<std::vector<ToySpeakerSpec>>();
    std::string line;
    while (std::getline(mf, line)) {
      if (line.empty()) continue;
      const nlohmann::json j = nlohmann::json::parse(line);
      ClipRecord r;
      r.path = j.at("path").get<std::string>();
      r.speaker_id = j.at("speaker_id").get<int>();
      r.utterance_index = j.at("utterance_index").get<int>();
      r.split = ParseSplit(j.at("split").get<std::string>());
      r.duration = j.at("duration").get<double>();
      r.utterance = j.at("utterance").get<UtteranceSpec>();
      c.clips.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("corpus metadata in " + dir + ": " + e.what());
  }
  for (const ClipRecord& r : c.clips) {
    const Waveform w = ReadWav((root / r.path).string());
    if (w.sample_rate != c.sample_rate) throw FormatError(r.path + ": unexpected sample rate");
    std::vector<int16_t> pcm(w.samples.size());
    for (size_t i = 0; i < pcm.size(); ++i) pcm[i] = ToPcm16(w.samples[i]);
    c.audio.push_back(std::move(pcm));
  }
  return c;
}

}  // namespace predmask
