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

// Zero-latency streaming protection. After speech onset the header
// perturbation covers the first window + delay, then each chunk is predicted
// from audio that ended one delay before the chunk starts. Every input
// sample yields one output sample immediately.

#ifndef PREDMASK_STREAM_H_
#define PREDMASK_STREAM_H_

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "predmask/attack.h"
#include "predmask/predictor.h"
#include "predmask/render.h"

namespace predmask {

struct OnsetConfig {
  double threshold_ratio = 10.0;
  int consecutive_frames = 3;
  int min_frames = 5;
  double floor_alpha = 0.05;
  // Smallest noise floor, so digital silence does not make any sample an onset.
  double floor_min = 1e-6;
  double hangover_seconds = 1.0;

  void Validate() const;
};

void to_json(nlohmann::json& j, const OnsetConfig& c);
void from_json(const nlohmann::json& j, OnsetConfig& c);

// Energy-threshold detector over frame RMS values. Idle frames not above
// the threshold update the noise floor; the floor is frozen while active.
class OnsetDetector {
 public:
  OnsetDetector(OnsetConfig cfg, int frame_samples, int sample_rate);

  enum class Event { kNone, kOnset, kRelease };
  Event Push(double rms);
  bool active() const { return active_; }
  double floor() const { return floor_; }

 private:
  OnsetConfig cfg_;
  int hangover_frames_;
  int64_t frames_ = 0;
  double floor_ = -1.0;  // unset
  int run_ = 0;
  int quiet_ = 0;
  bool active_ = false;
};

// Sample index just after the frame that completes the first onset, or -1.
int64_t DetectOnset(const std::vector<double>& x, const OnsetConfig& cfg, int hop, int sample_rate);

enum class ChunkSource { kHeader, kPredicted, kFallback };
const char* ChunkSourceName(ChunkSource s);

struct ChunkEvent {
  int64_t start = 0;   // first sample covered
  int64_t length = 0;  // samples
  ChunkSource source = ChunkSource::kHeader;
  int64_t window_start = -1;  // source audio, samples; -1 for the header
  int64_t window_end = -1;    // one past the last sample used
  double inference_seconds = 0.0;
  double budget_seconds = 0.0;
  bool missed = false;
  // Largest |delta| per band.
  std::array<double, 3> band_max{};
};

void to_json(nlohmann::json& j, const ChunkEvent& e);

struct StreamOptions {
  OnsetConfig onset;
  // Miss a chunk when prediction takes longer than the audio-time slack.
  bool enforce_deadlines = true;
  // Test hook: extra seconds added to every measured inference time.
  double simulated_extra_latency = 0.0;
};

struct StreamArtifacts {
  std::shared_ptr<const Predictor> predictor;
  Tensor header;
  std::shared_ptr<const GainRenderer> renderer;
  PredictorTiming timing;
  BandBounds bounds;
  // Absolute L-inf amplitude of the deadline fallback before band projection.
  double fallback_epsilon = 0.0;
};

class StreamRuntime {
 public:
  enum class Phase { kIdle, kHeader, kSteady };

  StreamRuntime(StreamArtifacts artifacts, StreamOptions options);

  // Protected samples, one per input sample.
  std::vector<double> Push(const std::vector<double>& samples);

  Phase phase() const { return phase_; }
  int64_t clock() const { return fir_.clock(); }
  const std::vector<ChunkEvent>& events() const { return events_; }
  const std::vector<int64_t>& onsets() const { return onsets_; }
  const FrameTiming& frame_timing() const { return ft_; }
  int deadline_misses() const;

 private:
  void EndFrame();
  void StartActive();
  void Release();
  void SchedulePending();
  int64_t ColumnSample(int64_t column) const { return origin_ + column * hop_; }

  StreamArtifacts art_;
  StreamOptions opt_;
  FrameTiming ft_;
  int hop_;
  std::vector<Fir> header_firs_;
  Tensor fallback_;
  TimeVaryingFir fir_;
  OnsetDetector onset_;

  Phase phase_ = Phase::kIdle;
  int64_t origin_ = 0;
  int next_chunk_ = 0;
  // Input history: samples [buf_start_, buf_start_ + buf_.size()).
  std::vector<double> buf_;
  int64_t buf_start_ = 0;
  double frame_energy_ = 0.0;
  int frame_fill_ = 0;
  std::vector<ChunkEvent> events_;
  std::vector<int64_t> onsets_;
};

struct ProtectResult {
  Waveform output;
  std::vector<ChunkEvent> events;
  std::vector<int64_t> onsets;
};

// Replays a waveform through the runtime in hop-sized blocks.
ProtectResult ProtectWave(const Waveform& input, const StreamArtifacts& artifacts,
                          const StreamOptions& options = {});

// One JSON object per line.
std::string ScheduleJsonl(const std::vector<ChunkEvent>& events);

}  // namespace predmask

#endif  // PREDMASK_STREAM_H_
