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

#include "predmask/stream.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>

#include <glog/logging.h>

#include "predmask/error.h"

namespace predmask {
namespace {

constexpr int64_t kTrimSlack = 1 << 15;

}  // namespace

void OnsetConfig::Validate() const {
  if (!(threshold_ratio > 1.0)) throw ConfigError("onset.threshold_ratio must be > 1");
  if (consecutive_frames < 1 || min_frames < consecutive_frames) {
    throw ConfigError("onset: need 1 <= consecutive_frames <= min_frames");
  }
  if (!(floor_alpha > 0.0 && floor_alpha <= 1.0)) throw ConfigError("onset.floor_alpha must be in (0, 1]");
  if (!(floor_min > 0.0)) throw ConfigError("onset.floor_min must be positive");
  if (!(hangover_seconds > 0.0)) throw ConfigError("onset.hangover_seconds must be positive");
}

void to_json(nlohmann::json& j, const OnsetConfig& c) {
  j = nlohmann::json{{"threshold_ratio", c.threshold_ratio},
                     {"consecutive_frames", c.consecutive_frames},
                     {"min_frames", c.min_frames},
                     {"floor_alpha", c.floor_alpha},
                     {"floor_min", c.floor_min},
                     {"hangover_seconds", c.hangover_seconds}};
}

void from_json(const nlohmann::json& j, OnsetConfig& c) {
  j.at("threshold_ratio").get_to(c.threshold_ratio);
  j.at("consecutive_frames").get_to(c.consecutive_frames);
  j.at("min_frames").get_to(c.min_frames);
  j.at("floor_alpha").get_to(c.floor_alpha);
  j.at("floor_min").get_to(c.floor_min);
  j.at("hangover_seconds").get_to(c.hangover_seconds);
}

OnsetDetector::OnsetDetector(OnsetConfig cfg, int frame_samples, int sample_rate)
    : cfg_(std::move(cfg)) {
  cfg_.Validate();
  hangover_frames_ = static_cast<int>(std::ceil(cfg_.hangover_seconds * sample_rate / frame_samples));
}

OnsetDetector::Event OnsetDetector::Push(double rms) {
  ++frames_;
  const double threshold = cfg_.threshold_ratio * std::max(floor_, cfg_.floor_min);
  const bool loud = floor_ >= 0.0 && rms > threshold;
  if (active_) {
    quiet_ = loud ? 0 : quiet_ + 1;
    if (quiet_ >= hangover_frames_) {
      active_ = false;
      run_ = 0;
      return Event::kRelease;
    }
    return Event::kNone;
  }
  if (!loud) {
    floor_ = floor_ < 0.0 ? rms : (1.0 - cfg_.floor_alpha) * floor_ + cfg_.floor_alpha * rms;
    run_ = 0;
    return Event::kNone;
  }
  ++run_;
  if (run_ >= cfg_.consecutive_frames && frames_ >= cfg_.min_frames) {
    active_ = true;
    quiet_ = 0;
    return Event::kOnset;
  }
  return Event::kNone;
}

int64_t DetectOnset(const std::vector<double>& x, const OnsetConfig& cfg, int hop, int sample_rate) {
  OnsetDetector d(cfg, hop, sample_rate);
  for (size_t f = 0; (f + 1) * hop <= x.size(); ++f) {
    double e = 0.0;
    for (int i = 0; i < hop; ++i) e += x[f * hop + i] * x[f * hop + i];
    if (d.Push(std::sqrt(e / hop)) == OnsetDetector::Event::kOnset) return (f + 1) * hop;
  }
  return -1;
}

const char* ChunkSourceName(ChunkSource s) {
  switch (s) {
    case ChunkSource::kHeader: return "header";
    case ChunkSource::kPredicted: return "predicted";
    case ChunkSource::kFallback: return "fallback";
  }
  return "?";
}

void to_json(nlohmann::json& j, const ChunkEvent& e) {
  j = nlohmann::json{{"start", e.start},
                     {"length", e.length},
                     {"source", ChunkSourceName(e.source)},
                     {"window_start", e.window_start},
                     {"window_end", e.window_end},
                     {"inference_seconds", e.inference_seconds},
                     {"budget_seconds", e.budget_seconds},
                     {"missed", e.missed},
                     {"band_max", e.band_max}};
}

StreamRuntime::StreamRuntime(StreamArtifacts artifacts, StreamOptions options)
    : art_(std::move(artifacts)),
      opt_(std::move(options)),
      ft_(ResolveTiming(art_.timing, art_.renderer->frontend())),
      hop_(art_.renderer->frontend().config().hop),
      fir_(art_.renderer->taps(), hop_, art_.renderer->center()),
      onset_(opt_.onset, hop_, art_.renderer->frontend().config().sample_rate) {
  if (!art_.predictor) throw MissingArtifactError("stream: no predictor");
  const PredictorConfig& pc = art_.predictor->config();
  if (pc.input_frames != ft_.window || pc.output_frames != ft_.chunk ||
      pc.n_mels != art_.renderer->frontend().config().n_mels) {
    throw ShapeError("stream: predictor does not match the timing or mel config");
  }
  if (art_.header.ndim() != 2 || art_.header.dim(0) != pc.n_mels || art_.header.dim(1) != ft_.header) {
    throw ShapeError("stream: header " + ShapeToString(art_.header.shape()) + " does not match " +
                     std::to_string(pc.n_mels) + " x " + std::to_string(ft_.header));
  }
  header_firs_ = art_.renderer->DesignColumns(art_.header);
  // Fallback: the header tail rescaled to fallback_epsilon, kept inside the band bounds.
  fallback_ = Tensor({pc.n_mels, ft_.chunk});
  const double peak = art_.header.MaxAbs();
  const double scale = peak > 0.0 ? art_.fallback_epsilon / peak : 0.0;
  for (int r = 0; r < pc.n_mels; ++r)
    for (int c = 0; c < ft_.chunk; ++c)
      fallback_.at(r, c) = scale * art_.header.at(r, ft_.header - ft_.chunk + c);
  art_.bounds.Project(fallback_);
  buf_start_ = 0;
}

int StreamRuntime::deadline_misses() const {
  return std::count_if(events_.begin(), events_.end(), [](const ChunkEvent& e) { return e.missed; });
}

void StreamRuntime::StartActive() {
  origin_ = fir_.clock();
  onsets_.push_back(origin_);
  phase_ = Phase::kHeader;
  next_chunk_ = 0;
  fir_.ClearFiltersFrom(std::numeric_limits<int64_t>::min());
  fir_.SetOrigin(origin_);
  for (int j = 0; j < ft_.header; ++j) fir_.SetFilter(j, header_firs_[j]);
  ChunkEvent e;
  e.start = origin_;
  e.length = static_cast<int64_t>(ft_.header) * hop_;
  e.source = ChunkSource::kHeader;
  e.band_max = art_.bounds.BandMax(art_.header);
  events_.push_back(e);
  buf_.clear();
  buf_start_ = origin_;
}

void StreamRuntime::Release() {
  const int64_t now = fir_.clock();
  // Keep the column being played; later columns fade out to pass-through.
  const int64_t rel = now - origin_ - art_.renderer->center();
  const int64_t column = rel < 0 ? 0 : rel / hop_;
  fir_.ClearFiltersFrom(column + 1);
  const int64_t end = ColumnSample(column + 1);
  while (!events_.empty() && events_.back().start >= end) events_.pop_back();
  if (!events_.empty()) {
    ChunkEvent& last = events_.back();
    last.length = std::min(last.length, end - last.start);
  }
  phase_ = Phase::kIdle;
}

void StreamRuntime::SchedulePending() {
  const SpectralFrontend& fe = art_.renderer->frontend();
  const int64_t have = buf_start_ + static_cast<int64_t>(buf_.size());
  const int64_t window_samples = fe.NumSamples(ft_.window);
  const int sample_rate = fe.config().sample_rate;
  for (;;) {
    const int64_t window_col = static_cast<int64_t>(next_chunk_) * ft_.chunk;
    const int64_t w0 = ColumnSample(window_col), w1 = w0 + window_samples;
    if (w1 > have) return;
    const int64_t start_col = ft_.header + window_col;
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<double> audio(buf_.begin() + (w0 - buf_start_), buf_.begin() + (w1 - buf_start_));
    const Tensor chunk = art_.predictor->PredictChunk(fe.Mel(audio));
    std::vector<Fir> firs = art_.renderer->DesignColumns(chunk);
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() +
        opt_.simulated_extra_latency;
    // The filter of start_col is first read just after the center of the previous column.
    const int64_t deadline = ColumnSample(start_col - 1) + art_.renderer->center() + 1;
    ChunkEvent e;
    e.start = ColumnSample(start_col);
    e.length = static_cast<int64_t>(ft_.chunk) * hop_;
    e.window_start = w0;
    e.window_end = w1;
    e.inference_seconds = elapsed;
    e.budget_seconds = static_cast<double>(deadline - w1) / sample_rate;
    e.missed = opt_.enforce_deadlines && elapsed > e.budget_seconds;
    if (e.missed) {
      LOG(WARNING) << "stream: chunk at sample " << e.start << " missed its deadline (" << elapsed
                   << " s > " << e.budget_seconds << " s); using the fallback";
      e.source = ChunkSource::kFallback;
      firs = art_.renderer->DesignColumns(fallback_);
      e.band_max = art_.bounds.BandMax(fallback_);
    } else {
      e.source = ChunkSource::kPredicted;
      e.band_max = art_.bounds.BandMax(chunk);
    }
    for (int j = 0; j < ft_.chunk; ++j) fir_.SetFilter(start_col + j, std::move(firs[j]));
    events_.push_back(e);
    ++next_chunk_;
    // Drop audio no future window needs.
    const int64_t keep_from = ColumnSample(static_cast<int64_t>(next_chunk_) * ft_.chunk);
    if (keep_from - buf_start_ > kTrimSlack) {
      buf_.erase(buf_.begin(), buf_.begin() + (keep_from - buf_start_));
      buf_start_ = keep_from;
    }
  }
}

void StreamRuntime::EndFrame() {
  const double rms = std::sqrt(frame_energy_ / hop_);
  frame_energy_ = 0.0;
  frame_fill_ = 0;
  switch (onset_.Push(rms)) {
    case OnsetDetector::Event::kOnset: StartActive(); break;
    case OnsetDetector::Event::kRelease: Release(); break;
    case OnsetDetector::Event::kNone: break;
  }
}

std::vector<double> StreamRuntime::Push(const std::vector<double>& samples) {
  std::vector<double> out;
  out.reserve(samples.size());
  for (double x : samples) {
    if (phase_ != Phase::kIdle) buf_.push_back(x);
    out.push_back(fir_.Process(x));
    frame_energy_ += x * x;
    if (++frame_fill_ == hop_) EndFrame();
    if (phase_ != Phase::kIdle) {
      if (phase_ == Phase::kHeader && fir_.clock() >= ColumnSample(ft_.header)) phase_ = Phase::kSteady;
      SchedulePending();
    }
  }
  return out;
}

ProtectResult ProtectWave(const Waveform& input, const StreamArtifacts& artifacts,
                          const StreamOptions& options) {
  if (input.sample_rate != artifacts.renderer->frontend().config().sample_rate) {
    throw ConfigError("protect: input rate " + std::to_string(input.sample_rate) +
                      " differs from the model rate");
  }
  StreamRuntime rt(artifacts, options);
  const int hop = artifacts.renderer->frontend().config().hop;
  ProtectResult res;
  res.output.sample_rate = input.sample_rate;
  res.output.samples.reserve(input.samples.size());
  for (size_t i = 0; i < input.samples.size(); i += hop) {
    const size_t n = std::min<size_t>(hop, input.samples.size() - i);
    const std::vector<double> block(input.samples.begin() + i, input.samples.begin() + i + n);
    const std::vector<double> y = rt.Push(block);
    res.output.samples.insert(res.output.samples.end(), y.begin(), y.end());
  }
  const int64_t end = input.size();
  for (ChunkEvent e : rt.events()) {
    if (e.start >= end) continue;
    e.length = std::min(e.length, end - e.start);
    res.events.push_back(e);
  }
  res.onsets = rt.onsets();
  return res;
}

std::string ScheduleJsonl(const std::vector<ChunkEvent>& events) {
  std::ostringstream os;
  for (const ChunkEvent& e : events) os << nlohmann::json(e).dump() << '\n';
  return os.str();
}

}  // namespace predmask
