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

// Predictive perturbation network: maps a past mel window to the
// perturbation chunk played one delay later, plus its streaming schedule
// and training loop.

#ifndef PREDMASK_PREDICTOR_H_
#define PREDMASK_PREDICTOR_H_

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "predmask/attack.h"
#include "predmask/autodiff.h"
#include "predmask/encoder.h"
#include "predmask/render.h"
#include "predmask/spectral.h"

namespace predmask {

// Durations in seconds. The delay must equal the chunk length so chunks
// slid by one chunk length tile the stream without gaps.
struct PredictorTiming {
  double window_seconds = 1.25;
  double delay_seconds = 0.4;
  double chunk_seconds = 0.4;

  // Throws ConfigError.
  void Validate() const;
};

void to_json(nlohmann::json& j, const PredictorTiming& t);
void from_json(const nlohmann::json& j, PredictorTiming& t);

// Timing in mel columns. Column j starts at sample j * hop. The window is
// the number of whole frames inside window_seconds; chunk, delay and header
// are interval lengths in hops.
struct FrameTiming {
  int window = 0;
  int chunk = 0;
  int delay = 0;
  int header = 0;  // window_seconds + delay_seconds
};

FrameTiming ResolveTiming(const PredictorTiming& timing, const SpectralFrontend& frontend);

// Chunk k covers columns [header + k*chunk, ...) and is predicted from the
// window starting at column k*chunk. The last chunk is truncated.
struct ChunkSlot {
  int start = 0;
  int length = 0;
  int window_start = 0;
};
std::vector<ChunkSlot> PlanChunks(int total_columns, const FrameTiming& ft);

// Per-layer strides and output paddings of the down/up-sampling stack.
// trace[i] is the (C, H, W) input of layer i; the last entry is the output.
struct ShapePlan {
  std::vector<std::pair<int, int>> down_strides;
  std::vector<std::pair<int, int>> up_output_pads;
  std::vector<Shape> trace;

  std::string ToString() const;
};

// Down layers use reflection pad 1 and 3x3 kernels; layer 0 has stride
// (1, 2). Each remaining layer halves H (and separately W) unless it lies in
// a leading run of stride-1 layers; the run is the shortest one whose
// bottleneck makes the 3x3 stride-2 up layers (each 2n-1 or 2n) land
// exactly on the output size. Throws ShapeError naming the layer when no
// plan exists.
ShapePlan PlanShapes(int in_h, int in_w, int out_h, int out_w, const std::vector<int>& down_channels,
                     const std::vector<int>& up_channels);

struct PredictorConfig {
  int n_mels = 80;
  int input_frames = 122;
  int output_frames = 40;
  std::vector<int> down_channels = {8, 32, 64, 64, 128, 128, 128};
  std::vector<int> up_channels = {64, 32, 16, 8, 1};

  // Throws ConfigError.
  void Validate() const;
};

void to_json(nlohmann::json& j, const PredictorConfig& c);
void from_json(const nlohmann::json& j, PredictorConfig& c);

PredictorConfig DeskPredictorConfig(const SpectralFrontend& frontend, const PredictorTiming& timing);
// The 512-mel, 100-frame in, 32-frame out configuration with full widths.
PredictorConfig WidePredictorConfig();

// Scales each row of a raw (n_mels x C) output in (-1, 1) by its band bound.
Tensor ScaleOutput(const Tensor& raw, const BandBounds& bounds);

class Predictor {
 public:
  // Throws ShapeError when the shape plan is infeasible.
  Predictor(PredictorConfig cfg, uint64_t seed);

  const PredictorConfig& config() const { return cfg_; }
  const ShapePlan& plan() const { return plan_; }

  // windows: N x 1 x n_mels x input_frames of log-mel -> N x 1 x n_mels x
  // output_frames in (-1, 1). Training mode uses batch statistics and
  // updates the running ones.
  Var Forward(Tape& tape, const Var& windows, bool training);
  // Eval-mode forward with weights as constants.
  Var Forward(Tape& tape, const Var& windows) const;

  // Eval-mode chunk scaled by the output bounds. Throws ShapeError on a
  // wrong window shape. Stores the wall time in seconds when asked.
  Tensor PredictChunk(const Tensor& window, double* seconds = nullptr) const;

  void SetOutputBounds(const BandBounds& bounds);
  // n_mels x 1 per-row bounds.
  const Tensor& output_bounds() const { return bounds_.value; }
  void SetNormalization(double mean, double stddev);

  std::vector<Parameter*> TrainableParameters();
  std::vector<const Parameter*> AllParameters() const;

  void Save(const std::string& path, const nlohmann::json& extra = {}) const;
  static Predictor Load(const std::string& path);
  // Config block stored by Save (including extra keys).
  static nlohmann::json LoadMeta(const std::string& path);

 private:
  struct Down {
    Parameter w, b, gamma, beta, slope;
    mutable ad::BatchNormStats stats;
  };
  struct Up {
    Parameter w, b;
  };
  using Binder = std::function<Var(const Parameter&)>;
  Var Run(Tape& tape, const Var& windows, bool training, const Binder& bind) const;

  PredictorConfig cfg_;
  ShapePlan plan_;
  std::vector<Down> down_;
  std::vector<Up> up_;
  Parameter norm_;    // [mean, stddev]
  Parameter bounds_;  // n_mels x 1
};

// Full-clip perturbation: the header over its columns, then predicted
// chunks. The tape version keeps the header constant and the chunks
// differentiable with respect to the predictor.
Var AssembleDelta(Tape& tape, Predictor& predictor, const Tensor& mel, const Tensor& header,
                  const FrameTiming& ft, bool training);
Tensor AssembleDelta(const Predictor& predictor, const Tensor& mel, const Tensor& header,
                     const FrameTiming& ft);

struct PredictorTrainOptions {
  int epochs = 8;
  double lr = 1e-3;
  double lambda = 1.0;
  MelPerturbation model = MelPerturbation::kGain;
  uint64_t seed = 1;
  bool log = true;
};

void to_json(nlohmann::json& j, const PredictorTrainOptions& o);
void from_json(const nlohmann::json& j, PredictorTrainOptions& o);

struct PredictorReport {
  std::vector<double> train_loss;  // per epoch, mean over clips
  std::vector<double> val_loss;    // per epoch
  double initial_val_loss = 0.0;
  // Validation loss fell at every one of the first five epochs.
  bool improving = false;
  // Encoder similarity of rendered protection to the victim, per val clip.
  std::vector<double> val_similarity;
  double median_val_similarity = 0.0;
  double inference_ms_mean = 0.0;
  double inference_ms_p99 = 0.0;
  double seconds = 0.0;
};

void to_json(nlohmann::json& j, const PredictorReport& r);

// Clips start at speech onset and are at least 3 s long. Each step renders
// the assembled perturbation into the clip and adds the realization offset
// to the encoder input; the header stays fixed. Throws InputTooShortError,
// ShapeError or DivergenceError.
Predictor TrainPredictor(const Encoder& encoder, const GainRenderer& renderer,
                         const std::vector<Waveform>& train, const std::vector<Waveform>& validation,
                         const Tensor& header, const Tensor& emb_target, const Tensor& emb_victim,
                         const BandBounds& bounds, const PredictorConfig& cfg,
                         const PredictorTiming& timing, const PredictorTrainOptions& opt,
                         PredictorReport* report = nullptr);

// Mean realized attack loss over clips with the predictor in eval mode.
double PredictorLoss(const Predictor& predictor, const Encoder& encoder, const GainRenderer& renderer,
                     const std::vector<Waveform>& clips, const Tensor& header,
                     const Tensor& emb_target, const Tensor& emb_victim, const FrameTiming& ft,
                     double lambda, MelPerturbation model);

}  // namespace predmask

#endif  // PREDMASK_PREDICTOR_H_
