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


// Embedding attacks on a white-box encoder: offline PGD on a whole clip,
// the universal header trained over many short clips of one victim, and
// the noise and periodic baselines. Perturbations live in the log-mel
// domain and are clamped per band.

#ifndef PREDMASK_ATTACK_H_
#define PREDMASK_ATTACK_H_

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "predmask/autodiff.h"
#include "predmask/corpus.h"
#include "predmask/encoder.h"
#include "predmask/render.h"
#include "predmask/spectral.h"

namespace predmask {

struct BandWeights {
  double low = 1.15;
  double mid = 0.85;
  double high = 1.0;

  // Throws ConfigError unless all are positive.
  void Validate() const;
  static BandWeights Flat() { return {1.0, 1.0, 1.0}; }
};

// How a mel-domain delta changes the encoder input.
//   kAdditive: m + delta.
//   kGain: log(1 + exp(delta) * (exp(m) - 1)), the mel of the signal after
//          a per-band gain of exp(delta). This is what injection produces.
enum class MelPerturbation { kAdditive, kGain };

struct AttackConfig {
  double lambda = 1.0;
  // Relative to the log-mel dynamic range (see LogMelDynamicRange).
  double epsilon = 0.10;
  int iterations = 1500;
  // PGD step = epsilon / step_divisor.
  double step_divisor = 60.0;
  int header_iterations = 500;
  int header_batch = 8;
  double epsilon_noise = 0.15;
  double epsilon_periodic = 0.12;
  BandWeights weights;
  MelPerturbation model = MelPerturbation::kGain;
  // Iterations between re-rendering the current delta to refresh the
  // realization offset.
  int realize_every = 10;
  uint64_t seed = 1;

  void Validate() const;
};

void to_json(nlohmann::json& j, const AttackConfig& c);
void from_json(const nlohmann::json& j, AttackConfig& c);

// p99 - p1 of all log-mel values of the given clips.
double LogMelDynamicRange(const SpectralFrontend& frontend, const std::vector<Waveform>& clips);

// Absolute per-row L-infinity bounds.
class BandBounds {
 public:
  BandBounds(const BandPartition& partition, double epsilon, const BandWeights& weights);

  int rows() const { return static_cast<int>(bound_.size()); }
  double epsilon() const { return epsilon_; }
  double row(int r) const { return bound_[r]; }
  double band(Band b) const { return band_bound_[static_cast<int>(b)]; }
  const BandPartition& partition() const { return partition_; }
  // rows x cols tensor of row bounds, for scaling network outputs.
  Tensor RowBounds(int cols) const;

  // Clamps each row of an (rows x T) delta in place.
  void Project(Tensor& delta) const;
  // Largest |delta| per band (low, mid, high).
  std::array<double, 3> BandMax(const Tensor& delta) const;
  bool Satisfied(const Tensor& delta, double tol = 1e-9) const;

 private:
  BandPartition partition_;
  double epsilon_;
  std::array<double, 3> band_bound_;
  std::vector<double> bound_;
};

// Perturbed encoder input for a constant mel and a differentiable delta of
// the same shape.
Var PerturbMel(Tape& tape, const Tensor& mel, const Var& delta, MelPerturbation model);
// Non-differentiable version.
Tensor PerturbMel(const Tensor& mel, const Tensor& delta, MelPerturbation model);

// mel(render(x, delta)) - PerturbMel(mel(x), delta): what the mel-domain
// model misses about the injected signal. Zero for a zero delta.
Tensor RealizationOffset(const GainRenderer& renderer, const std::vector<double>& samples,
                         const Tensor& mel, const Tensor& delta, MelPerturbation model);

// mean_i [MSE(E(x_i + d_i), target) - lambda * MSE(E(x_i + d_i), victim)],
// with x_i + d_i = PerturbMel(mel_i, d_i) (+ offsets_i when given).
Var AttackLoss(Tape& tape, const Encoder& encoder, const std::vector<Tensor>& mels,
               const std::vector<Var>& deltas, const Tensor& emb_target, const Tensor& emb_victim,
               double lambda, MelPerturbation model,
               const std::vector<Tensor>* offsets = nullptr);
double AttackLoss(const Encoder& encoder, const Tensor& mel, const Tensor& delta,
                  const Tensor& emb_target, const Tensor& emb_victim, double lambda,
                  MelPerturbation model);

struct AttackTrace {
  // Loss of every iterate including the final one.
  std::vector<double> loss;
  std::vector<std::array<double, 3>> band_max;

  // CSV with columns iteration, loss, max_low, max_mid, max_high.
  std::string ToCsv() const;
};

struct PgdResult {
  Tensor delta;
  AttackTrace trace;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

// Sign-gradient descent from delta = 0 with banded projection after every
// step. Every realize_every iterations the delta is rendered into the clip
// and the loss input is corrected by the realization offset; the gradient
// flows through the mel-domain model. The final loss uses a fresh offset. Throws InputTooShortError for clips shorter than one encoder window.
PgdResult PgdOffline(const Encoder& encoder, const GainRenderer& renderer, const Waveform& clip,
                     const Tensor& emb_target, const Tensor& emb_victim, const AttackConfig& cfg,
                     const BandBounds& bounds);

struct Header {
  Tensor delta;  // n_mels x header frames
  int victim_id = -1;
  int target_id = -1;
  nlohmann::json meta;
};

// Mini-batch PGD over clips that all span `frames` frames; the header covers
// their frames. Offsets are refreshed per clip every realize_every steps.
// Throws ConfigError with fewer than 10 clips or mismatched lengths.
Header TrainHeader(const Encoder& encoder, const GainRenderer& renderer,
                   const std::vector<Waveform>& clips, const Tensor& emb_target,
                   const Tensor& emb_victim, const AttackConfig& cfg, const BandBounds& bounds,
                   AttackTrace* trace = nullptr);

void SaveHeader(const std::string& path, const Header& header);
// Throws MissingArtifactError when absent.
Header LoadHeader(const std::string& path);

// Uniform mel noise in [-epsilon, epsilon].
Tensor RandomNoiseDelta(int rows, int cols, double epsilon, uint64_t seed);
// The header rescaled to L-infinity norm epsilon, tiled from column 0 and
// truncated to `cols`.
Tensor PeriodicDelta(const Tensor& header, int cols, double epsilon);

}  // namespace predmask

#endif  // PREDMASK_ATTACK_H_
