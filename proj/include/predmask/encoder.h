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

// Convolutional speaker encoders.
//
// An encoder sees fixed-length log-mel windows: conv blocks (3x3, zero pad 1,
// leaky ReLU), mean over time, a linear projection and L2 normalization.
// Longer inputs are covered by evenly spaced windows whose unit embeddings
// are averaged and renormalized. Training uses a cosine-softmax speaker
// classifier on top of the embedding.
//
// Encoder exposes a differentiable forward pass for attacks. Verifier wraps
// an independently trained encoder and only offers non-differentiable
// scoring, so attack code cannot route gradients through it.

#ifndef PREDMASK_ENCODER_H_
#define PREDMASK_ENCODER_H_

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "predmask/autodiff.h"
#include "predmask/corpus.h"
#include "predmask/spectral.h"

namespace predmask {

struct EncoderConfig {
  SpectralConfig spectral;
  std::vector<int> channels = {8, 16, 32};
  // (height, width) stride per block.
  std::vector<std::pair<int, int>> strides = {{2, 2}, {2, 2}, {2, 2}};
  int embedding_dim = 64;
  int n_speakers = 20;
  int window_frames = 122;
  double logit_scale = 10.0;

  // Throws ConfigError.
  void Validate() const;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

// Presets: the attacked 80-mel encoder, the alternate 512-mel encoder and
// the deeper 512-mel verifier.
EncoderConfig TargetEncoderConfig();
EncoderConfig AlternateEncoderConfig();
EncoderConfig VerifierEncoderConfig();

// Window start columns covering `frames` columns with windows of `length`.
std::vector<int> WindowStarts(int frames, int length);

double Similarity(const Tensor& a, const Tensor& b);
// similarity > k, strictly.
bool Verify(const Tensor& a, const Tensor& b, double k = 0.25);

class Encoder {
 public:
  Encoder(EncoderConfig cfg, uint64_t seed);

  const EncoderConfig& config() const { return cfg_; }
  const SpectralFrontend& frontend() const { return *frontend_; }
  int embedding_dim() const { return cfg_.embedding_dim; }

  // windows: N x 1 x n_mels x window_frames -> N x d unit rows. Weights
  // enter the tape as constants.
  Var Forward(Tape& tape, const Var& windows) const;
  // Same graph with weights bound for training.
  Var ForwardTrainable(Tape& tape, const Var& windows);
  // Cosine logits N x n_speakers from unit embeddings.
  Var LogitsTrainable(Tape& tape, const Var& embeddings);
  // Differentiable clip embeddings: each mel is (n_mels x T_i), result is
  // (num mels) x d. Throws InputTooShortError when T_i < window_frames.
  Var EmbedMels(Tape& tape, const std::vector<Var>& mels) const;

  Tensor Embed(const Tensor& mel) const;
  Tensor EmbedWave(const Waveform& w) const;
  Tensor Mel(const Waveform& w) const;

  std::vector<Parameter*> Parameters();
  void SetNormalization(double mean, double stddev);

  void Save(const std::string& path, const nlohmann::json& extra = {}) const;
  static Encoder Load(const std::string& path);

 private:
  using Binder = std::function<Var(const Parameter&)>;
  Var Run(Tape& tape, const Var& windows, const Binder& bind) const;

  EncoderConfig cfg_;
  std::shared_ptr<const SpectralFrontend> frontend_;
  std::vector<Parameter> conv_w_, conv_b_;
  Parameter proj_w_, proj_b_, class_w_;
  Parameter norm_;  // [mean, stddev]
  int flat_dim_ = 0;
};

class Verifier {
 public:
  explicit Verifier(Encoder encoder) : encoder_(std::move(encoder)) {}

  Tensor EmbedWave(const Waveform& w) const { return encoder_.EmbedWave(w); }
  double Score(const Waveform& w, const Tensor& reference) const {
    return Similarity(EmbedWave(w), reference);
  }
  const EncoderConfig& config() const { return encoder_.config(); }
  void Save(const std::string& path) const { encoder_.Save(path, {{"role", "verifier"}}); }
  static Verifier Load(const std::string& path) { return Verifier(Encoder::Load(path)); }

 private:
  Encoder encoder_;
};

struct EncoderTrainOptions {
  int steps = 300;
  int batch = 32;
  double lr = 2e-3;
  uint64_t seed = 1;
  int log_every = 100;
};

struct EncoderReport {
  std::vector<double> loss;  // per step
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double validation_threshold = 0.0;
  double validation_accuracy = 0.0;
  double test_accuracy = 0.0;
  double same_mean = 0.0;
  double different_mean = 0.0;
  double seconds = 0.0;
};

void to_json(nlohmann::json& j, const EncoderReport& r);

Encoder TrainEncoder(const Corpus& corpus, const EncoderConfig& cfg,
                     const EncoderTrainOptions& opt, EncoderReport* report);

struct VerificationStats {
  double threshold = 0.0;
  double balanced_accuracy = 0.0;
  double same_mean = 0.0;
  double different_mean = 0.0;
};

// Balanced same/different accuracy over all pairs of clip embeddings. With
// threshold < -1 the best threshold is searched; otherwise it is used as is.
VerificationStats EvaluateVerification(const std::vector<Tensor>& embeddings,
                                       const std::vector<int>& speakers,
                                       double threshold = -2.0);

// Unit mean of per-clip embeddings. Throws ConfigError on an empty list.
Tensor MeanEmbedding(const Encoder& encoder, const std::vector<Waveform>& clips);

struct TargetCandidate {
  int speaker_id = 0;
  PitchClass pitch_class = PitchClass::kLow;
  Tensor mean_embedding;
};

// Opposite-class candidate with the largest cosine distance to the victim;
// ties go to the lower id. Falls back to the whole pool when it holds no
// opposite-class speaker. Throws ConfigError on an empty pool.
int SelectTargetSpeaker(const Tensor& victim_mean, PitchClass victim_class,
                        const std::vector<TargetCandidate>& pool);

}  // namespace predmask

#endif  // PREDMASK_ENCODER_H_
