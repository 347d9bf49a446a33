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

// Protection metrics: attack success rate, an envelope-correlation
// intelligibility proxy, a toy voice-cloning model and signal transforms.

#ifndef PREDMASK_EVAL_H_
#define PREDMASK_EVAL_H_

#include <array>
#include <string>
#include <vector>

#include "predmask/corpus.h"
#include "predmask/encoder.h"
#include "predmask/spectral.h"

namespace predmask {

// Fraction of similarities strictly above k. Throws ConfigError when empty.
double AsrRate(const std::vector<double>& similarities, double k = 0.25);

struct StoiOptions {
  double frame_seconds = 0.0256;
  double hop_seconds = 0.0128;
  int segment_frames = 30;  // 384 ms
  int num_bands = 15;
  double lowest_center_hz = 150.0;
  // Degraded envelopes are clipped at (1 + 10^(-beta/20)) times the clean one.
  double beta_db = -15.0;
  // Frames more than this far below the loudest clean frame are dropped.
  double silence_range_db = 40.0;
};

// Mean clipped correlation between one-third-octave band envelopes of the
// clean and degraded signals over sliding segments; 1 for identical inputs.
// Throws ShapeError on a length or rate mismatch and InputTooShortError
// when fewer than segment_frames active frames remain.
double StoiProxy(const Waveform& clean, const Waveform& degraded, const StoiOptions& opt = {});

// Toy voice cloning: an embedding is mapped to toy speaker parameters by
// kernel regression over clean training-clip embeddings (softmax of cosine
// similarity over a temperature), and the parameters drive the synthesizer.
class ToyVc {
 public:
  // Embeds every clip of `split` with `encoder`. Throws ConfigError when
  // the split is empty.
  static ToyVc Train(const Encoder& encoder, const Corpus& corpus, Split split = Split::kTrain,
                     double temperature = 0.05);

  bool trained() const { return !embeddings_.empty(); }
  // Regressed parameters; speaker_id is -1. Throws ConfigError if untrained.
  ToySpeakerSpec Regress(const Tensor& embedding) const;
  // Encoder embedding of a reference clip.
  Tensor Embed(const Waveform& reference) const;
  Waveform Clone(const Waveform& reference, const UtteranceSpec& content) const;
  const Encoder& encoder() const { return *encoder_; }

 private:
  const Encoder* encoder_ = nullptr;
  double temperature_ = 0.05;
  std::vector<Tensor> embeddings_;
  std::vector<ToySpeakerSpec> params_;
};

// Verifier similarity between the clone of `reference` and the victim's
// verifier reference embedding.
double CloneSimilarity(const ToyVc& vc, const Verifier& verifier, const Waveform& reference,
                       const Tensor& victim_reference, const UtteranceSpec& content);

// Transformations an adaptive attacker may apply before cloning.
enum class Transform { kIdentity, kResample8k, kQuantize8Bit, kMel128, kSpectralSubtraction };
const std::vector<Transform>& AdaptiveTransforms();
std::string TransformName(Transform t);
// Output has the input's length and rate.
Waveform ApplyTransform(Transform t, const Waveform& w);

// Linear-phase windowed-sinc lowpass; cutoff in cycles per sample.
std::vector<double> LowpassFir(double cutoff, int taps);
// Down-samples to `rate` with an anti-alias filter and back. The input rate
// must be an integer multiple of `rate`.
Waveform DownUpResample(const Waveform& w, int rate);
Waveform QuantizeDequantize(const Waveform& w, int bits);
// Mel analysis with n_mels filters and inversion using the input phase.
Waveform MelRoundTrip(const Waveform& w, int n_mels);
// Magnitude spectral subtraction with the noise profile averaged over the
// frames inside the first noise_seconds; magnitudes floored at floor * |X|.
Waveform SpectralSubtraction(const Waveform& w, double noise_seconds = 0.3, double floor = 0.02);

// Share of perturbation energy below low_edge, between the edges, and above.
std::array<double, 3> BandEnergyFraction(const Waveform& clean, const Waveform& protected_wave,
                                         double low_edge = 1600.0, double high_edge = 4000.0);

}  // namespace predmask

#endif  // PREDMASK_EVAL_H_
