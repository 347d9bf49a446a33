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

#include "predmask/eval.h"

#include <algorithm>
#include <cmath>
#include <complex>
#include <string>

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>

#include "predmask/error.h"
#include "predmask/random.h"

namespace predmask {
namespace {

// Band envelopes (bands x frames) of x, plus frame energies in dB.
struct Envelopes {
  Eigen::MatrixXd band;
  std::vector<double> frame_db;
};

Envelopes BandEnvelopes(const std::vector<double>& x, int sample_rate, const StoiOptions& opt) {
  const int frame = static_cast<int>(std::lround(opt.frame_seconds * sample_rate));
  const int hop = static_cast<int>(std::lround(opt.hop_seconds * sample_rate));
  int nfft = 1;
  while (nfft < 2 * frame) nfft *= 2;
  const int frames = x.size() < static_cast<size_t>(frame) ? 0 : (x.size() - frame) / hop + 1;

  std::vector<double> window(frame);
  for (int i = 0; i < frame; ++i) window[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * (i + 1) / (frame + 1));
  // One-third-octave band edges mapped to FFT bins.
  std::vector<int> lo(opt.num_bands), hi(opt.num_bands);
  for (int b = 0; b < opt.num_bands; ++b) {
    const double fc = opt.lowest_center_hz * std::pow(2.0, b / 3.0);
    lo[b] = static_cast<int>(std::lround(fc * std::pow(2.0, -1.0 / 6.0) * nfft / sample_rate));
    hi[b] = std::min(nfft / 2, static_cast<int>(std::lround(fc * std::pow(2.0, 1.0 / 6.0) * nfft / sample_rate)));
  }

  Envelopes env;
  env.band.resize(opt.num_bands, frames);
  env.frame_db.resize(frames);
  Eigen::FFT<double> fft;
  std::vector<double> buf(nfft);
  std::vector<std::complex<double>> spec;
  for (int t = 0; t < frames; ++t) {
    std::fill(buf.begin(), buf.end(), 0.0);
    double energy = 0.0;
    for (int i = 0; i < frame; ++i) {
      buf[i] = window[i] * x[static_cast<size_t>(t) * hop + i];
      energy += buf[i] * buf[i];
    }
    env.frame_db[t] = 10.0 * std::log10(energy + 1e-300);
    fft.fwd(spec, buf);
    for (int b = 0; b < opt.num_bands; ++b) {
      double p = 0.0;
      for (int k = lo[b]; k < hi[b]; ++k) p += std::norm(spec[k]);
      env.band(b, t) = std::sqrt(p);
    }
  }
  return env;
}

}  // namespace

double AsrRate(const std::vector<double>& similarities, double k) {
  if (similarities.empty()) throw ConfigError("attack success rate: empty set");
  const auto pass = std::count_if(similarities.begin(), similarities.end(),
                                  [k](double s) { return s > k; });
  return static_cast<double>(pass) / similarities.size();
}

double StoiProxy(const Waveform& clean, const Waveform& degraded, const StoiOptions& opt) {
  if (clean.size() != degraded.size() || clean.sample_rate != degraded.sample_rate) {
    throw ShapeError("stoi: clean and degraded signals differ in length or rate");
  }
  const Envelopes x = BandEnvelopes(clean.samples, clean.sample_rate, opt);
  const Envelopes y = BandEnvelopes(degraded.samples, degraded.sample_rate, opt);

  // Keep frames within silence_range_db of the loudest clean frame.
  const double loudest = x.frame_db.empty()
      ? 0.0 : *std::max_element(x.frame_db.begin(), x.frame_db.end());
  std::vector<int> active;
  for (size_t t = 0; t < x.frame_db.size(); ++t) {
    if (x.frame_db[t] > loudest - opt.silence_range_db) active.push_back(t);
  }
  const int n = opt.segment_frames;
  if (static_cast<int>(active.size()) < n) {
    throw InputTooShortError("stoi: " + std::to_string(active.size()) + " active frames, need " +
                             std::to_string(n));
  }
  const double clip = 1.0 + std::pow(10.0, -opt.beta_db / 20.0);
  double total = 0.0;
  int count = 0;
  Eigen::VectorXd xs(n), ys(n);
  for (size_t start = 0; start + n <= active.size(); ++start) {
    for (int b = 0; b < opt.num_bands; ++b) {
      for (int i = 0; i < n; ++i) {
        xs[i] = x.band(b, active[start + i]);
        ys[i] = y.band(b, active[start + i]);
      }
      const double xn = xs.norm(), yn = ys.norm();
      if (yn > 0.0) ys *= xn / yn;
      ys = ys.cwiseMin(clip * xs);
      const Eigen::VectorXd xc = xs.array() - xs.mean();
      const Eigen::VectorXd yc = ys.array() - ys.mean();
      const double denom = xc.norm() * yc.norm();
      if (xc.norm() == 0.0) continue;  // flat clean envelope carries no information
      total += denom > 0.0 ? xc.dot(yc) / denom : 0.0;
      ++count;
    }
  }
  if (count == 0) return 0.0;
  return std::clamp(total / count, 0.0, 1.0);
}

ToyVc ToyVc::Train(const Encoder& encoder, const Corpus& corpus, Split split, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("toy vc: temperature must be positive");
  ToyVc vc;
  vc.encoder_ = &encoder;
  vc.temperature_ = temperature;
  for (size_t i : corpus.ClipsIn(split)) {
    vc.embeddings_.push_back(encoder.EmbedWave(corpus.Audio(i)));
    vc.params_.push_back(corpus.Speaker(corpus.clips[i].speaker_id));
  }
  if (vc.embeddings_.empty()) throw ConfigError("toy vc: no training clips");
  return vc;
}

Tensor ToyVc::Embed(const Waveform& reference) const {
  if (!trained()) throw ConfigError("toy vc: model is not trained");
  return encoder_->EmbedWave(reference);
}

ToySpeakerSpec ToyVc::Regress(const Tensor& embedding) const {
  if (!trained()) throw ConfigError("toy vc: model is not trained");
  std::vector<double> logits(embeddings_.size());
  for (size_t i = 0; i < embeddings_.size(); ++i) {
    logits[i] = Similarity(embedding, embeddings_[i]) / temperature_;
  }
  const double top = *std::max_element(logits.begin(), logits.end());
  double norm = 0.0;
  for (double& l : logits) norm += (l = std::exp(l - top));
  // Frequencies are averaged in the log domain.
  ToySpeakerSpec out;
  out.speaker_id = -1;
  double pitch = 0.0, rate = 0.0, depth = 0.0, tilt = 0.0;
  std::array<double, 3> f{}, b{};
  for (size_t i = 0; i < params_.size(); ++i) {
    const double w = logits[i] / norm;
    const ToySpeakerSpec& p = params_[i];
    pitch += w * std::log(p.pitch_hz);
    rate += w * p.vibrato_rate_hz;
    depth += w * p.vibrato_depth;
    tilt += w * p.tilt_db_per_octave;
    for (int k = 0; k < 3; ++k) {
      f[k] += w * std::log(p.formants_hz[k]);
      b[k] += w * std::log(p.bandwidths_hz[k]);
    }
  }
  out.pitch_hz = std::exp(pitch);
  out.vibrato_rate_hz = rate;
  out.vibrato_depth = depth;
  out.tilt_db_per_octave = tilt;
  for (int k = 0; k < 3; ++k) {
    out.formants_hz[k] = std::exp(f[k]);
    out.bandwidths_hz[k] = std::exp(b[k]);
  }
  return out;
}

Waveform ToyVc::Clone(const Waveform& reference, const UtteranceSpec& content) const {
  return Synthesize(Regress(Embed(reference)), content, reference.sample_rate);
}

double CloneSimilarity(const ToyVc& vc, const Verifier& verifier, const Waveform& reference,
                       const Tensor& victim_reference, const UtteranceSpec& content) {
  return verifier.Score(vc.Clone(reference, content), victim_reference);
}

const std::vector<Transform>& AdaptiveTransforms() {
  static const std::vector<Transform> all = {Transform::kResample8k, Transform::kQuantize8Bit,
                                             Transform::kMel128, Transform::kSpectralSubtraction};
  return all;
}

std::string TransformName(Transform t) {
  switch (t) {
    case Transform::kIdentity: return "identity";
    case Transform::kResample8k: return "resample_8k";
    case Transform::kQuantize8Bit: return "quantize_8bit";
    case Transform::kMel128: return "mel_128";
    case Transform::kSpectralSubtraction: return "spectral_subtraction";
  }
  return "?";
}

Waveform ApplyTransform(Transform t, const Waveform& w) {
  switch (t) {
    case Transform::kIdentity: return w;
    case Transform::kResample8k: return DownUpResample(w, 8000);
    case Transform::kQuantize8Bit: return QuantizeDequantize(w, 8);
    case Transform::kMel128: return MelRoundTrip(w, 128);
    case Transform::kSpectralSubtraction: return SpectralSubtraction(w);
  }
  throw ConfigError("unknown transform");
}

std::vector<double> LowpassFir(double cutoff, int taps) {
  if (taps < 1 || taps % 2 == 0) throw ConfigError("lowpass: taps must be odd");
  if (!(cutoff > 0.0 && cutoff < 0.5)) throw ConfigError("lowpass: cutoff must be in (0, 0.5)");
  std::vector<double> h(taps);
  const int mid = taps / 2;
  double sum = 0.0;
  for (int i = 0; i < taps; ++i) {
    const double n = i - mid;
    const double sinc = n == 0 ? 2.0 * cutoff : std::sin(2.0 * M_PI * cutoff * n) / (M_PI * n);
    const double window = 0.54 - 0.46 * std::cos(2.0 * M_PI * i / (taps - 1));
    sum += (h[i] = sinc * window);
  }
  for (double& v : h) v /= sum;
  return h;
}

namespace {

// Zero-phase filtering: output[n] = sum_k h[k] x[n + mid - k].
std::vector<double> FilterCentered(const std::vector<double>& x, const std::vector<double>& h) {
  const int mid = h.size() / 2;
  const int64_t n = x.size();
  std::vector<double> y(n, 0.0);
  for (int64_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (size_t k = 0; k < h.size(); ++k) {
      const int64_t j = i + mid - static_cast<int64_t>(k);
      if (j >= 0 && j < n) acc += h[k] * x[j];
    }
    y[i] = acc;
  }
  return y;
}

}  // namespace

Waveform DownUpResample(const Waveform& w, int rate) {
  if (rate <= 0 || w.sample_rate % rate != 0) {
    throw ConfigError("resample: " + std::to_string(w.sample_rate) + " Hz is not a multiple of " +
                      std::to_string(rate) + " Hz");
  }
  const int factor = w.sample_rate / rate;
  if (factor == 1) return w;
  const std::vector<double> h = LowpassFir(0.45 / factor, 16 * factor * 2 + 1);
  const std::vector<double> smooth = FilterCentered(w.samples, h);
  std::vector<double> up(w.samples.size(), 0.0);
  for (size_t i = 0; i < up.size(); i += factor) up[i] = factor * smooth[i];
  return Waveform{FilterCentered(up, h), w.sample_rate};
}

Waveform QuantizeDequantize(const Waveform& w, int bits) {
  if (bits < 2 || bits > 24) throw ConfigError("quantize: bits must be in [2, 24]");
  const double levels = std::ldexp(1.0, bits - 1) - 1.0;
  Waveform out = w;
  for (double& v : out.samples) v = std::round(std::clamp(v, -1.0, 1.0) * levels) / levels;
  return out;
}

Waveform MelRoundTrip(const Waveform& w, int n_mels) {
  SpectralConfig cfg;
  cfg.sample_rate = w.sample_rate;
  cfg.n_mels = n_mels;
  const SpectralFrontend fe(cfg);
  const ComplexSpec phase = fe.Stft(w.samples);
  std::vector<double> y = fe.MelToWav(fe.Mel(w.samples), &phase);
  y.resize(w.samples.size(), 0.0);
  return Waveform{std::move(y), w.sample_rate};
}

Waveform SpectralSubtraction(const Waveform& w, double noise_seconds, double floor) {
  SpectralConfig cfg;
  cfg.sample_rate = w.sample_rate;
  const SpectralFrontend fe(cfg);
  ComplexSpec spec = fe.Stft(w.samples);
  const int64_t noise_end = std::lround(noise_seconds * w.sample_rate);
  int noise_frames = 0;
  while (noise_frames < spec.cols() &&
         static_cast<int64_t>(noise_frames) * cfg.hop + cfg.fft_size <= noise_end) {
    ++noise_frames;
  }
  noise_frames = std::max(noise_frames, 1);
  const Eigen::VectorXd noise = spec.leftCols(noise_frames).cwiseAbs().rowwise().mean();
  for (int t = 0; t < spec.cols(); ++t) {
    for (int k = 0; k < spec.rows(); ++k) {
      const double mag = std::abs(spec(k, t));
      if (mag == 0.0) continue;
      const double kept = std::max(mag - noise[k], floor * mag);
      spec(k, t) *= kept / mag;
    }
  }
  std::vector<double> y = fe.Istft(spec);
  y.resize(w.samples.size(), 0.0);
  return Waveform{std::move(y), w.sample_rate};
}

std::array<double, 3> BandEnergyFraction(const Waveform& clean, const Waveform& protected_wave,
                                         double low_edge, double high_edge) {
  if (clean.size() != protected_wave.size()) throw ShapeError("band energy: length mismatch");
  std::vector<double> diff(clean.samples.size());
  for (size_t i = 0; i < diff.size(); ++i) diff[i] = protected_wave.samples[i] - clean.samples[i];
  SpectralConfig cfg;
  cfg.sample_rate = clean.sample_rate;
  const SpectralFrontend fe(cfg);
  const ComplexSpec spec = fe.Stft(diff);
  std::array<double, 3> e{};
  for (int k = 0; k < spec.rows(); ++k) {
    const double hz = static_cast<double>(k) * cfg.sample_rate / cfg.fft_size;
    const int band = hz < low_edge ? 0 : (hz < high_edge ? 1 : 2);
    e[band] += spec.row(k).cwiseAbs2().sum();
  }
  const double total = e[0] + e[1] + e[2];
  if (total > 0.0)
    for (double& v : e) v /= total;
  return e;
}

}  // namespace predmask
