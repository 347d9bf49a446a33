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

#include "predmask/encoder.h"

#include <glog/logging.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "predmask/checkpoint.h"
#include "predmask/error.h"
#include "predmask/optim.h"
#include "predmask/random.h"
#include "predmask/wav_io.h"

namespace predmask {
namespace {

constexpr double kLeakySlope = 0.01;
constexpr double kNormEps = 1e-24;

Tensor UniformTensor(const Shape& s, double bound, Rng& rng) {
  Tensor t(s);
  for (double& v : t.values()) v = Uniform(rng, -bound, bound);
  return t;
}

}  // namespace

void EncoderConfig::Validate() const {
  spectral.Validate();
  if (channels.empty() || channels.size() != strides.size()) {
    throw ConfigError("encoder: channels and strides must be non-empty and the same length");
  }
  for (int c : channels)
    if (c < 1) throw ConfigError("encoder: channel counts must be positive");
  for (auto [sh, sw] : strides)
    if (sh < 1 || sw < 1) throw ConfigError("encoder: strides must be positive");
  if (embedding_dim < 1) throw ConfigError("encoder: embedding_dim must be positive");
  if (n_speakers < 2) throw ConfigError("encoder: need at least two speakers");
  if (window_frames < 3) throw ConfigError("encoder: window_frames too small");
  if (logit_scale <= 0.0) throw ConfigError("encoder: logit_scale must be positive");
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  nlohmann::json strides = nlohmann::json::array();
  for (auto [h, w] : c.strides) strides.push_back({h, w});
  j = nlohmann::json{{"spectral", c.spectral},         {"channels", c.channels},
                     {"strides", strides},             {"embedding_dim", c.embedding_dim},
                     {"n_speakers", c.n_speakers},     {"window_frames", c.window_frames},
                     {"logit_scale", c.logit_scale}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  j.at("spectral").get_to(c.spectral);
  j.at("channels").get_to(c.channels);
  c.strides.clear();
  for (const auto& s : j.at("strides")) c.strides.emplace_back(s.at(0).get<int>(), s.at(1).get<int>());
  j.at("embedding_dim").get_to(c.embedding_dim);
  j.at("n_speakers").get_to(c.n_speakers);
  j.at("window_frames").get_to(c.window_frames);
  j.at("logit_scale").get_to(c.logit_scale);
}

EncoderConfig TargetEncoderConfig() { return EncoderConfig{}; }

EncoderConfig AlternateEncoderConfig() {
  EncoderConfig c;
  c.spectral.fft_size = 1024;
  c.spectral.n_mels = 512;
  c.strides = {{4, 2}, {2, 2}, {2, 2}};
  return c;
}

EncoderConfig VerifierEncoderConfig() {
  EncoderConfig c = AlternateEncoderConfig();
  c.channels = {8, 16, 32, 48};
  c.strides = {{4, 2}, {2, 2}, {2, 2}, {2, 2}};
  return c;
}

std::vector<int> WindowStarts(int frames, int length) {
  if (frames < length) {
    throw InputTooShortError("need at least " + std::to_string(length) + " frames, got " +
                             std::to_string(frames));
  }
  const int n = (frames + length - 1) / length;
  std::vector<int> starts(n, 0);
  for (int i = 1; i < n; ++i) {
    starts[i] = static_cast<int>(std::lround(static_cast<double>(i) * (frames - length) / (n - 1)));
  }
  return starts;
}

double Similarity(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("similarity: embedding sizes differ");
  double s = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

bool Verify(const Tensor& a, const Tensor& b, double k) { return Similarity(a, b) > k; }

Encoder::Encoder(EncoderConfig cfg, uint64_t seed)
    : cfg_(std::move(cfg)) {
  cfg_.Validate();
  frontend_ = std::make_shared<const SpectralFrontend>(cfg_.spectral);
  Rng rng(MixSeed(seed, 0xe4c0de));
  int in_ch = 1, h = cfg_.spectral.n_mels;
  for (size_t i = 0; i < cfg_.channels.size(); ++i) {
    const int out = cfg_.channels[i];
    const std::string name = "conv" + std::to_string(i);
    conv_w_.emplace_back(name + ".w",
                         UniformTensor({out, in_ch, 3, 3}, std::sqrt(6.0 / (in_ch * 9)), rng));
    conv_b_.emplace_back(name + ".b", Tensor({out}));
    h = ad::ConvOutputSize(h, 3, cfg_.strides[i].first, 1);
    if (h < 1) throw ConfigError("encoder: strides collapse the mel axis");
    in_ch = out;
  }
  flat_dim_ = in_ch * h;
  proj_w_ = Parameter("proj.w", UniformTensor({flat_dim_, cfg_.embedding_dim},
                                              std::sqrt(6.0 / (flat_dim_ + cfg_.embedding_dim)),
                                              rng));
  proj_b_ = Parameter("proj.b", UniformTensor({cfg_.embedding_dim}, 0.05, rng));
  class_w_ = Parameter("class.w", UniformTensor({cfg_.n_speakers, cfg_.embedding_dim}, 1.0, rng));
  norm_ = Parameter("norm", Tensor({2}, std::vector<double>{0.0, 1.0}));
}

Var Encoder::Run(Tape& tape, const Var& windows, const Binder& bind) const {
  const Shape& s = windows.shape();
  if (s.size() != 4 || s[1] != 1 || s[2] != cfg_.spectral.n_mels || s[3] != cfg_.window_frames) {
    throw ShapeError("encoder: expected N x 1 x " + std::to_string(cfg_.spectral.n_mels) + " x " +
                     std::to_string(cfg_.window_frames) + " windows, got " + ShapeToString(s));
  }
  const double mean = norm_.value[0], sd = norm_.value[1];
  Var x = ad::Affine(windows, 1.0 / sd, -mean / sd);
  for (size_t i = 0; i < conv_w_.size(); ++i) {
    ad::Conv2dOptions opt{cfg_.strides[i].first, cfg_.strides[i].second, 1, 1};
    x = ad::LeakyRelu(ad::Conv2d(x, bind(conv_w_[i]), bind(conv_b_[i]), opt), kLeakySlope);
  }
  x = ad::MeanLastAxis(x);
  x = ad::Reshape(x, {s[0], flat_dim_});
  x = ad::AddBias(ad::MatMul(x, bind(proj_w_)), bind(proj_b_));
  return ad::L2NormalizeRows(x, kNormEps);
}

Var Encoder::Forward(Tape& tape, const Var& windows) const {
  return Run(tape, windows, [&tape](const Parameter& p) { return tape.BindConst(p); });
}

Var Encoder::ForwardTrainable(Tape& tape, const Var& windows) {
  // Parameters are members of this non-const object.
  return Run(tape, windows,
             [&tape](const Parameter& p) { return tape.Bind(const_cast<Parameter&>(p)); });
}

Var Encoder::LogitsTrainable(Tape& tape, const Var& embeddings) {
  Var w = ad::L2NormalizeRows(tape.Bind(class_w_));
  return ad::Scale(ad::MatMul(embeddings, ad::Transpose(w)), cfg_.logit_scale);
}

Var Encoder::EmbedMels(Tape& tape, const std::vector<Var>& mels) const {
  if (mels.empty()) throw ShapeError("embed: no inputs");
  std::vector<Var> windows;
  std::vector<int> groups;
  for (const Var& m : mels) {
    if (m.value().ndim() != 2 || m.dim(0) != cfg_.spectral.n_mels) {
      throw ShapeError("embed: expected " + std::to_string(cfg_.spectral.n_mels) +
                       " mel rows, got " + ShapeToString(m.shape()));
    }
    const std::vector<int> starts = WindowStarts(m.dim(1), cfg_.window_frames);
    windows.push_back(ad::Windows(m, starts, cfg_.window_frames));
    groups.push_back(static_cast<int>(starts.size()));
  }
  Var all = windows.size() == 1 ? windows[0] : ad::ConcatRows(windows);
  Var e = Forward(tape, all);
  return ad::L2NormalizeRows(ad::GroupMeanRows(e, groups), kNormEps);
}

Tensor Encoder::Embed(const Tensor& mel) const {
  Tape tape;
  Var e = EmbedMels(tape, {tape.Constant(mel)});
  return e.value().Reshaped({cfg_.embedding_dim});
}

Tensor Encoder::Mel(const Waveform& w) const {
  if (w.sample_rate != cfg_.spectral.sample_rate) {
    return frontend_->Mel(ResampleLinear(w.samples, w.sample_rate, cfg_.spectral.sample_rate));
  }
  return frontend_->Mel(w.samples);
}

Tensor Encoder::EmbedWave(const Waveform& w) const { return Embed(Mel(w)); }

std::vector<Parameter*> Encoder::Parameters() {
  std::vector<Parameter*> out;
  for (size_t i = 0; i < conv_w_.size(); ++i) {
    out.push_back(&conv_w_[i]);
    out.push_back(&conv_b_[i]);
  }
  out.push_back(&proj_w_);
  out.push_back(&proj_b_);
  out.push_back(&class_w_);
  return out;
}

void Encoder::SetNormalization(double mean, double stddev) {
  if (!(stddev > 0.0)) throw ConfigError("encoder: normalization stddev must be positive");
  norm_.value[0] = mean;
  norm_.value[1] = stddev;
  RoundToFloat32(norm_.value);
}

void Encoder::Save(const std::string& path, const nlohmann::json& extra) const {
  nlohmann::json cfg = extra.is_object() ? extra : nlohmann::json::object();
  cfg["encoder"] = cfg_;
  std::vector<const Parameter*> params;
  for (size_t i = 0; i < conv_w_.size(); ++i) {
    params.push_back(&conv_w_[i]);
    params.push_back(&conv_b_[i]);
  }
  for (const Parameter* p : {&proj_w_, &proj_b_, &class_w_, &norm_}) params.push_back(p);
  SaveCheckpoint(path, cfg, params);
}

Encoder Encoder::Load(const std::string& path) {
  const Checkpoint ckpt = LoadCheckpoint(path);
  EncoderConfig cfg;
  try {
    cfg = ckpt.config.at("encoder").get<EncoderConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": not an encoder checkpoint: " + e.what());
  }
  Encoder enc(cfg, 0);
  std::vector<Parameter*> params = enc.Parameters();
  params.push_back(&enc.norm_);
  AssignParameters(ckpt, params);
  return enc;
}

void to_json(nlohmann::json& j, const EncoderReport& r) {
  j = nlohmann::json{{"initial_loss", r.initial_loss},
                     {"final_loss", r.final_loss},
                     {"validation_threshold", r.validation_threshold},
                     {"validation_accuracy", r.validation_accuracy},
                     {"test_accuracy", r.test_accuracy},
                     {"same_mean", r.same_mean},
                     {"different_mean", r.different_mean},
                     {"seconds", r.seconds}};
}

VerificationStats EvaluateVerification(const std::vector<Tensor>& embeddings,
                                       const std::vector<int>& speakers, double threshold) {
  if (embeddings.size() != speakers.size() || embeddings.size() < 2) {
    throw ConfigError("verification: need at least two labeled embeddings");
  }
  std::vector<std::pair<double, bool>> scores;
  double same_sum = 0.0, diff_sum = 0.0;
  int64_t n_same = 0, n_diff = 0;
  for (size_t i = 0; i < embeddings.size(); ++i) {
    for (size_t j = i + 1; j < embeddings.size(); ++j) {
      const double s = Similarity(embeddings[i], embeddings[j]);
      const bool same = speakers[i] == speakers[j];
      scores.emplace_back(s, same);
      if (same) {
        same_sum += s;
        ++n_same;
      } else {
        diff_sum += s;
        ++n_diff;
      }
    }
  }
  if (n_same == 0 || n_diff == 0) throw ConfigError("verification: need same and different pairs");
  VerificationStats st;
  st.same_mean = same_sum / n_same;
  st.different_mean = diff_sum / n_diff;
  auto balanced = [&](double thr) {
    int64_t tp = 0, tn = 0;
    for (auto [s, same] : scores) {
      if (same && s > thr) ++tp;
      if (!same && s <= thr) ++tn;
    }
    return 0.5 * (static_cast<double>(tp) / n_same + static_cast<double>(tn) / n_diff);
  };
  if (threshold >= -1.0) {
    st.threshold = threshold;
    st.balanced_accuracy = balanced(threshold);
    return st;
  }
  // Sweep thresholds between consecutive sorted scores.
  std::sort(scores.begin(), scores.end());
  int64_t tp = n_same, tn = 0;  // threshold below every score
  double best = 0.5 * (1.0 + 0.0), best_thr = scores.front().first - 1e-9;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (scores[i].second) {
      --tp;
    } else {
      ++tn;
    }
    if (i + 1 < scores.size() && scores[i + 1].first == scores[i].first) continue;
    const double acc = 0.5 * (static_cast<double>(tp) / n_same + static_cast<double>(tn) / n_diff);
    if (acc > best) {
      best = acc;
      best_thr = i + 1 < scores.size() ? 0.5 * (scores[i].first + scores[i + 1].first)
                                       : scores[i].first;
    }
  }
  st.threshold = best_thr;
  st.balanced_accuracy = best;
  return st;
}

Encoder TrainEncoder(const Corpus& corpus, const EncoderConfig& cfg_in,
                     const EncoderTrainOptions& opt, EncoderReport* report) {
  const auto t0 = std::chrono::steady_clock::now();
  EncoderConfig cfg = cfg_in;
  if (cfg.n_speakers != static_cast<int>(corpus.speakers.size())) {
    throw ConfigError("encoder n_speakers " + std::to_string(cfg.n_speakers) +
                      " does not match corpus with " + std::to_string(corpus.speakers.size()));
  }
  if (corpus.sample_rate != cfg.spectral.sample_rate) {
    throw ConfigError("encoder sample rate does not match corpus");
  }
  Encoder enc(cfg, opt.seed);
  const SpectralFrontend& fe = enc.frontend();
  std::vector<int> label_of(1 + std::max_element(corpus.speakers.begin(), corpus.speakers.end(),
                                                 [](const auto& a, const auto& b) {
                                                   return a.speaker_id < b.speaker_id;
                                                 })->speaker_id,
                            -1);
  for (size_t i = 0; i < corpus.speakers.size(); ++i) label_of[corpus.speakers[i].speaker_id] = i;

  const std::vector<size_t> train = corpus.ClipsIn(Split::kTrain);
  if (train.empty()) throw ConfigError("corpus has no training clips");

  // Global log-mel normalization from a deterministic subset.
  double sum = 0.0, sum2 = 0.0;
  int64_t count = 0;
  for (size_t i = 0; i < train.size(); i += 4) {
    const Tensor m = fe.Mel(corpus.Audio(train[i]).samples);
    for (double v : m.values()) {
      sum += v;
      sum2 += v * v;
    }
    count += m.size();
  }
  const double mean = sum / count;
  enc.SetNormalization(mean, std::sqrt(std::max(sum2 / count - mean * mean, 1e-12)));

  Rng rng(MixSeed(opt.seed, 0x7ea1));
  const int frames = cfg.window_frames;
  const int64_t need = fe.NumSamples(frames);
  std::vector<Parameter*> params = enc.Parameters();
  AdamOptions adam;
  std::vector<double> local;
  std::vector<double>* trace = report ? &report->loss : &local;
  trace->clear();
  for (int step = 0; step < opt.steps; ++step) {
    Tensor batch({opt.batch, 1, cfg.spectral.n_mels, frames});
    std::vector<int> labels(opt.batch);
    for (int b = 0; b < opt.batch; ++b) {
      const size_t clip = train[UniformInt(rng, 0, static_cast<int>(train.size()) - 1)];
      const std::vector<int16_t>& pcm = corpus.audio[clip];
      const int64_t max_start = static_cast<int64_t>(pcm.size()) - need;
      if (max_start < 0) throw InputTooShortError("training clip shorter than one window");
      const int64_t start = std::uniform_int_distribution<int64_t>(0, max_start)(rng);
      std::vector<double> crop(need);
      for (int64_t i = 0; i < need; ++i) crop[i] = FromPcm16(pcm[start + i]);
      const Tensor m = fe.Mel(crop);
      std::copy(m.values().begin(), m.values().end(),
                batch.data() + static_cast<int64_t>(b) * m.size());
      labels[b] = label_of[corpus.clips[clip].speaker_id];
    }
    adam.lr = step < opt.steps * 0.8 ? opt.lr : opt.lr * 0.1;
    ZeroGrads(params);
    Tape tape;
    Var emb = enc.ForwardTrainable(tape, tape.Constant(std::move(batch)));
    Var loss = ad::SoftmaxCrossEntropy(enc.LogitsTrainable(tape, emb), labels);
    const double l = loss.value()[0];
    if (!std::isfinite(l)) throw DivergenceError("encoder training diverged at step " + std::to_string(step));
    tape.Backward(loss);
    AdamStep(params, adam);
    trace->push_back(l);
    if (opt.log_every > 0 && (step % opt.log_every == 0 || step + 1 == opt.steps)) {
      LOG(INFO) << "encoder step " << step << " loss " << l;
    }
  }
  for (Parameter* p : params) RoundToFloat32(p->value);

  if (report) {
    report->initial_loss = trace->empty() ? 0.0 : trace->front();
    const size_t tail = std::min<size_t>(50, trace->size());
    report->final_loss =
        tail ? std::accumulate(trace->end() - tail, trace->end(), 0.0) / tail : 0.0;
    auto embed_split = [&](Split split, std::vector<Tensor>& e, std::vector<int>& spk) {
      for (size_t i : corpus.ClipsIn(split)) {
        e.push_back(enc.EmbedWave(corpus.Audio(i)));
        spk.push_back(corpus.clips[i].speaker_id);
      }
    };
    std::vector<Tensor> ve, te;
    std::vector<int> vs, ts;
    embed_split(Split::kValidation, ve, vs);
    embed_split(Split::kTest, te, ts);
    if (ve.size() >= 2 && te.size() >= 2) {
      const VerificationStats val = EvaluateVerification(ve, vs);
      const VerificationStats test = EvaluateVerification(te, ts, val.threshold);
      report->validation_threshold = val.threshold;
      report->validation_accuracy = val.balanced_accuracy;
      report->test_accuracy = test.balanced_accuracy;
      report->same_mean = test.same_mean;
      report->different_mean = test.different_mean;
    }
    report->seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    LOG(INFO) << "encoder trained: val acc " << report->validation_accuracy << " test acc "
              << report->test_accuracy << " in " << report->seconds << " s";
  }
  return enc;
}

Tensor MeanEmbedding(const Encoder& encoder, const std::vector<Waveform>& clips) {
  if (clips.empty()) throw ConfigError("mean embedding: no clips");
  Tensor sum({encoder.embedding_dim()});
  for (const Waveform& w : clips) {
    const Tensor e = encoder.EmbedWave(w);
    for (int64_t i = 0; i < e.size(); ++i) sum[i] += e[i];
  }
  double n2 = 0.0;
  for (double v : sum.values()) n2 += v * v;
  const double inv = 1.0 / std::sqrt(std::max(n2, 1e-24));
  for (double& v : sum.values()) v *= inv;
  return sum;
}

int SelectTargetSpeaker(const Tensor& victim_mean, PitchClass victim_class,
                        const std::vector<TargetCandidate>& pool) {
  if (pool.empty()) throw ConfigError("target selection: empty candidate pool");
  const bool any_opposite = std::any_of(pool.begin(), pool.end(), [&](const TargetCandidate& c) {
    return c.pitch_class != victim_class;
  });
  int best_id = -1;
  double best_distance = -1.0;
  for (const TargetCandidate& c : pool) {
    if (any_opposite && c.pitch_class == victim_class) continue;
    const double d = 1.0 - Similarity(victim_mean, c.mean_embedding);
    if (best_id < 0 || d > best_distance || (d == best_distance && c.speaker_id < best_id)) {
      best_id = c.speaker_id;
      best_distance = d;
    }
  }
  return best_id;
}

}  // namespace predmask
