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


#include "predmask/attack.h"

#include <glog/logging.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "predmask/checkpoint.h"
#include "predmask/error.h"
#include "predmask/optim.h"
#include "predmask/random.h"

namespace predmask {
namespace {

Tensor TileRows(const Tensor& row, int n) {
  const int d = static_cast<int>(row.size());
  Tensor out({n, d});
  for (int i = 0; i < n; ++i) std::copy(row.data(), row.data() + d, out.data() + i * d);
  return out;
}

void CheckDelta(const Tensor& mel, const Shape& delta_shape) {
  if (mel.shape() != delta_shape) {
    throw ShapeError("attack: delta " + ShapeToString(delta_shape) + " does not match mel " +
                     ShapeToString(mel.shape()));
  }
}

void CheckRenderer(const Encoder& encoder, const GainRenderer& renderer) {
  if (!(renderer.frontend().config() == encoder.config().spectral)) {
    throw ConfigError("renderer and encoder use different spectral configs");
  }
}

}  // namespace

void BandWeights::Validate() const {
  if (!(low > 0.0 && mid > 0.0 && high > 0.0)) throw ConfigError("band weights must be positive");
}

void AttackConfig::Validate() const {
  if (!(epsilon >= 0.0)) throw ConfigError("attack.epsilon must be >= 0");
  if (iterations < 1 || header_iterations < 1) throw ConfigError("attack iterations must be >= 1");
  if (header_batch < 1) throw ConfigError("attack.header_batch must be >= 1");
  if (!(lambda >= 0.0)) throw ConfigError("attack.lambda must be >= 0");
  if (!(step_divisor > 0.0)) throw ConfigError("attack.step_divisor must be positive");
  if (realize_every < 1) throw ConfigError("attack.realize_every must be >= 1");
  if (!(epsilon_noise >= 0.0 && epsilon_periodic >= 0.0)) {
    throw ConfigError("baseline epsilons must be >= 0");
  }
  weights.Validate();
}

void to_json(nlohmann::json& j, const AttackConfig& c) {
  j = nlohmann::json{{"lambda", c.lambda},
                     {"epsilon", c.epsilon},
                     {"iterations", c.iterations},
                     {"step_divisor", c.step_divisor},
                     {"header_iterations", c.header_iterations},
                     {"header_batch", c.header_batch},
                     {"epsilon_noise", c.epsilon_noise},
                     {"epsilon_periodic", c.epsilon_periodic},
                     {"band_weights", {{"low", c.weights.low}, {"mid", c.weights.mid},
                                       {"high", c.weights.high}}},
                     {"model", c.model == MelPerturbation::kGain ? "gain" : "additive"},
                     {"realize_every", c.realize_every},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, AttackConfig& c) {
  j.at("lambda").get_to(c.lambda);
  j.at("epsilon").get_to(c.epsilon);
  j.at("iterations").get_to(c.iterations);
  j.at("step_divisor").get_to(c.step_divisor);
  j.at("header_iterations").get_to(c.header_iterations);
  j.at("header_batch").get_to(c.header_batch);
  j.at("epsilon_noise").get_to(c.epsilon_noise);
  j.at("epsilon_periodic").get_to(c.epsilon_periodic);
  const auto& w = j.at("band_weights");
  w.at("low").get_to(c.weights.low);
  w.at("mid").get_to(c.weights.mid);
  w.at("high").get_to(c.weights.high);
  const std::string model = j.at("model").get<std::string>();
  if (model == "gain") {
    c.model = MelPerturbation::kGain;
  } else if (model == "additive") {
    c.model = MelPerturbation::kAdditive;
  } else {
    throw ConfigError("attack.model must be \"gain\" or \"additive\", got \"" + model + "\"");
  }
  j.at("realize_every").get_to(c.realize_every);
  j.at("seed").get_to(c.seed);
}

double LogMelDynamicRange(const SpectralFrontend& frontend, const std::vector<Waveform>& clips) {
  std::vector<double> values;
  for (const Waveform& w : clips) {
    const Tensor m = frontend.Mel(w.samples);
    values.insert(values.end(), m.values().begin(), m.values().end());
  }
  if (values.empty()) throw ConfigError("dynamic range: no clips");
  auto quantile = [&](double q) {
    const size_t k = static_cast<size_t>(std::floor(q * (values.size() - 1)));
    std::nth_element(values.begin(), values.begin() + k, values.end());
    return values[k];
  };
  const double hi = quantile(0.99);
  const double lo = quantile(0.01);
  return hi - lo;
}

BandBounds::BandBounds(const BandPartition& partition, double epsilon, const BandWeights& weights)
    : partition_(partition), epsilon_(epsilon) {
  weights.Validate();
  if (!(epsilon >= 0.0)) throw ConfigError("band bounds: epsilon must be >= 0");
  band_bound_ = {weights.low * epsilon, weights.mid * epsilon, weights.high * epsilon};
  bound_.resize(partition.row_band.size());
  for (size_t r = 0; r < bound_.size(); ++r) {
    bound_[r] = band_bound_[static_cast<int>(partition.row_band[r])];
  }
}

Tensor BandBounds::RowBounds(int cols) const {
  Tensor t({rows(), cols});
  for (int r = 0; r < rows(); ++r) std::fill(t.data() + r * cols, t.data() + (r + 1) * cols, bound_[r]);
  return t;
}

void BandBounds::Project(Tensor& delta) const {
  if (delta.ndim() != 2 || delta.dim(0) != rows()) {
    throw ShapeError("project: expected " + std::to_string(rows()) + " rows, got " +
                     ShapeToString(delta.shape()));
  }
  const int cols = delta.dim(1);
  for (int r = 0; r < rows(); ++r) {
    double* p = delta.data() + static_cast<int64_t>(r) * cols;
    for (int c = 0; c < cols; ++c) p[c] = std::clamp(p[c], -bound_[r], bound_[r]);
  }
}

std::array<double, 3> BandBounds::BandMax(const Tensor& delta) const {
  std::array<double, 3> out{0.0, 0.0, 0.0};
  const int cols = delta.dim(1);
  for (int r = 0; r < rows(); ++r) {
    double& m = out[static_cast<int>(partition_.row_band[r])];
    for (int c = 0; c < cols; ++c) m = std::max(m, std::abs(delta.at(r, c)));
  }
  return out;
}

bool BandBounds::Satisfied(const Tensor& delta, double tol) const {
  const std::array<double, 3> m = BandMax(delta);
  for (int b = 0; b < 3; ++b)
    if (m[b] > band_bound_[b] + tol) return false;
  return true;
}

Var PerturbMel(Tape& tape, const Tensor& mel, const Var& delta, MelPerturbation model) {
  CheckDelta(mel, delta.shape());
  if (model == MelPerturbation::kAdditive) return ad::Add(tape.Constant(mel), delta);
  // y = log1p(exp(d) * expm1(m)); dy/dd = exp(d) * expm1(m) / (1 + exp(d) * expm1(m)).
  const Tensor& d = delta.value();
  Tensor y(mel.shape());
  auto ratio = std::make_shared<Tensor>(mel.shape());
  for (int64_t i = 0; i < y.size(); ++i) {
    const double e = std::exp(d[i]) * std::expm1(std::max(mel[i], 0.0));
    y[i] = std::log1p(e);
    (*ratio)[i] = e / (1.0 + e);
  }
  return tape.Record(std::move(y), {delta.id()}, [ratio, in = delta.id()](Tape& t, int self) {
    if (!t.RequiresGrad(in)) return;
    const Tensor& g = t.GradOf(self);
    Tensor& gi = t.GradOf(in);
    for (int64_t i = 0; i < g.size(); ++i) gi[i] += g[i] * (*ratio)[i];
  });
}

Tensor PerturbMel(const Tensor& mel, const Tensor& delta, MelPerturbation model) {
  Tape tape;
  return PerturbMel(tape, mel, tape.Constant(delta), model).value();
}

Tensor RealizationOffset(const GainRenderer& renderer, const std::vector<double>& samples,
                         const Tensor& mel, const Tensor& delta, MelPerturbation model) {
  CheckDelta(mel, delta.shape());
  const SpectralFrontend& fe = renderer.frontend();
  Tensor real = fe.Mel(renderer.Render(samples, delta));
  if (real.shape() != mel.shape()) throw ShapeError("realization: clip and mel disagree");
  const Tensor predicted = PerturbMel(mel, delta, model);
  for (int64_t i = 0; i < real.size(); ++i) real[i] -= predicted[i];
  return real;
}

Var AttackLoss(Tape& tape, const Encoder& encoder, const std::vector<Tensor>& mels,
               const std::vector<Var>& deltas, const Tensor& emb_target, const Tensor& emb_victim,
               double lambda, MelPerturbation model, const std::vector<Tensor>* offsets) {
  if (mels.size() != deltas.size() || mels.empty()) {
    throw ShapeError("attack loss: need one delta per mel");
  }
  if (offsets && offsets->size() != mels.size()) throw ShapeError("attack loss: need one offset per mel");
  if (emb_target.size() != encoder.embedding_dim() || emb_victim.size() != encoder.embedding_dim()) {
    throw ShapeError("attack loss: reference embeddings must have " +
                     std::to_string(encoder.embedding_dim()) + " values");
  }
  std::vector<Var> inputs;
  for (size_t i = 0; i < mels.size(); ++i) {
    Var x = PerturbMel(tape, mels[i], deltas[i], model);
    if (offsets) {
      CheckDelta(mels[i], (*offsets)[i].shape());
      x = ad::Add(x, tape.Constant((*offsets)[i]));
    }
    inputs.push_back(x);
  }
  Var e = encoder.EmbedMels(tape, inputs);
  const int n = static_cast<int>(mels.size());
  Var to_target = ad::Mse(e, tape.Constant(TileRows(emb_target, n)));
  if (lambda == 0.0) return to_target;
  Var to_victim = ad::Mse(e, tape.Constant(TileRows(emb_victim, n)));
  return ad::Sub(to_target, ad::Scale(to_victim, lambda));
}

double AttackLoss(const Encoder& encoder, const Tensor& mel, const Tensor& delta,
                  const Tensor& emb_target, const Tensor& emb_victim, double lambda,
                  MelPerturbation model) {
  Tape tape;
  return AttackLoss(tape, encoder, {mel}, {tape.Constant(delta)}, emb_target, emb_victim, lambda,
                    model)
      .value()[0];
}

std::string AttackTrace::ToCsv() const {
  std::ostringstream os;
  os.precision(10);
  os << "iteration,loss,max_low,max_mid,max_high\n";
  for (size_t i = 0; i < loss.size(); ++i) {
    os << i << ',' << loss[i];
    for (int b = 0; b < 3; ++b) os << ',' << (i < band_max.size() ? band_max[i][b] : 0.0);
    os << '\n';
  }
  return os.str();
}

PgdResult PgdOffline(const Encoder& encoder, const GainRenderer& renderer, const Waveform& clip,
                     const Tensor& emb_target, const Tensor& emb_victim, const AttackConfig& cfg,
                     const BandBounds& bounds) {
  cfg.Validate();
  CheckRenderer(encoder, renderer);
  const Tensor mel = encoder.Mel(clip);
  if (mel.dim(0) != bounds.rows()) {
    throw ShapeError("pgd: mel " + ShapeToString(mel.shape()) + " does not match " +
                     std::to_string(bounds.rows()) + " bound rows");
  }
  if (mel.dim(1) < encoder.config().window_frames) {
    throw InputTooShortError("pgd: clip has " + std::to_string(mel.dim(1)) + " frames, need " +
                             std::to_string(encoder.config().window_frames));
  }
  const double step = cfg.epsilon > 0.0 ? bounds.epsilon() / cfg.step_divisor : 0.0;
  PgdResult res;
  res.delta = Tensor(mel.shape());
  std::vector<Tensor> offset = {Tensor(mel.shape())};
  for (int it = 0; it <= cfg.iterations; ++it) {
    if (it == cfg.iterations || (it > 0 && it % cfg.realize_every == 0)) {
      offset[0] = RealizationOffset(renderer, clip.samples, mel, res.delta, cfg.model);
    }
    Tape tape;
    Var d = tape.Leaf(res.delta);
    Var loss = AttackLoss(tape, encoder, {mel}, {d}, emb_target, emb_victim, cfg.lambda, cfg.model,
                          &offset);
    const double l = loss.value()[0];
    if (!std::isfinite(l)) throw DivergenceError("pgd: non-finite loss at iteration " + std::to_string(it));
    res.trace.loss.push_back(l);
    res.trace.band_max.push_back(bounds.BandMax(res.delta));
    if (it == cfg.iterations) break;
    tape.Backward(loss);
    SignDescentStep(res.delta, tape.Grad(d), step);
    bounds.Project(res.delta);
  }
  res.initial_loss = res.trace.loss.front();
  res.final_loss = res.trace.loss.back();
  if (res.final_loss == res.initial_loss) LOG(WARNING) << "pgd: loss did not change";
  return res;
}

Header TrainHeader(const Encoder& encoder, const GainRenderer& renderer,
                   const std::vector<Waveform>& clips, const Tensor& emb_target,
                   const Tensor& emb_victim, const AttackConfig& cfg, const BandBounds& bounds,
                   AttackTrace* trace) {
  cfg.Validate();
  CheckRenderer(encoder, renderer);
  if (clips.size() < 10) {
    throw ConfigError("header: need at least 10 victim clips, got " + std::to_string(clips.size()));
  }
  std::vector<Tensor> mels;
  for (const Waveform& w : clips) mels.push_back(encoder.Mel(w));
  const Shape shape = mels.front().shape();
  for (const Tensor& m : mels) {
    if (m.shape() != shape) throw ConfigError("header: clips must share one length");
  }
  if (shape[0] != bounds.rows()) {
    throw ShapeError("header: clip mel " + ShapeToString(shape) + " does not match bounds");
  }
  Rng rng(MixSeed(cfg.seed, 0x4ead));
  std::vector<size_t> order(clips.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  size_t cursor = 0;
  const double step = cfg.epsilon > 0.0 ? bounds.epsilon() / cfg.step_divisor : 0.0;
  const int batch = std::min<int>(cfg.header_batch, clips.size());

  Header h;
  h.delta = Tensor(shape);
  std::vector<Tensor> offsets(clips.size(), Tensor(shape));
  std::vector<int> refreshed(clips.size(), 0);  // step of the last refresh
  for (int it = 0; it < cfg.header_iterations; ++it) {
    std::vector<Tensor> batch_mels, batch_offsets;
    for (int b = 0; b < batch; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const size_t i = order[cursor++];
      if (it - refreshed[i] >= cfg.realize_every) {
        offsets[i] = RealizationOffset(renderer, clips[i].samples, mels[i], h.delta, cfg.model);
        refreshed[i] = it;
      }
      batch_mels.push_back(mels[i]);
      batch_offsets.push_back(offsets[i]);
    }
    Tape tape;
    Var d = tape.Leaf(h.delta);
    std::vector<Var> deltas(batch_mels.size(), d);
    Var loss = AttackLoss(tape, encoder, batch_mels, deltas, emb_target, emb_victim, cfg.lambda,
                          cfg.model, &batch_offsets);
    const double l = loss.value()[0];
    if (!std::isfinite(l)) throw DivergenceError("header: non-finite loss at step " + std::to_string(it));
    if (trace) {
      trace->loss.push_back(l);
      trace->band_max.push_back(bounds.BandMax(h.delta));
    }
    tape.Backward(loss);
    SignDescentStep(h.delta, tape.Grad(d), step);
    bounds.Project(h.delta);
  }
  return h;
}

void SaveHeader(const std::string& path, const Header& header) {
  Parameter p("header", header.delta);
  nlohmann::json cfg = header.meta.is_object() ? header.meta : nlohmann::json::object();
  cfg["kind"] = "header";
  cfg["victim_id"] = header.victim_id;
  cfg["target_id"] = header.target_id;
  SaveCheckpoint(path, cfg, {&p});
}

Header LoadHeader(const std::string& path) {
  const Checkpoint ckpt = LoadCheckpoint(path);
  if (ckpt.config.value("kind", "") != "header") throw FormatError(path + ": not a header checkpoint");
  Header h;
  h.delta = ckpt.Get("header");
  h.victim_id = ckpt.config.value("victim_id", -1);
  h.target_id = ckpt.config.value("target_id", -1);
  h.meta = ckpt.config;
  return h;
}

Tensor RandomNoiseDelta(int rows, int cols, double epsilon, uint64_t seed) {
  Tensor t({rows, cols});
  if (epsilon == 0.0) return t;
  Rng rng(MixSeed(seed, 0x4015e));
  for (double& v : t.values()) v = Uniform(rng, -epsilon, epsilon);
  return t;
}

Tensor PeriodicDelta(const Tensor& header, int cols, double epsilon) {
  if (header.ndim() != 2 || header.dim(1) < 1) throw ShapeError("periodic: bad header shape");
  const int rows = header.dim(0), len = header.dim(1);
  Tensor t({rows, cols});
  const double peak = header.MaxAbs();
  if (peak == 0.0 || epsilon == 0.0) return t;
  const double scale = epsilon / peak;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) t.at(r, c) = scale * header.at(r, c % len);
  return t;
}

}  // namespace predmask
