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

#include "predmask/predictor.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include <glog/logging.h>

#include "predmask/checkpoint.h"
#include "predmask/error.h"
#include "predmask/optim.h"
#include "predmask/random.h"

namespace predmask {
namespace {

constexpr double kPreluInit = 0.25;
constexpr double kUpSlope = 0.01;
constexpr int kMinClipSeconds = 3;

int HalveCeil(int n, int times) {
  for (int i = 0; i < times; ++i) n = (n + 1) / 2;
  return n;
}

// Strides (1 or 2) along one axis: layer 0 fixed, then a leading run of
// stride-1 layers, then halvings. Returns false when no run fits.
bool PlanAxis(int in, int out, int layers, int first_stride, int up_layers, std::vector<int>* strides,
              int* bottleneck) {
  const int need = HalveCeil(out, up_layers);
  const int after_first = HalveCeil(in, first_stride == 2 ? 1 : 0);
  for (int run = 0; run < layers; ++run) {
    if (HalveCeil(after_first, layers - 1 - run) != need) continue;
    strides->assign(layers, 2);
    (*strides)[0] = first_stride;
    for (int i = 1; i <= run; ++i) (*strides)[i] = 1;
    *bottleneck = need;
    return true;
  }
  return false;
}

Tensor UniformTensor(const Shape& s, double bound, Rng& rng) {
  Tensor t(s);
  for (double& v : t.values()) v = Uniform(rng, -bound, bound);
  return t;
}

double Median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double Percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const size_t k = static_cast<size_t>(std::ceil(q * v.size())) - 1;
  return v[std::min(k, v.size() - 1)];
}

void CheckHeader(const Tensor& header, int n_mels, const FrameTiming& ft) {
  if (header.ndim() != 2 || header.dim(0) != n_mels || header.dim(1) != ft.header) {
    throw ShapeError("header " + ShapeToString(header.shape()) + " does not match " +
                     std::to_string(n_mels) + " x " + std::to_string(ft.header));
  }
}

}  // namespace

void PredictorTiming::Validate() const {
  if (!(window_seconds > 0.0 && delay_seconds > 0.0 && chunk_seconds > 0.0)) {
    throw ConfigError("timing: durations must be positive");
  }
  if (std::abs(delay_seconds - chunk_seconds) > 1e-12) {
    throw ConfigError("timing: delay must equal chunk length for gapless coverage");
  }
}

void to_json(nlohmann::json& j, const PredictorTiming& t) {
  j = nlohmann::json{{"window_seconds", t.window_seconds},
                     {"delay_seconds", t.delay_seconds},
                     {"chunk_seconds", t.chunk_seconds}};
}

void from_json(const nlohmann::json& j, PredictorTiming& t) {
  j.at("window_seconds").get_to(t.window_seconds);
  j.at("delay_seconds").get_to(t.delay_seconds);
  j.at("chunk_seconds").get_to(t.chunk_seconds);
}

FrameTiming ResolveTiming(const PredictorTiming& timing, const SpectralFrontend& frontend) {
  timing.Validate();
  const SpectralConfig& c = frontend.config();
  auto hops = [&](double s) {
    const double h = s * c.sample_rate / c.hop;
    const int r = static_cast<int>(std::lround(h));
    if (std::abs(h - r) > 1e-6) {
      throw ConfigError("timing: " + std::to_string(s) + " s is not a whole number of hops");
    }
    return r;
  };
  FrameTiming ft;
  ft.window = frontend.NumFrames(std::lround(timing.window_seconds * c.sample_rate));
  ft.chunk = hops(timing.chunk_seconds);
  ft.delay = hops(timing.delay_seconds);
  ft.header = hops(timing.window_seconds + timing.delay_seconds);
  if (ft.window + ft.delay > ft.header) throw ConfigError("timing: window overlaps its chunk");
  return ft;
}

std::vector<ChunkSlot> PlanChunks(int total_columns, const FrameTiming& ft) {
  std::vector<ChunkSlot> slots;
  for (int k = 0;; ++k) {
    const int start = ft.header + k * ft.chunk;
    if (start >= total_columns) break;
    slots.push_back({start, std::min(ft.chunk, total_columns - start), k * ft.chunk});
  }
  return slots;
}

std::string ShapePlan::ToString() const {
  std::ostringstream os;
  for (size_t i = 0; i < trace.size(); ++i) {
    if (i) os << " -> ";
    os << trace[i][0] << 'x' << trace[i][1] << 'x' << trace[i][2];
  }
  return os.str();
}

ShapePlan PlanShapes(int in_h, int in_w, int out_h, int out_w, const std::vector<int>& down_channels,
                     const std::vector<int>& up_channels) {
  const int nd = down_channels.size(), nu = up_channels.size();
  if (nd < 1 || nu < 1) throw ShapeError("shape plan: need down and up layers");
  std::vector<int> sh, sw;
  int bh = 0, bw = 0;
  if (!PlanAxis(in_h, out_h, nd, 1, nu, &sh, &bh)) {
    throw ShapeError("shape plan: no stride plan for down layer " + std::to_string(nd - 1) +
                     " gives height " + std::to_string(HalveCeil(out_h, nu)) + " for up layer 0 (" +
                     std::to_string(in_h) + " -> " + std::to_string(out_h) + ")");
  }
  if (!PlanAxis(in_w, out_w, nd, 2, nu, &sw, &bw)) {
    throw ShapeError("shape plan: no stride plan for down layer " + std::to_string(nd - 1) +
                     " gives width " + std::to_string(HalveCeil(out_w, nu)) + " for up layer 0 (" +
                     std::to_string(in_w) + " -> " + std::to_string(out_w) + ")");
  }
  ShapePlan p;
  int c = 1, h = in_h, w = in_w;
  for (int i = 0; i < nd; ++i) {
    p.trace.push_back({c, h, w});
    if (h < 2 || w < 2) {
      throw ShapeError("shape plan: down layer " + std::to_string(i) + " input " +
                       std::to_string(h) + "x" + std::to_string(w) + " is too small to pad");
    }
    p.down_strides.push_back({sh[i], sw[i]});
    c = down_channels[i];
    h = ad::ConvOutputSize(h + 2, 3, sh[i], 0);
    w = ad::ConvOutputSize(w + 2, 3, sw[i], 0);
  }
  for (int i = 0; i < nu; ++i) {
    p.trace.push_back({c, h, w});
    const int th = HalveCeil(out_h, nu - 1 - i), tw = HalveCeil(out_w, nu - 1 - i);
    p.up_output_pads.push_back({th - (2 * h - 1), tw - (2 * w - 1)});
    c = up_channels[i];
    h = ad::ConvTransposeOutputSize(h, 3, 2, 1, p.up_output_pads.back().first);
    w = ad::ConvTransposeOutputSize(w, 3, 2, 1, p.up_output_pads.back().second);
  }
  p.trace.push_back({c, h, w});
  CHECK(h == out_h && w == out_w) << p.ToString();
  return p;
}

void PredictorConfig::Validate() const {
  if (n_mels < 2 || input_frames < 2 || output_frames < 1) {
    throw ConfigError("predictor: mel and frame counts too small");
  }
  if (down_channels.empty() || up_channels.empty()) throw ConfigError("predictor: empty layer list");
  for (int c : down_channels)
    if (c < 1) throw ConfigError("predictor: channel counts must be positive");
  for (int c : up_channels)
    if (c < 1) throw ConfigError("predictor: channel counts must be positive");
  if (up_channels.back() != 1) throw ConfigError("predictor: last up layer must have 1 channel");
}

void to_json(nlohmann::json& j, const PredictorConfig& c) {
  j = nlohmann::json{{"n_mels", c.n_mels},
                     {"input_frames", c.input_frames},
                     {"output_frames", c.output_frames},
                     {"down_channels", c.down_channels},
                     {"up_channels", c.up_channels}};
}

void from_json(const nlohmann::json& j, PredictorConfig& c) {
  j.at("n_mels").get_to(c.n_mels);
  j.at("input_frames").get_to(c.input_frames);
  j.at("output_frames").get_to(c.output_frames);
  j.at("down_channels").get_to(c.down_channels);
  j.at("up_channels").get_to(c.up_channels);
}

PredictorConfig DeskPredictorConfig(const SpectralFrontend& frontend, const PredictorTiming& timing) {
  const FrameTiming ft = ResolveTiming(timing, frontend);
  PredictorConfig c;
  c.n_mels = frontend.config().n_mels;
  c.input_frames = ft.window;
  c.output_frames = ft.chunk;
  return c;
}

PredictorConfig WidePredictorConfig() {
  PredictorConfig c;
  c.n_mels = 512;
  c.input_frames = 100;
  c.output_frames = 32;
  c.down_channels = {32, 128, 256, 256, 512, 512, 512};
  c.up_channels = {256, 128, 64, 32, 1};
  return c;
}

Tensor ScaleOutput(const Tensor& raw, const BandBounds& bounds) {
  if (raw.ndim() != 2 || raw.dim(0) != bounds.rows()) {
    throw ShapeError("scale output: " + ShapeToString(raw.shape()) + " vs " +
                     std::to_string(bounds.rows()) + " bound rows");
  }
  Tensor out = raw;
  const int cols = raw.dim(1);
  for (int r = 0; r < raw.dim(0); ++r)
    for (int c = 0; c < cols; ++c) out.at(r, c) *= bounds.row(r);
  return out;
}

Predictor::Predictor(PredictorConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.Validate();
  plan_ = PlanShapes(cfg_.n_mels, cfg_.input_frames, cfg_.n_mels, cfg_.output_frames,
                     cfg_.down_channels, cfg_.up_channels);
  Rng rng(MixSeed(seed, 0x9ed1c7));
  int in = 1;
  for (size_t i = 0; i < cfg_.down_channels.size(); ++i) {
    const int out = cfg_.down_channels[i];
    const double bound = 1.0 / std::sqrt(in * 9.0);
    const std::string n = "down" + std::to_string(i);
    Down d;
    d.w = Parameter(n + ".w", UniformTensor({out, in, 3, 3}, bound, rng));
    d.b = Parameter(n + ".b", UniformTensor({out}, bound, rng));
    d.gamma = Parameter(n + ".bn_gamma", Tensor({out}, 1.0));
    d.beta = Parameter(n + ".bn_beta", Tensor({out}));
    d.slope = Parameter(n + ".prelu", Tensor({1}, kPreluInit));
    d.stats.running_mean = Parameter(n + ".bn_mean", Tensor({out}));
    d.stats.running_var = Parameter(n + ".bn_var", Tensor({out}, 1.0));
    down_.push_back(std::move(d));
    in = out;
  }
  for (size_t i = 0; i < cfg_.up_channels.size(); ++i) {
    const int out = cfg_.up_channels[i];
    const double bound = 1.0 / std::sqrt(out * 9.0);
    const std::string n = "up" + std::to_string(i);
    Up u;
    u.w = Parameter(n + ".w", UniformTensor({in, out, 3, 3}, bound, rng));
    u.b = Parameter(n + ".b", UniformTensor({out}, bound, rng));
    up_.push_back(std::move(u));
    in = out;
  }
  norm_ = Parameter("norm", Tensor({2}, std::vector<double>{0.0, 1.0}));
  bounds_ = Parameter("out_bounds", Tensor({cfg_.n_mels, 1}));
}

Var Predictor::Run(Tape& tape, const Var& windows, bool training, const Binder& bind) const {
  const Shape want = {windows.dim(0), 1, cfg_.n_mels, cfg_.input_frames};
  if (windows.shape() != want) {
    throw ShapeError("predictor: input " + ShapeToString(windows.shape()) + ", want N x " +
                     ShapeToString({1, cfg_.n_mels, cfg_.input_frames}));
  }
  const double mean = norm_.value[0], sd = norm_.value[1];
  Var x = ad::Affine(windows, 1.0 / sd, -mean / sd);
  for (size_t i = 0; i < down_.size(); ++i) {
    const Down& d = down_[i];
    x = ad::ReflectionPad2d(x, 1, 1);
    ad::Conv2dOptions o;
    o.stride_h = plan_.down_strides[i].first;
    o.stride_w = plan_.down_strides[i].second;
    x = ad::Conv2d(x, bind(d.w), bind(d.b), o);
    x = ad::BatchNorm2d(x, bind(d.gamma), bind(d.beta), d.stats, training);
    x = ad::PRelu(x, bind(d.slope));
  }
  for (size_t i = 0; i < up_.size(); ++i) {
    ad::ConvTranspose2dOptions o;
    o.stride_h = o.stride_w = 2;
    o.pad_h = o.pad_w = 1;
    o.output_pad_h = plan_.up_output_pads[i].first;
    o.output_pad_w = plan_.up_output_pads[i].second;
    x = ad::ConvTranspose2d(x, bind(up_[i].w), bind(up_[i].b), o);
    // The last layer feeds tanh directly so negative outputs keep full range.
    if (i + 1 < up_.size()) x = ad::LeakyRelu(x, kUpSlope);
  }
  return ad::Tanh(x);
}

Var Predictor::Forward(Tape& tape, const Var& windows, bool training) {
  return Run(tape, windows, training, [&tape](const Parameter& p) {
    return tape.Bind(const_cast<Parameter&>(p));
  });
}

Var Predictor::Forward(Tape& tape, const Var& windows) const {
  return Run(tape, windows, false, [&tape](const Parameter& p) { return tape.BindConst(p); });
}

Tensor Predictor::PredictChunk(const Tensor& window, double* seconds) const {
  if (window.ndim() != 2 || window.dim(0) != cfg_.n_mels || window.dim(1) != cfg_.input_frames) {
    throw ShapeError("predict chunk: window " + ShapeToString(window.shape()) + ", want " +
                     ShapeToString({cfg_.n_mels, cfg_.input_frames}));
  }
  const auto t0 = std::chrono::steady_clock::now();
  Tape tape;
  Var x = tape.Constant(window.Reshaped({1, 1, cfg_.n_mels, cfg_.input_frames}));
  Tensor out = Forward(tape, x).value().Reshaped({cfg_.n_mels, cfg_.output_frames});
  for (int r = 0; r < cfg_.n_mels; ++r)
    for (int c = 0; c < cfg_.output_frames; ++c) out.at(r, c) *= bounds_.value[r];
  if (seconds) {
    *seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  return out;
}

void Predictor::SetOutputBounds(const BandBounds& bounds) {
  if (bounds.rows() != cfg_.n_mels) throw ShapeError("predictor: bounds rows differ from n_mels");
  // Stored as the largest float32 not above each bound so checkpoints
  // round-trip exactly and scaled chunks never exceed the bound.
  for (int r = 0; r < cfg_.n_mels; ++r) {
    float f = static_cast<float>(bounds.row(r));
    if (f > bounds.row(r)) f = std::nextafter(f, 0.0f);
    bounds_.value[r] = f;
  }
}

void Predictor::SetNormalization(double mean, double stddev) {
  if (!(stddev > 0.0)) throw ConfigError("predictor: normalization stddev must be positive");
  norm_.value[0] = static_cast<float>(mean);
  norm_.value[1] = static_cast<float>(stddev);
}

std::vector<Parameter*> Predictor::TrainableParameters() {
  std::vector<Parameter*> ps;
  for (Down& d : down_) {
    for (Parameter* p : {&d.w, &d.b, &d.gamma, &d.beta, &d.slope}) ps.push_back(p);
  }
  for (Up& u : up_) {
    ps.push_back(&u.w);
    ps.push_back(&u.b);
  }
  return ps;
}

std::vector<const Parameter*> Predictor::AllParameters() const {
  std::vector<const Parameter*> ps;
  for (const Down& d : down_) {
    for (const Parameter* p : std::initializer_list<const Parameter*>{
             &d.w, &d.b, &d.gamma, &d.beta, &d.slope, &d.stats.running_mean, &d.stats.running_var}) {
      ps.push_back(p);
    }
  }
  for (const Up& u : up_) {
    ps.push_back(&u.w);
    ps.push_back(&u.b);
  }
  ps.push_back(&norm_);
  ps.push_back(&bounds_);
  return ps;
}

void Predictor::Save(const std::string& path, const nlohmann::json& extra) const {
  nlohmann::json cfg = extra;
  cfg["predictor"] = cfg_;
  SaveCheckpoint(path, cfg, AllParameters());
}

Predictor Predictor::Load(const std::string& path) {
  const Checkpoint ckpt = LoadCheckpoint(path);
  if (!ckpt.config.contains("predictor")) throw FormatError(path + ": not a predictor checkpoint");
  Predictor p(ckpt.config.at("predictor").get<PredictorConfig>(), 0);
  std::vector<Parameter*> ps;
  for (const Parameter* c : p.AllParameters()) ps.push_back(const_cast<Parameter*>(c));
  AssignParameters(ckpt, ps);
  return p;
}

nlohmann::json Predictor::LoadMeta(const std::string& path) { return LoadCheckpoint(path).config; }

Var AssembleDelta(Tape& tape, Predictor& predictor, const Tensor& mel, const Tensor& header,
                  const FrameTiming& ft, bool training) {
  const PredictorConfig& c = predictor.config();
  CheckHeader(header, c.n_mels, ft);
  if (mel.ndim() != 2 || mel.dim(0) != c.n_mels) throw ShapeError("assemble: bad mel shape");
  if (ft.window != c.input_frames || ft.chunk != c.output_frames) {
    throw ShapeError("assemble: predictor shape does not match the timing");
  }
  const int total = mel.dim(1);
  const std::vector<ChunkSlot> slots = PlanChunks(total, ft);
  Var head = tape.Constant(header);
  if (slots.empty()) return ad::SliceColumns(head, 0, total);
  std::vector<int> starts;
  for (const ChunkSlot& s : slots) starts.push_back(s.window_start);
  Var windows = ad::Windows(tape.Constant(mel), starts, ft.window);
  Var raw = predictor.Forward(tape, windows, training);
  Var cols = ad::ChunksToColumns(raw);
  Tensor rows(cols.shape());
  for (int r = 0; r < c.n_mels; ++r)
    for (int j = 0; j < rows.dim(1); ++j) rows.at(r, j) = predictor.output_bounds()[r];
  Var scaled = ad::Mul(cols, rows);
  return ad::ConcatColumns({head, ad::SliceColumns(scaled, 0, total - ft.header)});
}

Tensor AssembleDelta(const Predictor& predictor, const Tensor& mel, const Tensor& header,
                     const FrameTiming& ft) {
  const PredictorConfig& c = predictor.config();
  CheckHeader(header, c.n_mels, ft);
  const int total = mel.dim(1);
  Tensor delta({c.n_mels, total});
  for (int r = 0; r < c.n_mels; ++r)
    for (int j = 0; j < std::min(total, ft.header); ++j) delta.at(r, j) = header.at(r, j);
  for (const ChunkSlot& s : PlanChunks(total, ft)) {
    Tensor window({c.n_mels, ft.window});
    for (int r = 0; r < c.n_mels; ++r)
      for (int j = 0; j < ft.window; ++j) window.at(r, j) = mel.at(r, s.window_start + j);
    const Tensor chunk = predictor.PredictChunk(window);
    for (int r = 0; r < c.n_mels; ++r)
      for (int j = 0; j < s.length; ++j) delta.at(r, s.start + j) = chunk.at(r, j);
  }
  return delta;
}

void to_json(nlohmann::json& j, const PredictorTrainOptions& o) {
  j = nlohmann::json{{"epochs", o.epochs}, {"lr", o.lr}, {"seed", o.seed}};
}

void from_json(const nlohmann::json& j, PredictorTrainOptions& o) {
  j.at("epochs").get_to(o.epochs);
  j.at("lr").get_to(o.lr);
  j.at("seed").get_to(o.seed);
}

void to_json(nlohmann::json& j, const PredictorReport& r) {
  j = nlohmann::json{{"train_loss", r.train_loss},
                     {"val_loss", r.val_loss},
                     {"initial_val_loss", r.initial_val_loss},
                     {"improving", r.improving},
                     {"val_similarity", r.val_similarity},
                     {"median_val_similarity", r.median_val_similarity},
                     {"inference_ms_mean", r.inference_ms_mean},
                     {"inference_ms_p99", r.inference_ms_p99},
                     {"seconds", r.seconds}};
}

double PredictorLoss(const Predictor& predictor, const Encoder& encoder, const GainRenderer& renderer,
                     const std::vector<Waveform>& clips, const Tensor& header,
                     const Tensor& emb_target, const Tensor& emb_victim, const FrameTiming& ft,
                     double lambda, MelPerturbation model) {
  if (clips.empty()) throw ConfigError("predictor loss: no clips");
  double total = 0.0;
  for (const Waveform& w : clips) {
    const Tensor mel = encoder.Mel(w);
    const Tensor delta = AssembleDelta(predictor, mel, header, ft);
    const Tensor offset = RealizationOffset(renderer, w.samples, mel, delta, model);
    Tensor x = PerturbMel(mel, delta, model);
    for (int64_t i = 0; i < x.size(); ++i) x[i] += offset[i];
    // With the offset folded in, the additive model with a zero delta is the
    // plain encoder loss on x.
    total += AttackLoss(encoder, x, Tensor(x.shape()), emb_target, emb_victim, lambda,
                        MelPerturbation::kAdditive);
  }
  return total / clips.size();
}

Predictor TrainPredictor(const Encoder& encoder, const GainRenderer& renderer,
                         const std::vector<Waveform>& train, const std::vector<Waveform>& validation,
                         const Tensor& header, const Tensor& emb_target, const Tensor& emb_victim,
                         const BandBounds& bounds, const PredictorConfig& cfg,
                         const PredictorTiming& timing, const PredictorTrainOptions& opt,
                         PredictorReport* report) {
  const auto t0 = std::chrono::steady_clock::now();
  if (train.empty() || validation.empty()) throw ConfigError("predictor: need train and validation clips");
  for (const auto* set : {&train, &validation}) {
    for (const Waveform& w : *set) {
      if (w.duration() < kMinClipSeconds) {
        throw InputTooShortError("predictor: clip of " + std::to_string(w.duration()) +
                                 " s, need at least 3 s");
      }
    }
  }
  const FrameTiming ft = ResolveTiming(timing, encoder.frontend());
  Predictor p(cfg, opt.seed);
  p.SetOutputBounds(bounds);
  CheckHeader(header, cfg.n_mels, ft);

  std::vector<Tensor> mels;
  double sum = 0.0, sq = 0.0;
  int64_t n = 0;
  for (const Waveform& w : train) {
    mels.push_back(encoder.Mel(w));
    for (double v : mels.back().values()) {
      sum += v;
      sq += v * v;
      ++n;
    }
  }
  const double mean = sum / n;
  p.SetNormalization(mean, std::sqrt(std::max(sq / n - mean * mean, 1e-12)));

  PredictorReport rep;
  auto val_loss = [&] {
    return PredictorLoss(p, encoder, renderer, validation, header, emb_target, emb_victim, ft,
                         opt.lambda, opt.model);
  };
  rep.initial_val_loss = val_loss();
  if (opt.log) LOG(INFO) << "predictor: initial validation loss " << rep.initial_val_loss;

  AdamOptions adam;
  adam.lr = opt.lr;
  const std::vector<Parameter*> params = p.TrainableParameters();
  Rng rng(MixSeed(opt.seed, 0x7a1e));
  std::vector<size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (size_t i : order) {
      // Offset from the current predictor, in eval mode like deployment.
      const Tensor current = AssembleDelta(p, mels[i], header, ft);
      const std::vector<Tensor> offset = {
          RealizationOffset(renderer, train[i].samples, mels[i], current, opt.model)};
      Tape tape;
      Var delta = AssembleDelta(tape, p, mels[i], header, ft, true);
      Var x = PerturbMel(tape, mels[i], delta, opt.model);
      x = ad::Add(x, tape.Constant(offset[0]));
      Var emb = encoder.EmbedMels(tape, {x});
      const int d = encoder.embedding_dim();
      Var loss = ad::Sub(ad::Mse(emb, tape.Constant(emb_target.Reshaped({1, d}))),
                         ad::Scale(ad::Mse(emb, tape.Constant(emb_victim.Reshaped({1, d}))),
                                   opt.lambda));
      const double l = loss.value()[0];
      if (!std::isfinite(l)) {
        throw DivergenceError("predictor: non-finite loss in epoch " + std::to_string(epoch));
      }
      epoch_loss += l;
      ZeroGrads(params);
      tape.Backward(loss);
      AdamStep(params, adam);
    }
    rep.train_loss.push_back(epoch_loss / train.size());
    rep.val_loss.push_back(val_loss());
    if (opt.log) {
      LOG(INFO) << "predictor: epoch " << epoch << " train " << rep.train_loss.back()
                << " validation " << rep.val_loss.back();
    }
  }
  const int first = std::min<int>(5, rep.val_loss.size());
  rep.improving = first > 0;
  double prev = rep.initial_val_loss;
  for (int e = 0; e < first; ++e) {
    if (!(rep.val_loss[e] < prev)) rep.improving = false;
    prev = rep.val_loss[e];
  }
  if (!rep.improving) LOG(WARNING) << "predictor: validation loss did not fall every epoch";

  for (Parameter* q : params) RoundToFloat32(q->value);
  for (const Parameter* q : p.AllParameters()) RoundToFloat32(const_cast<Parameter*>(q)->value);

  std::vector<double> ms;
  for (const Waveform& w : validation) {
    const Tensor mel = encoder.Mel(w);
    const Tensor delta = AssembleDelta(p, mel, header, ft);
    const Waveform out{renderer.Render(w.samples, delta), w.sample_rate};
    rep.val_similarity.push_back(Similarity(encoder.EmbedWave(out), emb_victim));
    for (const ChunkSlot& s : PlanChunks(mel.dim(1), ft)) {
      Tensor window({cfg.n_mels, ft.window});
      for (int r = 0; r < cfg.n_mels; ++r)
        for (int j = 0; j < ft.window; ++j) window.at(r, j) = mel.at(r, s.window_start + j);
      double secs = 0.0;
      p.PredictChunk(window, &secs);
      ms.push_back(1e3 * secs);
    }
  }
  rep.median_val_similarity = Median(rep.val_similarity);
  rep.inference_ms_mean = ms.empty() ? 0.0 : std::accumulate(ms.begin(), ms.end(), 0.0) / ms.size();
  rep.inference_ms_p99 = Percentile(ms, 0.99);
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (report) *report = rep;
  return p;
}

}  // namespace predmask
