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

#include "predmask/pipeline.h"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <glog/logging.h>

#include "predmask/error.h"
#include "predmask/eval.h"
#include "predmask/random.h"
#include "predmask/wav_io.h"

namespace predmask {

namespace fs = std::filesystem;
using nlohmann::json;

const char* EncoderRoleName(EncoderRole role) {
  switch (role) {
    case EncoderRole::kTarget: return "target";
    case EncoderRole::kAlternate: return "alternate";
    case EncoderRole::kVerifier: return "verifier";
  }
  return "?";
}

EncoderRole ParseEncoderRole(const std::string& name) {
  if (name == "target") return EncoderRole::kTarget;
  if (name == "alternate") return EncoderRole::kAlternate;
  if (name == "verifier") return EncoderRole::kVerifier;
  throw ConfigError("unknown encoder role \"" + name + "\" (expected target, alternate or verifier)");
}

// ---------------------------------------------------------------------------
// Config documents.

namespace {

json CorpusJson(const CorpusOptions& o) {
  return {{"n_speakers", o.n_speakers},
          {"clips_per_speaker", o.clips_per_speaker},
          {"train_per_speaker", o.train_per_speaker},
          {"validation_per_speaker", o.validation_per_speaker},
          {"seed", o.seed},
          {"sample_rate", o.sample_rate}};
}

void CorpusFromJson(const json& j, CorpusOptions& o) {
  j.at("n_speakers").get_to(o.n_speakers);
  j.at("clips_per_speaker").get_to(o.clips_per_speaker);
  j.at("train_per_speaker").get_to(o.train_per_speaker);
  j.at("validation_per_speaker").get_to(o.validation_per_speaker);
  j.at("seed").get_to(o.seed);
  j.at("sample_rate").get_to(o.sample_rate);
}

json EncoderStageJson(const EncoderStageConfig& s) {
  return {{"model", s.model},
          {"training",
           {{"steps", s.training.steps},
            {"batch", s.training.batch},
            {"lr", s.training.lr},
            {"seed", s.training.seed},
            {"log_every", s.training.log_every}}}};
}

void EncoderStageFromJson(const json& j, EncoderStageConfig& s) {
  j.at("model").get_to(s.model);
  const json& t = j.at("training");
  t.at("steps").get_to(s.training.steps);
  t.at("batch").get_to(s.training.batch);
  t.at("lr").get_to(s.training.lr);
  t.at("seed").get_to(s.training.seed);
  t.at("log_every").get_to(s.training.log_every);
}

json EvalJson(const EvalConfig& e) {
  return {{"k", e.k},
          {"victims", e.victims},
          {"max_clips", e.max_clips},
          {"vc_temperature", e.vc_temperature},
          {"content_seed", e.content_seed},
          {"content_min_seconds", e.content_min_seconds},
          {"content_max_seconds", e.content_max_seconds},
          {"noise_seed", e.noise_seed},
          {"transforms", e.transforms},
          {"header_cross_speakers", e.header_cross_speakers},
          {"header_cross_clips", e.header_cross_clips},
          {"band_clips", e.band_clips},
          {"cross_model", e.cross_model},
          {"cross_model_clips", e.cross_model_clips},
          {"cross_model_iterations", e.cross_model_iterations}};
}

void EvalFromJson(const json& j, EvalConfig& e) {
  j.at("k").get_to(e.k);
  j.at("victims").get_to(e.victims);
  j.at("max_clips").get_to(e.max_clips);
  j.at("vc_temperature").get_to(e.vc_temperature);
  j.at("content_seed").get_to(e.content_seed);
  j.at("content_min_seconds").get_to(e.content_min_seconds);
  j.at("content_max_seconds").get_to(e.content_max_seconds);
  j.at("noise_seed").get_to(e.noise_seed);
  j.at("transforms").get_to(e.transforms);
  j.at("header_cross_speakers").get_to(e.header_cross_speakers);
  j.at("header_cross_clips").get_to(e.header_cross_clips);
  j.at("band_clips").get_to(e.band_clips);
  j.at("cross_model").get_to(e.cross_model);
  j.at("cross_model_clips").get_to(e.cross_model_clips);
  j.at("cross_model_iterations").get_to(e.cross_model_iterations);
}

// Recursively overlays `src` onto `dst`; every key of `src` must exist in `dst`.
void StrictMerge(json& dst, const json& src, const std::string& path) {
  if (!src.is_object()) throw ConfigError("config" + path + " must be an object");
  for (auto it = src.begin(); it != src.end(); ++it) {
    const std::string key = path + "." + it.key();
    if (!dst.contains(it.key())) throw ConfigError("unknown config key \"" + key.substr(1) + "\"");
    json& slot = dst[it.key()];
    if (slot.is_object()) {
      StrictMerge(slot, it.value(), key);
    } else {
      if (it.value().is_object()) throw ConfigError("config key \"" + key.substr(1) + "\" is not a section");
      slot = it.value();
    }
  }
}

RunConfig FromMergedJson(const json& j) {
  RunConfig c;
  try {
    CorpusFromJson(j.at("corpus"), c.corpus);
    const json& enc = j.at("encoders");
    EncoderStageFromJson(enc.at("target"), c.target);
    EncoderStageFromJson(enc.at("alternate"), c.alternate);
    EncoderStageFromJson(enc.at("verifier"), c.verifier);
    j.at("attack").get_to(c.attack);
    j.at("timing").get_to(c.timing);
    j.at("predictor").at("training").get_to(c.predictor.training);
    j.at("predictor").at("min_clip_seconds").get_to(c.predictor.min_clip_seconds);
    j.at("stream").at("onset").get_to(c.stream.onset);
    j.at("stream").at("enforce_deadlines").get_to(c.stream.enforce_deadlines);
    EvalFromJson(j.at("eval"), c.eval);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.Validate();
  return c;
}

}  // namespace

RunConfig::RunConfig() {
  target.training.steps = 300;
  target.training.seed = 1;
  alternate.training.steps = 200;
  alternate.training.seed = 2;
  verifier.training.steps = 150;
  verifier.training.seed = 3;
}

void RunConfig::Validate() const {
  if (corpus.n_speakers < 4) throw ConfigError("corpus.n_speakers must be >= 4");
  if (corpus.train_per_speaker < 10) throw ConfigError("corpus.train_per_speaker must be >= 10");
  if (corpus.validation_per_speaker < 1 ||
      corpus.train_per_speaker + corpus.validation_per_speaker >= corpus.clips_per_speaker) {
    throw ConfigError("corpus split leaves no validation or test clips");
  }
  if (corpus.sample_rate != 16000) throw ConfigError("corpus.sample_rate must be 16000");
  for (const EncoderStageConfig* s : {&target, &alternate, &verifier}) {
    s->model.Validate();
    if (s->model.spectral.sample_rate != corpus.sample_rate) {
      throw ConfigError("encoder sample rate differs from corpus.sample_rate");
    }
    if (s->model.n_speakers != corpus.n_speakers) {
      throw ConfigError("encoder n_speakers must equal corpus.n_speakers");
    }
    if (s->training.steps < 1 || s->training.batch < 1 || !(s->training.lr > 0.0)) {
      throw ConfigError("encoder training needs steps >= 1, batch >= 1 and lr > 0");
    }
  }
  attack.Validate();
  timing.Validate();
  if (predictor.training.epochs < 1 || !(predictor.training.lr > 0.0)) {
    throw ConfigError("predictor.training needs epochs >= 1 and lr > 0");
  }
  if (!(predictor.min_clip_seconds > 0.0)) throw ConfigError("predictor.min_clip_seconds must be > 0");
  stream.onset.Validate();
  if (!(eval.k > -1.0 && eval.k < 1.0)) throw ConfigError("eval.k must lie in (-1, 1)");
  if (eval.max_clips < 1) throw ConfigError("eval.max_clips must be >= 1");
  if (!(eval.vc_temperature > 0.0)) throw ConfigError("eval.vc_temperature must be > 0");
  if (!(eval.content_min_seconds >= 1.5 && eval.content_max_seconds >= eval.content_min_seconds)) {
    throw ConfigError("eval content duration must satisfy 1.5 <= min <= max");
  }
  if (eval.header_cross_speakers < 0 || eval.header_cross_clips < 1 || eval.band_clips < 0 ||
      eval.cross_model_clips < 1 || eval.cross_model_iterations < 1) {
    throw ConfigError("eval clip counts out of range");
  }
  for (int v : eval.victims) {
    if (v < 0 || v >= corpus.n_speakers) throw ConfigError("eval.victims: no speaker " + std::to_string(v));
  }
}

const EncoderStageConfig& RunConfig::EncoderStage(EncoderRole role) const {
  switch (role) {
    case EncoderRole::kTarget: return target;
    case EncoderRole::kAlternate: return alternate;
    case EncoderRole::kVerifier: return verifier;
  }
  return target;
}

json ToJson(const RunConfig& c) {
  return {{"corpus", CorpusJson(c.corpus)},
          {"encoders",
           {{"target", EncoderStageJson(c.target)},
            {"alternate", EncoderStageJson(c.alternate)},
            {"verifier", EncoderStageJson(c.verifier)}}},
          {"attack", c.attack},
          {"timing", c.timing},
          {"predictor", {{"training", c.predictor.training}, {"min_clip_seconds", c.predictor.min_clip_seconds}}},
          {"stream", {{"onset", c.stream.onset}, {"enforce_deadlines", c.stream.enforce_deadlines}}},
          {"eval", EvalJson(c.eval)}};
}

RunConfig ParseRunConfig(const json& overlay) {
  json doc = ToJson(RunConfig());
  if (!overlay.is_null()) StrictMerge(doc, overlay, "");
  return FromMergedJson(doc);
}

RunConfig LoadRunConfig(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  return ParseRunConfig(j);
}

void ApplyOverride(json& doc, const std::string& assignment) {
  const size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override \"" + assignment + "\" must have the form key=value");
  }
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json* node = &doc;
  size_t begin = 0;
  while (true) {
    const size_t dot = key.find('.', begin);
    const std::string part = key.substr(begin, dot == std::string::npos ? std::string::npos : dot - begin);
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key \"" + key + "\"");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    begin = dot + 1;
  }
  if (node->is_object()) throw ConfigError("config key \"" + key + "\" is a section, not a value");
  json value = json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (value.is_discarded()) value = text;
  *node = value;
}

std::string ConfigHash(const RunConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(Fnv1a(ToJson(cfg).dump())));
  return buf;
}

// ---------------------------------------------------------------------------
// Run directory.

namespace {

std::string FileHash(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(Fnv1a(bytes)));
  return buf;
}

void WriteText(const std::string& path, const std::string& text) {
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os << text;
}

json ReadJson(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError("cannot open " + path);
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
}

}  // namespace

RunDir::RunDir(std::string root) : root_(std::move(root)) {
  if (root_.empty()) throw ConfigError("run directory must not be empty");
}

std::string RunDir::Path(const std::string& relative) const { return (fs::path(root_) / relative).string(); }

bool RunDir::Exists(const std::string& relative) const { return fs::exists(Path(relative)); }

std::string RunDir::Require(const std::string& relative, const std::string& producer) const {
  const std::string p = Path(relative);
  if (!fs::exists(p)) {
    throw MissingArtifactError("missing artifact " + p + "; run the " + producer + " stage first");
  }
  return p;
}

json RunDir::Manifest() const {
  const std::string p = Path("manifest.json");
  if (!fs::exists(p)) return json{{"stages", json::object()}, {"artifacts", json::object()}};
  return ReadJson(p);
}

void RunDir::Record(const std::string& stage, const std::string& config_hash,
                    const std::vector<std::string>& artifacts, const json& summary) const {
  json m = Manifest();
  m["config_hash"] = config_hash;
  for (const std::string& rel : artifacts) {
    json& a = m["artifacts"][rel];
    const int version = a.contains("version") ? a["version"].get<int>() + 1 : 1;
    a = {{"stage", stage}, {"version", version}, {"content_hash", FileHash(Path(rel))},
         {"config_hash", config_hash}};
  }
  m["stages"][stage] = {{"config_hash", config_hash}, {"artifacts", artifacts}, {"summary", summary}};
  WriteText(Path("manifest.json"), m.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Pairs and tables.

std::string PairSpec::Key() const {
  return "v" + std::to_string(victim) + "-t" + std::to_string(target);
}

void to_json(json& j, const PairSpec& p) {
  j = {{"victim", p.victim}, {"target", p.target}, {"relation", p.relation}};
}

void from_json(const json& j, PairSpec& p) {
  j.at("victim").get_to(p.victim);
  j.at("target").get_to(p.target);
  j.at("relation").get_to(p.relation);
}

std::string Table::ToCsv() const {
  auto cell = [](const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
  };
  std::ostringstream os;
  for (size_t i = 0; i < columns.size(); ++i) os << (i ? "," : "") << cell(columns[i]);
  os << "\n";
  for (const auto& r : rows) {
    for (size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << cell(r[i]);
    os << "\n";
  }
  return os.str();
}

std::string Table::ToMarkdown() const {
  std::ostringstream os;
  os << "### " << name << "\n\n|";
  for (const auto& c : columns) os << " " << c << " |";
  os << "\n|";
  for (size_t i = 0; i < columns.size(); ++i) os << " --- |";
  os << "\n";
  for (const auto& r : rows) {
    os << "|";
    for (const auto& v : r) os << " " << v << " |";
    os << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Pipeline.

struct Pipeline::Cache {
  std::optional<Corpus> corpus;
  std::map<EncoderRole, std::unique_ptr<Encoder>> encoders;
  std::map<EncoderRole, std::shared_ptr<const GainRenderer>> renderers;
  std::map<EncoderRole, double> ranges;
  std::map<std::pair<EncoderRole, int>, Tensor> embeddings;
};

Pipeline::Pipeline(RunConfig config, std::string run_dir)
    : cfg_(std::move(config)), run_(std::move(run_dir)), cache_(std::make_unique<Cache>()) {
  cfg_.Validate();
  hash_ = ConfigHash(cfg_);
}

Pipeline::~Pipeline() = default;

namespace {

std::string EncoderFile(EncoderRole role) { return std::string("encoders/") + EncoderRoleName(role) + ".ckpt"; }

double Seconds(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Waveform Slice(const Waveform& w, int64_t from, int64_t length = -1) {
  Waveform o;
  o.sample_rate = w.sample_rate;
  from = std::clamp<int64_t>(from, 0, w.size());
  const int64_t end = length < 0 ? w.size() : std::min<int64_t>(w.size(), from + length);
  o.samples.assign(w.samples.begin() + from, w.samples.begin() + end);
  return o;
}

}  // namespace

const Corpus& Pipeline::GetCorpus() {
  if (!cache_->corpus) {
    run_.Require("corpus/manifest.jsonl", "gen-corpus");
    cache_->corpus = LoadCorpus(run_.Path("corpus"));
    if (static_cast<int>(cache_->corpus->speakers.size()) != cfg_.corpus.n_speakers) {
      throw ConfigError("corpus in " + run_.Path("corpus") + " has " +
                        std::to_string(cache_->corpus->speakers.size()) +
                        " speakers but corpus.n_speakers is " + std::to_string(cfg_.corpus.n_speakers));
    }
  }
  return *cache_->corpus;
}

const Encoder& Pipeline::GetEncoder(EncoderRole role) {
  auto& slot = cache_->encoders[role];
  if (!slot) {
    const std::string path = run_.Require(EncoderFile(role), std::string("train-encoder --role ") + EncoderRoleName(role));
    slot = std::make_unique<Encoder>(Encoder::Load(path));
  }
  return *slot;
}

std::shared_ptr<const GainRenderer> Pipeline::GetRenderer(EncoderRole role) {
  auto& slot = cache_->renderers[role];
  if (!slot) {
    auto fe = std::make_shared<const SpectralFrontend>(GetEncoder(role).config().spectral);
    slot = std::make_shared<const GainRenderer>(fe);
  }
  return slot;
}

double Pipeline::DynamicRange(EncoderRole role) {
  auto it = cache_->ranges.find(role);
  if (it != cache_->ranges.end()) return it->second;
  double range = 0.0;
  const std::string name = EncoderRoleName(role);
  if (run_.Exists("targets.json")) {
    const json t = ReadJson(run_.Path("targets.json"));
    if (t.contains("dynamic_range") && t["dynamic_range"].contains(name)) range = t["dynamic_range"][name];
  }
  if (range <= 0.0) {
    // Every fourth training clip keeps the quantiles stable at a fraction of the cost.
    const Corpus& c = GetCorpus();
    std::vector<Waveform> clips;
    const std::vector<size_t> train = c.ClipsIn(Split::kTrain);
    for (size_t i = 0; i < train.size(); i += 4) clips.push_back(c.Audio(train[i]));
    range = LogMelDynamicRange(GetEncoder(role).frontend(), clips);
  }
  cache_->ranges[role] = range;
  return range;
}

BandBounds Pipeline::Bounds(EncoderRole role, const BandWeights& weights) {
  return BandBounds(GetEncoder(role).frontend().Bands(), cfg_.attack.epsilon * DynamicRange(role), weights);
}

std::vector<Waveform> Pipeline::SpeakerClips(int speaker, Split split) {
  const Corpus& c = GetCorpus();
  std::vector<Waveform> out;
  for (size_t i : c.ClipsOf(speaker, split)) out.push_back(c.Audio(i));
  return out;
}

Tensor Pipeline::SpeakerEmbedding(EncoderRole role, int speaker) {
  auto key = std::make_pair(role, speaker);
  auto it = cache_->embeddings.find(key);
  if (it != cache_->embeddings.end()) return it->second;
  Tensor e = MeanEmbedding(GetEncoder(role), SpeakerClips(speaker, Split::kTrain));
  cache_->embeddings.emplace(key, e);
  return e;
}

Waveform Pipeline::OnsetTrim(const Waveform& w) const {
  const int64_t onset = DetectOnset(w.samples, cfg_.stream.onset, cfg_.target.model.spectral.hop, w.sample_rate);
  if (onset < 0) return Waveform{{}, w.sample_rate};
  return Slice(w, onset);
}

std::string Pipeline::ArtifactDir(const PairSpec& pair) const { return "artifacts/" + pair.Key(); }

json Pipeline::GenCorpus() {
  const auto t0 = std::chrono::steady_clock::now();
  const Corpus c = GenerateCorpus(cfg_.corpus);
  WriteCorpus(c, run_.Path("corpus"));
  cache_->corpus = c;
  int low = 0;
  for (const auto& s : c.speakers) low += s.pitch_class() == PitchClass::kLow;
  const json summary = {{"speakers", c.speakers.size()},
                        {"low_pitch_speakers", low},
                        {"clips", c.clips.size()},
                        {"seconds", Seconds(t0)}};
  WriteText(run_.Path("config.json"), ToJson(cfg_).dump(2) + "\n");
  run_.Record("gen-corpus", hash_, {"corpus/manifest.jsonl", "corpus/speakers.json"}, summary);
  return summary;
}

json Pipeline::TrainEncoder(EncoderRole role) {
  const EncoderStageConfig& s = cfg_.EncoderStage(role);
  EncoderReport report;
  Encoder enc = predmask::TrainEncoder(GetCorpus(), s.model, s.training, &report);
  const std::string rel = EncoderFile(role);
  fs::create_directories(fs::path(run_.Path(rel)).parent_path());
  enc.Save(run_.Path(rel), {{"role", EncoderRoleName(role)}});
  json summary = report;
  summary.erase("loss");
  WriteText(run_.Path(std::string("encoders/") + EncoderRoleName(role) + ".json"), json(report).dump(2) + "\n");
  cache_->encoders[role] = std::make_unique<Encoder>(std::move(enc));
  cache_->renderers.erase(role);
  cache_->ranges.erase(role);
  run_.Record(std::string("train-encoder:") + EncoderRoleName(role), hash_,
              {rel, std::string("encoders/") + EncoderRoleName(role) + ".json"}, summary);
  return summary;
}

json Pipeline::SelectTargets() {
  const Corpus& c = GetCorpus();
  std::vector<int> victims = cfg_.eval.victims;
  if (victims.empty()) {
    for (PitchClass pc : {PitchClass::kLow, PitchClass::kHigh}) {
      for (const auto& s : c.speakers) {
        if (s.pitch_class() == pc) {
          victims.push_back(s.speaker_id);
          break;
        }
      }
    }
  }
  std::vector<TargetCandidate> pool;
  for (const auto& s : c.speakers) {
    pool.push_back({s.speaker_id, s.pitch_class(), SpeakerEmbedding(EncoderRole::kTarget, s.speaker_id)});
  }
  std::vector<PairSpec> pairs;
  for (int v : victims) {
    const PitchClass vc = c.Speaker(v).pitch_class();
    const Tensor vm = SpeakerEmbedding(EncoderRole::kTarget, v);
    std::vector<TargetCandidate> same, all;
    for (const auto& cand : pool) {
      if (cand.speaker_id == v) continue;
      all.push_back(cand);
      if (cand.pitch_class == vc) same.push_back(cand);
    }
    if (same.empty()) throw ConfigError("victim " + std::to_string(v) + " has no same-class target candidate");
    const int inter = SelectTargetSpeaker(vm, vc, all);
    const int intra = SelectTargetSpeaker(vm, vc, same);
    if (c.Speaker(inter).pitch_class() == vc) {
      throw ConfigError("victim " + std::to_string(v) + " has no opposite-class target candidate");
    }
    pairs.push_back({v, intra, "intra"});
    pairs.push_back({v, inter, "inter"});
  }
  json ranges = json::object();
  cache_->ranges.clear();
  ranges["target"] = DynamicRange(EncoderRole::kTarget);
  if (run_.Exists(EncoderFile(EncoderRole::kAlternate))) ranges["alternate"] = DynamicRange(EncoderRole::kAlternate);
  const json out = {{"pairs", pairs}, {"dynamic_range", ranges}};
  WriteText(run_.Path("targets.json"), out.dump(2) + "\n");
  run_.Record("select-target", hash_, {"targets.json"}, out);
  return out;
}

std::vector<PairSpec> Pipeline::Pairs() {
  const json t = ReadJson(run_.Require("targets.json", "select-target"));
  return t.at("pairs").get<std::vector<PairSpec>>();
}

PairSpec Pipeline::FindPair(int victim, const std::string& relation) {
  for (const PairSpec& p : Pairs()) {
    if (p.victim == victim && p.relation == relation) return p;
  }
  throw ConfigError("no " + relation + "-class pair for victim " + std::to_string(victim) +
                    " in targets.json");
}

json Pipeline::TrainHeaders() {
  const Encoder& es = GetEncoder(EncoderRole::kTarget);
  const auto renderer = GetRenderer(EncoderRole::kTarget);
  const FrameTiming ft = ResolveTiming(cfg_.timing, es.frontend());
  const int64_t samples = es.frontend().NumSamples(ft.header);
  const BandBounds bounds = Bounds(EncoderRole::kTarget);
  json summary = json::array();
  std::vector<std::string> artifacts;
  for (const PairSpec& pair : Pairs()) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<Waveform> clips;
    for (const Waveform& w : SpeakerClips(pair.victim, Split::kTrain)) {
      const Waveform t = OnsetTrim(w);
      if (t.size() >= samples) clips.push_back(Slice(t, 0, samples));
    }
    AttackTrace trace;
    AttackConfig acfg = cfg_.attack;
    acfg.seed = MixSeed(cfg_.attack.seed, static_cast<uint64_t>(pair.victim * 1000 + pair.target));
    Header h = TrainHeader(es, *renderer, clips, SpeakerEmbedding(EncoderRole::kTarget, pair.target),
                           SpeakerEmbedding(EncoderRole::kTarget, pair.victim), acfg, bounds, &trace);
    h.victim_id = pair.victim;
    h.target_id = pair.target;
    h.meta["relation"] = pair.relation;
    const std::string dir = ArtifactDir(pair);
    fs::create_directories(run_.Path(dir));
    SaveHeader(run_.Path(dir + "/header.ckpt"), h);
    WriteText(run_.Path(dir + "/header_trace.csv"), trace.ToCsv());
    artifacts.push_back(dir + "/header.ckpt");
    artifacts.push_back(dir + "/header_trace.csv");
    summary.push_back({{"pair", pair},
                       {"clips", clips.size()},
                       {"initial_loss", trace.loss.front()},
                       {"final_loss", trace.loss.back()},
                       {"seconds", Seconds(t0)}});
    LOG(INFO) << "header " << pair.Key() << " loss " << trace.loss.front() << " -> " << trace.loss.back();
  }
  run_.Record("train-header", hash_, artifacts, summary);
  return summary;
}

json Pipeline::TrainPredictors() {
  const Encoder& es = GetEncoder(EncoderRole::kTarget);
  const auto renderer = GetRenderer(EncoderRole::kTarget);
  const BandBounds bounds = Bounds(EncoderRole::kTarget);
  const double min_seconds = cfg_.predictor.min_clip_seconds;
  json summary = json::array();
  std::vector<std::string> artifacts;
  for (const PairSpec& pair : Pairs()) {
    const std::string dir = ArtifactDir(pair);
    const Header h = LoadHeader(run_.Require(dir + "/header.ckpt", "train-header"));
    auto collect = [&](Split split) {
      std::vector<Waveform> out;
      for (const Waveform& w : SpeakerClips(pair.victim, split)) {
        Waveform t = OnsetTrim(w);
        if (t.duration() >= min_seconds) out.push_back(std::move(t));
      }
      return out;
    };
    const std::vector<Waveform> train = collect(Split::kTrain), val = collect(Split::kValidation);
    if (train.empty() || val.empty()) {
      throw ConfigError("victim " + std::to_string(pair.victim) + " has no clips of at least " +
                        std::to_string(min_seconds) + " s after onset trimming");
    }
    PredictorTrainOptions opt = cfg_.predictor.training;
    opt.seed = MixSeed(opt.seed, static_cast<uint64_t>(pair.victim * 1000 + pair.target));
    PredictorReport report;
    const Predictor p = TrainPredictor(es, *renderer, train, val, h.delta,
                                       SpeakerEmbedding(EncoderRole::kTarget, pair.target),
                                       SpeakerEmbedding(EncoderRole::kTarget, pair.victim), bounds,
                                       DeskPredictorConfig(es.frontend(), cfg_.timing), cfg_.timing, opt, &report);
    p.Save(run_.Path(dir + "/predictor.ckpt"), {{"victim", pair.victim}, {"target", pair.target}});
    WriteText(run_.Path(dir + "/predictor.json"), json(report).dump(2) + "\n");
    artifacts.push_back(dir + "/predictor.ckpt");
    artifacts.push_back(dir + "/predictor.json");
    summary.push_back({{"pair", pair},
                       {"train_clips", train.size()},
                       {"validation_clips", val.size()},
                       {"initial_val_loss", report.initial_val_loss},
                       {"final_val_loss", report.val_loss.empty() ? 0.0 : report.val_loss.back()},
                       {"median_val_similarity", report.median_val_similarity},
                       {"seconds", report.seconds}});
  }
  run_.Record("train-predictor", hash_, artifacts, summary);
  return summary;
}

StreamArtifacts Pipeline::LoadStreamArtifacts(const PairSpec& pair) {
  const std::string dir = ArtifactDir(pair);
  const Header h = LoadHeader(run_.Require(dir + "/header.ckpt", "train-header"));
  Predictor predictor = Predictor::Load(run_.Require(dir + "/predictor.ckpt", "train-predictor"));
  // Artifacts follow the current bounds, so an epsilon override takes effect
  // without retraining (epsilon 0 makes protection a no-op).
  const BandBounds bounds = Bounds(EncoderRole::kTarget);
  Tensor header = h.delta;
  bounds.Project(header);
  predictor.SetOutputBounds(bounds);
  return StreamArtifacts{std::make_shared<const Predictor>(std::move(predictor)),
                         header,
                         GetRenderer(EncoderRole::kTarget),
                         cfg_.timing,
                         bounds,
                         cfg_.attack.epsilon_periodic * DynamicRange(EncoderRole::kTarget)};
}

StreamOptions Pipeline::StreamOptionsFromConfig() const {
  StreamOptions o;
  o.onset = cfg_.stream.onset;
  o.enforce_deadlines = cfg_.stream.enforce_deadlines;
  return o;
}

// ---------------------------------------------------------------------------
// Evaluation.

namespace {

const std::vector<std::string>& Conditions() {
  static const std::vector<std::string> c = {"raw", "random", "periodic", "pgd", "vsmask"};
  return c;
}

void ParallelFor(size_t n, int workers, const std::function<void(size_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (int w = 0; w < std::min<int>(workers, static_cast<int>(n)); ++w) {
    pool.emplace_back([&] {
      for (size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

double Mean(const std::vector<double>& v) {
  if (v.empty()) return std::nan("");
  double s = 0.0;
  for (double x : v) s += x;
  return s / v.size();
}

double Median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double Quantile(std::vector<double> v, double q) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  return v[static_cast<size_t>(std::ceil(q * (v.size() - 1)))];
}

double FractionBelow(const std::vector<double>& v, double k) {
  if (v.empty()) return std::nan("");
  return static_cast<double>(std::count_if(v.begin(), v.end(), [&](double x) { return x <= k; })) / v.size();
}

std::string Fmt(double v, int digits = 4) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

double MaxBandExcess(const std::array<double, 3>& band_max, const BandBounds& b) {
  double e = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < 3; ++i) e = std::max(e, band_max[i] - b.band(static_cast<Band>(i)));
  return e;
}

// Shared read-only state of one evaluation.
struct EvalContext {
  const RunConfig* cfg = nullptr;
  const Corpus* corpus = nullptr;
  const Encoder* es = nullptr;
  const Encoder* alt = nullptr;  // null without cross-model evaluation
  std::shared_ptr<const GainRenderer> renderer, alt_renderer;
  const ToyVc* vc = nullptr;
  const ToyVc* alt_vc = nullptr;
  const Verifier* verifier = nullptr;
  std::map<int, Tensor> verifier_refs;  // speaker -> verifier reference
  std::map<int, Tensor> es_refs;        // speaker -> E_s mean embedding
  std::map<int, Tensor> alt_refs;       // speaker -> alternate mean embedding
  double range = 0.0, alt_range = 0.0;
  FrameTiming ft;
};

UtteranceSpec ContentFor(const EvalConfig& e, size_t clip) {
  return SampleUtterance(MixSeed(e.content_seed, clip), e.content_min_seconds, e.content_max_seconds);
}

struct Score {
  double clone = 0.0;  // verifier similarity of the toy clone to the victim
  double es = 0.0;     // E_s similarity to the victim's mean embedding
  double pitch = 0.0;  // regressed pitch of the clone
};

Score ScoreWith(const ToyVc& vc, const Verifier& verifier, const Waveform& reference,
                const Tensor& victim_verifier_ref, const Tensor& victim_es_ref, const UtteranceSpec& content) {
  const Tensor e = vc.Embed(reference);
  const ToySpeakerSpec spec = vc.Regress(e);
  Score s;
  s.es = Similarity(e, victim_es_ref);
  s.pitch = spec.pitch_hz;
  s.clone = verifier.Score(Synthesize(spec, content, reference.sample_rate), victim_verifier_ref);
  return s;
}

json EvaluateClip(const EvalContext& ctx, const PairSpec& pair, const StreamArtifacts& art,
                const BandBounds& bounds, size_t clip, bool cross, std::vector<double>* inference) {
  const RunConfig& cfg = *ctx.cfg;
  const Waveform w = ctx.corpus->Audio(clip);
  const UtteranceSpec content = ContentFor(cfg.eval, clip);
  const SpectralFrontend& fe = ctx.es->frontend();
  const int hop = fe.config().hop;
  const int n_mels = fe.config().n_mels;
  const Tensor& vref = ctx.verifier_refs.at(pair.victim);
  const Tensor& eref = ctx.es_refs.at(pair.victim);

  std::map<std::string, Waveform> out;
  out["raw"] = w;
  const Tensor noise = RandomNoiseDelta(n_mels, fe.NumFrames(w.size()), cfg.attack.epsilon_noise * ctx.range,
                                        MixSeed(cfg.eval.noise_seed, clip));
  out["random"] = Waveform{ctx.renderer->Render(w.samples, noise), w.sample_rate};

  const int64_t onset = DetectOnset(w.samples, cfg.stream.onset, hop, w.sample_rate);
  if (onset >= 0) {
    const int cols = static_cast<int>((w.size() - onset) / hop) + 1;
    const Tensor periodic = PeriodicDelta(art.header, cols, cfg.attack.epsilon_periodic * ctx.range);
    out["periodic"] = Waveform{ctx.renderer->Render(w.samples, periodic, onset), w.sample_rate};
  } else {
    out["periodic"] = w;
  }

  AttackConfig acfg = cfg.attack;
  acfg.seed = MixSeed(cfg.attack.seed, clip);
  const PgdResult pgd = PgdOffline(*ctx.es, *ctx.renderer, w, ctx.es_refs.at(pair.target), eref, acfg, bounds);
  out["pgd"] = Waveform{ctx.renderer->Render(w.samples, pgd.delta), w.sample_rate};

  StreamOptions sopt;
  sopt.onset = cfg.stream.onset;
  sopt.enforce_deadlines = cfg.stream.enforce_deadlines;
  const ProtectResult prot = ProtectWave(w, art, sopt);
  out["vsmask"] = prot.output;

  json rec = {{"pair", pair}, {"clip", clip}, {"onset", onset}, {"duration", w.duration()}};
  for (const std::string& c : Conditions()) {
    const Waveform& x = out.at(c);
    const Score s = ScoreWith(*ctx.vc, *ctx.verifier, x, vref, eref, content);
    json& r = rec["conditions"][c];
    r = {{"similarity", s.clone}, {"es_similarity", s.es}, {"pitch", s.pitch},
         {"stoi", c == "raw" ? 1.0 : StoiProxy(w, x)}};
    if (c != "raw") r["band_fraction"] = BandEnergyFraction(w, x);
    if (cfg.eval.transforms && (c == "raw" || c == "pgd" || c == "vsmask")) {
      for (Transform t : AdaptiveTransforms()) {
        const Waveform y = ApplyTransform(t, x);
        r["transforms"][TransformName(t)] = ScoreWith(*ctx.vc, *ctx.verifier, y, vref, eref, content).clone;
        if (c == "raw") r["transform_stoi"][TransformName(t)] = StoiProxy(w, y);
      }
    }
    if (cross && c != "random" && c != "periodic") {
      r["alternate_similarity"] =
          ScoreWith(*ctx.alt_vc, *ctx.verifier, x, vref, ctx.alt_refs.at(pair.victim), content).clone;
    }
  }
  rec["pgd"] = {{"initial_loss", pgd.initial_loss},
                {"final_loss", pgd.final_loss},
                {"band_excess", MaxBandExcess(bounds.BandMax(pgd.delta), bounds)}};

  // Streaming schedule checks.
  const int64_t required_margin = static_cast<int64_t>(ctx.ft.delay - 1) * hop;
  bool gapless = !prot.onsets.empty() && !prot.events.empty() && prot.events.front().start == prot.onsets.front();
  int64_t min_margin = std::numeric_limits<int64_t>::max();
  double band_excess = -std::numeric_limits<double>::infinity();
  int misses = 0, predicted = 0;
  for (size_t i = 0; i < prot.events.size(); ++i) {
    const ChunkEvent& e = prot.events[i];
    if (i > 0) {
      const ChunkEvent& p = prot.events[i - 1];
      const bool new_onset = std::find(prot.onsets.begin(), prot.onsets.end(), e.start) != prot.onsets.end();
      if (!new_onset && e.start != p.start + p.length) gapless = false;
      if (e.start < p.start + p.length) gapless = false;
    }
    if (e.window_end >= 0) min_margin = std::min(min_margin, e.start - e.window_end);
    band_excess = std::max(band_excess, MaxBandExcess(e.band_max, bounds));
    misses += e.missed;
    predicted += e.source == ChunkSource::kPredicted;
    if (e.source != ChunkSource::kHeader) inference->push_back(e.inference_seconds);
  }
  rec["stream"] = {{"onsets", prot.onsets.size()},
                   {"chunks", prot.events.size()},
                   {"predicted", predicted},
                   {"misses", misses},
                   {"gapless", gapless},
                   {"min_margin", min_margin == std::numeric_limits<int64_t>::max() ? -1 : min_margin},
                   {"required_margin", required_margin},
                   {"band_excess", band_excess}};
  return rec;
}

}  // namespace

EvalReport Pipeline::Evaluate(int workers) {
  const auto t_start = std::chrono::steady_clock::now();
  const EvalConfig& ec = cfg_.eval;
  const Corpus& corpus = GetCorpus();
  const std::vector<PairSpec> pairs = Pairs();

  EvalContext ctx;
  ctx.cfg = &cfg_;
  ctx.corpus = &corpus;
  ctx.es = &GetEncoder(EncoderRole::kTarget);
  ctx.renderer = GetRenderer(EncoderRole::kTarget);
  ctx.range = DynamicRange(EncoderRole::kTarget);
  ctx.ft = ResolveTiming(cfg_.timing, ctx.es->frontend());
  const Verifier verifier(Encoder::Load(run_.Require(EncoderFile(EncoderRole::kVerifier), "train-encoder --role verifier")));
  const Encoder& verifier_encoder = GetEncoder(EncoderRole::kVerifier);
  ctx.verifier = &verifier;
  const ToyVc vc = ToyVc::Train(*ctx.es, corpus, Split::kTrain, ec.vc_temperature);
  ctx.vc = &vc;
  ToyVc alt_vc;
  if (ec.cross_model) {
    ctx.alt = &GetEncoder(EncoderRole::kAlternate);
    ctx.alt_renderer = GetRenderer(EncoderRole::kAlternate);
    ctx.alt_range = DynamicRange(EncoderRole::kAlternate);
    alt_vc = ToyVc::Train(*ctx.alt, corpus, Split::kTrain, ec.vc_temperature);
    ctx.alt_vc = &alt_vc;
  }

  // Speakers scored by header universality: the pair speakers plus the first
  // non-victim speakers by id.
  std::set<int> speakers;
  std::map<std::string, std::vector<int>> cross_speakers;
  for (const PairSpec& p : pairs) {
    speakers.insert(p.victim);
    speakers.insert(p.target);
    std::vector<int>& cs = cross_speakers[p.Key()];
    for (const auto& s : corpus.speakers) {
      if (static_cast<int>(cs.size()) >= ec.header_cross_speakers) break;
      if (s.speaker_id != p.victim && s.speaker_id != p.target) cs.push_back(s.speaker_id);
    }
    speakers.insert(cs.begin(), cs.end());
  }
  for (int s : speakers) {
    ctx.verifier_refs[s] = MeanEmbedding(verifier_encoder, SpeakerClips(s, Split::kTrain));
    ctx.es_refs[s] = SpeakerEmbedding(EncoderRole::kTarget, s);
    if (ec.cross_model) ctx.alt_refs[s] = SpeakerEmbedding(EncoderRole::kAlternate, s);
  }

  std::map<std::string, StreamArtifacts> artifacts;
  for (const PairSpec& p : pairs) artifacts.emplace(p.Key(), LoadStreamArtifacts(p));
  const BandBounds bounds = Bounds(EncoderRole::kTarget);
  const BandBounds flat_bounds = Bounds(EncoderRole::kTarget, BandWeights::Flat());

  auto test_clips = [&](int speaker, int limit) {
    std::vector<size_t> c = corpus.ClipsOf(speaker, Split::kTest);
    if (static_cast<int>(c.size()) > limit) c.resize(limit);
    return c;
  };

  // Main per-clip jobs.
  struct ClipJob {
    PairSpec pair;
    size_t clip;
    bool cross;
  };
  std::vector<ClipJob> jobs;
  for (const PairSpec& p : pairs) {
    const std::vector<size_t> clips = test_clips(p.victim, ec.max_clips);
    for (size_t i = 0; i < clips.size(); ++i) {
      jobs.push_back({p, clips[i], ec.cross_model && p.relation == "inter" && static_cast<int>(i) < ec.cross_model_clips});
    }
  }
  std::vector<json> records(jobs.size());
  std::vector<std::vector<double>> inference(jobs.size());
  const auto t_clips = std::chrono::steady_clock::now();
  ParallelFor(jobs.size(), workers, [&](size_t i) {
    const ClipJob& j = jobs[i];
    records[i] = EvaluateClip(ctx, j.pair, artifacts.at(j.pair.Key()), bounds, j.clip, j.cross, &inference[i]);
    LOG(INFO) << "evaluated " << j.pair.Key() << " clip " << j.clip;
  });
  const double clip_seconds = Seconds(t_clips);

  // Header universality: onset-trimmed clips truncated to the header span.
  struct HeaderJob {
    PairSpec pair;
    int speaker;
    size_t clip;
  };
  std::vector<HeaderJob> hjobs;
  for (const PairSpec& p : pairs) {
    for (size_t c : test_clips(p.victim, ec.max_clips)) hjobs.push_back({p, p.victim, c});
    for (int s : cross_speakers[p.Key()]) {
      for (size_t c : test_clips(s, ec.header_cross_clips)) hjobs.push_back({p, s, c});
    }
  }
  const int64_t header_samples = ctx.es->frontend().NumSamples(ctx.ft.header);
  std::vector<json> hrecords(hjobs.size());
  ParallelFor(hjobs.size(), workers, [&](size_t i) {
    const HeaderJob& j = hjobs[i];
    const Waveform trimmed = Slice(OnsetTrim(corpus.Audio(j.clip)), 0, header_samples);
    const Tensor& header = artifacts.at(j.pair.Key()).header;
    const Waveform prot{ctx.renderer->Render(trimmed.samples, header), trimmed.sample_rate};
    const UtteranceSpec content = ContentFor(ec, j.clip);
    const Tensor& vref = ctx.verifier_refs.at(j.speaker);
    const Tensor& eref = ctx.es_refs.at(j.speaker);
    hrecords[i] = {{"pair", j.pair},
                   {"speaker", j.speaker},
                   {"clip", j.clip},
                   {"seconds", trimmed.duration()},
                   {"raw", ScoreWith(vc, verifier, trimmed, vref, eref, content).clone},
                   {"protected", ScoreWith(vc, verifier, prot, vref, eref, content).clone},
                   {"band_excess", MaxBandExcess(bounds.BandMax(header), bounds)}};
  });

  // Band weighting: re-attack the first clips of the first inter-class pair with flat weights.
  std::vector<json> brecords;
  std::vector<ClipJob> bjobs;
  for (const ClipJob& j : jobs) {
    if (j.pair.relation == "inter" && j.pair.victim == pairs.front().victim &&
        static_cast<int>(bjobs.size()) < ec.band_clips) {
      bjobs.push_back(j);
    }
  }
  brecords.resize(bjobs.size());
  ParallelFor(bjobs.size(), workers, [&](size_t i) {
    const ClipJob& j = bjobs[i];
    const Waveform w = corpus.Audio(j.clip);
    AttackConfig acfg = cfg_.attack;
    acfg.weights = BandWeights::Flat();
    acfg.seed = MixSeed(cfg_.attack.seed, j.clip);
    const PgdResult r = PgdOffline(*ctx.es, *ctx.renderer, w, ctx.es_refs.at(j.pair.target),
                                   ctx.es_refs.at(j.pair.victim), acfg, flat_bounds);
    const Waveform prot{ctx.renderer->Render(w.samples, r.delta), w.sample_rate};
    double on_mid = 0.0;
    for (size_t k = 0; k < jobs.size(); ++k) {
      if (jobs[k].clip == j.clip && jobs[k].pair == j.pair) on_mid = records[k]["conditions"]["pgd"]["band_fraction"][1];
    }
    brecords[i] = {{"pair", j.pair}, {"clip", j.clip}, {"mid_fraction_on", on_mid},
                   {"mid_fraction_off", BandEnergyFraction(w, prot)[1]}};
  });

  // Cross-model: PGD against the alternate encoder, scored through both toy VCs.
  std::vector<json> xrecords;
  if (ec.cross_model) {
    std::vector<ClipJob> xjobs;
    for (const ClipJob& j : jobs) {
      if (j.cross) xjobs.push_back(j);
    }
    const BandBounds alt_bounds = Bounds(EncoderRole::kAlternate);
    xrecords.resize(xjobs.size());
    ParallelFor(xjobs.size(), workers, [&](size_t i) {
      const ClipJob& j = xjobs[i];
      const Waveform w = corpus.Audio(j.clip);
      AttackConfig acfg = cfg_.attack;
      acfg.iterations = ec.cross_model_iterations;
      acfg.seed = MixSeed(cfg_.attack.seed, j.clip);
      const PgdResult r = PgdOffline(*ctx.alt, *ctx.alt_renderer, w, ctx.alt_refs.at(j.pair.target),
                                     ctx.alt_refs.at(j.pair.victim), acfg, alt_bounds);
      const Waveform prot{ctx.alt_renderer->Render(w.samples, r.delta), w.sample_rate};
      const UtteranceSpec content = ContentFor(ec, j.clip);
      const Tensor& vref = ctx.verifier_refs.at(j.pair.victim);
      xrecords[i] = {
          {"pair", j.pair},
          {"clip", j.clip},
          {"initial_loss", r.initial_loss},
          {"final_loss", r.final_loss},
          {"same_model", ScoreWith(alt_vc, verifier, prot, vref, ctx.alt_refs.at(j.pair.victim), content).clone},
          {"transfer", ScoreWith(vc, verifier, prot, vref, ctx.es_refs.at(j.pair.victim), content).clone}};
    });
  }

  // Aggregation.
  const double k = ec.k;
  EvalReport report;
  json& res = report.results;
  res["k"] = k;
  res["pairs"] = pairs;
  res["records"] = records;
  res["header_records"] = hrecords;
  res["band_records"] = brecords;
  res["cross_model_records"] = xrecords;

  auto pitch_toward_target = [&](const json& rec, const std::string& cond) {
    const PairSpec p = rec["pair"].get<PairSpec>();
    const double pitch = rec["conditions"][cond]["pitch"];
    const double dv = std::abs(std::log(pitch / corpus.Speaker(p.victim).pitch_hz));
    const double dt = std::abs(std::log(pitch / corpus.Speaker(p.target).pitch_hz));
    return dt < dv;
  };

  Table cond_table{"conditions",
                   {"condition", "relation", "clips", "mean_similarity", "median_similarity", "asr",
                    "mean_stoi", "stoi_ge_0.75", "mean_es_similarity", "pitch_toward_target"},
                   {}};
  json cond_json = json::array();
  for (const std::string& c : Conditions()) {
    for (const std::string rel : {"intra", "inter", "all"}) {
      std::vector<double> sim, stoi, es;
      int toward = 0;
      for (const json& r : records) {
        if (rel != "all" && r["pair"]["relation"] != rel) continue;
        const json& x = r["conditions"][c];
        sim.push_back(x["similarity"]);
        stoi.push_back(x["stoi"]);
        es.push_back(x["es_similarity"]);
        toward += pitch_toward_target(r, c);
      }
      if (sim.empty()) continue;
      const double stoi_ok = static_cast<double>(std::count_if(stoi.begin(), stoi.end(), [](double s) { return s >= 0.75; })) / stoi.size();
      const double toward_frac = static_cast<double>(toward) / sim.size();
      json row = {{"condition", c}, {"relation", rel}, {"clips", sim.size()}, {"mean_similarity", Mean(sim)},
                  {"median_similarity", Median(sim)}, {"asr", AsrRate(sim, k)}, {"mean_stoi", Mean(stoi)},
                  {"stoi_ge_075", stoi_ok}, {"mean_es_similarity", Mean(es)}, {"pitch_toward_target", toward_frac}};
      cond_json.push_back(row);
      cond_table.rows.push_back({c, rel, std::to_string(sim.size()), Fmt(Mean(sim)), Fmt(Median(sim)),
                                 Fmt(AsrRate(sim, k)), Fmt(Mean(stoi)), Fmt(stoi_ok), Fmt(Mean(es)),
                                 Fmt(toward_frac)});
    }
  }
  res["conditions"] = cond_json;
  report.tables.push_back(cond_table);

  // Offline PGD summary.
  {
    std::vector<double> sim;
    int decreased = 0;
    double excess = -std::numeric_limits<double>::infinity();
    for (const json& r : records) {
      sim.push_back(r["conditions"]["pgd"]["similarity"]);
      decreased += r["pgd"]["final_loss"].get<double>() < r["pgd"]["initial_loss"].get<double>();
      excess = std::max(excess, r["pgd"]["band_excess"].get<double>());
    }
    res["pgd"] = {{"clips", sim.size()}, {"below_k", FractionBelow(sim, k)},
                  {"loss_decreased", sim.empty() ? 0.0 : static_cast<double>(decreased) / sim.size()},
                  {"band_excess", excess}};
    report.tables.push_back({"pgd",
                             {"clips", "fraction_below_k", "fraction_loss_decreased", "max_band_excess"},
                             {{std::to_string(sim.size()), Fmt(FractionBelow(sim, k)),
                               Fmt(res["pgd"]["loss_decreased"].get<double>()), Fmt(excess, 12)}}});
  }

  // Transforms.
  if (ec.transforms) {
    Table t{"transforms",
            {"transform", "condition", "median_similarity", "asr", "clean_stoi"},
            {}};
    json tj = json::array();
    for (Transform tr : AdaptiveTransforms()) {
      const std::string name = TransformName(tr);
      std::vector<double> clean_stoi;
      for (const json& r : records) clean_stoi.push_back(r["conditions"]["raw"]["transform_stoi"][name]);
      for (const std::string c : {"raw", "pgd", "vsmask"}) {
        std::vector<double> sim;
        for (const json& r : records) sim.push_back(r["conditions"][c]["transforms"][name]);
        tj.push_back({{"transform", name}, {"condition", c}, {"median_similarity", Median(sim)},
                      {"asr", AsrRate(sim, k)}, {"clean_stoi", Mean(clean_stoi)}});
        t.rows.push_back({name, c, Fmt(Median(sim)), Fmt(AsrRate(sim, k)), Fmt(Mean(clean_stoi))});
      }
    }
    res["transforms"] = tj;
    report.tables.push_back(t);
  }

  // Header universality.
  {
    Table t{"header",
            {"pair", "own_clips", "own_below_k", "own_median_drop", "cross_clips", "cross_median_drop"},
            {}};
    json hj = json::array();
    std::vector<double> all_own;
    double excess = -std::numeric_limits<double>::infinity();
    for (const PairSpec& p : pairs) {
      std::vector<double> own, own_drop, cross_drop;
      for (const json& r : hrecords) {
        if (r["pair"].get<PairSpec>() != p) continue;
        excess = std::max(excess, r["band_excess"].get<double>());
        const double drop = r["raw"].get<double>() - r["protected"].get<double>();
        if (r["speaker"] == p.victim) {
          own.push_back(r["protected"]);
          own_drop.push_back(drop);
        } else {
          cross_drop.push_back(drop);
        }
      }
      all_own.insert(all_own.end(), own.begin(), own.end());
      hj.push_back({{"pair", p}, {"own_clips", own.size()}, {"own_below_k", FractionBelow(own, k)},
                    {"own_median_drop", Median(own_drop)}, {"cross_clips", cross_drop.size()},
                    {"cross_median_drop", Median(cross_drop)}});
      t.rows.push_back({p.Key(), std::to_string(own.size()), Fmt(FractionBelow(own, k)), Fmt(Median(own_drop)),
                        std::to_string(cross_drop.size()), Fmt(Median(cross_drop))});
    }
    res["header"] = {{"pairs", hj}, {"own_below_k", FractionBelow(all_own, k)}, {"band_excess", excess},
                     {"max_seconds", ctx.es->frontend().NumSamples(ctx.ft.header) /
                                         static_cast<double>(corpus.sample_rate)}};
    report.tables.push_back(t);
  }

  // Streaming schedule.
  {
    Table t{"stream",
            {"pair", "clips", "chunks", "predicted", "misses", "gapless", "min_margin_samples",
             "required_margin_samples", "max_band_excess"},
            {}};
    json sj = json::array();
    int total_misses = 0;
    bool all_gapless = true;
    int64_t min_margin = std::numeric_limits<int64_t>::max();
    double excess = -std::numeric_limits<double>::infinity();
    int64_t required = 0;
    for (const PairSpec& p : pairs) {
      int clips = 0, chunks = 0, predicted = 0, misses = 0;
      bool gapless = true;
      int64_t margin = std::numeric_limits<int64_t>::max();
      double ex = -std::numeric_limits<double>::infinity();
      for (const json& r : records) {
        if (r["pair"].get<PairSpec>() != p) continue;
        const json& s = r["stream"];
        ++clips;
        chunks += s["chunks"].get<int>();
        predicted += s["predicted"].get<int>();
        misses += s["misses"].get<int>();
        gapless = gapless && s["gapless"].get<bool>();
        if (s["min_margin"].get<int64_t>() >= 0) margin = std::min(margin, s["min_margin"].get<int64_t>());
        ex = std::max(ex, s["band_excess"].get<double>());
        required = s["required_margin"];
      }
      total_misses += misses;
      all_gapless = all_gapless && gapless;
      min_margin = std::min(min_margin, margin);
      excess = std::max(excess, ex);
      const int64_t m = margin == std::numeric_limits<int64_t>::max() ? -1 : margin;
      sj.push_back({{"pair", p}, {"clips", clips}, {"chunks", chunks}, {"predicted", predicted},
                    {"misses", misses}, {"gapless", gapless}, {"min_margin", m}, {"band_excess", ex}});
      t.rows.push_back({p.Key(), std::to_string(clips), std::to_string(chunks), std::to_string(predicted),
                        std::to_string(misses), gapless ? "yes" : "no", std::to_string(m),
                        std::to_string(required), Fmt(ex, 12)});
    }
    res["stream"] = {{"pairs", sj},
                     {"misses", total_misses},
                     {"gapless", all_gapless},
                     {"min_margin", min_margin == std::numeric_limits<int64_t>::max() ? -1 : min_margin},
                     {"required_margin", required},
                     {"band_excess", excess}};
    report.tables.push_back(t);
  }

  // Band weighting.
  {
    std::vector<double> on, off;
    for (const json& r : brecords) {
      on.push_back(r["mid_fraction_on"]);
      off.push_back(r["mid_fraction_off"]);
    }
    res["band"] = {{"clips", on.size()}, {"mid_fraction_on", Mean(on)}, {"mid_fraction_off", Mean(off)}};
    report.tables.push_back({"band_weights",
                             {"clips", "mid_fraction_weights_on", "mid_fraction_weights_off"},
                             {{std::to_string(on.size()), Fmt(Mean(on)), Fmt(Mean(off))}}});
  }

  // Cross-model transfer. A is the target encoder, B the alternate encoder.
  if (ec.cross_model) {
    std::vector<double> raw_a, raw_b, aa, ab, bb, ba, vs_a, vs_b;
    for (const json& r : records) {
      const json& c = r["conditions"];
      if (!c["raw"].contains("alternate_similarity")) continue;
      raw_a.push_back(c["raw"]["similarity"]);
      raw_b.push_back(c["raw"]["alternate_similarity"]);
      aa.push_back(c["pgd"]["similarity"]);
      ab.push_back(c["pgd"]["alternate_similarity"]);
      vs_a.push_back(c["vsmask"]["similarity"]);
      vs_b.push_back(c["vsmask"]["alternate_similarity"]);
    }
    for (const json& r : xrecords) {
      bb.push_back(r["same_model"]);
      ba.push_back(r["transfer"]);
    }
    Table t{"cross_model", {"direction", "artifact", "clips", "same_model_asr", "transfer_asr", "raw_asr",
                            "same_model_mean", "transfer_mean", "raw_mean"}, {}};
    json xj = json::array();
    auto add = [&](const std::string& dir, const std::string& art, const std::vector<double>& same,
                   const std::vector<double>& transfer, const std::vector<double>& raw) {
      if (same.empty()) return;
      xj.push_back({{"direction", dir}, {"artifact", art}, {"clips", same.size()},
                    {"same_model_asr", AsrRate(same, k)}, {"transfer_asr", AsrRate(transfer, k)},
                    {"raw_asr", AsrRate(raw, k)}, {"same_model_mean", Mean(same)},
                    {"transfer_mean", Mean(transfer)}, {"raw_mean", Mean(raw)}});
      t.rows.push_back({dir, art, std::to_string(same.size()), Fmt(AsrRate(same, k)), Fmt(AsrRate(transfer, k)),
                        Fmt(AsrRate(raw, k)), Fmt(Mean(same)), Fmt(Mean(transfer)), Fmt(Mean(raw))});
    };
    add("A->B", "pgd", aa, ab, raw_b);
    add("A->B", "vsmask", vs_a, vs_b, raw_b);
    add("B->A", "pgd", bb, ba, raw_a);
    res["cross_model"] = xj;
    report.tables.push_back(t);
  }

  // Wall-clock measurements stay out of the deterministic results.
  std::vector<double> inf;
  for (const auto& v : inference) inf.insert(inf.end(), v.begin(), v.end());
  report.timing = {{"chunk_inferences", inf.size()},
                   {"inference_ms_mean", 1e3 * Mean(inf)},
                   {"inference_ms_p99", 1e3 * Quantile(inf, 0.99)},
                   {"inference_ms_max", inf.empty() ? 0.0 : 1e3 * *std::max_element(inf.begin(), inf.end())},
                   {"clip_jobs_seconds", clip_seconds},
                   {"workers", workers},
                   {"total_seconds", Seconds(t_start)}};
  return report;
}

std::vector<std::string> Pipeline::WriteReport(const EvalReport& report) const {
  std::vector<std::string> files = {"eval/report.json", "eval/tables.md"};
  json tables = json::array();
  for (const Table& t : report.tables) tables.push_back({{"name", t.name}, {"columns", t.columns}, {"rows", t.rows}});
  const json doc = {{"config_hash", hash_}, {"results", report.results}, {"timing", report.timing}, {"tables", tables}};
  WriteText(run_.Path("eval/report.json"), doc.dump(2) + "\n");
  std::string md;
  for (const Table& t : report.tables) {
    const std::string rel = "eval/" + t.name + ".csv";
    WriteText(run_.Path(rel), t.ToCsv());
    files.push_back(rel);
    md += t.ToMarkdown() + "\n";
  }
  WriteText(run_.Path("eval/tables.md"), md);
  json summary = report.timing;
  summary["tables"] = json::array();
  for (const Table& t : report.tables) summary["tables"].push_back(t.name);
  run_.Record("evaluate", hash_, files, summary);
  return files;
}

EvalReport Pipeline::LoadReport() const {
  const json doc = ReadJson(run_.Require("eval/report.json", "evaluate"));
  EvalReport r;
  r.results = doc.at("results");
  r.timing = doc.at("timing");
  for (const json& t : doc.at("tables")) {
    r.tables.push_back({t.at("name"), t.at("columns"), t.at("rows")});
  }
  return r;
}

}  // namespace predmask
