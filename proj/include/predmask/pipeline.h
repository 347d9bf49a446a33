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

// Run configuration, run directory bookkeeping and the pipeline stages that
// the command-line tool and the acceptance suite drive.

#ifndef PREDMASK_PIPELINE_H_
#define PREDMASK_PIPELINE_H_

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "predmask/attack.h"
#include "predmask/corpus.h"
#include "predmask/encoder.h"
#include "predmask/predictor.h"
#include "predmask/render.h"
#include "predmask/stream.h"

namespace predmask {

enum class EncoderRole { kTarget, kAlternate, kVerifier };
const char* EncoderRoleName(EncoderRole role);
EncoderRole ParseEncoderRole(const std::string& name);

struct EncoderStageConfig {
  EncoderConfig model;
  EncoderTrainOptions training;
};

struct StreamStageConfig {
  OnsetConfig onset;
  bool enforce_deadlines = true;
};

struct PredictorStageConfig {
  PredictorTrainOptions training;
  double min_clip_seconds = 3.0;  // after onset trimming
};

struct EvalConfig {
  double k = 0.25;
  std::vector<int> victims;  // empty: lowest-id low-pitch and high-pitch speakers
  int max_clips = 6;         // test clips per victim
  double vc_temperature = 0.05;
  uint64_t content_seed = 12345;
  double content_min_seconds = 3.0;
  double content_max_seconds = 3.5;
  uint64_t noise_seed = 11;
  bool transforms = true;
  int header_cross_speakers = 4;  // non-victim speakers scored with each header
  int header_cross_clips = 2;     // test clips per such speaker
  int band_clips = 2;             // clips re-attacked with flat band weights
  bool cross_model = true;
  int cross_model_clips = 3;      // per victim, inter-class pair only
  int cross_model_iterations = 300;  // PGD iterations against the alternate encoder
};

struct RunConfig {
  CorpusOptions corpus;
  EncoderStageConfig target{TargetEncoderConfig(), {}};
  EncoderStageConfig alternate{AlternateEncoderConfig(), {}};
  EncoderStageConfig verifier{VerifierEncoderConfig(), {}};
  AttackConfig attack;
  PredictorTiming timing;
  PredictorStageConfig predictor;
  StreamStageConfig stream;
  EvalConfig eval;

  RunConfig();
  void Validate() const;
  const EncoderStageConfig& EncoderStage(EncoderRole role) const;
};

nlohmann::json ToJson(const RunConfig& cfg);

// Merges `overlay` into the defaults. Unknown keys, type mismatches and
// invalid values raise ConfigError.
RunConfig ParseRunConfig(const nlohmann::json& overlay);
RunConfig LoadRunConfig(const std::string& path);

// Applies "dotted.key=value" to a config document. The value is parsed as JSON
// when possible and taken as a string otherwise. The key must already exist.
void ApplyOverride(nlohmann::json& doc, const std::string& assignment);

std::string ConfigHash(const RunConfig& cfg);

// Artifact directory with a manifest recording the config hash of the run and
// a version and content hash for every artifact written by a stage.
class RunDir {
 public:
  explicit RunDir(std::string root);

  const std::string& root() const { return root_; }
  std::string Path(const std::string& relative) const;
  bool Exists(const std::string& relative) const;
  // Throws MissingArtifactError naming the stage that produces the artifact.
  std::string Require(const std::string& relative, const std::string& producer) const;

  nlohmann::json Manifest() const;
  void Record(const std::string& stage, const std::string& config_hash,
              const std::vector<std::string>& artifacts, const nlohmann::json& summary) const;

 private:
  std::string root_;
};

struct PairSpec {
  int victim = 0;
  int target = 0;
  std::string relation;  // "intra" or "inter"

  std::string Key() const;
  bool operator==(const PairSpec&) const = default;
};

void to_json(nlohmann::json& j, const PairSpec& p);
void from_json(const nlohmann::json& j, PairSpec& p);

// Rectangular table rendered as CSV and Markdown.
struct Table {
  std::string name;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  std::string ToCsv() const;
  std::string ToMarkdown() const;
};

struct EvalReport {
  nlohmann::json results;  // deterministic under fixed config and seeds
  nlohmann::json timing;   // wall-clock measurements
  std::vector<Table> tables;
};

class Pipeline {
 public:
  Pipeline(RunConfig config, std::string run_dir);
  ~Pipeline();

  const RunConfig& config() const { return cfg_; }
  const RunDir& run() const { return run_; }
  const std::string& config_hash() const { return hash_; }

  nlohmann::json GenCorpus();
  nlohmann::json TrainEncoder(EncoderRole role);
  nlohmann::json SelectTargets();
  nlohmann::json TrainHeaders();
  nlohmann::json TrainPredictors();
  EvalReport Evaluate(int workers = 1);
  // Writes report.json and the tables (CSV and Markdown) under eval/.
  std::vector<std::string> WriteReport(const EvalReport& report) const;
  EvalReport LoadReport() const;

  std::vector<PairSpec> Pairs();
  // The victim's inter-class pair unless `relation` names another.
  PairSpec FindPair(int victim, const std::string& relation = "inter");
  StreamArtifacts LoadStreamArtifacts(const PairSpec& pair);
  StreamOptions StreamOptionsFromConfig() const;

  const Corpus& GetCorpus();
  const Encoder& GetEncoder(EncoderRole role);
  std::shared_ptr<const GainRenderer> GetRenderer(EncoderRole role);
  double DynamicRange(EncoderRole role);
  BandBounds Bounds(EncoderRole role, const BandWeights& weights);
  BandBounds Bounds(EncoderRole role) { return Bounds(role, cfg_.attack.weights); }

 private:
  struct Cache;
  std::string ArtifactDir(const PairSpec& pair) const;
  Waveform OnsetTrim(const Waveform& w) const;
  std::vector<Waveform> SpeakerClips(int speaker, Split split);
  Tensor SpeakerEmbedding(EncoderRole role, int speaker);

  RunConfig cfg_;
  RunDir run_;
  std::string hash_;
  std::unique_ptr<Cache> cache_;
};

}  // namespace predmask

#endif  // PREDMASK_PIPELINE_H_
