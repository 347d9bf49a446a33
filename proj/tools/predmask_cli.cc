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

// Command-line entry point: corpus generation, training, protection,
// streaming and evaluation over one run directory.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <glog/logging.h>
#include <json.hpp>

#include "predmask/error.h"
#include "predmask/pipeline.h"
#include "predmask/stream.h"
#include "predmask/wav_io.h"

namespace {

using nlohmann::json;
using namespace predmask;

enum ExitCode { kOk = 0, kConfigError = 2, kMissingArtifact = 3, kRuntimeFailure = 4 };

struct Globals {
  std::string config_path;
  std::string run_dir = "run";
  std::vector<std::string> overrides;
};

RunConfig ResolveConfig(const Globals& g) {
  json doc = ToJson(RunConfig());
  if (!g.config_path.empty()) doc = ToJson(LoadRunConfig(g.config_path));
  for (const std::string& o : g.overrides) ApplyOverride(doc, o);
  return ParseRunConfig(doc);
}

void PrintSummary(const json& j) { std::cout << j.dump(2) << std::endl; }

void WriteSchedule(const std::string& path, const std::vector<ChunkEvent>& events) {
  if (path.empty()) return;
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os << ScheduleJsonl(events);
}

PairSpec ChoosePair(Pipeline& p, int victim, const std::string& relation) {
  if (victim >= 0) return p.FindPair(victim, relation);
  for (const PairSpec& pair : p.Pairs()) {
    if (pair.relation == relation) return pair;
  }
  throw ConfigError("targets.json has no " + relation + "-class pair");
}

int RunStream(Pipeline& p, const PairSpec& pair, int block, const std::string& schedule) {
  StreamRuntime rt(p.LoadStreamArtifacts(pair), p.StreamOptionsFromConfig());
  std::vector<int16_t> in(block), out;
  std::vector<double> x;
  while (true) {
    const size_t n = std::fread(in.data(), sizeof(int16_t), in.size(), stdin);
    if (n == 0) break;
    x.resize(n);
    for (size_t i = 0; i < n; ++i) x[i] = FromPcm16(in[i]);
    const std::vector<double> y = rt.Push(x);
    out.resize(y.size());
    for (size_t i = 0; i < y.size(); ++i) out[i] = ToPcm16(y[i]);
    if (std::fwrite(out.data(), sizeof(int16_t), out.size(), stdout) != out.size()) {
      throw Error("stream: write to standard output failed");
    }
    std::fflush(stdout);
    if (n < in.size()) break;
  }
  WriteSchedule(schedule, rt.events());
  LOG(INFO) << "stream: " << rt.events().size() << " chunks, " << rt.deadline_misses() << " deadline misses";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  google::InitGoogleLogging(argv[0]);
  FLAGS_logtostderr = true;

  CLI::App app{"Predictive speaker-embedding protection: training, protection and evaluation"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("-c,--config", g.config_path, "JSON run config; missing keys take defaults");
  app.add_option("-r,--run-dir", g.run_dir, "Run directory holding artifacts and the manifest");
  app.add_option("--set", g.overrides, "Config override key=value (repeatable), e.g. attack.epsilon=0");

  auto* print_config = app.add_subcommand("print-config", "Print the effective config as JSON");
  auto* gen = app.add_subcommand("gen-corpus", "Generate the toy speaker corpus");
  auto* train_enc = app.add_subcommand("train-encoder", "Train speaker encoders");
  std::string role = "all";
  train_enc->add_option("--role", role, "target, alternate, verifier or all")
      ->check(CLI::IsMember({"target", "alternate", "verifier", "all"}));
  auto* select = app.add_subcommand("select-target", "Choose intra- and inter-class targets per victim");
  auto* train_header = app.add_subcommand("train-header", "Train the universal header per pair");
  auto* train_pred = app.add_subcommand("train-predictor", "Train the chunk predictor per pair");

  auto* protect = app.add_subcommand("protect", "Protect a WAV file with the streaming runtime");
  std::string in_path, out_path, schedule_path, relation = "inter";
  int victim = -1, block = 160, workers = 1;
  protect->add_option("--in", in_path, "Input WAV")->required();
  protect->add_option("--out", out_path, "Output WAV")->required();
  protect->add_option("--victim", victim, "Victim speaker id (default: first pair)");
  protect->add_option("--relation", relation, "Target relation")->check(CLI::IsMember({"intra", "inter"}));
  protect->add_option("--schedule", schedule_path, "Write the chunk schedule as JSON lines");
  auto* stream = app.add_subcommand("stream", "Protect 16 kHz mono PCM16 from stdin to stdout");
  stream->add_option("--victim", victim, "Victim speaker id (default: first pair)");
  stream->add_option("--relation", relation, "Target relation")->check(CLI::IsMember({"intra", "inter"}));
  stream->add_option("--schedule", schedule_path, "Write the chunk schedule as JSON lines");
  stream->add_option("--block", block, "Samples read per block")->check(CLI::PositiveNumber);

  auto* evaluate = app.add_subcommand("evaluate", "Run the evaluation and write eval/report.json");
  evaluate->add_option("-j,--workers", workers, "Worker threads over clips")->check(CLI::PositiveNumber);
  auto* report = app.add_subcommand("report", "Render the stored evaluation tables");
  std::string report_dir;
  report->add_option("--out", report_dir, "Also write CSV tables into this directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    const RunConfig cfg = ResolveConfig(g);
    if (print_config->parsed()) {
      PrintSummary(ToJson(cfg));
      return kOk;
    }
    Pipeline p(cfg, g.run_dir);
    if (gen->parsed()) {
      PrintSummary(p.GenCorpus());
    } else if (train_enc->parsed()) {
      json out;
      for (const char* r : {"target", "alternate", "verifier"}) {
        if (role == "all" || role == r) out[r] = p.TrainEncoder(ParseEncoderRole(r));
      }
      PrintSummary(out);
    } else if (select->parsed()) {
      PrintSummary(p.SelectTargets());
    } else if (train_header->parsed()) {
      PrintSummary(p.TrainHeaders());
    } else if (train_pred->parsed()) {
      PrintSummary(p.TrainPredictors());
    } else if (protect->parsed()) {
      const PairSpec pair = ChoosePair(p, victim, relation);
      const StreamArtifacts art = p.LoadStreamArtifacts(pair);
      const Waveform in = ReadWav(in_path, cfg.corpus.sample_rate);
      const ProtectResult r = ProtectWave(in, art, p.StreamOptionsFromConfig());
      WriteWav(out_path, r.output);
      WriteSchedule(schedule_path, r.events);
      int misses = 0;
      for (const ChunkEvent& e : r.events) misses += e.missed;
      PrintSummary({{"pair", pair}, {"onsets", r.onsets}, {"chunks", r.events.size()}, {"misses", misses}});
    } else if (stream->parsed()) {
      return RunStream(p, ChoosePair(p, victim, relation), block, schedule_path);
    } else if (evaluate->parsed()) {
      const EvalReport r = p.Evaluate(workers);
      p.WriteReport(r);
      for (const Table& t : r.tables) std::cout << t.ToMarkdown() << "\n";
      PrintSummary(r.timing);
    } else if (report->parsed()) {
      const EvalReport r = p.LoadReport();
      for (const Table& t : r.tables) {
        std::cout << t.ToMarkdown() << "\n";
        if (!report_dir.empty()) {
          std::filesystem::create_directories(report_dir);
          std::ofstream(report_dir + "/" + t.name + ".csv") << t.ToCsv();
        }
      }
    }
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return kConfigError;
  } catch (const MissingArtifactError& e) {
    std::cerr << "missing artifact: " << e.what() << std::endl;
    return kMissingArtifact;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << std::endl;
    return kRuntimeFailure;
  }
}
