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

// End-to-end acceptance suite. Runs (or reuses) the full pipeline on the
// default config, then checks each acceptance criterion and prints one
// PASS/FAIL line per criterion. Exits nonzero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <glog/logging.h>
#include <json.hpp>

#include "predmask/corpus.h"
#include "predmask/encoder.h"
#include "predmask/error.h"
#include "predmask/eval.h"
#include "predmask/gradcheck.h"
#include "predmask/pipeline.h"
#include "predmask/predictor.h"
#include "predmask/random.h"
#include "predmask/spectral.h"

namespace {

using nlohmann::json;
using namespace predmask;
namespace fs = std::filesystem;

// Pinned tolerances and thresholds.
constexpr double kGradTolerance = 1e-4;
constexpr int kGradTrials = 50;
constexpr double kGradSeconds = 60.0;
constexpr int kSnrClips = 100;
constexpr double kSnrDb = 40.0;
constexpr int kMelClips = 20;
constexpr double kMelError = 0.1;
constexpr double kEncoderAccuracy = 0.95;
constexpr double kEncoderSeconds = 600.0;
constexpr double kPgdBelowK = 0.90;
constexpr double kHeaderBelowK = 0.85;
constexpr double kHeaderMaxSeconds = 1.65;
constexpr double kHeaderCrossRatio = 0.5;
constexpr double kParityGap = 0.1;
constexpr double kVsmaskMaxAsr = 0.05;
constexpr double kRandomMinAsr = 0.5;
constexpr double kInferenceP99Seconds = 0.4;
constexpr double kBandSlack = 1e-9;
constexpr double kStoiFloor = 0.75;
constexpr double kStoiFraction = 0.90;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string F(double v, int digits = 4) {
  std::ostringstream os;
  os.precision(digits);
  os << std::fixed << v;
  return os.str();
}

double Seconds(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

json ReadJson(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError("cannot open " + path);
  return json::parse(is);
}

// Runs every stage whose manifest entry does not match the current config
// hash, and every stage after it.
void EnsurePipeline(Pipeline& p, bool fresh) {
  const std::string hash = p.config_hash();
  auto done = [&](const std::string& stage) {
    const json m = p.run().Manifest();
    return m["stages"].contains(stage) && m["stages"][stage]["config_hash"] == hash;
  };
  // Once one stage reruns, every later stage reruns too.
  bool rerun = fresh;
  auto stage = [&](const std::string& name, const std::function<void()>& fn) {
    if (rerun || !done(name)) {
      rerun = true;
      const auto t0 = std::chrono::steady_clock::now();
      fn();
      std::cout << "stage " << name << " took " << F(Seconds(t0), 1) << " s" << std::endl;
    } else {
      std::cout << "reusing stage " << name << std::endl;
    }
  };
  stage("gen-corpus", [&] { p.GenCorpus(); });
  stage("train-encoder:target", [&] { p.TrainEncoder(EncoderRole::kTarget); });
  stage("train-encoder:alternate", [&] { p.TrainEncoder(EncoderRole::kAlternate); });
  stage("train-encoder:verifier", [&] { p.TrainEncoder(EncoderRole::kVerifier); });
  stage("select-target", [&] { p.SelectTargets(); });
  stage("train-header", [&] { p.TrainHeaders(); });
  stage("train-predictor", [&] { p.TrainPredictors(); });
  stage("evaluate", [&] { p.WriteReport(p.Evaluate(1)); });
}

// Criterion 1.
Outcome GradientChecks() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string worst_op;
  for (const std::string& op : GradCheckOps()) {
    const GradCheckResult r = RunGradCheck(op, kGradTrials);
    if (r.worst_error >= worst) {
      worst = r.worst_error;
      worst_op = op;
    }
  }
  const double s = Seconds(t0);
  std::ostringstream err;
  err << std::scientific << std::setprecision(2) << worst;
  return {worst < kGradTolerance && s < kGradSeconds,
          std::to_string(GradCheckOps().size()) + " op suites x " + std::to_string(kGradTrials) +
              " instances, worst relative error " + err.str() + " (" + worst_op + "), " + F(s, 1) + " s"};
}

// Criterion 2. The SNR and mel error are recomputed directly from samples.
Outcome SpectralFidelity() {
  const SpectralConfig cfg;
  const SpectralFrontend fe(cfg);
  Rng rng(2026);
  const std::vector<ToySpeakerSpec> speakers = SampleSpeakers(20, 99);
  double worst_snr = 1e300, worst_mel = 0.0;
  for (int i = 0; i < kSnrClips; ++i) {
    const double dur = Uniform(rng, 1.0, 3.0);
    const Waveform w = Synthesize(speakers[i % speakers.size()], SampleUtterance(5000 + i, dur, dur));
    const std::vector<double> y = fe.Istft(fe.Stft(w.samples));
    double sig = 0.0, err = 0.0;
    for (int64_t n = cfg.fft_size; n + cfg.fft_size < w.size(); ++n) {
      sig += w.samples[n] * w.samples[n];
      err += (y[n] - w.samples[n]) * (y[n] - w.samples[n]);
    }
    worst_snr = std::min(worst_snr, 10.0 * std::log10(sig / std::max(err, 1e-300)));
    if (i < kMelClips) {
      const ComplexSpec spec = fe.Stft(w.samples);
      const Tensor mel = fe.Mel(w.samples);
      const Tensor back = fe.Mel(fe.MelToWav(mel, &spec));
      double num = 0.0, den = 0.0;
      for (int64_t k = 0; k < mel.size(); ++k) {
        num += (back[k] - mel[k]) * (back[k] - mel[k]);
        den += mel[k] * mel[k];
      }
      worst_mel = std::max(worst_mel, std::sqrt(num / den));
    }
  }
  return {worst_snr > kSnrDb && worst_mel < kMelError,
          "min interior SNR " + F(worst_snr, 1) + " dB over " + std::to_string(kSnrClips) +
              " clips; max mel roundtrip error " + F(worst_mel) + " over " + std::to_string(kMelClips)};
}

// Criterion 3.
Outcome LayerTrace() {
  const std::vector<Shape> want = {{1, 512, 100}, {32, 512, 50}, {128, 512, 25}, {256, 256, 13}, {256, 128, 7},
                                   {512, 64, 4},  {512, 32, 2},  {512, 16, 1},   {256, 32, 2},   {128, 64, 4},
                                   {64, 128, 8},  {32, 256, 16}, {1, 512, 32}};
  const Predictor p(WidePredictorConfig(), 1);
  const bool ok = p.plan().trace == want;
  std::string trace;
  for (const Shape& s : p.plan().trace) trace += (trace.empty() ? "" : " -> ") + ShapeToString(s);
  return {ok, trace};
}

// Balanced same/different accuracy with the threshold tuned on `tune`.
double VerificationAccuracy(const std::vector<Tensor>& tune_e, const std::vector<int>& tune_s,
                            const std::vector<Tensor>& test_e, const std::vector<int>& test_s) {
  auto pairs = [](const std::vector<Tensor>& e, const std::vector<int>& s) {
    std::vector<std::pair<double, bool>> out;
    for (size_t i = 0; i < e.size(); ++i)
      for (size_t j = i + 1; j < e.size(); ++j) {
        double dot = 0.0;
        for (int64_t k = 0; k < e[i].size(); ++k) dot += e[i][k] * e[j][k];
        out.push_back({dot, s[i] == s[j]});
      }
    return out;
  };
  auto accuracy = [](const std::vector<std::pair<double, bool>>& p, double t) {
    double same = 0, diff = 0, same_ok = 0, diff_ok = 0;
    for (const auto& [sim, is_same] : p) {
      (is_same ? same : diff) += 1;
      if (is_same && sim > t) same_ok += 1;
      if (!is_same && sim <= t) diff_ok += 1;
    }
    return 0.5 * (same_ok / same + diff_ok / diff);
  };
  std::vector<std::pair<double, bool>> tune = pairs(tune_e, tune_s);
  std::sort(tune.begin(), tune.end());
  double best_t = 0.0, best = -1.0;
  double same_total = 0, diff_total = 0;
  for (const auto& p : tune) (p.second ? same_total : diff_total) += 1;
  // Sweep: threshold just below element i accepts elements i..end.
  double diff_below = 0, same_below = 0;
  for (size_t i = 0; i <= tune.size(); ++i) {
    const double acc = 0.5 * ((same_total - same_below) / same_total + diff_below / diff_total);
    if (acc > best) {
      best = acc;
      best_t = i == 0 ? tune[0].first - 1e-9 : (i == tune.size() ? tune.back().first : 0.5 * (tune[i - 1].first + tune[i].first));
    }
    if (i < tune.size()) (tune[i].second ? same_below : diff_below) += 1;
  }
  return accuracy(pairs(test_e, test_s), best_t);
}

// Criterion 4. Target encoder accuracy is recounted here; all three encoders
// must meet the bar according to their training reports.
Outcome EncoderQuality(Pipeline& p) {
  const Corpus& c = p.GetCorpus();
  const Encoder& es = p.GetEncoder(EncoderRole::kTarget);
  std::vector<Tensor> ve, te;
  std::vector<int> vs, ts;
  for (size_t i : c.ClipsIn(Split::kValidation)) {
    ve.push_back(es.EmbedWave(c.Audio(i)));
    vs.push_back(c.clips[i].speaker_id);
  }
  for (size_t i : c.ClipsIn(Split::kTest)) {
    te.push_back(es.EmbedWave(c.Audio(i)));
    ts.push_back(c.clips[i].speaker_id);
  }
  const double recount = VerificationAccuracy(ve, vs, te, ts);
  bool ok = recount >= kEncoderAccuracy;
  std::string detail = "target recount " + F(recount);
  for (const char* role : {"target", "alternate", "verifier"}) {
    const json r = ReadJson(p.run().Path(std::string("encoders/") + role + ".json"));
    const double acc = r["test_accuracy"], s = r["seconds"];
    ok = ok && acc >= kEncoderAccuracy && s < kEncoderSeconds;
    detail += std::string("; ") + role + " " + F(acc) + " in " + F(s, 0) + " s";
  }
  return {ok, detail};
}

std::vector<double> ConditionSims(const json& res, const std::string& cond) {
  std::vector<double> v;
  for (const json& r : res["records"]) v.push_back(r["conditions"][cond]["similarity"]);
  return v;
}

double Mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? std::nan("") : s / v.size();
}

double FractionBelow(const std::vector<double>& v, double k) {
  return v.empty() ? 0.0 : std::count_if(v.begin(), v.end(), [&](double x) { return x < k; }) / double(v.size());
}

double Asr(const std::vector<double>& v, double k) {
  return v.empty() ? 1.0 : std::count_if(v.begin(), v.end(), [&](double x) { return x > k; }) / double(v.size());
}

double Median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Criterion 5.
Outcome OfflinePgd(const json& res, double k) {
  const std::vector<double> sims = ConditionSims(res, "pgd");
  int decreased = 0;
  for (const json& r : res["records"]) decreased += r["pgd"]["final_loss"].get<double>() < r["pgd"]["initial_loss"].get<double>();
  const double below = FractionBelow(sims, k);
  return {below >= kPgdBelowK && decreased == static_cast<int>(sims.size()),
          F(below) + " of " + std::to_string(sims.size()) + " protected clips below k; loss decreased on " +
              std::to_string(decreased) + "/" + std::to_string(sims.size())};
}

// Criterion 6.
Outcome HeaderUniversality(const json& res, double k) {
  std::vector<double> own;
  bool transfer_weaker = true;
  std::string detail;
  std::set<std::string> keys;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> drops;
  double max_seconds = 0.0;
  for (const json& r : res["header_records"]) {
    const PairSpec p = r["pair"].get<PairSpec>();
    const double drop = r["raw"].get<double>() - r["protected"].get<double>();
    max_seconds = std::max(max_seconds, r["seconds"].get<double>());
    if (r["speaker"] == p.victim) {
      own.push_back(r["protected"]);
      drops[p.Key()].first.push_back(drop);
    } else {
      drops[p.Key()].second.push_back(drop);
    }
  }
  for (const auto& [key, d] : drops) {
    const double own_drop = Median(d.first), cross_drop = Median(d.second);
    const bool ok = own_drop > 0.0 && cross_drop <= kHeaderCrossRatio * own_drop;
    transfer_weaker = transfer_weaker && ok;
    detail += "; " + key + " drop own " + F(own_drop, 3) + " cross " + F(cross_drop, 3);
  }
  const double below = FractionBelow(own, k);
  return {below >= kHeaderBelowK && transfer_weaker && max_seconds <= kHeaderMaxSeconds + 1e-9,
          F(below) + " of " + std::to_string(own.size()) + " clips (<= " + F(max_seconds, 2) + " s) below k" + detail};
}

// Criterion 7.
Outcome PredictorParity(const json& res, double k) {
  const std::vector<double> pgd = ConditionSims(res, "pgd"), vs = ConditionSims(res, "vsmask");
  const double mp = Mean(pgd), mv = Mean(vs), asr = Asr(vs, k);
  return {std::abs(mp - mv) <= kParityGap && mp < k && mv < k && asr <= kVsmaskMaxAsr,
          "mean similarity vsmask " + F(mv) + " vs offline PGD " + F(mp) + "; vsmask clone ASR " + F(asr)};
}

// Criterion 8.
Outcome BaselineOrdering(const json& res, double k) {
  const double pgd = Mean(ConditionSims(res, "pgd")), vs = Mean(ConditionSims(res, "vsmask")),
               per = Mean(ConditionSims(res, "periodic")), rnd = Mean(ConditionSims(res, "random")),
               raw = Mean(ConditionSims(res, "raw"));
  const double rnd_asr = Asr(ConditionSims(res, "random"), k);
  return {pgd <= vs && vs < per && per < rnd && rnd < raw && rnd_asr > kRandomMinAsr,
          "pgd " + F(pgd) + " vsmask " + F(vs) + " periodic " + F(per) + " random " + F(rnd) + " raw " + F(raw) +
              "; random ASR " + F(rnd_asr)};
}

// Criterion 9.
Outcome StreamingContract(const json& res, const json& timing) {
  bool gapless = true;
  int misses = 0, chunks = 0;
  int64_t min_margin = std::numeric_limits<int64_t>::max(), required = 0;
  for (const json& r : res["records"]) {
    const json& s = r["stream"];
    gapless = gapless && s["gapless"].get<bool>();
    misses += s["misses"].get<int>();
    chunks += s["chunks"].get<int>();
    if (s["min_margin"].get<int64_t>() >= 0) min_margin = std::min(min_margin, s["min_margin"].get<int64_t>());
    required = s["required_margin"];
  }
  const double p99 = timing["inference_ms_p99"].get<double>() / 1e3;
  return {gapless && misses == 0 && min_margin >= required && p99 < kInferenceP99Seconds,
          std::to_string(chunks) + " chunks, gapless " + (gapless ? "yes" : "no") + ", misses " +
              std::to_string(misses) + ", min causality margin " + std::to_string(min_margin) + " >= " +
              std::to_string(required) + " samples, p99 inference " + F(1e3 * p99, 1) + " ms"};
}

// Criterion 10.
Outcome BandConstraint(const json& res) {
  double excess = -1e300;
  for (const json& r : res["records"]) {
    excess = std::max({excess, r["stream"]["band_excess"].get<double>(), r["pgd"]["band_excess"].get<double>()});
  }
  for (const json& r : res["header_records"]) excess = std::max(excess, r["band_excess"].get<double>());
  std::vector<double> on, off;
  for (const json& r : res["band_records"]) {
    on.push_back(r["mid_fraction_on"]);
    off.push_back(r["mid_fraction_off"]);
  }
  const bool lower = !on.empty() && Mean(on) < Mean(off);
  std::ostringstream ex;
  ex << excess;
  return {excess <= kBandSlack && lower,
          "max (|delta| - band bound) " + ex.str() + "; mid-band energy fraction weights on " + F(Mean(on)) +
              " vs off " + F(Mean(off)) + " over " + std::to_string(on.size()) + " clips"};
}

// Criterion 11.
Outcome Intelligibility(const json& res) {
  std::vector<double> stoi;
  for (const json& r : res["records"]) stoi.push_back(r["conditions"]["vsmask"]["stoi"]);
  const double frac = std::count_if(stoi.begin(), stoi.end(), [](double s) { return s >= kStoiFloor; }) / double(stoi.size());
  return {frac >= kStoiFraction, F(frac) + " of " + std::to_string(stoi.size()) +
                                     " vsmask clips with STOI-proxy >= 0.75 (mean " + F(Mean(stoi)) + ")"};
}

// Criterion 12.
Outcome Robustness(const json& res, double k) {
  bool ok = true;
  std::string detail;
  for (Transform t : AdaptiveTransforms()) {
    const std::string name = TransformName(t);
    std::vector<double> v, raw;
    for (const json& r : res["records"]) {
      v.push_back(r["conditions"]["vsmask"]["transforms"][name]);
      raw.push_back(r["conditions"]["raw"]["transforms"][name]);
    }
    const double m = Median(v);
    ok = ok && m < k;
    detail += (detail.empty() ? "" : "; ") + name + " median " + F(m) + " (raw " + F(Median(raw)) + ")";
  }
  return {ok, detail};
}

// Criterion 13.
Outcome CrossModel(const json& res, double k) {
  if (!res.contains("cross_model_records") || res["cross_model_records"].empty()) return {false, "not evaluated"};
  std::vector<double> raw_a, raw_b, aa, ab, bb, ba;
  for (const json& r : res["records"]) {
    const json& c = r["conditions"];
    if (!c["raw"].contains("alternate_similarity")) continue;
    raw_a.push_back(c["raw"]["similarity"]);
    raw_b.push_back(c["raw"]["alternate_similarity"]);
    aa.push_back(c["pgd"]["similarity"]);
    ab.push_back(c["pgd"]["alternate_similarity"]);
  }
  for (const json& r : res["cross_model_records"]) {
    bb.push_back(r["same_model"]);
    ba.push_back(r["transfer"]);
  }
  const double s_ab = Asr(aa, k), t_ab = Asr(ab, k), r_b = Asr(raw_b, k);
  const double s_ba = Asr(bb, k), t_ba = Asr(ba, k), r_a = Asr(raw_a, k);
  const bool ok = s_ab < t_ab && t_ab < r_b && s_ba < t_ba && t_ba < r_a;
  return {ok, "A->B same " + F(s_ab) + " transfer " + F(t_ab) + " raw " + F(r_b) + "; B->A same " + F(s_ba) +
                  " transfer " + F(t_ba) + " raw " + F(r_a) + " (" + std::to_string(aa.size()) + " clips)"};
}

// Criterion 14: two fresh runs of the reduced config must produce identical tables.
Outcome Reproducibility(const std::string& config_path, const std::string& dir) {
  const RunConfig cfg = LoadRunConfig(config_path);
  std::vector<std::string> dumps;
  std::vector<std::vector<std::string>> csvs;
  for (const char* sub : {"a", "b"}) {
    const std::string run_dir = (fs::path(dir) / sub).string();
    fs::remove_all(run_dir);
    Pipeline p(cfg, run_dir);
    EnsurePipeline(p, true);
    const EvalReport r = p.LoadReport();
    dumps.push_back(r.results.dump());
    csvs.emplace_back();
    for (const Table& t : r.tables) csvs.back().push_back(t.ToCsv());
  }
  const bool same = dumps[0] == dumps[1] && csvs[0] == csvs[1];
  return {same, std::string("reduced config run twice: results ") + (dumps[0] == dumps[1] ? "identical" : "differ") +
                    ", " + std::to_string(csvs[0].size()) + " tables " + (csvs[0] == csvs[1] ? "identical" : "differ")};
}

}  // namespace

int main(int argc, char** argv) {
  google::InitGoogleLogging(argv[0]);
  FLAGS_logtostderr = true;
  FLAGS_minloglevel = 1;

  CLI::App app{"Acceptance suite"};
  std::string run_dir = "acceptance/run", repro_dir = "acceptance/repro", repro_config, config_path;
  bool fresh = false;
  std::vector<int> only;
  app.add_option("--run-dir", run_dir, "Run directory for the default-config pipeline");
  app.add_option("--config", config_path, "Config for the main run (default config when empty)");
  app.add_option("--repro-config", repro_config, "Reduced config for the reproducibility criterion")->required();
  app.add_option("--repro-dir", repro_dir, "Scratch directory for the reproducibility runs");
  app.add_flag("--fresh", fresh, "Rerun every stage even when the manifest matches");
  app.add_option("--only", only, "Check only these criteria");
  CLI11_PARSE(app, argc, argv);

  auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };
  int failures = 0;
  json summary = json::object();
  auto report = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
    if (!wanted(id)) return;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += !o.pass;
    summary[std::to_string(id)] = {{"name", name}, {"pass", o.pass}, {"detail", o.detail}};
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << name << "): " << o.detail << std::endl;
  };

  report(1, "gradient correctness", GradientChecks);
  report(2, "spectral fidelity", SpectralFidelity);
  report(3, "layer shape trace", LayerTrace);

  const bool need_run = std::any_of(only.begin(), only.end(), [](int c) { return c >= 4 && c <= 13; }) || only.empty();
  if (need_run) {
    try {
      const RunConfig cfg = config_path.empty() ? RunConfig() : LoadRunConfig(config_path);
      Pipeline p(cfg, run_dir);
      EnsurePipeline(p, fresh);
      const EvalReport r = p.LoadReport();
      const json& res = r.results;
      const double k = res["k"];
      report(4, "encoder quality", [&] { return EncoderQuality(p); });
      report(5, "offline PGD", [&] { return OfflinePgd(res, k); });
      report(6, "header universality", [&] { return HeaderUniversality(res, k); });
      report(7, "predictor parity", [&] { return PredictorParity(res, k); });
      report(8, "baseline ordering", [&] { return BaselineOrdering(res, k); });
      report(9, "streaming contract", [&] { return StreamingContract(res, r.timing); });
      report(10, "band constraint", [&] { return BandConstraint(res); });
      report(11, "intelligibility", [&] { return Intelligibility(res); });
      report(12, "robustness", [&] { return Robustness(res, k); });
      report(13, "cross-model transfer", [&] { return CrossModel(res, k); });
    } catch (const std::exception& e) {
      for (int c = 4; c <= 13; ++c) report(c, "pipeline", [&]() -> Outcome { return {false, e.what()}; });
    }
  }
  report(14, "reproducibility", [&] { return Reproducibility(repro_config, repro_dir); });

  std::ofstream(fs::path(run_dir).parent_path() / "acceptance_summary.json") << summary.dump(2) << "\n";
  std::cout << (failures ? std::to_string(failures) + " criteria failed" : std::string("all criteria passed")) << std::endl;
  return failures ? 1 : 0;
}
