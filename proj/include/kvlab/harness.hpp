#pragma once

// Experiment runner: corpus generation, the defense x attack x layer matrix,
// timing, and the JSON/CSV report.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "kvlab/attacks.hpp"
#include "kvlab/cloak.hpp"
#include "kvlab/dp_baseline.hpp"
#include "kvlab/model.hpp"

namespace kvlab {

inline constexpr int kExperimentSchemaVersion = 1;
inline constexpr int kReportSchemaVersion = 1;

// uniform: i.i.d. tokens. model: bos, then uniform picks from the target
// model's top_k next tokens. distinct: bos, then tokens without repeats.
struct CorpusConfig {
  int count = 20;
  int min_len = 20;
  int max_len = 64;
  std::string source = "uniform";
  int top_k = 16;
  Token bos = 0;

  bool has_bos() const { return source != "uniform"; }
  void validate(int vocab) const;
};

struct DefenseSpec {
  std::string kind = "plaintext";  // plaintext | kvcloak | dp
  double epsilon = 1e8;
  double delta = 1e-5;
  double clip_percentile = 0.5;

  std::string label() const;
};

struct AttackSpec {
  std::string kind = "collision";  // inversion | collision | injection
  InversionMode inversion_mode = InversionMode::kExact;
  CollisionParams collision;
  std::vector<Token> instruction;  // injection; defaults to {bos}
  int max_new = -1;                // injection; -1 means the truth length

  std::string label() const;
};

struct ExperimentConfig {
  std::string model_kind = "random";  // random | echo
  ModelConfig model;
  std::uint64_t seed = 0;
  double rho = 1e-2;
  CorpusConfig corpus;
  CorpusConfig calibration{8, 48, 48, "uniform", 16, 0};
  std::vector<DefenseSpec> defenses{DefenseSpec{}};
  std::vector<AttackSpec> attacks{AttackSpec{}};
  std::vector<std::string> layers{"first", "mid", "last"};
  int timing_repetitions = 5;
  int timing_decode_steps = 8;
  std::string output;

  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
// Missing fields take their defaults; unknown fields are rejected.
ExperimentConfig experiment_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment(const std::filesystem::path& path);

int resolve_layer(const std::string& name, const ModelConfig& config);

// ---------------------------------------------------------------------------

Weights base_weights(const ExperimentConfig& config);
Weights target_weights(const ExperimentConfig& config, const Weights& base);

std::vector<std::vector<Token>> generate_corpus(const CorpusConfig& corpus, int vocab, Rng& rng,
                                                const Model* target = nullptr);

void save_corpus(const std::vector<std::vector<Token>>& corpus, int vocab, const std::filesystem::path& path);
std::vector<std::vector<Token>> load_corpus(const std::filesystem::path& path);

// Chosen-plaintext calibration of the enhanced threshold: the attacker
// obtains the target's caches for known inputs and measures dis_target and
// dis_other with its own model. rank is the mean empirical rank, rounded.
struct ChosenPlaintextFit {
  ThresholdFit fit;
  int rank = 1;
  DistanceStats other;
  std::vector<double> target_samples;
};

ChosenPlaintextFit fit_enhanced_threshold(const Model& target, const Model& attacker,
                                          const std::vector<std::vector<Token>>& known_inputs, int layer);

struct TrialRow {
  std::string defense;
  std::string attack;
  std::string layer;  // first/mid/last or "-"
  int trial = 0;
  double exact_match = 0.0;
  double rouge_l = 0.0;
  double wall_time = 0.0;
  int fallbacks = 0;
  std::string error;
};

struct Aggregate {
  std::string defense, attack, layer;
  int n = 0;
  int errors = 0;
  double exact_mean = 0.0, exact_std = 0.0;
  double rouge_mean = 0.0, rouge_std = 0.0;
};

struct DefenseTiming {
  std::string defense;
  double seconds = 0.0;
  double overhead = 0.0;  // seconds / plaintext seconds - 1
};

struct Report {
  nlohmann::json config;
  std::vector<TrialRow> trials;
  std::vector<Aggregate> aggregates;
  FlopModel flops;
  double plaintext_seconds = 0.0;
  std::vector<DefenseTiming> timings;
  double fused_obfuscation_seconds = 0.0;
  double unfused_obfuscation_seconds = 0.0;

  int error_count() const;
};

std::vector<Aggregate> aggregate(const std::vector<TrialRow>& trials);

Report run_matrix(const ExperimentConfig& config);

nlohmann::json report_to_json(const Report& report);
Report report_from_json(const nlohmann::json& j);
std::string emit_report(const Report& report);
void write_report(const Report& report, const std::filesystem::path& path);
std::string report_csv(const Report& report);

// Median wall time of `repetitions` runs after one discarded warm-up.
template <typename Fn>
double median_seconds(int repetitions, Fn&& fn) {
  using Clock = std::chrono::steady_clock;
  fn();
  std::vector<double> times;
  for (int i = 0; i < std::max(1, repetitions); ++i) {
    const auto start = Clock::now();
    fn();
    times.push_back(std::chrono::duration<double>(Clock::now() - start).count());
  }
  std::sort(times.begin(), times.end());
  const std::size_t n = times.size();
  return n % 2 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
}

}  // namespace kvlab
