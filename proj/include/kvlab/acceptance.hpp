#pragma once

// End-to-end acceptance checks, one per tracked property.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

namespace kvlab {

struct AcceptanceOptions {
  std::uint64_t seed = 20240;
  int fusion_prompts = 100;
  int commutativity_cases = 100;
  int permutation_cases = 1000;
  int roundtrip_prompts = 4;
  int inversion_trials = 10;
  int self_trials = 5;
  int collision_trials = 20;
  int threshold_known = 8;
  int security_trials = 10;
  int dp_trials = 4;
  int timing_repetitions = 7;
  bool enforce_budgets = true;
  std::vector<int> only;  // empty: all

  void validate() const;
};

void to_json(nlohmann::json& j, const AcceptanceOptions& o);
AcceptanceOptions acceptance_from_json(const nlohmann::json& j);
AcceptanceOptions load_acceptance(const std::filesystem::path& path);

struct CriterionResult {
  int id = 0;
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
  double budget = 0.0;  // seconds
};

inline constexpr int kCriterionCount = 12;

CriterionResult run_criterion(int id, const AcceptanceOptions& options);

std::vector<CriterionResult> run_acceptance(const AcceptanceOptions& options,
                                            const std::function<void(const CriterionResult&)>& on_result = {});

std::string format_result(const CriterionResult& r);

}  // namespace kvlab
