#pragma once

// Input-reconstruction attacks on a leaked KV-cache: algebraic inversion of
// the first layer, token-by-token collision search, and instruction injection.

#include <Eigen/Dense>

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kvlab/model.hpp"

namespace kvlab {

struct DistanceStats {
  double mu_other = 0.0;
  double sigma_other = 0.0;
  std::vector<double> batch_distances;
  std::optional<double> target_distance;
};

// Mean and population standard deviation; needs at least two samples.
DistanceStats summarize(std::span<const double> distances);

enum class DistanceMode { kKeyValue, kKeyOnly, kValueOnly };
const char* to_string(DistanceMode mode);
DistanceMode distance_mode_from_string(const std::string& name);

enum class ThresholdMode { kHeuristic, kEnhanced };

struct CollisionParams {
  int layer = 0;
  int batch_size = 256;
  double sigma_multiplier = 3.0;
  double vocab_fraction = 1.0;
  ThresholdMode threshold_mode = ThresholdMode::kHeuristic;
  int enhanced_rank = 1;  // r the threshold was fitted for; recorded only
  double enhanced_t = 0.0;
  bool per_batch_stats = false;
  DistanceMode distance = DistanceMode::kKeyValue;

  void validate(int vocab) const;
};

enum class Decision { kAccepted, kFallback, kExact };
const char* to_string(Decision decision);

struct PositionResult {
  Token token = 0;
  int rank = 0;  // 1-based position of the chosen candidate in the search order
  double dis_target = 0.0;
  double mu_other = 0.0;
  double sigma_other = 0.0;
  Decision decision = Decision::kAccepted;
};

struct AttackReport {
  std::string attack;
  int layer = 0;
  std::vector<Token> reconstructed;
  std::vector<PositionResult> per_position;
  double exact_match = 0.0;
  double rouge_l = 0.0;
  double wall_time = 0.0;  // seconds
  bool cloaked_input = false;
};

// Fills exact_match and rouge_l against the ground truth.
void score(AttackReport& report, std::span<const Token> truth);

double rouge_l(std::span<const Token> a, std::span<const Token> b);
double exact_match(std::span<const Token> a, std::span<const Token> b);

// ---------------------------------------------------------------------------
// Inversion

enum class InversionMode { kExact, kLeastSquares };
const char* to_string(InversionMode mode);
InversionMode inversion_mode_from_string(const std::string& name);

// Recovers the normalized layer input x_i for every row: k_i = x_i W_k^T R_i
// (and v_i = x_i W_v^T in least-squares mode). Rows of `keys`/`values` hold
// all kv-heads concatenated; row i belongs to position first_pos + i.
Eigen::MatrixXd recover_layer_input(const ModelConfig& config, const LayerWeights& layer,
                                    const Eigen::MatrixXd& keys, const Eigen::MatrixXd& values,
                                    InversionMode mode, int first_pos = 0);

// Undoes the norm gain and maps every row to the embedding row of highest
// cosine similarity. A (numerically) zero row maps to the smallest embedding.
std::vector<Token> nearest_tokens(const Eigen::MatrixXd& normalized_inputs, const Eigen::VectorXd& gain,
                                  const Eigen::MatrixXd& embedding);

// Raw rows of one layer (slot order, no key material), kv-heads concatenated.
template <typename Scalar>
void read_layer_rows(const PagedKVCache<Scalar>& cache, int layer, Eigen::MatrixXd& keys, Eigen::MatrixXd& values);

template <typename Scalar>
AttackReport inversion_attack(const PagedKVCache<Scalar>& cache, const Weights& weights, InversionMode mode,
                              int layer = 0);

// ---------------------------------------------------------------------------
// Collision

double collision_distance(const Eigen::RowVectorXd& local_k, const Eigen::RowVectorXd& local_v,
                          const Eigen::RowVectorXd& target_k, const Eigen::RowVectorXd& target_v,
                          DistanceMode mode = DistanceMode::kKeyValue);

template <typename Scalar>
AttackReport collision_attack(const PagedKVCache<Scalar>& target, const Model& attacker, const CollisionParams& params);

// Chosen-plaintext view: for every position of a known input, the distance of
// the true token and the statistics of all other tokens, with the attacker
// model extending the true prefix. `rank` is the true token's 1-based rank in
// the attacker's probability order.
struct PositionProfile {
  double dis_target = 0.0;
  double mu_other = 0.0;
  double sigma_other = 0.0;
  int rank = 0;
};

template <typename Scalar>
std::vector<PositionProfile> distance_profile(const PagedKVCache<Scalar>& target, const Model& attacker,
                                              std::span<const Token> truth, int layer,
                                              DistanceMode mode = DistanceMode::kKeyValue);

struct ThresholdFit {
  double t = 0.0;
  double success_probability = 0.0;
  bool degenerate = false;  // both spreads zero; t is the midpoint
};

// log P(dis_other > t)^(r-1) P(dis_target < t) under Gaussian fits.
double threshold_log_objective(double t, double mu_target, double sigma_target, double mu_other, double sigma_other,
                               int r);

inline constexpr int kThresholdGrid = 10000;

// Grid search over kThresholdGrid points spanning [mu_target, mu_other].
ThresholdFit enhanced_threshold(std::span<const double> target_samples, const DistanceStats& other, int r);

// ---------------------------------------------------------------------------
// Injection

struct InjectionResult {
  std::vector<Token> generated;
  bool cloaked_input = false;
};

// Appends `instruction` to a copy of the intercepted cache and greedy-decodes
// `max_new` tokens. With an empty instruction the decode starts from
// `last_logits`, which must then be supplied.
template <typename Scalar>
InjectionResult injection_attack(const PagedKVCache<Scalar>& cache, std::span<const Token> instruction, int max_new,
                                 const Model& model, const std::optional<Eigen::RowVectorXd>& last_logits = {});

}  // namespace kvlab
