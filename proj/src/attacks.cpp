#include "kvlab/attacks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

namespace kvlab {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// Candidate order: descending attacker probability, ties by token id.
std::vector<Token> probability_order(const Eigen::RowVectorXd* logits, int vocab) {
  std::vector<Token> order(static_cast<std::size_t>(vocab));
  std::iota(order.begin(), order.end(), 0);
  if (logits)
    std::stable_sort(order.begin(), order.end(), [&](Token a, Token b) { return (*logits)(a) > (*logits)(b); });
  return order;
}

std::vector<GatheredLayer> prefix_layers(const PagedKVCache<double>& cache, int layer) {
  std::vector<GatheredLayer> out;
  for (int l = 0; l < layer; ++l) out.push_back(gather_layer(cache, l));
  return out;
}

Eigen::VectorXd candidate_distances(const CandidateKV& kv, const Eigen::RowVectorXd& tk, const Eigen::RowVectorXd& tv,
                                    DistanceMode mode) {
  Eigen::VectorXd d(kv.k.rows());
  for (Index i = 0; i < kv.k.rows(); ++i) d(i) = collision_distance(kv.k.row(i), kv.v.row(i), tk, tv, mode);
  return d;
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// log Phi(z), keeping precision in the upper tail where Phi rounds to 1.
double log_normal_cdf(double z) {
  return z < 0.0 ? std::log(normal_cdf(z)) : std::log1p(-normal_cdf(-z));
}

double log_gaussian_cdf(double t, double mu, double sigma) {
  if (sigma <= 0.0) return std::log(t > mu ? 1.0 : (t == mu ? 0.5 : 0.0));
  return log_normal_cdf((t - mu) / sigma);
}

}  // namespace

DistanceStats summarize(std::span<const double> distances) {
  if (distances.size() < 2) throw Error(ErrorCode::kInvalidConfig, "distance statistics need at least two samples");
  DistanceStats s;
  s.batch_distances.assign(distances.begin(), distances.end());
  const double n = static_cast<double>(distances.size());
  s.mu_other = std::accumulate(distances.begin(), distances.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : distances) ss += (x - s.mu_other) * (x - s.mu_other);
  s.sigma_other = std::sqrt(ss / n);
  return s;
}

const char* to_string(DistanceMode mode) {
  switch (mode) {
    case DistanceMode::kKeyValue: return "kv";
    case DistanceMode::kKeyOnly: return "k";
    case DistanceMode::kValueOnly: return "v";
  }
  return "kv";
}

DistanceMode distance_mode_from_string(const std::string& name) {
  if (name == "kv") return DistanceMode::kKeyValue;
  if (name == "k") return DistanceMode::kKeyOnly;
  if (name == "v") return DistanceMode::kValueOnly;
  throw Error(ErrorCode::kInvalidConfig, "distance mode must be kv, k or v, got '" + name + "'");
}

const char* to_string(Decision decision) {
  switch (decision) {
    case Decision::kAccepted: return "accepted";
    case Decision::kFallback: return "fallback";
    case Decision::kExact: return "exact";
  }
  return "accepted";
}

const char* to_string(InversionMode mode) { return mode == InversionMode::kExact ? "exact" : "least_squares"; }

InversionMode inversion_mode_from_string(const std::string& name) {
  if (name == "exact") return InversionMode::kExact;
  if (name == "least_squares" || name == "lstsq") return InversionMode::kLeastSquares;
  throw Error(ErrorCode::kInvalidConfig, "inversion mode must be exact or least_squares, got '" + name + "'");
}

void CollisionParams::validate(int vocab) const {
  if (!(vocab_fraction > 0.0 && vocab_fraction <= 1.0))
    throw Error(ErrorCode::kInvalidConfig, "vocab_fraction must lie in (0, 1]");
  if (batch_size < 1) throw Error(ErrorCode::kInvalidConfig, "batch_size must be >= 1");
  if (!(sigma_multiplier >= 0.0)) throw Error(ErrorCode::kInvalidConfig, "sigma_multiplier must be >= 0");
  const auto pool = static_cast<int>(std::ceil(vocab_fraction * vocab));
  if (threshold_mode == ThresholdMode::kHeuristic && (batch_size < 2 || pool < 2))
    throw Error(ErrorCode::kInvalidConfig, "heuristic threshold needs batches and a candidate pool of >= 2");
  if (threshold_mode == ThresholdMode::kEnhanced && enhanced_rank < 1)
    throw Error(ErrorCode::kInvalidConfig, "enhanced rank must be >= 1");
}

double rouge_l(std::span<const Token> a, std::span<const Token> b) {
  if (a.empty() && b.empty()) return 1.0;
  if (a.empty() || b.empty()) return 0.0;
  std::vector<int> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  const double lcs = prev[b.size()];
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(a.size());
  const double r = lcs / static_cast<double>(b.size());
  return 2.0 * p * r / (p + r);
}

double exact_match(std::span<const Token> a, std::span<const Token> b) {
  const std::size_t n = std::max(a.size(), b.size());
  if (n == 0) return 1.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) hits += a[i] == b[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(n);
}

void score(AttackReport& report, std::span<const Token> truth) {
  report.exact_match = exact_match(report.reconstructed, truth);
  report.rouge_l = rouge_l(report.reconstructed, truth);
}

// ---------------------------------------------------------------------------
// Inversion

Eigen::MatrixXd recover_layer_input(const ModelConfig& config, const LayerWeights& layer, const Eigen::MatrixXd& keys,
                                    const Eigen::MatrixXd& values, InversionMode mode, int first_pos) {
  const int d = config.head_dim, kv = config.kv_dim();
  if (keys.cols() != kv || (mode == InversionMode::kLeastSquares && (values.cols() != kv || values.rows() != keys.rows())))
    throw Error(ErrorCode::kDimensionMismatch, "cache rows do not match the layer's kv width");
  // k R^T recovers x W_k^T.
  Eigen::MatrixXd unrotated = keys;
  for (Index i = 0; i < unrotated.rows(); ++i)
    for (int g = 0; g < config.kv_heads; ++g)
      apply_rope(unrotated.row(i).segment(g * d, d), -(first_pos + i), config.rope_base);

  if (mode == InversionMode::kExact) {
    if (layer.wk.rows() != layer.wk.cols())
      throw Error(ErrorCode::kUnsupportedArchitecture,
                  "exact inversion needs a square W_k (multi-head attention); use least_squares");
    Eigen::FullPivLU<Eigen::MatrixXd> lu(layer.wk);
    if (!lu.isInvertible()) throw Error(ErrorCode::kSingularMatrix, "W_k is singular");
    return lu.solve(unrotated.transpose()).transpose();
  }
  Eigen::MatrixXd a(2 * kv, config.hidden);
  a << layer.wk, layer.wv;
  Eigen::MatrixXd b(2 * kv, keys.rows());
  b << unrotated.transpose(), values.transpose();
  return solve_least_squares(a, b).solution.transpose();
}

std::vector<Token> nearest_tokens(const Eigen::MatrixXd& normalized_inputs, const Eigen::VectorXd& gain,
                                  const Eigen::MatrixXd& embedding) {
  if (normalized_inputs.cols() != embedding.cols() || gain.size() != embedding.cols())
    throw Error(ErrorCode::kDimensionMismatch, "recovered inputs do not match the embedding width");
  const Eigen::VectorXd row_norms = embedding.rowwise().norm();
  Eigen::MatrixXd unit = embedding;
  for (Index t = 0; t < unit.rows(); ++t)
    if (row_norms(t) > 0.0) unit.row(t) /= row_norms(t);
  Index smallest = 0;
  row_norms.minCoeff(&smallest);

  std::vector<Token> out;
  for (Index i = 0; i < normalized_inputs.rows(); ++i) {
    Eigen::RowVectorXd x = normalized_inputs.row(i).cwiseQuotient(gain.transpose());
    const double n = x.norm();
    if (!(n > 1e-12)) {
      out.push_back(static_cast<Token>(smallest));
      continue;
    }
    Index best = 0;
    (unit * (x / n).transpose()).maxCoeff(&best);
    out.push_back(static_cast<Token>(best));
  }
  return out;
}

template <typename Scalar>
void read_layer_rows(const PagedKVCache<Scalar>& cache, int layer, Eigen::MatrixXd& keys, Eigen::MatrixXd& values) {
  const int n = cache.seq_len(), d = cache.head_dim();
  keys.resize(n, cache.kv_heads() * d);
  values.resize(n, cache.kv_heads() * d);
  for (int pos = 0; pos < n; ++pos)
    for (int g = 0; g < cache.kv_heads(); ++g) {
      keys.block(pos, g * d, 1, d) = cache.raw_key_row(layer, g, pos);
      values.block(pos, g * d, 1, d) = cache.raw_value_row(layer, g, pos);
    }
}

template <typename Scalar>
AttackReport inversion_attack(const PagedKVCache<Scalar>& cache, const Weights& weights, InversionMode mode,
                              int layer) {
  const auto start = Clock::now();
  if (layer < 0 || layer >= weights.config.layers)
    throw Error(ErrorCode::kIndexOutOfRange, "layer " + std::to_string(layer));
  Eigen::MatrixXd keys, values;
  read_layer_rows(cache, layer, keys, values);
  const auto& lw = weights.layers[static_cast<std::size_t>(layer)];
  const Eigen::MatrixXd x = recover_layer_input(weights.config, lw, keys, values, mode);
  AttackReport report;
  report.attack = std::string("inversion-") + to_string(mode);
  report.layer = layer;
  report.reconstructed = nearest_tokens(x, lw.attn_norm, weights.embedding);
  for (Token t : report.reconstructed) report.per_position.push_back({t, 1, 0.0, 0.0, 0.0, Decision::kExact});
  report.cloaked_input = cache.has_state(BlockState::kCloaked);
  report.wall_time = seconds_since(start);
  return report;
}

template void read_layer_rows(const PagedKVCache<float>&, int, Eigen::MatrixXd&, Eigen::MatrixXd&);
template void read_layer_rows(const PagedKVCache<double>&, int, Eigen::MatrixXd&, Eigen::MatrixXd&);
template AttackReport inversion_attack(const PagedKVCache<float>&, const Weights&, InversionMode, int);
template AttackReport inversion_attack(const PagedKVCache<double>&, const Weights&, InversionMode, int);

// ---------------------------------------------------------------------------
// Collision

double collision_distance(const Eigen::RowVectorXd& local_k, const Eigen::RowVectorXd& local_v,
                          const Eigen::RowVectorXd& target_k, const Eigen::RowVectorXd& target_v, DistanceMode mode) {
  if (local_k.size() != target_k.size() || local_v.size() != target_v.size())
    throw Error(ErrorCode::kDimensionMismatch, "collision slices differ in shape");
  double d = 0.0;
  if (mode != DistanceMode::kValueOnly) d += (local_k - target_k).norm();
  if (mode != DistanceMode::kKeyOnly) d += (local_v - target_v).norm();
  return d;
}

template <typename Scalar>
AttackReport collision_attack(const PagedKVCache<Scalar>& target, const Model& attacker,
                              const CollisionParams& params) {
  const auto start = Clock::now();
  const ModelConfig& c = attacker.config();
  params.validate(c.vocab);
  if (target.kv_heads() != c.kv_heads || target.head_dim() != c.head_dim)
    throw Error(ErrorCode::kDimensionMismatch, "target cache geometry differs from the attacker model");
  Eigen::MatrixXd tk, tv;
  read_layer_rows(target, params.layer, tk, tv);
  const int pool = static_cast<int>(std::ceil(params.vocab_fraction * c.vocab));
  const bool heuristic = params.threshold_mode == ThresholdMode::kHeuristic;

  AttackReport report;
  report.attack = "collision";
  report.layer = params.layer;
  report.cloaked_input = target.has_state(BlockState::kCloaked);
  PagedKVCache<double> local(c);
  Eigen::RowVectorXd logits;
  for (int pos = 0; pos < target.seq_len(); ++pos) {
    const std::vector<Token> order = probability_order(pos == 0 ? nullptr : &logits, c.vocab);
    const std::vector<GatheredLayer> prefix = prefix_layers(local, params.layer);
    std::vector<double> seen;
    PositionResult result;
    bool accepted = false;
    for (int begin = 0; begin < pool && !accepted; begin += params.batch_size) {
      const int end = std::min(pool, begin + params.batch_size);
      const std::span<const Token> batch(order.data() + begin, static_cast<std::size_t>(end - begin));
      const CandidateKV kv = attacker.candidate_kv(prefix, pos, batch, params.layer);
      const Eigen::VectorXd dist = candidate_distances(kv, tk.row(pos), tv.row(pos), params.distance);
      seen.insert(seen.end(), dist.data(), dist.data() + dist.size());

      double threshold = params.enhanced_t;
      if (heuristic) {
        const bool own = params.per_batch_stats && dist.size() >= 2;
        const DistanceStats s = own ? summarize(std::span<const double>(dist.data(), static_cast<std::size_t>(dist.size())))
                                    : summarize(seen);
        threshold = s.mu_other - params.sigma_multiplier * s.sigma_other;
        result.mu_other = s.mu_other;
        result.sigma_other = s.sigma_other;
      }
      // The most distinct outlier of the batch.
      Index i = 0;
      if (dist.minCoeff(&i) < threshold) {
        result.token = batch[static_cast<std::size_t>(i)];
        result.rank = begin + static_cast<int>(i) + 1;
        result.dis_target = dist(i);
        result.decision = Decision::kAccepted;
        accepted = true;
      }
    }
    if (!accepted) {
      const auto best = std::min_element(seen.begin(), seen.end()) - seen.begin();
      result.token = order[static_cast<std::size_t>(best)];
      result.rank = static_cast<int>(best) + 1;
      result.dis_target = seen[static_cast<std::size_t>(best)];
      result.decision = Decision::kFallback;
    }
    if (!heuristic && seen.size() >= 2) {
      const DistanceStats s = summarize(seen);
      result.mu_other = s.mu_other;
      result.sigma_other = s.sigma_other;
    }
    report.per_position.push_back(result);
    report.reconstructed.push_back(result.token);
    logits = attacker.decode_step(local, result.token);
  }
  report.wall_time = seconds_since(start);
  return report;
}

template AttackReport collision_attack(const PagedKVCache<float>&, const Model&, const CollisionParams&);
template AttackReport collision_attack(const PagedKVCache<double>&, const Model&, const CollisionParams&);

template <typename Scalar>
std::vector<PositionProfile> distance_profile(const PagedKVCache<Scalar>& target, const Model& attacker,
                                              std::span<const Token> truth, int layer, DistanceMode mode) {
  const ModelConfig& c = attacker.config();
  if (static_cast<int>(truth.size()) != target.seq_len())
    throw Error(ErrorCode::kDimensionMismatch, "ground truth length differs from the cache length");
  Eigen::MatrixXd tk, tv;
  read_layer_rows(target, layer, tk, tv);
  std::vector<Token> all(static_cast<std::size_t>(c.vocab));
  std::iota(all.begin(), all.end(), 0);
  constexpr std::size_t kChunk = 256;

  std::vector<PositionProfile> out;
  PagedKVCache<double> local(c);
  Eigen::RowVectorXd logits;
  for (int pos = 0; pos < target.seq_len(); ++pos) {
    const Token truth_tok = truth[static_cast<std::size_t>(pos)];
    const std::vector<GatheredLayer> prefix = prefix_layers(local, layer);
    Eigen::VectorXd dist(c.vocab);
    for (std::size_t b = 0; b < all.size(); b += kChunk) {
      const std::span<const Token> batch(all.data() + b, std::min(kChunk, all.size() - b));
      dist.segment(static_cast<Index>(b), static_cast<Index>(batch.size())) =
          candidate_distances(attacker.candidate_kv(prefix, pos, batch, layer), tk.row(pos), tv.row(pos), mode);
    }
    std::vector<double> others;
    for (Index t = 0; t < dist.size(); ++t)
      if (t != truth_tok) others.push_back(dist(t));
    const DistanceStats s = summarize(others);
    const std::vector<Token> order = probability_order(pos == 0 ? nullptr : &logits, c.vocab);
    const int rank = static_cast<int>(std::find(order.begin(), order.end(), truth_tok) - order.begin()) + 1;
    out.push_back({dist(truth_tok), s.mu_other, s.sigma_other, rank});
    logits = attacker.decode_step(local, truth_tok);
  }
  return out;
}

template std::vector<PositionProfile> distance_profile(const PagedKVCache<float>&, const Model&,
                                                       std::span<const Token>, int, DistanceMode);
template std::vector<PositionProfile> distance_profile(const PagedKVCache<double>&, const Model&,
                                                       std::span<const Token>, int, DistanceMode);

double threshold_log_objective(double t, double mu_target, double sigma_target, double mu_other, double sigma_other,
                               int r) {
  const double log_accept = log_gaussian_cdf(t, mu_target, sigma_target);
  if (r == 1) return log_accept;
  const double log_reject = log_gaussian_cdf(-t, -mu_other, sigma_other);
  return log_accept + static_cast<double>(r - 1) * log_reject;
}

ThresholdFit enhanced_threshold(std::span<const double> target_samples, const DistanceStats& other, int r) {
  if (r < 1) throw Error(ErrorCode::kInvalidConfig, "rank must be >= 1");
  if (target_samples.empty()) throw Error(ErrorCode::kInvalidConfig, "no target samples");
  const double n = static_cast<double>(target_samples.size());
  const double mu_t = std::accumulate(target_samples.begin(), target_samples.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : target_samples) ss += (x - mu_t) * (x - mu_t);
  const double sigma_t = std::sqrt(ss / n);
  const double mu_o = other.mu_other, sigma_o = other.sigma_other;

  ThresholdFit fit;
  const double lo = std::min(mu_t, mu_o), hi = std::max(mu_t, mu_o);
  if ((sigma_t == 0.0 && sigma_o == 0.0) || lo == hi) {
    fit.degenerate = true;
    fit.t = 0.5 * (mu_t + mu_o);
    fit.success_probability = std::exp(threshold_log_objective(fit.t, mu_t, sigma_t, mu_o, sigma_o, r));
    return fit;
  }
  double best = -std::numeric_limits<double>::infinity();
  fit.t = lo;
  for (int k = 0; k < kThresholdGrid; ++k) {
    const double t = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(kThresholdGrid - 1);
    const double v = threshold_log_objective(t, mu_t, sigma_t, mu_o, sigma_o, r);
    if (v > best) {
      best = v;
      fit.t = t;
    }
  }
  fit.success_probability = std::exp(best);
  return fit;
}

// ---------------------------------------------------------------------------
// Injection

template <typename Scalar>
InjectionResult injection_attack(const PagedKVCache<Scalar>& cache, std::span<const Token> instruction, int max_new,
                                 const Model& model, const std::optional<Eigen::RowVectorXd>& last_logits) {
  if (max_new < 0) throw Error(ErrorCode::kInvalidConfig, "max_new must be >= 0");
  InjectionResult result;
  result.cloaked_input = cache.has_state(BlockState::kCloaked);
  if (max_new == 0) return result;
  if (instruction.empty() && !last_logits)
    throw Error(ErrorCode::kInvalidConfig, "an empty instruction needs the intercepted last logits");
  // The attacker appends regardless of how the blocks are labelled.
  PagedKVCache<Scalar> work = cache;
  for (auto& b : work.blocks()) b.state = BlockState::kPlaintext;
  Eigen::RowVectorXd logits = last_logits.value_or(Eigen::RowVectorXd());
  for (Token t : instruction) logits = model.decode_step(work, t);
  result.generated = model.greedy_continue(work, logits, max_new);
  return result;
}

template InjectionResult injection_attack(const PagedKVCache<float>&, std::span<const Token>, int, const Model&,
                                          const std::optional<Eigen::RowVectorXd>&);
template InjectionResult injection_attack(const PagedKVCache<double>&, std::span<const Token>, int, const Model&,
                                          const std::optional<Eigen::RowVectorXd>&);

}  // namespace kvlab
