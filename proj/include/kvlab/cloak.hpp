#pragma once

// KV-Cloak: K' = S P (K^m + A) per cache block, with M1/M2 folded into the
// attention weights, plus the naive S K M scheme and its chosen-plaintext break.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "kvlab/linalg.hpp"
#include "kvlab/model.hpp"

namespace kvlab {

struct CloakKey {
  int block_size = 0;
  int head_dim = 0;
  Eigen::MatrixXd s;  // b x b orthogonal
  RotationScalingKey m1;
  RotationScalingKey m2;
  Eigen::MatrixXd a_k;  // b x d, row i carries its identifier at column i
  Eigen::MatrixXd a_v;
  double theta_k = 0.0;
  double theta_v = 0.0;
  double outlier_factor = 2.0;
  double pad_value_factor = 1.5;
  double mask_lo = 3.0;
  double mask_hi = 4.0;
  std::uint64_t stream_seed = 0;  // root of the per-block permutation streams

  void validate() const;
};

struct KeygenOptions {
  ScaleBounds bounds;
  double outlier_factor = 2.0;
  double pad_value_factor = 1.5;
  double mask_lo = 3.0;
  double mask_hi = 4.0;
};

// Secret matrices drawn before the weights are fused; thresholds and masks
// are filled in by calibrate_key once fused-domain caches exist.
CloakKey sample_secrets(int block_size, int head_dim, Rng& rng, const KeygenOptions& options = {});

// Sets theta_K/theta_V to the largest magnitude seen in the valid rows of the
// calibration blocks and draws the identifier masks.
void calibrate_key(CloakKey& key, std::span<const KVBlock<float>> calibration, Rng& rng);

// sample_secrets, fuse, prefill the calibration corpus on the fused model,
// calibrate_key.
CloakKey keygen(const Weights& weights, std::span<const std::vector<Token>> calibration_corpus, Rng& rng,
                const KeygenOptions& options = {});

// W_q^m = M1^-1 W_q, W_k^m = M1^T W_k, W_v^m = M2^T W_v, W_o^m = W_o M2^-T, per head.
Weights fuse_weights(const Weights& weights, const CloakKey& key);

// ---------------------------------------------------------------------------
// Naive scheme and its break

Eigen::MatrixXd obfuscate_naive(const Eigen::MatrixXd& k, const Eigen::MatrixXd& s, const Eigen::MatrixXd& m);

using BlockOracle = std::function<Eigen::MatrixXd(const Eigen::MatrixXd&)>;

struct CpaRecovery {
  Eigen::MatrixXd s_hat;
  Eigen::MatrixXd m_hat;
  int queries = 0;
};

// Differential chosen-plaintext recovery from the responses to E_p0 and E_0q.
CpaRecovery cpa_break_naive(const BlockOracle& oracle, int b, int d);

// ---------------------------------------------------------------------------
// Block transform

struct DeobfuscatedBlock {
  KVBlock<float> block;     // fused-domain rows in permuted order, slots labelled
  Permutation slot_map;     // row r holds slot slot_map.source(r)
};

// Per-(layer, head, block, epoch) stream for the one-time permutation.
std::uint64_t block_stream_seed(const CloakKey& key, int layer, int head, int block_id, std::uint64_t epoch);

KVBlock<float> obfuscate_block(const KVBlock<float>& block, const CloakKey& key, Rng& rng,
                               const Permutation* forced = nullptr);
DeobfuscatedBlock deobfuscate_block(const KVBlock<float>& block, const CloakKey& key, bool use_fill_metadata = true);

// Same transform with M1/M2 applied online to plaintext-domain rows; the
// reference path operator fusion removes.
KVBlock<float> obfuscate_block_unfused(const KVBlock<float>& block, const CloakKey& key,
                                       const Eigen::MatrixXd& m1, const Eigen::MatrixXd& m2, Rng& rng);
KVBlock<float> deobfuscate_block_unfused(const KVBlock<float>& block, const CloakKey& key,
                                         const Eigen::MatrixXd& m1_inv, const Eigen::MatrixXd& m2_inv);

void cloak_cache(KVCache& cache, const CloakKey& key, std::uint64_t epoch);
void decloak_cache(KVCache& cache, const CloakKey& key);

// One decode step on a cloaked cache: de-obfuscate a working copy, decode,
// re-cloak the blocks that received the new token with a fresh permutation.
Eigen::RowVectorXd cloaked_decode_step(const Model& fused, KVCache& cache, Token token, const CloakKey& key,
                                       std::uint64_t epoch);

// ---------------------------------------------------------------------------
// Cost model

struct FlopModel {
  std::int64_t b = 0, d = 0, hidden = 0;
  std::int64_t naive_mults = 0;      // b^3 + 2 b^2 d + 2 b d^2
  std::int64_t fused_mults = 0;      // b^3 + 2 b^2 d
  std::int64_t recompute_mults = 0;  // b D d
  double naive_ratio = 0.0;
  double fused_ratio = 0.0;
  double fused_over_naive = 0.0;
};

FlopModel flop_model(std::int64_t b, std::int64_t d, std::int64_t hidden);

void save_key(const CloakKey& key, const std::filesystem::path& path);
CloakKey load_key(const std::filesystem::path& path);

}  // namespace kvlab
