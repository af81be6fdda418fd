#pragma once

// Clipped Gaussian-noise perturbation of exported cache blocks.

#include <cstdint>
#include <span>
#include <vector>

#include "kvlab/model.hpp"

namespace kvlab {

struct DPConfig {
  double epsilon = 1e8;
  double delta = 1e-5;
  double clip_percentile = 0.5;
  double clip_k = 0.0;  // derived
  double clip_v = 0.0;
  double sigma_k = 0.0;  // derived
  double sigma_v = 0.0;

  void validate() const;
};

struct ClipNorms {
  double k = 0.0;
  double v = 0.0;
};

// Linear interpolation between order statistics; p in [0, 1].
double percentile(std::vector<double> values, double p);

// Percentile of per-block Frobenius norms (valid rows), keys and values apart.
ClipNorms calibrate_clip(std::span<const KVBlock<float>> blocks, double p);

// sigma = C sqrt(2 ln(1.25 / delta)) / epsilon
double gaussian_sigma(double epsilon, double delta, double clip);

DPConfig make_dp_config(double epsilon, double delta, double clip_percentile, const ClipNorms& clip);

KVBlock<float> dp_protect_block(const KVBlock<float>& block, const DPConfig& config, Rng& rng);

// Every plaintext block, each with its own stream derived from (seed, block id).
void dp_protect_cache(KVCache& cache, const DPConfig& config, std::uint64_t seed);

}  // namespace kvlab
