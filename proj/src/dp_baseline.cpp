#include "kvlab/dp_baseline.hpp"

#include <algorithm>
#include <cmath>

namespace kvlab {

namespace {

double valid_norm(const Matrix<float>& rows, const KVBlock<float>& block) {
  double ss = 0.0;
  for (int r = 0; r < block.block_size(); ++r)
    if (block.row_valid(r)) ss += rows.row(r).cast<double>().squaredNorm();
  return std::sqrt(ss);
}

void clip_and_noise(Matrix<float>& rows, const KVBlock<float>& block, double clip, double sigma, Rng& rng) {
  const double norm = valid_norm(rows, block);
  const double scale = norm > clip ? clip / norm : 1.0;
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int r = 0; r < block.block_size(); ++r) {
    if (!block.row_valid(r)) continue;
    for (Index c = 0; c < rows.cols(); ++c) {
      const double x = static_cast<double>(rows(r, c)) * scale;
      rows(r, c) = static_cast<float>(sigma > 0.0 ? x + sigma * noise(rng) : x);
    }
  }
}

}  // namespace

void DPConfig::validate() const {
  if (!(epsilon > 0.0)) throw Error(ErrorCode::kInvalidConfig, "epsilon must be > 0");
  if (!(delta > 0.0 && delta < 1.0)) throw Error(ErrorCode::kInvalidConfig, "delta must lie in (0, 1)");
  if (!(clip_percentile >= 0.0 && clip_percentile <= 1.0))
    throw Error(ErrorCode::kInvalidConfig, "clip percentile must lie in [0, 1]");
  if (!(clip_k > 0.0) || !(clip_v > 0.0)) throw Error(ErrorCode::kInvalidConfig, "clip norms must be > 0");
}

double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw Error(ErrorCode::kInvalidConfig, "percentile of an empty set");
  if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorCode::kInvalidConfig, "percentile must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = p * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

ClipNorms calibrate_clip(std::span<const KVBlock<float>> blocks, double p) {
  if (blocks.empty()) throw Error(ErrorCode::kInvalidConfig, "empty clipping corpus");
  std::vector<double> nk, nv;
  for (const auto& b : blocks) {
    nk.push_back(valid_norm(b.k, b));
    nv.push_back(valid_norm(b.v, b));
  }
  return {percentile(std::move(nk), p), percentile(std::move(nv), p)};
}

double gaussian_sigma(double epsilon, double delta, double clip) {
  if (!(epsilon > 0.0)) throw Error(ErrorCode::kInvalidConfig, "epsilon must be > 0");
  if (!(delta > 0.0 && delta < 1.0)) throw Error(ErrorCode::kInvalidConfig, "delta must lie in (0, 1)");
  return clip * std::sqrt(2.0 * std::log(1.25 / delta)) / epsilon;
}

DPConfig make_dp_config(double epsilon, double delta, double clip_percentile, const ClipNorms& clip) {
  DPConfig c{epsilon, delta, clip_percentile, clip.k, clip.v, 0.0, 0.0};
  c.sigma_k = gaussian_sigma(epsilon, delta, clip.k);
  c.sigma_v = gaussian_sigma(epsilon, delta, clip.v);
  c.validate();
  return c;
}

KVBlock<float> dp_protect_block(const KVBlock<float>& block, const DPConfig& config, Rng& rng) {
  config.validate();
  if (block.state != BlockState::kPlaintext)
    throw Error(ErrorCode::kCacheInconsistency, std::string("cannot add noise to a ") + to_string(block.state) + " block");
  KVBlock<float> out = block;
  clip_and_noise(out.k, out, config.clip_k, config.sigma_k, rng);
  clip_and_noise(out.v, out, config.clip_v, config.sigma_v, rng);
  out.state = BlockState::kDpNoised;
  return out;
}

void dp_protect_cache(KVCache& cache, const DPConfig& config, std::uint64_t seed) {
  for (std::size_t id = 0; id < cache.blocks().size(); ++id) {
    auto& b = cache.blocks()[id];
    if (b.state != BlockState::kPlaintext) continue;
    Rng rng(derive_seed(seed, {0xd9ULL, static_cast<std::uint64_t>(id)}));
    b = dp_protect_block(b, config, rng);
  }
}

}  // namespace kvlab
