#include "kvlab/linalg.hpp"

#include <algorithm>
#include <numbers>
#include <string>

namespace kvlab {

std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t s = mix_seed(root);
  for (std::uint64_t tag : tags) s = mix_seed(s ^ mix_seed(tag + 0x632be59bd9b4e019ULL));
  return s;
}

void RotationScalingKey::validate() const {
  if (t.size() != u.size() || t.size() == 0)
    throw Error(ErrorCode::kInvalidDimension, "rotation-scaling key needs matching non-empty t/u");
  for (Index j = 0; j < t.size(); ++j) {
    if (!std::isfinite(t(j)) || !std::isfinite(u(j)))
      throw Error(ErrorCode::kKey, "non-finite rotation-scaling coefficient");
    if (t(j) * t(j) + u(j) * u(j) <= 0.0)
      throw Error(ErrorCode::kKey, "singular 2x2 block " + std::to_string(j));
  }
}

RotationScalingKey make_commuting_key(Index d, Rng& rng, ScaleBounds bounds) {
  if (d < 2 || d % 2 != 0) throw Error(ErrorCode::kInvalidDimension, "commuting key needs an even dimension");
  if (!(bounds.lo > 0.0) || bounds.hi < bounds.lo)
    throw Error(ErrorCode::kInvalidConfig, "scale bounds must satisfy 0 < lo <= hi");
  std::uniform_real_distribution<double> scale(bounds.lo, bounds.hi);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  RotationScalingKey key;
  key.bounds = bounds;
  key.t.resize(d / 2);
  key.u.resize(d / 2);
  for (Index j = 0; j < d / 2; ++j) {
    const double s = bounds.lo == bounds.hi ? bounds.lo : scale(rng);
    const double phi = angle(rng);
    key.t(j) = s * std::cos(phi);
    key.u(j) = s * std::sin(phi);
  }
  return key;
}

RotationScalingKey identity_key(Index d) {
  RotationScalingKey key;
  key.t = Eigen::VectorXd::Ones(d / 2);
  key.u = Eigen::VectorXd::Zero(d / 2);
  key.bounds = {1.0, 1.0};
  return key;
}

RotationScalingKey invert_key(const RotationScalingKey& key) {
  key.validate();
  RotationScalingKey inv;
  inv.t.resize(key.t.size());
  inv.u.resize(key.u.size());
  for (Index j = 0; j < key.t.size(); ++j) {
    const double n2 = key.t(j) * key.t(j) + key.u(j) * key.u(j);
    inv.t(j) = key.t(j) / n2;
    inv.u(j) = -key.u(j) / n2;
  }
  inv.bounds = {1.0 / key.bounds.hi, 1.0 / key.bounds.lo};
  return inv;
}

Permutation::Permutation(std::vector<int> mapping) : map_(std::move(mapping)) {
  std::vector<char> seen(map_.size(), 0);
  for (int v : map_) {
    if (v < 0 || static_cast<std::size_t>(v) >= map_.size() || seen[static_cast<std::size_t>(v)])
      throw Error(ErrorCode::kInvalidConfig, "mapping is not a bijection");
    seen[static_cast<std::size_t>(v)] = 1;
  }
}

Permutation Permutation::identity(int size) {
  std::vector<int> m(static_cast<std::size_t>(size));
  for (int i = 0; i < size; ++i) m[static_cast<std::size_t>(i)] = i;
  return Permutation(std::move(m));
}

Permutation Permutation::inverse() const {
  std::vector<int> inv(map_.size());
  for (int r = 0; r < size(); ++r) inv[static_cast<std::size_t>(source(r))] = r;
  return Permutation(std::move(inv));
}

Permutation Permutation::then(const Permutation& next) const {
  if (next.size() != size()) throw Error(ErrorCode::kDimensionMismatch, "composing permutations of different size");
  std::vector<int> m(map_.size());
  for (int r = 0; r < size(); ++r) m[static_cast<std::size_t>(r)] = source(next.source(r));
  return Permutation(std::move(m));
}

bool Permutation::is_identity() const {
  for (int r = 0; r < size(); ++r)
    if (source(r) != r) return false;
  return true;
}

Permutation sample_permutation(int size, Rng& rng) {
  if (size < 1) throw Error(ErrorCode::kInvalidDimension, "permutation needs size >= 1");
  std::vector<int> m(static_cast<std::size_t>(size));
  for (int i = 0; i < size; ++i) m[static_cast<std::size_t>(i)] = i;
  for (int i = size - 1; i > 0; --i) {
    std::uniform_int_distribution<int> pick(0, i);
    std::swap(m[static_cast<std::size_t>(i)], m[static_cast<std::size_t>(pick(rng))]);
  }
  return Permutation(std::move(m));
}

LeastSquaresResult solve_least_squares(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() < 1 || a.cols() < 1) throw Error(ErrorCode::kInvalidDimension, "least squares needs a non-empty system");
  if (a.rows() != b.rows()) throw Error(ErrorCode::kDimensionMismatch, "A and B row counts differ");
  if (!a.allFinite() || !b.allFinite()) throw Error(ErrorCode::kInvalidConfig, "non-finite least-squares input");
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(a);
  LeastSquaresResult out;
  out.solution = cod.solve(b);
  out.rank = cod.rank();
  out.rank_deficient = out.rank < a.cols();
  return out;
}

}  // namespace kvlab
