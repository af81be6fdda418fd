#pragma once

// Dense kernels shared by the model, the attacks and the cloak: Haar-orthogonal
// sampling, RoPE matrices, the RoPE-commuting rotation-scaling family, seeded
// permutations and least squares.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <vector>

#include "kvlab/error.hpp"

namespace kvlab {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Index = Eigen::Index;

// The explicit seeded stream passed to every sampling routine.
using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent sub-stream seeds.
std::uint64_t mix_seed(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> tags);

template <typename Scalar = double>
Matrix<Scalar> standard_normal(Index rows, Index cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix<Scalar> out(rows, cols);
  // Fill row by row so the draw order matches the row-major file layout.
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) out(i, j) = static_cast<Scalar>(normal(rng));
  return out;
}

// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the sign of
// diag(R) folded into Q.
template <typename Scalar = double>
Matrix<Scalar> sample_orthogonal(Index n, Rng& rng) {
  if (n < 1) throw Error(ErrorCode::kInvalidDimension, "orthogonal matrix needs n >= 1");
  Matrix<double> g = standard_normal<double>(n, n, rng);
  Eigen::HouseholderQR<Matrix<double>> qr(g);
  Matrix<double> q = qr.householderQ() * Matrix<double>::Identity(n, n);
  const Matrix<double>& r = qr.matrixQR();
  for (Index j = 0; j < n; ++j)
    if (r(j, j) < 0.0) q.col(j) = -q.col(j);
  return q.template cast<Scalar>();
}

// theta_j = base^(-2j/d), j < d/2.
inline double rope_frequency(Index j, Index d, double base) {
  return std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(d));
}

// R_{base,pos} in the half-split layout: dimension j pairs with j + d/2,
// [[C, -S], [S, C]] acting on row vectors (k = x W^T R).
template <typename Scalar = double>
Matrix<Scalar> rope_matrix(Index d, Index pos, double base = 10000.0) {
  if (d < 2 || d % 2 != 0) throw Error(ErrorCode::kInvalidDimension, "RoPE needs an even dimension");
  if (pos < 0) throw Error(ErrorCode::kInvalidDimension, "negative position");
  const Index half = d / 2;
  Matrix<Scalar> r = Matrix<Scalar>::Zero(d, d);
  for (Index j = 0; j < half; ++j) {
    const double angle = static_cast<double>(pos) * rope_frequency(j, d, base);
    const Scalar c = static_cast<Scalar>(std::cos(angle));
    const Scalar s = static_cast<Scalar>(std::sin(angle));
    r(j, j) = c;
    r(j, j + half) = -s;
    r(j + half, j) = s;
    r(j + half, j + half) = c;
  }
  return r;
}

// In-place x <- x R for one head-sized row segment. Equivalent to
// multiplying by rope_matrix(d, pos, base) without forming it.
template <typename Derived>
void apply_rope(Eigen::MatrixBase<Derived>&& row, Index pos, double base) {
  const Index d = row.size();
  const Index half = d / 2;
  for (Index j = 0; j < half; ++j) {
    const double angle = static_cast<double>(pos) * rope_frequency(j, d, base);
    const double c = std::cos(angle), s = std::sin(angle);
    const double a = row(j), b = row(j + half);
    row(j) = a * c + b * s;
    row(j + half) = -a * s + b * c;
  }
}
template <typename Derived>
void apply_rope(Eigen::MatrixBase<Derived>& row, Index pos, double base) {
  apply_rope(std::move(row), pos, base);
}

struct ScaleBounds {
  double lo = 0.5;
  double hi = 2.0;
};

// Block-diagonal rotation-scaling matrix in the RoPE layout: each pair
// (j, j + d/2) carries the 2x2 block [[t_j, -u_j], [u_j, t_j]]. Every such
// matrix commutes with every RoPE matrix of the same dimension.
struct RotationScalingKey {
  Eigen::VectorXd t;
  Eigen::VectorXd u;
  ScaleBounds bounds;

  Index dim() const { return 2 * t.size(); }
  double block_scale(Index j) const { return std::hypot(t(j), u(j)); }
  void validate() const;
};

RotationScalingKey make_commuting_key(Index d, Rng& rng, ScaleBounds bounds = {});
RotationScalingKey identity_key(Index d);
RotationScalingKey invert_key(const RotationScalingKey& key);

template <typename Scalar = double>
Matrix<Scalar> materialize(const RotationScalingKey& key) {
  const Index half = key.t.size();
  const Index d = 2 * half;
  Matrix<Scalar> m = Matrix<Scalar>::Zero(d, d);
  for (Index j = 0; j < half; ++j) {
    m(j, j) = static_cast<Scalar>(key.t(j));
    m(j, j + half) = static_cast<Scalar>(-key.u(j));
    m(j + half, j) = static_cast<Scalar>(key.u(j));
    m(j + half, j + half) = static_cast<Scalar>(key.t(j));
  }
  return m;
}

// Row permutation: output row r is input row source(r).
class Permutation {
 public:
  Permutation() = default;
  explicit Permutation(std::vector<int> mapping);

  static Permutation identity(int size);

  int size() const { return static_cast<int>(map_.size()); }
  int source(int row) const { return map_[static_cast<std::size_t>(row)]; }
  const std::vector<int>& mapping() const { return map_; }

  Permutation inverse() const;
  // (a.then(b)) applied to X equals b applied to (a applied to X).
  Permutation then(const Permutation& next) const;
  bool is_identity() const;

  template <typename Derived>
  Matrix<typename Derived::Scalar> apply_rows(const Eigen::MatrixBase<Derived>& x) const {
    if (x.rows() != size())
      throw Error(ErrorCode::kDimensionMismatch, "permutation size does not match row count");
    Matrix<typename Derived::Scalar> out(x.rows(), x.cols());
    for (int r = 0; r < size(); ++r) out.row(r) = x.row(source(r));
    return out;
  }

  template <typename Scalar = double>
  Matrix<Scalar> matrix() const {
    Matrix<Scalar> p = Matrix<Scalar>::Zero(size(), size());
    for (int r = 0; r < size(); ++r) p(r, source(r)) = Scalar(1);
    return p;
  }

  friend bool operator==(const Permutation&, const Permutation&) = default;

 private:
  std::vector<int> map_;
};

// Uniform permutation via Fisher-Yates over the stream.
Permutation sample_permutation(int size, Rng& rng);

struct LeastSquaresResult {
  Eigen::MatrixXd solution;
  Index rank = 0;
  bool rank_deficient = false;
};

// Minimum-norm minimizer of ||A X - B||_F via complete orthogonal
// decomposition; rank deficiency is reported, not treated as an error.
LeastSquaresResult solve_least_squares(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

template <typename DerivedA, typename DerivedB>
double max_abs_diff(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw Error(ErrorCode::kDimensionMismatch, "max_abs_diff shape mismatch");
  if (a.size() == 0) return 0.0;
  return static_cast<double>((a.template cast<double>() - b.template cast<double>()).cwiseAbs().maxCoeff());
}

}  // namespace kvlab
