#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "kvlab/dp_baseline.hpp"

using namespace kvlab;

namespace {

KVBlock<float> constant_block(int b, int d, int fill, float value) {
  KVBlock<float> blk(0, 0, b, d);
  blk.k.setConstant(value);
  blk.v.setConstant(2.0f * value);
  blk.fill = fill;
  return blk;
}

double frobenius_valid(const Matrix<float>& m, int fill) {
  return m.topRows(fill).cast<double>().norm();
}

}  // namespace

TEST_CASE("percentile") {
  CHECK(percentile({3.0}, 0.5) == 3.0);
  std::vector<double> v;
  for (int i = 100; i >= 1; --i) v.push_back(i);
  CHECK(percentile(v, 0.5) == doctest::Approx(50.5));
  CHECK(percentile(v, 0.0) == 1.0);
  CHECK(percentile(v, 1.0) == 100.0);
  CHECK(percentile({0.0, 10.0}, 0.25) == doctest::Approx(2.5));
  CHECK_THROWS_AS(percentile({}, 0.5), Error);
  CHECK_THROWS_AS(percentile({1.0}, 1.5), Error);
}

TEST_CASE("clip calibration") {
  SUBCASE("single block") {
    KVBlock<float> blk(0, 0, 4, 4);
    blk.k.setZero();
    blk.v.setZero();
    blk.k(0, 0) = 3.0f;
    blk.k(1, 2) = 4.0f;
    blk.v(0, 1) = 1.0f;
    blk.fill = 2;
    blk.k(3, 3) = 100.0f;  // padding, ignored
    const std::vector<KVBlock<float>> blocks{blk};
    const ClipNorms c = calibrate_clip(blocks, 0.5);
    CHECK(c.k == doctest::Approx(5.0));
    CHECK(c.v == doctest::Approx(1.0));
  }
  SUBCASE("median of 1..100") {
    std::vector<KVBlock<float>> blocks;
    for (int n = 1; n <= 100; ++n) {
      KVBlock<float> blk(0, 0, 2, 2);
      blk.k.setZero();
      blk.v.setZero();
      blk.k(0, 0) = static_cast<float>(n);
      blk.v(1, 1) = static_cast<float>(n);
      blk.fill = 2;
      blocks.push_back(blk);
    }
    const ClipNorms c = calibrate_clip(blocks, 0.5);
    CHECK(c.k == doctest::Approx(50.5));
    CHECK(c.v == doctest::Approx(50.5));
  }
}

TEST_CASE("noise scale") {
  CHECK(gaussian_sigma(1.0, 1e-5, 1.0) == doctest::Approx(4.8448).epsilon(1e-4));
  CHECK(gaussian_sigma(1.0, 1e-5, 1.0) == doctest::Approx(std::sqrt(2.0 * std::log(1.25e5))));
  CHECK(gaussian_sigma(10.0, 1e-5, 1.0) == doctest::Approx(gaussian_sigma(1.0, 1e-5, 1.0) / 10.0));
  CHECK(gaussian_sigma(1.0, 1e-5, 3.0) == doctest::Approx(3.0 * gaussian_sigma(1.0, 1e-5, 1.0)));
  CHECK_THROWS_AS(gaussian_sigma(0.0, 1e-5, 1.0), Error);
  CHECK_THROWS_AS(gaussian_sigma(1.0, 1.0, 1.0), Error);
  const DPConfig c = make_dp_config(2.0, 1e-5, 0.5, {4.0, 8.0});
  CHECK(c.sigma_k == doctest::Approx(gaussian_sigma(2.0, 1e-5, 4.0)));
  CHECK(c.sigma_v == doctest::Approx(2.0 * c.sigma_k));
  CHECK_THROWS_AS(make_dp_config(1.0, 1e-5, 0.5, {0.0, 1.0}), Error);
}

TEST_CASE("block protection") {
  SUBCASE("vanishing noise below the clip leaves rows unchanged") {
    const KVBlock<float> blk = constant_block(4, 8, 3, 0.25f);
    const DPConfig c = make_dp_config(1e300, 1e-5, 0.5, {1e3, 1e3});
    Rng rng(1);
    const KVBlock<float> out = dp_protect_block(blk, c, rng);
    CHECK(max_abs_diff(out.k, blk.k) <= 1e-300);
    CHECK(max_abs_diff(out.v, blk.v) <= 1e-300);
    CHECK(out.state == BlockState::kDpNoised);
  }
  SUBCASE("clipping to exactly C") {
    KVBlock<float> blk = constant_block(4, 8, 4, 1.0f);
    const double norm = frobenius_valid(blk.k, 4);
    const double clip = norm / 2.0;
    const DPConfig c = make_dp_config(1e300, 1e-5, 0.5, {clip, 1e6});
    Rng rng(2);
    const KVBlock<float> out = dp_protect_block(blk, c, rng);
    CHECK(frobenius_valid(out.k, 4) == doctest::Approx(clip).epsilon(1e-6));
    CHECK(max_abs_diff(out.v, blk.v) == 0.0);
  }
  SUBCASE("padding rows are untouched") {
    KVBlock<float> blk = constant_block(4, 8, 2, 1.0f);
    const DPConfig c = make_dp_config(1.0, 1e-5, 0.5, {1.0, 1.0});
    Rng rng(3);
    const KVBlock<float> out = dp_protect_block(blk, c, rng);
    CHECK(max_abs_diff(out.k.bottomRows(2), blk.k.bottomRows(2)) == 0.0);
  }
  SUBCASE("empirical noise deviation") {
    const int b = 64, d = 64;
    KVBlock<float> blk(0, 0, b, d);
    blk.k.setZero();
    blk.v.setZero();
    blk.fill = b;
    const DPConfig c = make_dp_config(5.0, 1e-5, 0.5, {1.0, 2.0});
    Rng rng(4);
    const KVBlock<float> out = dp_protect_block(blk, c, rng);
    const double n = static_cast<double>(b) * d;
    const double sk = std::sqrt(out.k.cast<double>().squaredNorm() / n);
    const double sv = std::sqrt(out.v.cast<double>().squaredNorm() / n);
    CHECK(std::abs(sk - c.sigma_k) <= 0.1 * c.sigma_k);
    CHECK(std::abs(sv - c.sigma_v) <= 0.1 * c.sigma_v);
  }
  SUBCASE("only plaintext blocks") {
    KVBlock<float> blk = constant_block(4, 8, 4, 1.0f);
    blk.state = BlockState::kCloaked;
    const DPConfig c = make_dp_config(1.0, 1e-5, 0.5, {1.0, 1.0});
    Rng rng(5);
    CHECK_THROWS_AS(dp_protect_block(blk, c, rng), Error);
  }
}

TEST_CASE("cache protection") {
  KVCache a(2, 2, 8, 4), b(2, 2, 8, 4);
  Rng rng(6);
  for (int pos = 0; pos < 6; ++pos) {
    a.reserve_position();
    b.reserve_position();
    for (int l = 0; l < 2; ++l)
      for (int h = 0; h < 2; ++h) {
        const Eigen::RowVectorXd k = standard_normal(1, 8, rng), v = standard_normal(1, 8, rng);
        a.write(l, h, pos, k, v);
        b.write(l, h, pos, k, v);
      }
  }
  const KVCache original = a;
  const DPConfig c = make_dp_config(1.0, 1e-5, 0.5, {1.0, 1.0});
  dp_protect_cache(a, c, 99);
  dp_protect_cache(b, c, 99);
  for (std::size_t i = 0; i < a.blocks().size(); ++i) {
    CHECK(a.blocks()[i].state == BlockState::kDpNoised);
    CHECK((a.blocks()[i].k.array() == b.blocks()[i].k.array()).all());
    CHECK(max_abs_diff(a.blocks()[i].k, original.blocks()[i].k) > 0.0);
  }
  CHECK(max_abs_diff(a.blocks()[0].k.topRows(4), a.blocks()[1].k.topRows(4)) > 0.0);
  KVCache other = original;
  dp_protect_cache(other, c, 100);
  CHECK(max_abs_diff(other.blocks()[0].k, a.blocks()[0].k) > 0.0);
}
