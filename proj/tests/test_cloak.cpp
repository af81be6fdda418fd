#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "kvlab/cloak.hpp"

using namespace kvlab;

namespace {

ModelConfig small_config(int block = 8) {
  ModelConfig c;
  c.layers = 2;
  c.hidden = 64;
  c.heads = 2;
  c.kv_heads = 2;
  c.head_dim = 32;
  c.vocab = 128;
  c.block_size = block;
  return c;
}

std::vector<std::vector<Token>> random_corpus(int count, int len, int vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<Token> pick(0, vocab - 1);
  std::vector<std::vector<Token>> out(static_cast<std::size_t>(count), std::vector<Token>(static_cast<std::size_t>(len)));
  for (auto& s : out)
    for (auto& t : s) t = pick(rng);
  return out;
}

struct Fixture {
  ModelConfig config;
  Weights weights;
  CloakKey key;

  explicit Fixture(int block = 8) : config(small_config(block)), weights(init_weights(config, 21)) {
    Rng rng(22);
    key = keygen(weights, random_corpus(4, 3 * block, config.vocab, 23), rng);
  }
};

KVBlock<float> random_block(const CloakKey& key, int fill, std::uint64_t seed) {
  Rng rng(seed);
  KVBlock<float> b(0, 0, key.block_size, key.head_dim);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int r = 0; r < key.block_size; ++r)
    for (int c = 0; c < key.head_dim; ++c) {
      b.k(r, c) = static_cast<float>(u(rng) * key.theta_k);
      b.v(r, c) = static_cast<float>(u(rng) * key.theta_v);
    }
  b.fill = fill;
  return b;
}

}  // namespace

TEST_CASE("keygen") {
  const Fixture f;
  SUBCASE("deterministic") {
    Rng rng(22);
    const CloakKey again = keygen(f.weights, random_corpus(4, 24, f.config.vocab, 23), rng);
    CHECK((again.s.array() == f.key.s.array()).all());
    CHECK((again.a_k.array() == f.key.a_k.array()).all());
    CHECK(again.theta_k == f.key.theta_k);
    CHECK(again.stream_seed == f.key.stream_seed);
  }
  SUBCASE("thresholds bound the fused calibration caches") {
    const Model fused(fuse_weights(f.weights, f.key));
    double mk = 0.0, mv = 0.0;
    for (const auto& s : random_corpus(4, 24, f.config.vocab, 23)) {
      KVCache cache(f.config);
      fused.prefill<float>(s, cache);
      for (const auto& b : cache.blocks()) {
        mk = std::max(mk, static_cast<double>(b.k.topRows(b.fill).cwiseAbs().maxCoeff()));
        mv = std::max(mv, static_cast<double>(b.v.topRows(b.fill).cwiseAbs().maxCoeff()));
      }
    }
    CHECK(f.key.theta_k >= mk);
    CHECK(f.key.theta_v >= mv);
    CHECK(f.key.theta_k == doctest::Approx(mk));
  }
  SUBCASE("identifier layout and magnitudes") {
    for (int i = 0; i < f.key.block_size; ++i) {
      for (int c = 0; c < f.key.head_dim; ++c) {
        if (c == i) continue;
        CHECK(f.key.a_k(i, c) == 0.0);
        CHECK(f.key.a_v(i, c) == 0.0);
      }
      CHECK(f.key.a_k(i, i) >= 3.0 * f.key.theta_k);
      CHECK(f.key.a_k(i, i) <= 4.0 * f.key.theta_k);
      CHECK(f.key.a_v(i, i) >= 3.0 * f.key.theta_v);
      CHECK(f.key.a_v(i, i) <= 4.0 * f.key.theta_v);
    }
    CHECK(max_abs_diff(f.key.s.transpose() * f.key.s, Eigen::MatrixXd::Identity(8, 8)) <= 1e-12);
  }
  SUBCASE("block larger than head_dim is rejected") {
    Rng rng(1);
    CHECK_THROWS_AS(sample_secrets(64, 32, rng), Error);
  }
  SUBCASE("factor ordering is validated") {
    CloakKey bad = f.key;
    bad.pad_value_factor = 2.5;
    CHECK_THROWS_AS(bad.validate(), Error);
  }
}

TEST_CASE("fusion") {
  const Fixture f;
  SUBCASE("identity key leaves weights bitwise unchanged") {
    CloakKey id = f.key;
    id.m1 = identity_key(f.config.head_dim);
    id.m2 = identity_key(f.config.head_dim);
    const Weights fw = fuse_weights(f.weights, id);
    for (std::size_t l = 0; l < fw.layers.size(); ++l) {
      CHECK((fw.layers[l].wq.array() == f.weights.layers[l].wq.array()).all());
      CHECK((fw.layers[l].wk.array() == f.weights.layers[l].wk.array()).all());
      CHECK((fw.layers[l].wv.array() == f.weights.layers[l].wv.array()).all());
      CHECK((fw.layers[l].wo.array() == f.weights.layers[l].wo.array()).all());
    }
  }
  SUBCASE("logits unchanged on 20 sequences") {
    const Model plain(f.weights), fused(fuse_weights(f.weights, f.key));
    for (const auto& s : random_corpus(20, 19, f.config.vocab, 5)) {
      KVCache a(f.config), b(f.config);
      CHECK(max_abs_diff(plain.prefill<float>(s, a), fused.prefill<float>(s, b)) <= 1e-4);
      CHECK(max_abs_diff(plain.forward_full(s), fused.forward_full(s)) <= 1e-10);
    }
  }
  SUBCASE("attention scores unchanged") {
    const Weights fw = fuse_weights(f.weights, f.key);
    const int d = f.config.head_dim;
    Rng rng(3);
    for (int pos_q : {0, 3, 40})
      for (int pos_k : {0, 2, 17}) {
        const Eigen::RowVectorXd xq = standard_normal(1, f.config.hidden, rng);
        const Eigen::RowVectorXd xk = standard_normal(1, f.config.hidden, rng);
        for (int h = 0; h < f.config.heads; ++h) {
          auto head = [&](const Eigen::MatrixXd& w, const Eigen::RowVectorXd& x, int pos) {
            return Eigen::RowVectorXd(x * w.middleRows(h * d, d).transpose() * rope_matrix(d, pos));
          };
          const auto& p = f.weights.layers[0];
          const auto& m = fw.layers[0];
          const double plain = head(p.wq, xq, pos_q).dot(head(p.wk, xk, pos_k));
          const double fused = head(m.wq, xq, pos_q).dot(head(m.wk, xk, pos_k));
          CHECK(fused == doctest::Approx(plain).epsilon(1e-9));
        }
      }
  }
  SUBCASE("the fused key projection commutes with RoPE") {
    const Eigen::MatrixXd m1 = materialize(f.key.m1);
    const Eigen::MatrixXd wk = f.weights.layers[1].wk.topRows(f.config.head_dim);
    Rng rng(4);
    for (int pos : {1, 9, 300}) {
      const Eigen::RowVectorXd x = standard_normal(1, f.config.hidden, rng);
      const Eigen::MatrixXd r = rope_matrix(f.config.head_dim, pos);
      CHECK(max_abs_diff(x * (wk.transpose() * m1) * r, x * wk.transpose() * r * m1) <= 1e-10);
    }
  }
  SUBCASE("key head_dim must match") {
    CloakKey other = f.key;
    other.m1 = identity_key(16);
    CHECK_THROWS_AS(fuse_weights(f.weights, other), Error);
  }
}

TEST_CASE("naive scheme and its chosen-plaintext break") {
  Rng rng(9);
  SUBCASE("identity") {
    const Eigen::MatrixXd k = standard_normal(3, 4, rng);
    CHECK(max_abs_diff(obfuscate_naive(k, Eigen::MatrixXd::Identity(3, 3), Eigen::MatrixXd::Identity(4, 4)), k) ==
          0.0);
  }
  SUBCASE("norm preservation and inverse") {
    const Eigen::MatrixXd s = sample_orthogonal(8, rng), m = sample_orthogonal(16, rng);
    const Eigen::MatrixXd k = standard_normal(8, 16, rng);
    const Eigen::MatrixXd y = obfuscate_naive(k, s, m);
    CHECK(y.norm() == doctest::Approx(k.norm()).epsilon(1e-12));
    CHECK(max_abs_diff(s.inverse() * y * m.inverse(), k) <= 1e-10);
    CHECK_THROWS_AS(obfuscate_naive(k, m, s), Error);
  }
  SUBCASE("2x2 identity oracle") {
    const Eigen::MatrixXd i2 = Eigen::MatrixXd::Identity(2, 2);
    const CpaRecovery r = cpa_break_naive([&](const Eigen::MatrixXd& k) { return obfuscate_naive(k, i2, i2); }, 2, 2);
    const Eigen::MatrixXd k = standard_normal(2, 2, rng);
    CHECK(max_abs_diff(r.s_hat * k * r.m_hat, k) <= 1e-12);
  }
  SUBCASE("16 x 128 orthogonal secrets") {
    const Eigen::MatrixXd s = sample_orthogonal(16, rng), m = sample_orthogonal(128, rng);
    const CpaRecovery r = cpa_break_naive([&](const Eigen::MatrixXd& k) { return obfuscate_naive(k, s, m); }, 16, 128);
    for (int i = 0; i < 10; ++i) {
      const Eigen::MatrixXd k = standard_normal(16, 128, rng);
      CHECK(max_abs_diff(r.s_hat * k * r.m_hat, s * k * m) <= 1e-8);
    }
    const double c = (r.s_hat.array() * s.array()).sum() / s.squaredNorm();
    CHECK(max_abs_diff(r.s_hat, c * s) <= 1e-8);
    CHECK(max_abs_diff(r.m_hat, m / c) <= 1e-8);
    CHECK(r.queries == 1 + 16 + 128 - 1);
  }
}

TEST_CASE("block obfuscation") {
  const Fixture f;
  const CloakKey& key = f.key;
  const int b = key.block_size;

  SUBCASE("degenerate key exposes the canonical rows") {
    CloakKey debug = key;
    debug.s = Eigen::MatrixXd::Identity(b, b);
    debug.a_k.setZero();
    debug.a_v.setZero();
    const KVBlock<float> blk = random_block(key, 5, 1);
    const Permutation id = Permutation::identity(b);
    Rng rng(1);
    const KVBlock<float> out = obfuscate_block(blk, debug, rng, &id);
    CHECK(max_abs_diff(out.k.topRows(5), blk.k.topRows(5)) <= 1e-6);
    CHECK(max_abs_diff(out.v.topRows(5), blk.v.topRows(5)) <= 1e-6);
    for (int r = 5; r < b; ++r) {
      CHECK((out.k.row(r).array() == static_cast<float>(1.5 * key.theta_k)).all());
      CHECK((out.v.row(r).array() == static_cast<float>(1.5 * key.theta_v)).all());
    }
    CHECK(out.state == BlockState::kCloaked);
  }
  SUBCASE("fresh permutation per call") {
    const KVBlock<float> blk = random_block(key, b, 2);
    Rng rng(5);
    const KVBlock<float> a = obfuscate_block(blk, key, rng), c = obfuscate_block(blk, key, rng);
    CHECK(max_abs_diff(a.k, c.k) > 1e-3);
  }
  SUBCASE("one identifier per row after S^-1") {
    const KVBlock<float> blk = random_block(key, 6, 3);
    Rng rng(6);
    const KVBlock<float> out = obfuscate_block(blk, key, rng);
    const Eigen::MatrixXd y = key.s.transpose() * out.k.cast<double>();
    std::set<Index> columns;
    for (int r = 0; r < b; ++r) {
      int count = 0;
      for (Index c = 0; c < y.cols(); ++c)
        if (std::abs(y(r, c)) > 2.0 * key.theta_k) {
          ++count;
          columns.insert(c);
        }
      CHECK(count == 1);
    }
    CHECK(static_cast<int>(columns.size()) == b);
  }
  SUBCASE("roundtrip") {
    for (int fill : {1, 5, b}) {
      const KVBlock<float> blk = random_block(key, fill, 10 + static_cast<std::uint64_t>(fill));
      Rng rng(7);
      const KVBlock<float> sealed = obfuscate_block(blk, key, rng);
      for (bool meta : {true, false}) {
        const DeobfuscatedBlock d = deobfuscate_block(sealed, key, meta);
        CHECK(d.block.fill == fill);
        CHECK(d.block.state == BlockState::kPlaintext);
        CHECK(d.slot_map.size() == b);
        for (int r = 0; r < b; ++r) {
          const int slot = d.slot_map.source(r);
          CHECK(d.block.slots[static_cast<std::size_t>(r)] == slot);
          if (slot < fill) {
            CHECK(max_abs_diff(d.block.k.row(r), blk.k.row(slot)) <= 1e-4 * key.theta_k);
            CHECK(max_abs_diff(d.block.v.row(r), blk.v.row(slot)) <= 1e-4 * key.theta_v);
          } else {
            CHECK(d.block.k.row(r).isZero());
          }
        }
      }
    }
  }
  SUBCASE("rank-1 blocks still get distinct rows") {
    for (int bs : {16, 32}) {
      const Fixture g(bs);
      KVBlock<float> blk = random_block(g.key, bs, 4);
      for (int r = 1; r < bs; ++r) {
        blk.k.row(r) = blk.k.row(0);
        blk.v.row(r) = blk.v.row(0);
      }
      Rng rng(8);
      const Eigen::MatrixXd y = g.key.s.transpose() * obfuscate_block(blk, g.key, rng).k.cast<double>();
      for (int i = 0; i < bs; ++i)
        for (int j = i + 1; j < bs; ++j) CHECK((y.row(i) - y.row(j)).norm() > g.key.theta_k);
    }
  }
  SUBCASE("tampering is detected") {
    const KVBlock<float> blk = random_block(key, b, 5);
    Rng rng(9);
    KVBlock<float> sealed = obfuscate_block(blk, key, rng);
    Eigen::MatrixXd y = key.s.transpose() * sealed.k.cast<double>();
    Index col = 0;
    y.row(2).cwiseAbs().maxCoeff(&col);
    y(2, col) = 0.0;
    KVBlock<float> tampered = sealed;
    tampered.k = (key.s * y).cast<float>();
    try {
      deobfuscate_block(tampered, key);
      FAIL("tampered block decoded");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kCorruption);
    }

    Eigen::MatrixXd yv = key.s.transpose() * sealed.v.cast<double>();
    yv.row(0).swap(yv.row(1));
    KVBlock<float> swapped = sealed;
    swapped.v = (key.s * yv).cast<float>();
    CHECK_THROWS_AS(deobfuscate_block(swapped, key), Error);
  }
  SUBCASE("state errors") {
    const KVBlock<float> blk = random_block(key, b, 6);
    Rng rng(1);
    const KVBlock<float> sealed = obfuscate_block(blk, key, rng);
    try {
      obfuscate_block(sealed, key, rng);
      FAIL("double obfuscation accepted");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kDoubleObfuscation);
    }
    CHECK_THROWS_AS(deobfuscate_block(blk, key), Error);
    KVBlock<float> wrong(0, 0, b + 1 <= key.head_dim ? b + 1 : b - 1, key.head_dim);
    CHECK_THROWS_AS(obfuscate_block(wrong, key, rng), Error);
  }
  SUBCASE("unfused path matches the fused transform") {
    KVBlock<float> blk = random_block(key, 6, 12);
    // scales reach 2, so keep the rotated rows below the thresholds
    blk.k *= 0.25f;
    blk.v *= 0.25f;
    const Eigen::MatrixXd m1 = materialize(key.m1), m2 = materialize(key.m2);
    KVBlock<float> fused_rows = blk;
    fused_rows.k = (blk.k.cast<double>() * m1).cast<float>();
    fused_rows.v = (blk.v.cast<double>() * m2).cast<float>();
    Rng r1(3), r2(3);
    const KVBlock<float> a = obfuscate_block_unfused(blk, key, m1, m2, r1);
    const KVBlock<float> c = obfuscate_block(fused_rows, key, r2);
    CHECK(max_abs_diff(a.k, c.k) <= 1e-4 * key.theta_k);
    const KVBlock<float> back = deobfuscate_block_unfused(
        a, key, materialize(invert_key(key.m1)), materialize(invert_key(key.m2)));
    for (int r = 0; r < b; ++r) {
      const int slot = back.slots[static_cast<std::size_t>(r)];
      if (slot < 6) CHECK(max_abs_diff(back.k.row(r), blk.k.row(slot)) <= 1e-4 * key.theta_k);
    }
  }
}

TEST_CASE("cache cloaking and cloaked decoding") {
  const Fixture f;
  const Model fused(fuse_weights(f.weights, f.key));
  const auto s = random_corpus(1, 13, f.config.vocab, 77)[0];
  KVCache ref(f.config), cache(f.config);
  const Eigen::MatrixXd l0 = fused.prefill<float>(s, ref);
  fused.prefill<float>(s, cache);
  cloak_cache(cache, f.key, 0);
  for (const auto& b : cache.blocks()) {
    CHECK(b.state == BlockState::kCloaked);
    CHECK(b.slots_identity());
  }
  CHECK(cache.has_state(BlockState::kCloaked));
  CHECK_NOTHROW(cache.validate());

  KVCache again(f.config);
  fused.prefill<float>(s, again);
  cloak_cache(again, f.key, 0);
  CHECK(max_abs_diff(again.blocks()[3].k, cache.blocks()[3].k) == 0.0);

  Eigen::RowVectorXd a = l0.row(12), b = a;
  for (int step = 0; step < 16; ++step) {
    const Token t = argmax(a);
    CHECK(t == argmax(b));
    a = fused.decode_step(ref, t);
    b = cloaked_decode_step(fused, cache, t, f.key, static_cast<std::uint64_t>(step) + 1);
    CHECK(max_abs_diff(a, b) <= 1e-4);
  }
  for (const auto& blk : cache.blocks()) CHECK(blk.state == BlockState::kCloaked);
  decloak_cache(cache, f.key);
  for (int l = 0; l < f.config.layers; ++l)
    for (int pos = 0; pos < ref.seq_len(); ++pos)
      CHECK(max_abs_diff(ref.key_row(l, 1, pos), cache.key_row(l, 1, pos)) <= 1e-4);
}

TEST_CASE("flop model") {
  const FlopModel m = flop_model(16, 128, 4096);
  CHECK(m.naive_mults == 593920);
  CHECK(m.fused_mults == 69632);
  CHECK(m.recompute_mults == 8388608);
  CHECK(m.naive_ratio == doctest::Approx(593920.0 / 8388608.0));
  CHECK(std::round(m.naive_ratio * 1000.0) / 10.0 == doctest::Approx(7.1));
  CHECK(std::round(m.fused_ratio * 10000.0) / 100.0 == doctest::Approx(0.83));
  CHECK(std::round(m.fused_over_naive * 10000.0) / 100.0 == doctest::Approx(11.72));
  CHECK_THROWS_AS(flop_model(0, 128, 4096), Error);
}

TEST_CASE("key file roundtrip") {
  const Fixture f;
  const auto path = std::filesystem::temp_directory_path() / "kvlab_test_key.kvl";
  save_key(f.key, path);
  const CloakKey k = load_key(path);
  CHECK((k.s.array() == f.key.s.array()).all());
  CHECK((k.m1.t.array() == f.key.m1.t.array()).all());
  CHECK((k.m2.u.array() == f.key.m2.u.array()).all());
  CHECK((k.a_k.array() == f.key.a_k.array()).all());
  CHECK((k.a_v.array() == f.key.a_v.array()).all());
  CHECK(k.theta_k == f.key.theta_k);
  CHECK(k.stream_seed == f.key.stream_seed);
  CHECK(k.outlier_factor == f.key.outlier_factor);

  const auto wpath = std::filesystem::temp_directory_path() / "kvlab_test_key_weights.kvl";
  save_weights(f.weights, wpath);
  CHECK_THROWS_AS(load_key(wpath), Error);
  std::filesystem::remove(path);
  std::filesystem::remove(wpath);
}
