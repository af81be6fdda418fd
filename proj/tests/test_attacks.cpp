#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "kvlab/attacks.hpp"

using namespace kvlab;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.layers = 3;
  c.hidden = 64;
  c.heads = 2;
  c.kv_heads = 2;
  c.head_dim = 32;
  c.vocab = 256;
  c.block_size = 8;
  return c;
}

std::vector<Token> random_tokens(int n, int vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<Token> pick(0, vocab - 1);
  std::vector<Token> out(static_cast<std::size_t>(n));
  for (auto& t : out) t = pick(rng);
  return out;
}

// bos, then uniform picks from the model's top-k next tokens.
std::vector<Token> model_tokens(const Model& m, int n, int k, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> pick(0, k - 1);
  KVCache cache(m.config());
  std::vector<Token> out{0};
  Eigen::RowVectorXd logits = m.decode_step(cache, 0);
  while (static_cast<int>(out.size()) < n) {
    std::vector<Token> idx(static_cast<std::size_t>(m.config().vocab));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](Token a, Token b) { return logits(a) > logits(b); });
    out.push_back(idx[static_cast<std::size_t>(pick(rng))]);
    logits = m.decode_step(cache, out.back());
  }
  return out;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace

TEST_CASE("rouge_l and exact_match") {
  const std::vector<Token> a{1, 2, 3, 4}, b{1, 3, 4, 9};
  CHECK(rouge_l(a, b) == doctest::Approx(0.75));
  CHECK(rouge_l(a, a) == 1.0);
  CHECK(rouge_l(a, std::vector<Token>{5, 6, 7}) == 0.0);
  CHECK(exact_match(a, a) == 1.0);
  CHECK(exact_match(a, b) == doctest::Approx(0.25));
  CHECK(exact_match(a, std::vector<Token>{1, 2}) == doctest::Approx(0.5));
  CHECK(exact_match(std::vector<Token>{}, std::vector<Token>{}) == 1.0);
  CHECK(rouge_l(std::vector<Token>{}, a) == 0.0);
  // LCS of [1,2,3,4,5] and [5,1,3,5] is [1,3,5]: P = 3/5, R = 3/4.
  CHECK(rouge_l(std::vector<Token>{1, 2, 3, 4, 5}, std::vector<Token>{5, 1, 3, 5}) ==
        doctest::Approx(2 * 0.6 * 0.75 / 1.35));
}

TEST_CASE("collision_distance") {
  Rng rng(1);
  const Eigen::RowVectorXd k = standard_normal(1, 8, rng), v = standard_normal(1, 8, rng);
  CHECK(collision_distance(k, v, k, v) == 0.0);
  Eigen::RowVectorXd k2 = k;
  k2(3) += 1.0;
  CHECK(collision_distance(k, v, k2, v) == doctest::Approx(1.0));
  const Eigen::RowVectorXd a = standard_normal(1, 8, rng), b = standard_normal(1, 8, rng);
  CHECK(collision_distance(k, v, a, b) == collision_distance(a, b, k, v));
  CHECK(collision_distance(k, v, k2, v, DistanceMode::kValueOnly) == 0.0);
  CHECK(collision_distance(k, v, k2, v, DistanceMode::kKeyOnly) == doctest::Approx(1.0));
}

TEST_CASE("summarize") {
  const std::vector<double> x{1.0, 2.0, 3.0, 4.0};
  const DistanceStats s = summarize(x);
  CHECK(s.mu_other == doctest::Approx(2.5));
  CHECK(s.sigma_other == doctest::Approx(std::sqrt(1.25)));
  CHECK_THROWS_AS(summarize(std::vector<double>{1.0}), Error);
}

TEST_CASE("inversion attack, MHA") {
  const ModelConfig c = small_config();
  const Weights w = init_weights(c, 3);
  const Model m(w);
  const auto tokens = random_tokens(40, c.vocab, 4);
  KVCache cache(c);
  m.prefill<float>(tokens, cache);

  AttackReport r = inversion_attack(cache, w, InversionMode::kExact);
  score(r, tokens);
  CHECK(r.exact_match == 1.0);
  CHECK(r.reconstructed == tokens);

  r = inversion_attack(cache, w, InversionMode::kLeastSquares);
  score(r, tokens);
  CHECK(r.exact_match == 1.0);

  Eigen::MatrixXd keys, values;
  read_layer_rows(cache, 0, keys, values);
  const Eigen::MatrixXd x_hat = recover_layer_input(c, w.layers[0], keys, values, InversionMode::kExact);
  for (int i = 0; i < 40; ++i) {
    const Eigen::RowVectorXd e = w.embedding.row(tokens[static_cast<std::size_t>(i)]);
    const double rms = std::sqrt(e.squaredNorm() / c.hidden + c.norm_eps);
    const Eigen::RowVectorXd x = e.cwiseProduct(w.layers[0].attn_norm.transpose()) / rms;
    CHECK((x_hat.row(i) - x).norm() <= 1e-4);
  }
}

TEST_CASE("nearest_tokens maps a zero row to the zero embedding") {
  Rng rng(2);
  Eigen::MatrixXd emb = standard_normal(6, 4, rng);
  emb.row(4).setZero();
  const auto out = nearest_tokens(Eigen::MatrixXd::Zero(1, 4), Eigen::VectorXd::Ones(4), emb);
  CHECK(out == std::vector<Token>{4});
  Eigen::MatrixXd x(1, 4);
  x.row(0) = 3.0 * emb.row(2);
  CHECK(nearest_tokens(x, Eigen::VectorXd::Ones(4), emb) == std::vector<Token>{2});
}

TEST_CASE("inversion attack, GQA") {
  ModelConfig c = small_config();
  c.heads = 16;
  c.kv_heads = 1;
  c.head_dim = 4;
  Weights w = init_weights(c, 5);
  w.layers[0].attn_norm.setOnes();
  const auto tokens = random_tokens(30, c.vocab, 6);

  SUBCASE("exact mode is unsupported") {
    KVCache cache(c);
    Model(w).prefill<float>(tokens, cache);
    try {
      inversion_attack(cache, w, InversionMode::kExact);
      FAIL("exact inversion accepted a GQA layer");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kUnsupportedArchitecture);
    }
  }
  SUBCASE("embeddings inside the row space are recovered") {
    Eigen::MatrixXd stack(2 * c.kv_dim(), c.hidden);
    stack << w.layers[0].wk, w.layers[0].wv;
    Rng rng(7);
    w.embedding = standard_normal(c.vocab, 2 * c.kv_dim(), rng) * stack;
    KVCache cache(c);
    Model(w).prefill<float>(tokens, cache);
    AttackReport r = inversion_attack(cache, w, InversionMode::kLeastSquares);
    score(r, tokens);
    CHECK(r.exact_match == 1.0);
  }
  SUBCASE("nullspace components degrade the match") {
    KVCache cache(c);
    Model(w).prefill<float>(tokens, cache);
    AttackReport r = inversion_attack(cache, w, InversionMode::kLeastSquares);
    score(r, tokens);
    CHECK(r.exact_match < 0.9);
  }
}

TEST_CASE("self-collision recovers every token") {
  const ModelConfig c = small_config();
  const Model m(init_weights(c, 8));
  for (int layer : {0, 1, 2}) {
    for (std::uint64_t seed : {1ULL, 2ULL}) {
      const auto tokens = model_tokens(m, 24, 16, seed);
      KVCache cache(c);
      m.prefill<float>(tokens, cache);
      CollisionParams p;
      p.layer = layer;
      AttackReport r = collision_attack(cache, m, p);
      score(r, tokens);
      CHECK(r.exact_match == 1.0);
      for (const auto& pos : r.per_position) {
        CHECK(pos.decision == Decision::kAccepted);
        CHECK(pos.dis_target <= 1e-4);
      }
    }
  }
}

TEST_CASE("collision with a perturbed target") {
  const ModelConfig c = small_config();
  const Weights base = init_weights(c, 8);
  const Model attacker(base), target(perturb_weights(base, 1e-2, 9));
  const auto tokens = model_tokens(target, 24, 16, 3);
  KVCache cache(c);
  target.prefill<float>(tokens, cache);
  CollisionParams p;
  AttackReport full = collision_attack(cache, attacker, p);
  score(full, tokens);
  CHECK(full.exact_match >= 0.9);

  p.vocab_fraction = 0.125;
  AttackReport part = collision_attack(cache, attacker, p);
  score(part, tokens);
  CHECK(part.exact_match >= 0.9 * full.exact_match);
  for (const auto& pos : part.per_position) CHECK(pos.rank <= 32);

  p.vocab_fraction = 1.0;
  p.per_batch_stats = true;
  p.batch_size = 64;
  AttackReport batched = collision_attack(cache, attacker, p);
  score(batched, tokens);
  CHECK(batched.exact_match >= 0.8);
}

TEST_CASE("collision parameter validation") {
  const int vocab = 256;
  CollisionParams p;
  CHECK_NOTHROW(p.validate(vocab));
  p.vocab_fraction = 0.0;
  CHECK_THROWS_AS(p.validate(vocab), Error);
  p = {};
  p.batch_size = 0;
  CHECK_THROWS_AS(p.validate(vocab), Error);
  p = {};
  p.sigma_multiplier = -1.0;
  CHECK_THROWS_AS(p.validate(vocab), Error);

  const ModelConfig c = small_config();
  ModelConfig other = c;
  other.head_dim = 16;
  other.heads = 4;
  other.kv_heads = 4;
  KVCache cache(other);
  Model(init_weights(other, 1)).prefill<float>(random_tokens(3, c.vocab, 1), cache);
  CHECK_THROWS_AS(collision_attack(cache, Model(init_weights(c, 1)), CollisionParams{}), Error);
}

TEST_CASE("enhanced threshold") {
  SUBCASE("matches a dense brute-force argmax") {
    Rng rng(4);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> samples(4000);
    for (double& x : samples) x = n(rng);
    DistanceStats other;
    other.mu_other = 5.0;
    other.sigma_other = 1.0;
    const ThresholdFit fit = enhanced_threshold(samples, other, 8);

    const double mu = std::accumulate(samples.begin(), samples.end(), 0.0) / samples.size();
    double ss = 0.0;
    for (double x : samples) ss += (x - mu) * (x - mu);
    const double sd = std::sqrt(ss / samples.size());
    double best = -1e300, best_t = 0.0;
    for (int i = 0; i <= 500000; ++i) {
      const double t = mu + (5.0 - mu) * i / 500000.0;
      const double f = 7.0 * std::log(1.0 - normal_cdf(t - 5.0)) + std::log(normal_cdf((t - mu) / sd));
      if (f > best) {
        best = f;
        best_t = t;
      }
    }
    CHECK(std::abs(fit.t - best_t) <= (5.0 - mu) / (kThresholdGrid - 1));
    CHECK(fit.success_probability == doctest::Approx(std::exp(best)).epsilon(1e-6));
    CHECK_FALSE(fit.degenerate);
  }
  SUBCASE("r = 1 pushes t to the upper end") {
    std::vector<double> samples{0.9, 1.0, 1.1};
    DistanceStats other;
    other.mu_other = 3.0;
    other.sigma_other = 0.5;
    const ThresholdFit fit = enhanced_threshold(samples, other, 1);
    CHECK(fit.t == doctest::Approx(3.0));
  }
  SUBCASE("separable distributions") {
    std::vector<double> samples{0.9, 1.0, 1.1};
    DistanceStats other;
    other.mu_other = 10.0;
    other.sigma_other = 0.5;
    CHECK(enhanced_threshold(samples, other, 64).success_probability >= 0.999);
  }
  SUBCASE("degenerate spreads") {
    std::vector<double> samples{1.0, 1.0};
    DistanceStats other;
    other.mu_other = 3.0;
    other.sigma_other = 0.0;
    const ThresholdFit fit = enhanced_threshold(samples, other, 4);
    CHECK(fit.degenerate);
    CHECK(fit.t == doctest::Approx(2.0));
  }
  SUBCASE("objective is continuous in t") {
    double prev = threshold_log_objective(1.0, 0.0, 1.0, 5.0, 1.0, 8);
    for (int i = 1; i <= 1000; ++i) {
      const double t = 1.0 + 3.0 * i / 1000.0;
      const double f = threshold_log_objective(t, 0.0, 1.0, 5.0, 1.0, 8);
      CHECK(std::abs(f - prev) < 0.05);
      prev = f;
    }
  }
  SUBCASE("invalid rank") {
    DistanceStats other;
    other.mu_other = 1.0;
    other.sigma_other = 1.0;
    CHECK_THROWS_AS(enhanced_threshold(std::vector<double>{0.0, 0.1}, other, 0), Error);
  }
}

TEST_CASE("distance profile") {
  const ModelConfig c = small_config();
  const Model m(init_weights(c, 8));
  const auto tokens = model_tokens(m, 12, 16, 5);
  KVCache cache(c);
  m.prefill<float>(tokens, cache);
  const auto prof = distance_profile(cache, m, tokens, 1);
  REQUIRE(prof.size() == tokens.size());
  for (const auto& p : prof) {
    CHECK(p.dis_target <= 1e-4);
    CHECK(p.mu_other > 3.0 * p.sigma_other);
    CHECK(p.rank >= 1);
    CHECK(p.rank <= 16);
  }
}

TEST_CASE("injection attack") {
  const ModelConfig c = small_config();
  const Model m(init_weights(c, 8));
  const auto tokens = random_tokens(10, c.vocab, 2);
  KVCache cache(c);
  const Eigen::MatrixXd logits = m.prefill<float>(tokens, cache);
  const Eigen::RowVectorXd last = logits.row(9);

  CHECK(injection_attack(cache, std::vector<Token>{1, 2}, 0, m).generated.empty());

  KVCache copy = cache;
  const auto expect = m.greedy_continue(copy, last, 6);
  CHECK(injection_attack(cache, std::vector<Token>{}, 6, m, last).generated == expect);
  CHECK(cache.seq_len() == 10);
  CHECK_THROWS_AS(injection_attack(cache, std::vector<Token>{}, 3, m), Error);
  CHECK_THROWS_AS(injection_attack(cache, std::vector<Token>{1}, -1, m), Error);
}

TEST_CASE("injection against the echo model repeats the prompt") {
  const EchoModel echo = make_echo_model(echo_config(), 3);
  const Model m(echo.weights);
  std::vector<Token> perm(static_cast<std::size_t>(echo.weights.config.vocab - 1));
  std::iota(perm.begin(), perm.end(), 1);
  Rng rng(6);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<Token> prompt{echo.bos};
  prompt.insert(prompt.end(), perm.begin(), perm.begin() + 30);
  KVCache cache(echo.weights.config);
  m.prefill<float>(prompt, cache);
  const InjectionResult r = injection_attack(cache, std::vector<Token>{echo.bos}, 30, m);
  CHECK(rouge_l(r.generated, std::span<const Token>(prompt).subspan(1)) >= 0.9);
  CHECK_FALSE(r.cloaked_input);
}
