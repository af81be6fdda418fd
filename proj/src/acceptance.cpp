#include "kvlab/acceptance.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "kvlab/attacks.hpp"
#include "kvlab/cloak.hpp"
#include "kvlab/dp_baseline.hpp"
#include "kvlab/harness.hpp"

namespace kvlab {

namespace {

using nlohmann::json;
using Corpus = std::vector<std::vector<Token>>;

struct Spec {
  const char* name;
  double budget;
};

constexpr Spec kSpecs[kCriterionCount] = {
    {"flop-model", 1.0},           {"commutativity", 5.0},      {"fusion-lossless", 120.0},
    {"cloak-roundtrip", 300.0},    {"inversion", 60.0},         {"collision", 900.0},
    {"enhanced-threshold", 300.0}, {"cpa-naive", 60.0},         {"cloak-security", 900.0},
    {"dp-direction", 600.0},       {"permutation-invariance", 10.0}, {"fusion-overhead", 60.0},
};

class Detail {
 public:
  Detail() { s_ << std::setprecision(4); }
  template <typename T>
  Detail& operator<<(const T& x) {
    s_ << x;
    return *this;
  }
  std::string str() const { return s_.str(); }

 private:
  std::ostringstream s_;
};

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

std::uint64_t sub(const AcceptanceOptions& o, int id, std::uint64_t tag) {
  return derive_seed(o.seed, {static_cast<std::uint64_t>(id), tag});
}

Corpus corpus(const std::string& source, int count, int min_len, int max_len, int vocab, std::uint64_t seed,
              const Model* target = nullptr) {
  CorpusConfig c;
  c.count = count;
  c.min_len = min_len;
  c.max_len = max_len;
  c.source = source;
  Rng rng(seed);
  return generate_corpus(c, vocab, rng, target);
}

const std::vector<std::pair<std::string, int>> kLayers(const ModelConfig& c) {
  return {{"first", 0}, {"mid", c.mid_layer()}, {"last", c.layers - 1}};
}

// ---------------------------------------------------------------------------

CriterionResult flops(const AcceptanceOptions&) {
  const FlopModel f = flop_model(16, 128, 4096);
  auto pct = [](double x) { return std::round(x * 10000.0) / 100.0; };
  const bool counts = f.naive_mults == 593920 && f.fused_mults == 69632 && f.recompute_mults == 8388608;
  const bool ratios = std::abs(pct(f.naive_ratio) - 7.08) <= 0.05 && std::abs(pct(f.fused_ratio) - 0.83) <= 0.05 &&
                      std::abs(pct(f.fused_over_naive) - 11.72) <= 0.05;
  Detail d;
  d << "naive=" << f.naive_mults << " fused=" << f.fused_mults << " recompute=" << f.recompute_mults
    << " ratios=" << pct(f.naive_ratio) << "%/" << pct(f.fused_ratio) << "%/" << pct(f.fused_over_naive) << "%";
  return {1, "", counts && ratios, d.str()};
}

CriterionResult commutativity(const AcceptanceOptions& o) {
  Rng rng(sub(o, 2, 0));
  std::uniform_int_distribution<int> pos(0, 100000);
  std::uniform_int_distribution<int> half(1, 64);
  double worst = 0.0, control = std::numeric_limits<double>::infinity();
  for (int i = 0; i < o.commutativity_cases; ++i) {
    const Index d = 2 * half(rng);
    const Eigen::MatrixXd m = materialize(make_commuting_key(d, rng));
    const Eigen::MatrixXd r = rope_matrix(d, pos(rng));
    worst = std::max(worst, max_abs_diff(m * r, r * m));
    const Eigen::MatrixXd dense = standard_normal(d, d, rng);
    control = std::min(control, max_abs_diff(dense * r, r * dense));
  }
  Detail d;
  d << "max |M1R-RM1|=" << worst << " min dense control=" << control;
  return {2, "", worst <= 1e-12 && control > 1e-3, d.str()};
}

CriterionResult fusion(const AcceptanceOptions& o) {
  ModelConfig c;
  const Weights w = init_weights(c, sub(o, 3, 0));
  const Corpus calib = corpus("uniform", 8, 48, 48, c.vocab, sub(o, 3, 1));
  Rng rng(sub(o, 3, 2));
  const CloakKey key = keygen(w, calib, rng);
  const Model plain(w), fused(fuse_weights(w, key));
  const Corpus prompts = corpus("uniform", o.fusion_prompts, 8, 40, c.vocab, sub(o, 3, 3));
  double worst = 0.0;
  int mismatched = 0;
  for (const auto& p : prompts) {
    KVCache cp(c), cf(c);
    const Eigen::MatrixXd lp = plain.prefill<float>(p, cp);
    const Eigen::MatrixXd lf = fused.prefill<float>(p, cf);
    worst = std::max(worst, max_abs_diff(lp, lf));
    Eigen::RowVectorXd a = lp.row(lp.rows() - 1), b = lf.row(lf.rows() - 1);
    for (int s = 0; s < 8; ++s) {
      const Token ta = argmax(a), tb = argmax(b);
      if (ta != tb) {
        ++mismatched;
        break;
      }
      a = plain.decode_step(cp, ta);
      b = fused.decode_step(cf, tb);
      worst = std::max(worst, max_abs_diff(a, b));
    }
  }
  Detail d;
  d << prompts.size() << " prompts, greedy mismatches=" << mismatched << " max logit diff=" << worst;
  return {3, "", mismatched == 0 && worst <= 1e-4, d.str()};
}

CriterionResult roundtrip(const AcceptanceOptions& o) {
  bool ok = true;
  Detail d;
  for (int b : {16, 32, 64}) {
    ModelConfig c;
    c.block_size = b;
    const Weights w = init_weights(c, sub(o, 4, static_cast<std::uint64_t>(b)));
    const Corpus calib = corpus("uniform", 8, 48, 48, c.vocab, sub(o, 4, 100 + static_cast<std::uint64_t>(b)));
    Rng rng(sub(o, 4, 200 + static_cast<std::uint64_t>(b)));
    const CloakKey key = keygen(w, calib, rng);
    const Model fused(fuse_weights(w, key));
    const Corpus prompts =
        corpus("uniform", o.roundtrip_prompts, 20, 64, c.vocab, sub(o, 4, 300 + static_cast<std::uint64_t>(b)));
    double worst = 0.0;
    int mismatched = 0, plain_blocks = 0;
    for (const auto& p : prompts) {
      KVCache ref(c), cloaked(c);
      const Eigen::MatrixXd l0 = fused.prefill<float>(p, ref);
      fused.prefill<float>(p, cloaked);
      cloak_cache(cloaked, key, 0);
      Eigen::RowVectorXd a = l0.row(l0.rows() - 1), bb = a;
      for (int s = 0; s < 16; ++s) {
        const Token ta = argmax(a), tb = argmax(bb);
        if (ta != tb) ++mismatched;
        a = fused.decode_step(ref, ta);
        bb = cloaked_decode_step(fused, cloaked, tb, key, static_cast<std::uint64_t>(s) + 1);
        worst = std::max(worst, max_abs_diff(a, bb));
      }
      for (const auto& blk : cloaked.blocks()) plain_blocks += blk.state != BlockState::kCloaked;
      decloak_cache(cloaked, key);
      for (int l = 0; l < c.layers; ++l)
        for (int h = 0; h < c.kv_heads; ++h)
          for (int pos = 0; pos < ref.seq_len(); ++pos) {
            worst = std::max(worst, max_abs_diff(ref.key_row(l, h, pos), cloaked.key_row(l, h, pos)));
            worst = std::max(worst, max_abs_diff(ref.value_row(l, h, pos), cloaked.value_row(l, h, pos)));
          }
    }
    const bool pass = mismatched == 0 && plain_blocks == 0 && worst <= 1e-4;
    ok = ok && pass;
    d << "b=" << b << ": diff=" << worst << " mismatches=" << mismatched << " uncloaked=" << plain_blocks << "; ";
  }
  return {4, "", ok, d.str()};
}

CriterionResult inversion(const AcceptanceOptions& o) {
  ModelConfig c;
  const Weights w = init_weights(c, sub(o, 5, 0));
  const Model m(w);
  const Corpus prompts = corpus("uniform", o.inversion_trials, 20, 64, c.vocab, sub(o, 5, 1));
  std::map<std::string, std::vector<double>> em;
  for (const auto& p : prompts) {
    KVCache cache(c);
    m.prefill<float>(p, cache);
    for (const auto& [name, layer] : kLayers(c)) {
      AttackReport r = inversion_attack(cache, w, InversionMode::kExact, layer);
      score(r, p);
      em[name].push_back(r.exact_match);
    }
  }
  ModelConfig g = c;
  g.heads = 4;
  g.kv_heads = 2;
  g.head_dim = 32;
  const Weights gw = init_weights(g, sub(o, 5, 2));
  KVCache gc(g);
  Model(gw).prefill<float>(corpus("uniform", 1, 20, 20, g.vocab, sub(o, 5, 3))[0], gc);
  std::string gqa = "no error";
  bool gqa_ok = false;
  try {
    inversion_attack(gc, gw, InversionMode::kExact, 0);
  } catch (const Error& e) {
    gqa = to_string(e.code());
    gqa_ok = e.code() == ErrorCode::kUnsupportedArchitecture;
  }
  const double first = mean(em["first"]), mid = mean(em["mid"]), last = mean(em["last"]);
  Detail d;
  d << "exact_match first=" << first << " mid=" << mid << " last=" << last << "; GQA exact mode: " << gqa;
  return {5, "", first == 1.0 && mid <= 0.1 && last <= 0.1 && gqa_ok, d.str()};
}

CriterionResult collision(const AcceptanceOptions& o) {
  ModelConfig c;
  const Weights base = init_weights(c, sub(o, 6, 0));
  const Weights tuned = perturb_weights(base, 1e-2, sub(o, 6, 1));
  const Model attacker(base), target(tuned);
  const Corpus self_inputs = corpus("model", o.self_trials, 20, 64, c.vocab, sub(o, 6, 2), &attacker);
  const Corpus inputs = corpus("model", o.collision_trials, 20, 64, c.vocab, sub(o, 6, 3), &target);
  bool ok = true;
  Detail d;
  for (const auto& [name, layer] : kLayers(c)) {
    CollisionParams p;
    p.layer = layer;
    std::vector<double> self, full, part;
    double t_full = 0.0, t_part = 0.0;
    for (const auto& s : self_inputs) {
      KVCache cache(c);
      attacker.prefill<float>(s, cache);
      AttackReport r = collision_attack(cache, attacker, p);
      score(r, s);
      self.push_back(r.exact_match);
    }
    for (const auto& s : inputs) {
      KVCache cache(c);
      target.prefill<float>(s, cache);
      CollisionParams q = p;
      AttackReport r = collision_attack(cache, attacker, q);
      score(r, s);
      full.push_back(r.exact_match);
      t_full += r.wall_time;
      q.vocab_fraction = 0.125;
      r = collision_attack(cache, attacker, q);
      score(r, s);
      part.push_back(r.exact_match);
      t_part += r.wall_time;
    }
    const double ms = mean(self), mf = mean(full), mp = mean(part), ratio = t_part / t_full;
    const bool pass = ms == 1.0 && mf >= 0.9 && mp >= 0.9 * mf && ratio <= 0.6;
    ok = ok && pass;
    d << name << ": self=" << ms << " perturbed=" << mf << " 1/8-vocab=" << mp << " time ratio=" << ratio << "; ";
  }
  return {6, "", ok, d.str()};
}

// Independent dense evaluation of the enhanced-threshold objective.
double brute_force_threshold(const std::vector<double>& samples, double mu_o, double sigma_o, int r, int points) {
  double mu_t = 0.0;
  for (double x : samples) mu_t += x;
  mu_t /= static_cast<double>(samples.size());
  double var = 0.0;
  for (double x : samples) var += (x - mu_t) * (x - mu_t);
  const double sigma_t = std::sqrt(var / static_cast<double>(samples.size()));
  const double lo = std::min(mu_t, mu_o), hi = std::max(mu_t, mu_o);
  double best_t = lo, best = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < points; ++i) {
    const double t = lo + (hi - lo) * i / (points - 1);
    // log of each tail through whichever complement is not close to 1
    auto log_cdf = [](double z) {
      const double q = 0.5 * std::erfc(std::abs(z) / std::sqrt(2.0));
      return z < 0.0 ? std::log(q) : std::log1p(-q);
    };
    const double f = (r - 1) * log_cdf((mu_o - t) / sigma_o) + log_cdf((t - mu_t) / sigma_t);
    if (f > best) {
      best = f;
      best_t = t;
    }
  }
  return best_t;
}

CriterionResult threshold(const AcceptanceOptions& o) {
  Rng rng(sub(o, 7, 0));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst_steps = 0.0;
  for (int i = 0; i < 20; ++i) {
    const double mu_t = 0.5 + u(rng), sigma_t = 0.1 + 0.4 * u(rng);
    const double mu_o = 4.0 + 2.0 * u(rng), sigma_o = 0.3 + 0.9 * u(rng);
    const int r = 1 + static_cast<int>(u(rng) * 50);
    std::normal_distribution<double> n(mu_t, sigma_t);
    std::vector<double> samples(500);
    for (double& x : samples) x = n(rng);
    DistanceStats other;
    other.mu_other = mu_o;
    other.sigma_other = sigma_o;
    const ThresholdFit fit = enhanced_threshold(samples, other, r);
    const double t_star = brute_force_threshold(samples, mu_o, sigma_o, r, 1000001);
    double m = 0.0;
    for (double x : samples) m += x;
    m /= static_cast<double>(samples.size());
    const double step = (mu_o - m) / (kThresholdGrid - 1);
    worst_steps = std::max(worst_steps, std::abs(fit.t - t_star) / step);
  }

  ModelConfig c;
  const Weights base = init_weights(c, sub(o, 7, 1));
  const Weights tuned = perturb_weights(base, 1e-2, sub(o, 7, 2));
  const Model attacker(base), target(tuned);
  const Corpus known = corpus("model", o.threshold_known, 20, 64, c.vocab, sub(o, 7, 3), &target);
  const Corpus inputs = corpus("model", o.collision_trials, 20, 64, c.vocab, sub(o, 7, 4), &target);
  bool bench = true;
  Detail d;
  d << "grid vs brute force: worst " << worst_steps << " grid steps; ";
  for (const auto& [name, layer] : kLayers(c)) {
    const ChosenPlaintextFit fit = fit_enhanced_threshold(target, attacker, known, layer);
    CollisionParams heur;
    heur.layer = layer;
    CollisionParams enh = heur;
    enh.threshold_mode = ThresholdMode::kEnhanced;
    enh.enhanced_t = fit.fit.t;
    enh.enhanced_rank = fit.rank;
    std::vector<double> eh, ee;
    for (const auto& s : inputs) {
      KVCache cache(c);
      target.prefill<float>(s, cache);
      AttackReport r = collision_attack(cache, attacker, heur);
      score(r, s);
      eh.push_back(r.exact_match);
      r = collision_attack(cache, attacker, enh);
      score(r, s);
      ee.push_back(r.exact_match);
    }
    bench = bench && mean(ee) >= mean(eh);
    d << name << ": t=" << fit.fit.t << " r=" << fit.rank << " heuristic=" << mean(eh) << " enhanced=" << mean(ee)
      << "; ";
  }
  return {7, "", worst_steps <= 1.0 && bench, d.str()};
}

CriterionResult cpa(const AcceptanceOptions& o) {
  const int b = 16, d = 64;
  Rng rng(sub(o, 8, 0));
  const Eigen::MatrixXd s = sample_orthogonal(b, rng);
  const Eigen::MatrixXd m = materialize(make_commuting_key(d, rng));
  const CpaRecovery naive = cpa_break_naive([&](const Eigen::MatrixXd& k) { return obfuscate_naive(k, s, m); }, b, d);
  double naive_res = 0.0;
  for (int i = 0; i < 10; ++i) {
    const Eigen::MatrixXd k = standard_normal(b, d, rng);
    naive_res = std::max(naive_res, max_abs_diff(naive.s_hat * k * naive.m_hat, obfuscate_naive(k, s, m)));
  }

  CloakKey key = sample_secrets(b, d, rng);
  KVBlock<float> calib(0, 0, b, d);
  calib.k = standard_normal<float>(b, d, rng);
  calib.v = standard_normal<float>(b, d, rng);
  calib.fill = b;
  calibrate_key(key, std::span<const KVBlock<float>>(&calib, 1), rng);
  const Eigen::MatrixXd m1 = materialize(key.m1);
  auto full = [&](const Eigen::MatrixXd& k) {
    KVBlock<float> blk(0, 0, b, d);
    blk.k = (k * m1).cast<float>();
    blk.v = Matrix<float>::Zero(b, d);
    blk.fill = b;
    return Eigen::MatrixXd(obfuscate_block(blk, key, rng).k.cast<double>());
  };
  const CpaRecovery broken = cpa_break_naive(full, b, d);
  double full_res = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 10; ++i) {
    const Eigen::MatrixXd k = standard_normal(b, d, rng);
    full_res = std::min(full_res, max_abs_diff(broken.s_hat * k * broken.m_hat, full(k)));
  }
  Detail det;
  det << "naive residual=" << naive_res << " (" << naive.queries << " queries); full scheme min residual=" << full_res;
  return {8, "", naive_res <= 1e-8 && full_res > 1e-1, det.str()};
}

CriterionResult security(const AcceptanceOptions& o) {
  ModelConfig c;
  const Weights base = init_weights(c, sub(o, 9, 0));
  const Weights tuned = perturb_weights(base, 1e-2, sub(o, 9, 1));
  const Model attacker(base);
  Rng key_rng(sub(o, 9, 2));
  const CloakKey key = keygen(tuned, corpus("uniform", 8, 48, 48, c.vocab, sub(o, 9, 3)), key_rng);
  const Model fused(fuse_weights(tuned, key));
  const Corpus inputs = corpus("uniform", o.security_trials, 20, 64, c.vocab, sub(o, 9, 4));
  const double em_bound = 5.0 / c.vocab;
  bool ok = true;
  Detail d;
  std::vector<double> inv_em, inv_rl, col_em, col_rl;
  int inside = 0, total = 0;
  for (const auto& s : inputs) {
    KVCache cache(c);
    fused.prefill<float>(s, cache);
    cloak_cache(cache, key, 0);
    for (const auto& [name, layer] : kLayers(c)) {
      AttackReport r = inversion_attack(cache, base, InversionMode::kExact, layer);
      score(r, s);
      inv_em.push_back(r.exact_match);
      inv_rl.push_back(r.rouge_l);
      CollisionParams p;
      p.layer = layer;
      r = collision_attack(cache, attacker, p);
      score(r, s);
      col_em.push_back(r.exact_match);
      col_rl.push_back(r.rouge_l);
      for (const auto& pp : distance_profile(cache, attacker, s, layer)) {
        ++total;
        inside += std::abs(pp.dis_target - pp.mu_other) <= 3.0 * pp.sigma_other;
      }
    }
  }
  const double inside_frac = static_cast<double>(inside) / total;
  ok = mean(inv_em) <= em_bound && mean(inv_rl) <= 0.05 && mean(col_em) <= em_bound && mean(col_rl) <= 0.05 &&
       inside_frac >= 0.99;
  d << "inversion em=" << mean(inv_em) << " rouge=" << mean(inv_rl) << "; collision em=" << mean(col_em)
    << " rouge=" << mean(col_rl) << " inside mu+-3sigma=" << inside << "/" << total << "; ";

  const EchoModel echo = make_echo_model(echo_config(), sub(o, 9, 5));
  const ModelConfig& ec = echo.weights.config;
  const Model echo_model(echo.weights);
  Rng echo_rng(sub(o, 9, 6));
  const CloakKey echo_key = keygen(echo.weights, corpus("distinct", 8, 41, 41, ec.vocab, sub(o, 9, 7)), echo_rng);
  const Model echo_fused(fuse_weights(echo.weights, echo_key));
  const Corpus prompts = corpus("distinct", o.security_trials, 21, 41, ec.vocab, sub(o, 9, 8));
  std::vector<double> plain_em, inj_em, inj_rl;
  const std::vector<Token> instruction{echo.bos};
  for (const auto& s : prompts) {
    const std::span<const Token> truth = std::span<const Token>(s).subspan(1);
    const int n = static_cast<int>(truth.size());
    KVCache plain(ec), cloaked(ec);
    echo_model.prefill<float>(s, plain);
    plain_em.push_back(exact_match(injection_attack(plain, instruction, n, echo_model).generated, truth));
    echo_fused.prefill<float>(s, cloaked);
    cloak_cache(cloaked, echo_key, 0);
    const auto out = injection_attack(cloaked, instruction, n, echo_model).generated;
    inj_em.push_back(exact_match(out, truth));
    inj_rl.push_back(rouge_l(out, truth));
  }
  const bool inj_ok = mean(inj_em) <= 5.0 / ec.vocab && mean(inj_rl) <= 0.05;
  d << "injection plaintext em=" << mean(plain_em) << " cloaked em=" << mean(inj_em) << " rouge=" << mean(inj_rl);
  return {9, "", ok && inj_ok, d.str()};
}

CriterionResult dp_direction(const AcceptanceOptions& o) {
  ModelConfig c;
  const Weights base = init_weights(c, sub(o, 10, 0));
  const Weights tuned = perturb_weights(base, 1e-2, sub(o, 10, 1));
  const Model attacker(base), target(tuned);
  std::vector<KVBlock<float>> calib;
  for (const auto& s : corpus("uniform", 8, 48, 48, c.vocab, sub(o, 10, 2))) {
    KVCache cache(c);
    target.prefill<float>(s, cache);
    calib.insert(calib.end(), cache.blocks().begin(), cache.blocks().end());
  }
  const ClipNorms clip = calibrate_clip(calib, 0.5);
  const Corpus inputs = corpus("model", o.dp_trials, 20, 64, c.vocab, sub(o, 10, 3), &target);
  const std::vector<double> eps{1.0, 10.0, 1e7, 1e8, 1e9};
  std::vector<double> div, em;
  for (double e : eps) {
    const DPConfig cfg = make_dp_config(e, 1e-5, 0.5, clip);
    std::vector<double> dv, ev;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      const auto& s = inputs[i];
      KVCache plain(c);
      const Eigen::MatrixXd logits = target.prefill<float>(s, plain);
      KVCache noisy = plain;
      dp_protect_cache(noisy, cfg, sub(o, 10, 100 + i));
      CollisionParams p;
      AttackReport r = collision_attack(noisy, attacker, p);
      score(r, s);
      ev.push_back(r.exact_match);
      Eigen::RowVectorXd a = logits.row(logits.rows() - 1);
      for (int step = 0; step < 8; ++step) {
        const Token t = argmax(a);
        a = target.decode_step(plain, t);
        dv.push_back((a - target.decode_step(noisy, t)).cwiseAbs().mean());
      }
    }
    div.push_back(mean(dv));
    em.push_back(mean(ev));
  }
  bool ok = true;
  Detail d;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    if (i > 0) ok = ok && div[i] <= div[i - 1] + 1e-5 && em[i] >= em[i - 1];
    d << "eps=" << eps[i] << " div=" << div[i] << " em=" << em[i] << "; ";
  }
  return {10, "", ok, d.str()};
}

CriterionResult permutation(const AcceptanceOptions& o) {
  ModelConfig c;
  const Weights w = init_weights(c, sub(o, 11, 0));
  const Model m(w);
  Rng rng(sub(o, 11, 1));
  std::uniform_int_distribution<int> len(1, 64);
  std::uniform_int_distribution<int> layer_pick(0, c.layers - 1);
  double worst = 0.0;
  int cases = 0;
  while (cases < o.permutation_cases) {
    const auto prompt = corpus("uniform", 1, len(rng), 64, c.vocab, rng())[0];
    KVCache cache(c);
    m.prefill<float>(prompt, cache);
    for (int rep = 0; rep < 10 && cases < o.permutation_cases; ++rep, ++cases) {
      const int layer = layer_pick(rng);
      std::vector<KVBlock<float>> blocks = cache.extract_layer(layer);
      std::vector<KVBlock<float>> shuffled = blocks;
      for (auto& blk : shuffled) {
        const Permutation p = sample_permutation(blk.block_size(), rng);
        blk.k = p.apply_rows(blk.k);
        blk.v = p.apply_rows(blk.v);
        std::vector<int> slots(blk.slots.size());
        for (int r = 0; r < p.size(); ++r) slots[static_cast<std::size_t>(r)] = blk.slots[static_cast<std::size_t>(p.source(r))];
        blk.slots = slots;
      }
      const Eigen::RowVectorXd x = standard_normal(1, c.hidden, rng);
      const AttentionResult a =
          attention_step(c, w.layers[static_cast<std::size_t>(layer)], x, cache.seq_len(),
                         std::span<const KVBlock<float>>(blocks));
      const AttentionResult b =
          attention_step(c, w.layers[static_cast<std::size_t>(layer)], x, cache.seq_len(),
                         std::span<const KVBlock<float>>(shuffled));
      worst = std::max(worst, max_abs_diff(a.output, b.output));
    }
  }
  Detail d;
  d << cases << " cases, max output diff=" << worst;
  return {11, "", worst <= 1e-5, d.str()};
}

CriterionResult overhead(const AcceptanceOptions& o) {
  ModelConfig c;
  const Weights w = init_weights(c, sub(o, 12, 0));
  Rng rng(sub(o, 12, 1));
  const CloakKey key = keygen(w, corpus("uniform", 8, 48, 48, c.vocab, sub(o, 12, 2)), rng);
  const Model plain(w), fused(fuse_weights(w, key));
  const auto prompt = corpus("uniform", 1, 64, 64, c.vocab, sub(o, 12, 3))[0];
  KVCache cp(c), cf(c);
  plain.prefill<float>(prompt, cp);
  fused.prefill<float>(prompt, cf);
  const Eigen::MatrixXd m1 = materialize(key.m1), m2 = materialize(key.m2);
  const Eigen::MatrixXd m1_inv = materialize(invert_key(key.m1)), m2_inv = materialize(invert_key(key.m2));
  const double t_fused = median_seconds(o.timing_repetitions, [&] {
    for (const auto& b : cf.blocks()) deobfuscate_block(obfuscate_block(b, key, rng), key);
  });
  const double t_unfused = median_seconds(o.timing_repetitions, [&] {
    for (const auto& b : cp.blocks())
      deobfuscate_block_unfused(obfuscate_block_unfused(b, key, m1, m2, rng), key, m1_inv, m2_inv);
  });
  Detail d;
  d << "fused=" << t_fused * 1e3 << " ms unfused=" << t_unfused * 1e3 << " ms over " << cf.blocks().size()
    << " blocks";
  return {12, "", t_fused < t_unfused, d.str()};
}

using Runner = CriterionResult (*)(const AcceptanceOptions&);
constexpr Runner kRunners[kCriterionCount] = {flops,     commutativity, fusion,       roundtrip,   inversion, collision,
                                              threshold, cpa,           security,     dp_direction, permutation, overhead};

}  // namespace

void AcceptanceOptions::validate() const {
  if (fusion_prompts < 1 || commutativity_cases < 1 || permutation_cases < 1 || roundtrip_prompts < 1 ||
      inversion_trials < 1 || self_trials < 1 || collision_trials < 1 || threshold_known < 1 || security_trials < 1 ||
      dp_trials < 1)
    throw Error(ErrorCode::kInvalidConfig, "acceptance counts must be >= 1");
  if (timing_repetitions < 5) throw Error(ErrorCode::kInvalidConfig, "timing needs at least 5 repetitions");
  for (int id : only)
    if (id < 1 || id > kCriterionCount) throw Error(ErrorCode::kInvalidConfig, "criterion id out of range");
}

void to_json(json& j, const AcceptanceOptions& o) {
  j = json{{"seed", o.seed},
           {"fusion_prompts", o.fusion_prompts},
           {"commutativity_cases", o.commutativity_cases},
           {"permutation_cases", o.permutation_cases},
           {"roundtrip_prompts", o.roundtrip_prompts},
           {"inversion_trials", o.inversion_trials},
           {"self_trials", o.self_trials},
           {"collision_trials", o.collision_trials},
           {"threshold_known", o.threshold_known},
           {"security_trials", o.security_trials},
           {"dp_trials", o.dp_trials},
           {"timing_repetitions", o.timing_repetitions},
           {"enforce_budgets", o.enforce_budgets},
           {"only", o.only}};
}

AcceptanceOptions acceptance_from_json(const json& j) {
  AcceptanceOptions o;
  json defaults = o;
  if (!j.is_object()) throw Error(ErrorCode::kParse, "acceptance config must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (!defaults.contains(k)) throw Error(ErrorCode::kParse, "unknown field '" + k + "' in acceptance config");
  try {
    defaults.update(j);
    o.seed = defaults.at("seed").get<std::uint64_t>();
    o.fusion_prompts = defaults.at("fusion_prompts");
    o.commutativity_cases = defaults.at("commutativity_cases");
    o.permutation_cases = defaults.at("permutation_cases");
    o.roundtrip_prompts = defaults.at("roundtrip_prompts");
    o.inversion_trials = defaults.at("inversion_trials");
    o.self_trials = defaults.at("self_trials");
    o.collision_trials = defaults.at("collision_trials");
    o.threshold_known = defaults.at("threshold_known");
    o.security_trials = defaults.at("security_trials");
    o.dp_trials = defaults.at("dp_trials");
    o.timing_repetitions = defaults.at("timing_repetitions");
    o.enforce_budgets = defaults.at("enforce_budgets");
    o.only = defaults.at("only").get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("acceptance config: ") + e.what());
  }
  o.validate();
  return o;
}

AcceptanceOptions load_acceptance(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  try {
    return acceptance_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ParseError(e.byte, path.string() + ": " + e.what());
  }
}

CriterionResult run_criterion(int id, const AcceptanceOptions& options) {
  if (id < 1 || id > kCriterionCount) throw Error(ErrorCode::kInvalidConfig, "criterion id out of range");
  const Spec& spec = kSpecs[id - 1];
  const auto start = std::chrono::steady_clock::now();
  CriterionResult r;
  try {
    r = kRunners[id - 1](options);
  } catch (const std::exception& e) {
    r.pass = false;
    r.detail = std::string("error: ") + e.what();
  }
  r.id = id;
  r.name = spec.name;
  r.budget = spec.budget;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (options.enforce_budgets && r.seconds > r.budget) {
    r.pass = false;
    r.detail += " [over time budget]";
  }
  return r;
}

std::vector<CriterionResult> run_acceptance(const AcceptanceOptions& options,
                                            const std::function<void(const CriterionResult&)>& on_result) {
  options.validate();
  const std::set<int> only(options.only.begin(), options.only.end());
  std::vector<CriterionResult> out;
  for (int id = 1; id <= kCriterionCount; ++id) {
    if (!only.empty() && !only.count(id)) continue;
    out.push_back(run_criterion(id, options));
    if (on_result) on_result(out.back());
  }
  return out;
}

std::string format_result(const CriterionResult& r) {
  std::ostringstream s;
  s << (r.pass ? "PASS" : "FAIL") << " [" << std::setw(2) << r.id << "] " << r.name << ": " << r.detail << " ("
    << std::fixed << std::setprecision(2) << r.seconds << "s / " << std::setprecision(0) << r.budget << "s)";
  return s.str();
}

}  // namespace kvlab
