#include "kvlab/harness.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

#include "kvlab/json_io.hpp"

namespace kvlab {

namespace {

using nlohmann::json;

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw Error(ErrorCode::kParse, where + " must be a JSON object");
  std::set<std::string> names(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items())
    if (!names.count(k)) throw Error(ErrorCode::kParse, "unknown field '" + k + "' in " + where);
}

json corpus_json(const CorpusConfig& c) {
  return {{"count", c.count},   {"min_len", c.min_len}, {"max_len", c.max_len},
          {"source", c.source}, {"top_k", c.top_k},     {"bos", c.bos}};
}

CorpusConfig corpus_from(const json& j, CorpusConfig c, const std::string& where) {
  check_keys(j, {"count", "min_len", "max_len", "source", "top_k", "bos"}, where);
  c.count = j.value("count", c.count);
  c.min_len = j.value("min_len", c.min_len);
  c.max_len = j.value("max_len", c.max_len);
  c.source = j.value("source", c.source);
  c.top_k = j.value("top_k", c.top_k);
  c.bos = j.value("bos", c.bos);
  return c;
}

const char* threshold_name(ThresholdMode m) { return m == ThresholdMode::kEnhanced ? "enhanced" : "heuristic"; }

json collision_json(const CollisionParams& p) {
  return {{"batch_size", p.batch_size},
          {"sigma_multiplier", p.sigma_multiplier},
          {"vocab_fraction", p.vocab_fraction},
          {"threshold", threshold_name(p.threshold_mode)},
          {"enhanced_t", p.enhanced_t},
          {"enhanced_rank", p.enhanced_rank},
          {"per_batch_stats", p.per_batch_stats},
          {"distance", to_string(p.distance)}};
}

json attack_json(const AttackSpec& a) {
  json j{{"kind", a.kind}};
  if (a.kind == "inversion") j["mode"] = to_string(a.inversion_mode);
  if (a.kind == "collision") j["collision"] = collision_json(a.collision);
  if (a.kind == "injection") {
    j["instruction"] = a.instruction;
    j["max_new"] = a.max_new;
  }
  return j;
}

AttackSpec attack_from(const json& j) {
  check_keys(j, {"kind", "mode", "collision", "instruction", "max_new"}, "attack");
  AttackSpec a;
  a.kind = j.at("kind").get<std::string>();
  if (a.kind != "inversion" && a.kind != "collision" && a.kind != "injection")
    throw Error(ErrorCode::kInvalidConfig, "unknown attack '" + a.kind + "'");
  if (j.contains("mode")) a.inversion_mode = inversion_mode_from_string(j.at("mode").get<std::string>());
  if (j.contains("collision")) {
    const json& c = j.at("collision");
    check_keys(c,
               {"batch_size", "sigma_multiplier", "vocab_fraction", "threshold", "enhanced_t", "enhanced_rank",
                "per_batch_stats", "distance"},
               "collision");
    CollisionParams& p = a.collision;
    p.batch_size = c.value("batch_size", p.batch_size);
    p.sigma_multiplier = c.value("sigma_multiplier", p.sigma_multiplier);
    p.vocab_fraction = c.value("vocab_fraction", p.vocab_fraction);
    const std::string t = c.value("threshold", std::string("heuristic"));
    if (t != "heuristic" && t != "enhanced") throw Error(ErrorCode::kInvalidConfig, "threshold must be heuristic or enhanced");
    p.threshold_mode = t == "enhanced" ? ThresholdMode::kEnhanced : ThresholdMode::kHeuristic;
    p.enhanced_t = c.value("enhanced_t", p.enhanced_t);
    p.enhanced_rank = c.value("enhanced_rank", p.enhanced_rank);
    p.per_batch_stats = c.value("per_batch_stats", p.per_batch_stats);
    p.distance = distance_mode_from_string(c.value("distance", std::string("kv")));
  }
  a.instruction = j.value("instruction", a.instruction);
  a.max_new = j.value("max_new", a.max_new);
  return a;
}

json defense_json(const DefenseSpec& d) {
  json j{{"kind", d.kind}};
  if (d.kind == "dp") {
    j["epsilon"] = d.epsilon;
    j["delta"] = d.delta;
    j["clip_percentile"] = d.clip_percentile;
  }
  return j;
}

DefenseSpec defense_from(const json& j) {
  check_keys(j, {"kind", "epsilon", "delta", "clip_percentile"}, "defense");
  DefenseSpec d;
  d.kind = j.at("kind").get<std::string>();
  if (d.kind != "plaintext" && d.kind != "kvcloak" && d.kind != "dp")
    throw Error(ErrorCode::kInvalidConfig, "unknown defense '" + d.kind + "'");
  d.epsilon = j.value("epsilon", d.epsilon);
  d.delta = j.value("delta", d.delta);
  d.clip_percentile = j.value("clip_percentile", d.clip_percentile);
  return d;
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) out += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return out + "\"";
}

// Seed tags.
enum : std::uint64_t { kSeedWeights = 1, kSeedPerturb, kSeedCorpus, kSeedCalibration, kSeedKey, kSeedNoise };

// The deployment under one defense: how a prompt turns into the exported cache.
class Deployment {
 public:
  Deployment(const DefenseSpec& spec, const Weights& target, const std::vector<std::vector<Token>>& calibration,
             std::uint64_t seed)
      : spec_(spec), seed_(seed) {
    if (spec.kind == "kvcloak") {
      Rng rng(derive_seed(seed, {kSeedKey}));
      key_ = keygen(target, calibration, rng);
      model_.emplace(fuse_weights(target, *key_));
    } else {
      model_.emplace(target);
    }
    if (spec.kind == "dp") {
      std::vector<KVBlock<float>> blocks;
      for (const auto& seq : calibration) {
        KVCache c(target.config);
        model_->prefill<float>(seq, c);
        blocks.insert(blocks.end(), c.blocks().begin(), c.blocks().end());
      }
      dp_ = make_dp_config(spec.epsilon, spec.delta, spec.clip_percentile, calibrate_clip(blocks, spec.clip_percentile));
    }
  }

  const Model& model() const { return *model_; }
  const std::optional<CloakKey>& key() const { return key_; }

  // Cache as exported at the prefill/decode boundary.
  KVCache export_cache(std::span<const Token> tokens, std::uint64_t trial, Eigen::RowVectorXd* last = nullptr) const {
    KVCache cache(model_->config());
    const Eigen::MatrixXd logits = model_->prefill<float>(tokens, cache);
    if (last && logits.rows() > 0) *last = logits.row(logits.rows() - 1);
    protect(cache, trial);
    return cache;
  }

  void protect(KVCache& cache, std::uint64_t trial) const {
    if (key_) cloak_cache(cache, *key_, 0);
    if (dp_) dp_protect_cache(cache, *dp_, derive_seed(seed_, {kSeedNoise, trial}));
  }

  // Prefill, export, then greedy decode `steps` tokens through the defense.
  void serve(std::span<const Token> tokens, int steps) const {
    Eigen::RowVectorXd logits;
    KVCache cache = export_cache(tokens, 0, &logits);
    for (int s = 0; s < steps; ++s) {
      const Token next = argmax(logits);
      logits = key_ ? cloaked_decode_step(*model_, cache, next, *key_, static_cast<std::uint64_t>(s) + 1)
                    : model_->decode_step(cache, next);
    }
  }

 private:
  DefenseSpec spec_;
  std::uint64_t seed_;
  std::optional<Model> model_;
  std::optional<CloakKey> key_;
  std::optional<DPConfig> dp_;
};

}  // namespace

void CorpusConfig::validate(int vocab) const {
  if (count < 0) throw Error(ErrorCode::kInvalidConfig, "corpus count must be >= 0");
  if (min_len < 1 || max_len < min_len) throw Error(ErrorCode::kInvalidConfig, "corpus lengths need 1 <= min <= max");
  if (source != "uniform" && source != "model" && source != "distinct")
    throw Error(ErrorCode::kInvalidConfig, "corpus source must be uniform, model or distinct");
  if (top_k < 1 || top_k > vocab) throw Error(ErrorCode::kInvalidConfig, "top_k must lie in [1, vocab]");
  if (bos < 0 || bos >= vocab) throw Error(ErrorCode::kInvalidConfig, "bos outside the vocabulary");
  if (source == "distinct" && max_len > vocab) throw Error(ErrorCode::kInvalidConfig, "distinct corpus longer than vocab");
}

std::string DefenseSpec::label() const {
  if (kind != "dp") return kind;
  std::ostringstream s;
  s << "dp(eps=" << epsilon << ")";
  return s.str();
}

std::string AttackSpec::label() const {
  if (kind == "inversion") return std::string("inversion-") + to_string(inversion_mode);
  if (kind == "collision")
    return collision.threshold_mode == ThresholdMode::kEnhanced ? "collision-enhanced" : "collision";
  return kind;
}

void ExperimentConfig::validate() const {
  model.validate();
  if (model_kind != "random" && model_kind != "echo")
    throw Error(ErrorCode::kInvalidConfig, "model_kind must be random or echo");
  if (!(rho >= 0.0)) throw Error(ErrorCode::kInvalidConfig, "rho must be >= 0");
  corpus.validate(model.vocab);
  calibration.validate(model.vocab);
  if (calibration.count < 1) throw Error(ErrorCode::kInvalidConfig, "calibration corpus must be non-empty");
  for (const auto& l : layers) resolve_layer(l, model);
  for (const auto& a : attacks)
    if (a.kind == "collision") a.collision.validate(model.vocab);
  if (timing_repetitions < 5) throw Error(ErrorCode::kInvalidConfig, "timing needs at least 5 repetitions");
}

void to_json(json& j, const ExperimentConfig& c) {
  j = json{{"schema_version", kExperimentSchemaVersion},
           {"model_kind", c.model_kind},
           {"model", c.model},
           {"seed", c.seed},
           {"rho", c.rho},
           {"corpus", corpus_json(c.corpus)},
           {"calibration", corpus_json(c.calibration)},
           {"layers", c.layers},
           {"timing_repetitions", c.timing_repetitions},
           {"timing_decode_steps", c.timing_decode_steps},
           {"output", c.output}};
  j["defenses"] = json::array();
  for (const auto& d : c.defenses) j["defenses"].push_back(defense_json(d));
  j["attacks"] = json::array();
  for (const auto& a : c.attacks) j["attacks"].push_back(attack_json(a));
}

ExperimentConfig experiment_from_json(const json& j) {
  check_keys(j,
             {"schema_version", "model_kind", "model", "seed", "rho", "corpus", "calibration", "defenses", "attacks",
              "layers", "timing_repetitions", "timing_decode_steps", "output"},
             "experiment");
  ExperimentConfig c;
  try {
    if (j.value("schema_version", kExperimentSchemaVersion) != kExperimentSchemaVersion)
      throw Error(ErrorCode::kParse, "unsupported experiment schema_version");
    c.model_kind = j.value("model_kind", c.model_kind);
    if (c.model_kind == "echo") c.model = echo_config();
    if (j.contains("model")) {
      check_keys(j.at("model"),
                 {"layers", "hidden", "heads", "kv_heads", "head_dim", "vocab", "rope_base", "block_size", "norm_eps",
                  "mlp", "mlp_hidden"},
                 "model");
      ModelConfig m = c.model;
      json merged = m;
      merged.update(j.at("model"));
      c.model = merged.get<ModelConfig>();
    }
    c.seed = j.at("seed").get<std::uint64_t>();
    c.rho = j.value("rho", c.rho);
    if (j.contains("corpus")) c.corpus = corpus_from(j.at("corpus"), c.corpus, "corpus");
    if (j.contains("calibration")) c.calibration = corpus_from(j.at("calibration"), c.calibration, "calibration");
    if (j.contains("defenses")) {
      c.defenses.clear();
      for (const auto& d : j.at("defenses")) c.defenses.push_back(defense_from(d));
    }
    if (j.contains("attacks")) {
      c.attacks.clear();
      for (const auto& a : j.at("attacks")) c.attacks.push_back(attack_from(a));
    }
    c.layers = j.value("layers", c.layers);
    c.timing_repetitions = j.value("timing_repetitions", c.timing_repetitions);
    c.timing_decode_steps = j.value("timing_decode_steps", c.timing_decode_steps);
    c.output = j.value("output", c.output);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(e.byte, path.string() + ": " + e.what());
  }
  return experiment_from_json(j);
}

int resolve_layer(const std::string& name, const ModelConfig& config) {
  if (name == "first") return 0;
  if (name == "mid") return config.mid_layer();
  if (name == "last") return config.layers - 1;
  try {
    std::size_t used = 0;
    const int l = std::stoi(name, &used);
    if (used == name.size() && l >= 0 && l < config.layers) return l;
  } catch (const std::exception&) {
  }
  throw Error(ErrorCode::kInvalidConfig, "layer must be first, mid, last or an index < " +
                                             std::to_string(config.layers) + ", got '" + name + "'");
}

Weights base_weights(const ExperimentConfig& config) {
  const std::uint64_t seed = derive_seed(config.seed, {kSeedWeights});
  if (config.model_kind == "echo") return make_echo_model(config.model, seed).weights;
  return init_weights(config.model, seed);
}

Weights target_weights(const ExperimentConfig& config, const Weights& base) {
  return perturb_weights(base, config.rho, derive_seed(config.seed, {kSeedPerturb}));
}

std::vector<std::vector<Token>> generate_corpus(const CorpusConfig& corpus, int vocab, Rng& rng, const Model* target) {
  corpus.validate(vocab);
  if (corpus.source == "model" && !target)
    throw Error(ErrorCode::kInvalidConfig, "a model-sampled corpus needs the target model");
  std::vector<std::vector<Token>> out;
  std::uniform_int_distribution<int> length(corpus.min_len, corpus.max_len);
  std::uniform_int_distribution<Token> token(0, vocab - 1);
  for (int i = 0; i < corpus.count; ++i) {
    const int n = length(rng);
    std::vector<Token> seq;
    if (corpus.source == "uniform") {
      for (int p = 0; p < n; ++p) seq.push_back(token(rng));
    } else if (corpus.source == "distinct") {
      std::vector<Token> pool;
      for (Token t = 0; t < vocab; ++t)
        if (t != corpus.bos) pool.push_back(t);
      seq.push_back(corpus.bos);
      for (int p = 1; p < n; ++p) {
        std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(p - 1), pool.size() - 1);
        std::swap(pool[static_cast<std::size_t>(p - 1)], pool[pick(rng)]);
        seq.push_back(pool[static_cast<std::size_t>(p - 1)]);
      }
    } else {
      KVCache cache(target->config());
      seq.push_back(corpus.bos);
      Eigen::RowVectorXd logits = target->decode_step(cache, corpus.bos);
      std::uniform_int_distribution<int> pick(0, corpus.top_k - 1);
      std::vector<Token> idx(static_cast<std::size_t>(vocab));
      for (int p = 1; p < n; ++p) {
        std::iota(idx.begin(), idx.end(), 0);
        std::partial_sort(idx.begin(), idx.begin() + corpus.top_k, idx.end(),
                          [&](Token a, Token b) { return logits(a) > logits(b) || (logits(a) == logits(b) && a < b); });
        const Token next = idx[static_cast<std::size_t>(pick(rng))];
        seq.push_back(next);
        if (p + 1 < n) logits = target->decode_step(cache, next);
      }
    }
    out.push_back(std::move(seq));
  }
  return out;
}

void save_corpus(const std::vector<std::vector<Token>>& corpus, int vocab, const std::filesystem::path& path) {
  const json j{{"schema", "kvlab.corpus"}, {"schema_version", 1}, {"vocab", vocab}, {"sequences", corpus}};
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw Error(ErrorCode::kIo, "short write to " + path.string());
}

std::vector<std::vector<Token>> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  try {
    const json j = json::parse(in);
    if (j.at("schema").get<std::string>() != "kvlab.corpus") throw Error(ErrorCode::kParse, "not a corpus file");
    const int vocab = j.at("vocab").get<int>();
    auto seqs = j.at("sequences").get<std::vector<std::vector<Token>>>();
    for (const auto& s : seqs)
      for (Token t : s)
        if (t < 0 || t >= vocab) throw Error(ErrorCode::kInvalidToken, "corpus token " + std::to_string(t));
    return seqs;
  } catch (const json::parse_error& e) {
    throw ParseError(e.byte, path.string() + ": " + e.what());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, path.string() + ": " + e.what());
  }
}

ChosenPlaintextFit fit_enhanced_threshold(const Model& target, const Model& attacker,
                                          const std::vector<std::vector<Token>>& known_inputs, int layer) {
  ChosenPlaintextFit out;
  std::vector<double> mus, sigmas;
  double rank_sum = 0.0;
  for (const auto& seq : known_inputs) {
    KVCache cache(target.config());
    target.prefill<float>(seq, cache);
    for (const auto& p : distance_profile(cache, attacker, seq, layer)) {
      out.target_samples.push_back(p.dis_target);
      mus.push_back(p.mu_other);
      sigmas.push_back(p.sigma_other);
      rank_sum += p.rank;
    }
  }
  if (out.target_samples.empty()) throw Error(ErrorCode::kInvalidConfig, "no chosen-plaintext samples");
  const double n = static_cast<double>(mus.size());
  const double mu = mean_of(mus);
  double var = 0.0;
  for (std::size_t i = 0; i < mus.size(); ++i) var += sigmas[i] * sigmas[i] + (mus[i] - mu) * (mus[i] - mu);
  out.other.mu_other = mu;
  out.other.sigma_other = std::sqrt(var / n);
  out.rank = std::max(1, static_cast<int>(std::lround(rank_sum / n)));
  out.fit = enhanced_threshold(out.target_samples, out.other, out.rank);
  return out;
}

int Report::error_count() const {
  return static_cast<int>(std::count_if(trials.begin(), trials.end(), [](const TrialRow& t) { return !t.error.empty(); }));
}

std::vector<Aggregate> aggregate(const std::vector<TrialRow>& trials) {
  std::vector<Aggregate> out;
  std::map<std::tuple<std::string, std::string, std::string>, std::size_t> index;
  std::vector<std::vector<double>> exact, rouge;
  for (const auto& t : trials) {
    const auto key = std::make_tuple(t.defense, t.attack, t.layer);
    auto it = index.find(key);
    if (it == index.end()) {
      it = index.emplace(key, out.size()).first;
      out.push_back({t.defense, t.attack, t.layer});
      exact.emplace_back();
      rouge.emplace_back();
    }
    Aggregate& a = out[it->second];
    if (!t.error.empty()) {
      ++a.errors;
      continue;
    }
    ++a.n;
    exact[it->second].push_back(t.exact_match);
    rouge[it->second].push_back(t.rouge_l);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].exact_mean = mean_of(exact[i]);
    out[i].exact_std = std_of(exact[i]);
    out[i].rouge_mean = mean_of(rouge[i]);
    out[i].rouge_std = std_of(rouge[i]);
  }
  return out;
}

Report run_matrix(const ExperimentConfig& config) {
  config.validate();
  const Weights base = base_weights(config);
  const Weights target = target_weights(config, base);
  const Model attacker(base);
  const Model target_model(target);
  Rng corpus_rng(derive_seed(config.seed, {kSeedCorpus}));
  const auto corpus = generate_corpus(config.corpus, config.model.vocab, corpus_rng, &target_model);
  Rng calib_rng(derive_seed(config.seed, {kSeedCalibration}));
  const auto calibration = generate_corpus(config.calibration, config.model.vocab, calib_rng, &target_model);

  Report report;
  report.config = config;
  report.flops = flop_model(config.model.block_size, config.model.head_dim, config.model.hidden);

  std::vector<std::pair<DefenseSpec, std::optional<Deployment>>> deployments;
  for (const auto& spec : config.defenses) {
    std::optional<Deployment> dep;
    try {
      dep.emplace(spec, target, calibration, config.seed);
    } catch (const Error& e) {
      report.trials.push_back({spec.label(), "setup", "-", 0, 0.0, 0.0, 0.0, 0, e.what()});
    }
    deployments.emplace_back(spec, std::move(dep));
  }

  for (const auto& [spec, dep] : deployments) {
    if (!dep) continue;
    for (std::size_t trial = 0; trial < corpus.size(); ++trial) {
      const auto& tokens = corpus[trial];
      Eigen::RowVectorXd last;
      std::optional<KVCache> cache;
      std::string setup_error;
      try {
        cache.emplace(dep->export_cache(tokens, trial, &last));
      } catch (const Error& e) {
        setup_error = e.what();
      }
      for (const auto& attack : config.attacks) {
        const bool layered = attack.kind != "injection";
        const std::vector<std::string> layers = layered ? config.layers : std::vector<std::string>{"-"};
        for (const auto& layer_name : layers) {
          TrialRow row{spec.label(), attack.label(), layer_name, static_cast<int>(trial), 0.0, 0.0, 0.0, 0, ""};
          if (!cache) {
            row.error = setup_error;
            report.trials.push_back(row);
            continue;
          }
          try {
            if (attack.kind == "injection") {
              const std::span<const Token> truth = config.corpus.has_bos()
                                                       ? std::span<const Token>(tokens).subspan(1)
                                                       : std::span<const Token>(tokens);
              std::vector<Token> instruction = attack.instruction;
              if (instruction.empty()) instruction.push_back(config.corpus.bos);
              const int max_new = attack.max_new < 0 ? static_cast<int>(truth.size()) : attack.max_new;
              const auto start = std::chrono::steady_clock::now();
              const InjectionResult r = injection_attack(*cache, instruction, max_new, attacker);
              row.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
              row.exact_match = exact_match(r.generated, truth);
              row.rouge_l = rouge_l(r.generated, truth);
            } else {
              const int layer = resolve_layer(layer_name, config.model);
              AttackReport r;
              if (attack.kind == "inversion") {
                r = inversion_attack(*cache, base, attack.inversion_mode, layer);
              } else {
                CollisionParams p = attack.collision;
                p.layer = layer;
                r = collision_attack(*cache, attacker, p);
              }
              score(r, tokens);
              row.exact_match = r.exact_match;
              row.rouge_l = r.rouge_l;
              row.wall_time = r.wall_time;
              row.fallbacks = static_cast<int>(std::count_if(r.per_position.begin(), r.per_position.end(),
                                                             [](const PositionResult& p) {
                                                               return p.decision == Decision::kFallback;
                                                             }));
            }
          } catch (const Error& e) {
            row.error = e.what();
          }
          report.trials.push_back(row);
        }
      }
    }
  }
  report.aggregates = aggregate(report.trials);

  if (!corpus.empty()) {
    const auto& workload = corpus.front();
    const int steps = config.timing_decode_steps;
    const Deployment plain(DefenseSpec{}, target, calibration, config.seed);
    report.plaintext_seconds = median_seconds(config.timing_repetitions, [&] { plain.serve(workload, steps); });
    for (const auto& [spec, dep] : deployments) {
      if (!dep || spec.kind == "plaintext") continue;
      const double s = median_seconds(config.timing_repetitions, [&] { dep->serve(workload, steps); });
      report.timings.push_back({spec.label(), s, s / report.plaintext_seconds - 1.0});
      if (dep->key() && report.fused_obfuscation_seconds == 0.0) {
        const CloakKey& key = *dep->key();
        KVCache fused_cache(config.model), plain_cache(config.model);
        dep->model().prefill<float>(workload, fused_cache);
        target_model.prefill<float>(workload, plain_cache);
        const Eigen::MatrixXd m1 = materialize(key.m1), m2 = materialize(key.m2);
        const Eigen::MatrixXd m1_inv = materialize(invert_key(key.m1)), m2_inv = materialize(invert_key(key.m2));
        Rng rng(derive_seed(config.seed, {kSeedKey, 99}));
        report.fused_obfuscation_seconds = median_seconds(config.timing_repetitions, [&] {
          for (const auto& b : fused_cache.blocks()) deobfuscate_block(obfuscate_block(b, key, rng), key);
        });
        report.unfused_obfuscation_seconds = median_seconds(config.timing_repetitions, [&] {
          for (const auto& b : plain_cache.blocks())
            deobfuscate_block_unfused(obfuscate_block_unfused(b, key, m1, m2, rng), key, m1_inv, m2_inv);
        });
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------

json report_to_json(const Report& report) {
  json j;
  j["schema"] = "kvlab.report";
  j["schema_version"] = kReportSchemaVersion;
  j["config"] = report.config;
  j["trials"] = json::array();
  for (const auto& t : report.trials)
    j["trials"].push_back({{"defense", t.defense},
                           {"attack", t.attack},
                           {"layer", t.layer},
                           {"trial", t.trial},
                           {"exact_match", t.exact_match},
                           {"rouge_l", t.rouge_l},
                           {"wall_time", t.wall_time},
                           {"fallbacks", t.fallbacks},
                           {"error", t.error}});
  j["aggregates"] = json::array();
  for (const auto& a : report.aggregates)
    j["aggregates"].push_back({{"defense", a.defense},
                               {"attack", a.attack},
                               {"layer", a.layer},
                               {"n", a.n},
                               {"errors", a.errors},
                               {"exact_match_mean", a.exact_mean},
                               {"exact_match_std", a.exact_std},
                               {"rouge_l_mean", a.rouge_mean},
                               {"rouge_l_std", a.rouge_std}});
  const FlopModel& f = report.flops;
  j["flops"] = {{"b", f.b},
                {"d", f.d},
                {"hidden", f.hidden},
                {"naive_mults", f.naive_mults},
                {"fused_mults", f.fused_mults},
                {"recompute_mults", f.recompute_mults},
                {"naive_ratio", f.naive_ratio},
                {"fused_ratio", f.fused_ratio},
                {"fused_over_naive", f.fused_over_naive}};
  json timing{{"plaintext_seconds", report.plaintext_seconds},
              {"fused_obfuscation_seconds", report.fused_obfuscation_seconds},
              {"unfused_obfuscation_seconds", report.unfused_obfuscation_seconds},
              {"defenses", json::array()}};
  for (const auto& t : report.timings)
    timing["defenses"].push_back({{"defense", t.defense}, {"seconds", t.seconds}, {"overhead", t.overhead}});
  j["timing"] = std::move(timing);
  j["errors"] = report.error_count();
  return j;
}

Report report_from_json(const json& j) {
  Report r;
  try {
    if (j.at("schema").get<std::string>() != "kvlab.report" ||
        j.at("schema_version").get<int>() != kReportSchemaVersion)
      throw Error(ErrorCode::kParse, "not a version-1 report");
    r.config = j.at("config");
    for (const auto& t : j.at("trials"))
      r.trials.push_back({t.at("defense"), t.at("attack"), t.at("layer"), t.at("trial"), t.at("exact_match"),
                          t.at("rouge_l"), t.at("wall_time"), t.at("fallbacks"), t.at("error")});
    for (const auto& a : j.at("aggregates"))
      r.aggregates.push_back({a.at("defense"), a.at("attack"), a.at("layer"), a.at("n"), a.at("errors"),
                              a.at("exact_match_mean"), a.at("exact_match_std"), a.at("rouge_l_mean"),
                              a.at("rouge_l_std")});
    const json& f = j.at("flops");
    r.flops = {f.at("b"),           f.at("d"),           f.at("hidden"),           f.at("naive_mults"),
               f.at("fused_mults"), f.at("recompute_mults"), f.at("naive_ratio"), f.at("fused_ratio"),
               f.at("fused_over_naive")};
    const json& t = j.at("timing");
    r.plaintext_seconds = t.at("plaintext_seconds");
    r.fused_obfuscation_seconds = t.at("fused_obfuscation_seconds");
    r.unfused_obfuscation_seconds = t.at("unfused_obfuscation_seconds");
    for (const auto& d : t.at("defenses")) r.timings.push_back({d.at("defense"), d.at("seconds"), d.at("overhead")});
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("report: ") + e.what());
  }
  return r;
}

std::string emit_report(const Report& report) { return report_to_json(report).dump(2) + "\n"; }

void write_report(const Report& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << emit_report(report);
  if (!out) throw Error(ErrorCode::kIo, "short write to " + path.string());
}

std::string report_csv(const Report& report) {
  std::ostringstream s;
  s.precision(17);
  s << "defense,attack,layer,trial,exact_match,rouge_l,wall_time,fallbacks,error\n";
  for (const auto& t : report.trials)
    s << csv_field(t.defense) << ',' << csv_field(t.attack) << ',' << csv_field(t.layer) << ',' << t.trial << ','
      << t.exact_match << ',' << t.rouge_l << ',' << t.wall_time << ',' << t.fallbacks << ',' << csv_field(t.error)
      << '\n';
  return s.str();
}

}  // namespace kvlab
