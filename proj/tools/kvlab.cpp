// kvlab command line: weights, corpora, keys, caches, attacks and experiment matrices.

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

#include "kvlab/acceptance.hpp"
#include "kvlab/harness.hpp"
#include "kvlab/json_io.hpp"

using namespace kvlab;
using nlohmann::json;

namespace {

struct ModelFlags {
  std::string config;
  std::string kind = "random";
  std::optional<int> layers, hidden, heads, kv_heads, head_dim, vocab, block_size;
  std::optional<double> rope_base;
  std::optional<bool> mlp;

  void add(CLI::App* app) {
    app->add_option("--model-config", config, "ModelConfig JSON file");
    app->add_option("--model-kind", kind, "random or echo")->check(CLI::IsMember({"random", "echo"}));
    app->add_option("--layers", layers);
    app->add_option("--hidden", hidden);
    app->add_option("--heads", heads);
    app->add_option("--kv-heads", kv_heads);
    app->add_option("--head-dim", head_dim);
    app->add_option("--vocab", vocab);
    app->add_option("--block-size", block_size);
    app->add_option("--rope-base", rope_base);
    app->add_option("--mlp", mlp);
  }

  ModelConfig resolve() const {
    ModelConfig c = kind == "echo" ? echo_config() : ModelConfig{};
    if (!config.empty()) {
      std::ifstream in(config);
      if (!in) throw Error(ErrorCode::kIo, "cannot open " + config);
      json j = c;
      j.update(json::parse(in));
      c = j.get<ModelConfig>();
    }
    if (layers) c.layers = *layers;
    if (hidden) c.hidden = *hidden;
    if (heads) c.heads = *heads;
    if (kv_heads) c.kv_heads = *kv_heads;
    if (head_dim) c.head_dim = *head_dim;
    if (vocab) c.vocab = *vocab;
    if (block_size) c.block_size = *block_size;
    if (rope_base) c.rope_base = *rope_base;
    if (mlp) c.mlp = *mlp;
    c.validate();
    return c;
  }
};

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path);
  out << text;
  if (!out) throw Error(ErrorCode::kIo, "short write to " + path);
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(e.byte, path + ": " + e.what());
  }
}

std::vector<Token> pick_sequence(const std::string& corpus_path, int index) {
  const auto corpus = load_corpus(corpus_path);
  if (index < 0 || index >= static_cast<int>(corpus.size()))
    throw Error(ErrorCode::kIndexOutOfRange, "sequence index " + std::to_string(index) + " outside the corpus");
  return corpus[static_cast<std::size_t>(index)];
}

std::vector<Token> parse_tokens(const std::string& list) {
  std::vector<Token> out;
  std::stringstream s(list);
  std::string item;
  while (std::getline(s, item, ',')) {
    if (item.empty()) continue;
    try {
      out.push_back(static_cast<Token>(std::stoi(item)));
    } catch (const std::exception&) {
      throw Error(ErrorCode::kInvalidToken, "not a token id: '" + item + "'");
    }
  }
  return out;
}

json attack_report_json(const AttackReport& r) {
  json rows = json::array();
  for (const auto& p : r.per_position)
    rows.push_back({{"token", p.token},
                    {"rank", p.rank},
                    {"dis_target", p.dis_target},
                    {"mu_other", p.mu_other},
                    {"sigma_other", p.sigma_other},
                    {"decision", to_string(p.decision)}});
  return {{"attack", r.attack},           {"layer", r.layer},       {"reconstructed", r.reconstructed},
          {"exact_match", r.exact_match}, {"rouge_l", r.rouge_l},   {"wall_time", r.wall_time},
          {"cloaked_input", r.cloaked_input}, {"per_position", rows}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kvlab: KV-cache leakage attacks and the KV-Cloak defense on a toy decoder"};
  app.require_subcommand(1);
  int exit_code = 0;

  // gen-weights
  auto* gw = app.add_subcommand("gen-weights", "Sample model weights");
  ModelFlags gw_model;
  gw_model.add(gw);
  std::uint64_t gw_seed = 0;
  double gw_rho = 0.0;
  std::string gw_base, gw_out;
  gw->add_option("--seed", gw_seed)->required();
  gw->add_option("--rho", gw_rho, "relative perturbation of --base (fine-tuned target)");
  gw->add_option("--base", gw_base, "perturb these weights instead of sampling");
  gw->add_option("--out,-o", gw_out)->required();
  gw->callback([&] {
    Weights w;
    if (!gw_base.empty()) {
      w = perturb_weights(load_weights(gw_base), gw_rho, gw_seed);
    } else {
      const ModelConfig c = gw_model.resolve();
      w = gw_model.kind == "echo" ? make_echo_model(c, gw_seed).weights : init_weights(c, gw_seed);
      if (gw_rho > 0.0) w = perturb_weights(w, gw_rho, derive_seed(gw_seed, {2}));
    }
    save_weights(w, gw_out);
  });

  // gen-corpus
  auto* gc = app.add_subcommand("gen-corpus", "Sample a token corpus");
  CorpusConfig gc_cfg;
  std::uint64_t gc_seed = 0;
  int gc_vocab = ModelConfig{}.vocab;
  std::string gc_weights, gc_out;
  gc->add_option("--seed", gc_seed)->required();
  gc->add_option("--count", gc_cfg.count);
  gc->add_option("--min-len", gc_cfg.min_len);
  gc->add_option("--max-len", gc_cfg.max_len);
  gc->add_option("--source", gc_cfg.source)->check(CLI::IsMember({"uniform", "model", "distinct"}));
  gc->add_option("--top-k", gc_cfg.top_k);
  gc->add_option("--bos", gc_cfg.bos);
  gc->add_option("--vocab", gc_vocab, "ignored when --weights is given");
  gc->add_option("--weights", gc_weights, "model for --source model");
  gc->add_option("--out,-o", gc_out)->required();
  gc->callback([&] {
    std::optional<Model> target;
    if (!gc_weights.empty()) {
      target.emplace(load_weights(gc_weights));
      gc_vocab = target->config().vocab;
    }
    Rng rng(gc_seed);
    save_corpus(generate_corpus(gc_cfg, gc_vocab, rng, target ? &*target : nullptr), gc_vocab, gc_out);
  });

  // keygen
  auto* kg = app.add_subcommand("keygen", "Generate a KV-Cloak key calibrated on a corpus");
  std::uint64_t kg_seed = 0;
  std::string kg_weights, kg_corpus, kg_out;
  KeygenOptions kg_opts;
  kg->add_option("--seed", kg_seed)->required();
  kg->add_option("--weights", kg_weights)->required();
  kg->add_option("--corpus", kg_corpus, "calibration corpus")->required();
  kg->add_option("--scale-lo", kg_opts.bounds.lo);
  kg->add_option("--scale-hi", kg_opts.bounds.hi);
  kg->add_option("--out,-o", kg_out)->required();
  kg->callback([&] {
    Rng rng(kg_seed);
    save_key(keygen(load_weights(kg_weights), load_corpus(kg_corpus), rng, kg_opts), kg_out);
  });

  // fuse
  auto* fu = app.add_subcommand("fuse", "Fold the key's M1/M2 into the attention weights");
  std::string fu_weights, fu_key, fu_out;
  fu->add_option("--weights", fu_weights)->required();
  fu->add_option("--key", fu_key)->required();
  fu->add_option("--out,-o", fu_out)->required();
  fu->callback([&] { save_weights(fuse_weights(load_weights(fu_weights), load_key(fu_key)), fu_out); });

  // prefill
  auto* pf = app.add_subcommand("prefill", "Run a prompt and save its KV-cache");
  std::string pf_weights, pf_corpus, pf_tokens, pf_out;
  int pf_index = 0;
  pf->add_option("--weights", pf_weights)->required();
  auto* pf_src = pf->add_option("--corpus", pf_corpus);
  pf->add_option("--index", pf_index, "sequence in --corpus");
  pf->add_option("--tokens", pf_tokens, "comma-separated ids")->excludes(pf_src);
  pf->add_option("--out,-o", pf_out)->required();
  pf->callback([&] {
    const Model m(load_weights(pf_weights));
    const std::vector<Token> tokens = pf_tokens.empty() ? pick_sequence(pf_corpus, pf_index) : parse_tokens(pf_tokens);
    KVCache cache(m.config());
    m.prefill<float>(tokens, cache);
    save_cache(cache, pf_out);
  });

  // cloak / decloak
  auto* ck = app.add_subcommand("cloak", "Obfuscate every block of a cache");
  std::string ck_cache, ck_key, ck_out;
  std::uint64_t ck_epoch = 0;
  ck->add_option("--cache", ck_cache)->required();
  ck->add_option("--key", ck_key)->required();
  ck->add_option("--epoch", ck_epoch);
  ck->add_option("--out,-o", ck_out)->required();
  ck->callback([&] {
    KVCache cache = load_cache(ck_cache);
    cloak_cache(cache, load_key(ck_key), ck_epoch);
    save_cache(cache, ck_out);
  });

  auto* dk = app.add_subcommand("decloak", "Recover the fused-domain cache");
  std::string dk_cache, dk_key, dk_out;
  dk->add_option("--cache", dk_cache)->required();
  dk->add_option("--key", dk_key)->required();
  dk->add_option("--out,-o", dk_out)->required();
  dk->callback([&] {
    KVCache cache = load_cache(dk_cache);
    decloak_cache(cache, load_key(dk_key));
    save_cache(cache, dk_out);
  });

  // attack
  auto* at = app.add_subcommand("attack", "Run one attack on a cache");
  std::string at_kind = "collision", at_cache, at_weights, at_truth_corpus, at_truth_tokens, at_out, at_layer = "first";
  std::string at_mode = "exact", at_threshold = "heuristic", at_distance = "kv", at_instruction;
  int at_truth_index = 0, at_max_new = -1;
  CollisionParams at_params;
  at->add_option("--kind", at_kind)->check(CLI::IsMember({"inversion", "collision", "injection"}));
  at->add_option("--cache", at_cache)->required();
  at->add_option("--weights", at_weights, "attacker (public base) weights")->required();
  at->add_option("--layer", at_layer, "first, mid, last or an index");
  at->add_option("--mode", at_mode, "inversion: exact or least_squares");
  at->add_option("--batch-size", at_params.batch_size);
  at->add_option("--sigma-multiplier", at_params.sigma_multiplier);
  at->add_option("--vocab-fraction", at_params.vocab_fraction);
  at->add_option("--threshold", at_threshold)->check(CLI::IsMember({"heuristic", "enhanced"}));
  at->add_option("--enhanced-t", at_params.enhanced_t);
  at->add_option("--enhanced-rank", at_params.enhanced_rank);
  at->add_flag("--per-batch-stats", at_params.per_batch_stats);
  at->add_option("--distance", at_distance)->check(CLI::IsMember({"kv", "k", "v"}));
  at->add_option("--instruction", at_instruction, "injection: comma-separated ids");
  at->add_option("--max-new", at_max_new, "injection: tokens to generate");
  at->add_option("--truth-corpus", at_truth_corpus);
  at->add_option("--truth-index", at_truth_index);
  at->add_option("--truth", at_truth_tokens, "comma-separated ids");
  at->add_option("--out,-o", at_out, "JSON result; stdout when omitted");
  at->callback([&] {
    const KVCache cache = load_cache(at_cache);
    const Weights w = load_weights(at_weights);
    std::vector<Token> truth;
    if (!at_truth_tokens.empty()) truth = parse_tokens(at_truth_tokens);
    if (!at_truth_corpus.empty()) truth = pick_sequence(at_truth_corpus, at_truth_index);
    json out;
    if (at_kind == "injection") {
      const Model m(w);
      const std::vector<Token> instruction = parse_tokens(at_instruction);
      const int n = at_max_new >= 0 ? at_max_new : cache.seq_len();
      const InjectionResult r = injection_attack(cache, instruction, n, m);
      out = {{"attack", "injection"}, {"generated", r.generated}, {"cloaked_input", r.cloaked_input}};
      if (!truth.empty()) {
        out["exact_match"] = exact_match(r.generated, truth);
        out["rouge_l"] = rouge_l(r.generated, truth);
      }
    } else {
      const int layer = resolve_layer(at_layer, w.config);
      AttackReport r;
      if (at_kind == "inversion") {
        r = inversion_attack(cache, w, inversion_mode_from_string(at_mode), layer);
      } else {
        at_params.layer = layer;
        at_params.threshold_mode = at_threshold == "enhanced" ? ThresholdMode::kEnhanced : ThresholdMode::kHeuristic;
        at_params.distance = distance_mode_from_string(at_distance);
        r = collision_attack(cache, Model(w), at_params);
      }
      if (!truth.empty()) score(r, truth);
      out = attack_report_json(r);
      if (truth.empty()) {
        out.erase("exact_match");
        out.erase("rouge_l");
      }
    }
    write_text(at_out, out.dump(2) + "\n");
  });

  // matrix
  auto* mx = app.add_subcommand("matrix", "Run a defense x attack x layer experiment");
  std::string mx_config, mx_out, mx_csv;
  std::optional<std::uint64_t> mx_seed;
  std::optional<int> mx_count;
  std::optional<double> mx_rho;
  mx->add_option("--config,-c", mx_config, "experiment JSON")->required();
  mx->add_option("--seed", mx_seed, "overrides the config seed");
  mx->add_option("--count", mx_count, "overrides corpus.count");
  mx->add_option("--rho", mx_rho, "overrides rho");
  mx->add_option("--out,-o", mx_out, "report JSON; config output field when omitted");
  mx->add_option("--csv", mx_csv, "per-trial CSV");
  mx->callback([&] {
    json j = read_json(mx_config);
    if (mx_seed) j["seed"] = *mx_seed;
    if (mx_rho) j["rho"] = *mx_rho;
    if (mx_count) j["corpus"]["count"] = *mx_count;
    const ExperimentConfig cfg = experiment_from_json(j);
    const Report report = run_matrix(cfg);
    const std::string path = mx_out.empty() ? cfg.output : mx_out;
    write_text(path, emit_report(report));
    if (!mx_csv.empty()) write_text(mx_csv, report_csv(report));
    for (const auto& a : report.aggregates)
      std::cerr << std::left << std::setw(14) << a.defense << std::setw(20) << a.attack << std::setw(6) << a.layer
                << " n=" << a.n << " exact=" << a.exact_mean << " rouge_l=" << a.rouge_mean
                << (a.errors ? " errors=" + std::to_string(a.errors) : "") << "\n";
    if (report.error_count() > 0) {
      std::cerr << report.error_count() << " trial(s) aborted\n";
      exit_code = 3;
    }
  });

  // flops
  auto* fl = app.add_subcommand("flops", "Multiplication counts of the obfuscation");
  std::int64_t fl_b = 16, fl_d = 128, fl_hidden = 4096;
  fl->add_option("--block-size,-b", fl_b);
  fl->add_option("--head-dim,-d", fl_d);
  fl->add_option("--hidden", fl_hidden);
  fl->callback([&] {
    const FlopModel f = flop_model(fl_b, fl_d, fl_hidden);
    const json j{{"b", f.b},
                 {"d", f.d},
                 {"hidden", f.hidden},
                 {"naive_mults", f.naive_mults},
                 {"fused_mults", f.fused_mults},
                 {"recompute_mults", f.recompute_mults},
                 {"naive_ratio", f.naive_ratio},
                 {"fused_ratio", f.fused_ratio},
                 {"fused_over_naive", f.fused_over_naive}};
    std::cout << j.dump(2) << "\n";
  });

  // report
  auto* rp = app.add_subcommand("report", "Validate, summarize or re-emit a report");
  std::string rp_in, rp_out, rp_csv;
  rp->add_option("report", rp_in)->required();
  rp->add_option("--out,-o", rp_out, "re-emit the JSON");
  rp->add_option("--csv", rp_csv, "per-trial CSV");
  rp->callback([&] {
    const Report report = report_from_json(read_json(rp_in));
    if (!rp_out.empty()) write_text(rp_out, emit_report(report));
    if (!rp_csv.empty()) write_text(rp_csv, report_csv(report));
    std::cout << std::left << std::setw(14) << "defense" << std::setw(20) << "attack" << std::setw(7) << "layer"
              << std::setw(5) << "n" << std::setw(22) << "exact_match" << "rouge_l\n";
    for (const auto& a : report.aggregates) {
      std::ostringstream em, rl;
      em << std::fixed << std::setprecision(4) << a.exact_mean << " +- " << a.exact_std;
      rl << std::fixed << std::setprecision(4) << a.rouge_mean << " +- " << a.rouge_std;
      std::cout << std::setw(14) << a.defense << std::setw(20) << a.attack << std::setw(7) << a.layer << std::setw(5)
                << a.n << std::setw(22) << em.str() << rl.str() << "\n";
    }
    std::cout << "plaintext serve: " << report.plaintext_seconds * 1e3 << " ms\n";
    for (const auto& t : report.timings)
      std::cout << t.defense << " serve: " << t.seconds * 1e3 << " ms (overhead " << t.overhead * 100.0 << "%)\n";
    if (report.fused_obfuscation_seconds > 0.0)
      std::cout << "obfuscation fused/unfused: " << report.fused_obfuscation_seconds * 1e3 << " / "
                << report.unfused_obfuscation_seconds * 1e3 << " ms\n";
    if (report.error_count() > 0) exit_code = 3;
  });

  // acceptance
  auto* ac = app.add_subcommand("acceptance", "Run the acceptance criteria");
  std::string ac_config;
  std::vector<int> ac_only;
  bool ac_no_budget = false;
  ac->add_option("--config,-c", ac_config, "acceptance JSON");
  ac->add_option("--only", ac_only, "criterion ids");
  ac->add_flag("--no-budget", ac_no_budget, "do not fail criteria on runtime");
  ac->callback([&] {
    AcceptanceOptions opts = ac_config.empty() ? AcceptanceOptions{} : load_acceptance(ac_config);
    if (!ac_only.empty()) opts.only = ac_only;
    if (ac_no_budget) opts.enforce_budgets = false;
    int failed = 0;
    run_acceptance(opts, [&](const CriterionResult& r) {
      std::cout << format_result(r) << std::endl;
      failed += !r.pass;
    });
    exit_code = failed ? 1 : 0;
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const Error& e) {
    std::cerr << "kvlab: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "kvlab: " << e.what() << "\n";
    return 1;
  }
  return exit_code;
}
