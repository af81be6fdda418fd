#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "kvlab/harness.hpp"

using namespace kvlab;
using nlohmann::json;

namespace {

ExperimentConfig small_experiment() {
  ExperimentConfig c;
  c.model.layers = 2;
  c.model.hidden = 64;
  c.model.heads = 2;
  c.model.kv_heads = 2;
  c.model.head_dim = 32;
  c.model.vocab = 128;
  c.model.block_size = 8;
  c.seed = 7;
  c.corpus = {3, 10, 16, "uniform", 16, 0};
  c.calibration = {2, 16, 16, "uniform", 16, 0};
  c.defenses = {DefenseSpec{}, DefenseSpec{"kvcloak"}, DefenseSpec{"dp", 1.0}};
  AttackSpec inversion;
  inversion.kind = "inversion";
  AttackSpec collision;
  c.attacks = {inversion, collision};
  c.layers = {"first", "last"};
  c.timing_repetitions = 5;
  c.timing_decode_steps = 2;
  return c;
}

const Aggregate& find(const Report& r, const std::string& defense, const std::string& attack,
                      const std::string& layer) {
  for (const auto& a : r.aggregates)
    if (a.defense == defense && a.attack == attack && a.layer == layer) return a;
  FAIL("aggregate missing: " << defense << " " << attack << " " << layer);
  throw std::logic_error("unreachable");
}

json strip_wall_clock(json j) {
  for (auto& t : j["trials"]) t.erase("wall_time");
  j.erase("timing");
  return j;
}

}  // namespace

TEST_CASE("corpus generation") {
  Rng rng(1);
  SUBCASE("empty") {
    CorpusConfig c{0, 4, 8, "uniform", 16, 0};
    CHECK(generate_corpus(c, 64, rng).empty());
  }
  SUBCASE("uniform is deterministic and in range") {
    CorpusConfig c{5, 4, 8, "uniform", 16, 0};
    Rng a(2), b(2);
    const auto x = generate_corpus(c, 64, a), y = generate_corpus(c, 64, b);
    CHECK(x == y);
    for (const auto& s : x) {
      CHECK(s.size() >= 4);
      CHECK(s.size() <= 8);
      for (Token t : s) CHECK((t >= 0 && t < 64));
    }
  }
  SUBCASE("distinct") {
    CorpusConfig c{4, 10, 20, "distinct", 16, 0};
    for (const auto& s : generate_corpus(c, 64, rng)) {
      CHECK(s.front() == 0);
      const std::set<Token> rest(s.begin() + 1, s.end());
      CHECK(rest.size() == s.size() - 1);
      CHECK(rest.count(0) == 0);
    }
  }
  SUBCASE("model-sampled tokens come from the top-k") {
    ExperimentConfig e = small_experiment();
    const Model m(base_weights(e));
    CorpusConfig c{3, 6, 10, "model", 4, 0};
    for (const auto& s : generate_corpus(c, 128, rng, &m)) {
      CHECK(s.front() == 0);
      const Eigen::MatrixXd logits = m.forward_full(s);
      for (std::size_t i = 1; i < s.size(); ++i) {
        const Eigen::RowVectorXd row = logits.row(static_cast<Index>(i - 1));
        const double v = row(s[i]);
        const Index higher = (row.array() > v).count();
        CHECK(higher < 4);
      }
    }
    CHECK_THROWS_AS(generate_corpus(c, 128, rng), Error);
  }
  SUBCASE("file roundtrip") {
    CorpusConfig c{3, 4, 8, "uniform", 16, 0};
    const auto x = generate_corpus(c, 64, rng);
    const auto path = std::filesystem::temp_directory_path() / "kvlab_test_corpus.json";
    save_corpus(x, 64, path);
    CHECK(load_corpus(path) == x);
    std::filesystem::remove(path);
  }
}

TEST_CASE("experiment config") {
  const ExperimentConfig c = small_experiment();
  const json j = c;
  const ExperimentConfig back = experiment_from_json(j);
  CHECK(json(back) == j);
  CHECK(back.model == c.model);

  json extra = j;
  extra["surprise"] = 1;
  CHECK_THROWS_AS(experiment_from_json(extra), Error);
  json nested = j;
  nested["corpus"]["typo"] = 1;
  CHECK_THROWS_AS(experiment_from_json(nested), Error);

  CHECK(resolve_layer("first", c.model) == 0);
  CHECK(resolve_layer("mid", c.model) == 1);
  CHECK(resolve_layer("last", c.model) == 1);
  CHECK_THROWS_AS(resolve_layer("middle", c.model), Error);
}

TEST_CASE("experiment matrix") {
  ExperimentConfig config = small_experiment();
  config.rho = 0.0;
  const Report report = run_matrix(config);
  CHECK(report.error_count() == 0);
  CHECK(report.trials.size() == 3 * 3 * 2 * 2);

  CHECK(find(report, "plaintext", "inversion-exact", "first").exact_mean == 1.0);
  CHECK(find(report, "plaintext", "collision", "first").exact_mean == 1.0);
  // about 40 tokens per cell, so allow a few chance hits
  for (const char* layer : {"first", "last"}) {
    const Aggregate& inv = find(report, "kvcloak", "inversion-exact", layer);
    CHECK(inv.n == 3);
    CHECK(inv.exact_mean <= 0.1);
    CHECK(find(report, "kvcloak", "collision", layer).exact_mean <= 0.1);
  }
  REQUIRE(report.timings.size() == 2);
  for (const auto& t : report.timings) {
    CHECK(std::isfinite(t.overhead));
    CHECK(t.seconds > 0.0);
  }
  CHECK(report.plaintext_seconds > 0.0);
  CHECK(report.fused_obfuscation_seconds > 0.0);
  CHECK(report.fused_obfuscation_seconds <= report.unfused_obfuscation_seconds);
  CHECK(report.flops.b == 8);

  SUBCASE("report re-emission is byte-identical") {
    const std::string text = emit_report(report);
    CHECK(emit_report(report_from_json(json::parse(text))) == text);
  }
  SUBCASE("csv has one row per trial") {
    std::istringstream csv(report_csv(report));
    std::string line;
    int lines = 0;
    while (std::getline(csv, line)) ++lines;
    CHECK(lines == static_cast<int>(report.trials.size()) + 1);
  }
  SUBCASE("the echoed config reproduces the run") {
    const Report again = run_matrix(experiment_from_json(report_to_json(report)["config"]));
    CHECK(strip_wall_clock(report_to_json(again)) == strip_wall_clock(report_to_json(report)));
  }
}

TEST_CASE("failing trials are recorded and the run continues") {
  ExperimentConfig c = small_experiment();
  c.model.heads = 4;
  c.model.kv_heads = 2;
  c.model.hidden = 128;
  c.defenses = {DefenseSpec{}};
  const Report report = run_matrix(c);
  CHECK(report.error_count() == 3 * 2);
  int collisions = 0;
  for (const auto& t : report.trials) {
    if (t.attack == "inversion-exact") {
      CHECK(t.error.find("unsupported") != std::string::npos);
    } else {
      CHECK(t.error.empty());
      ++collisions;
    }
  }
  CHECK(collisions == 3 * 2);
  CHECK(find(report, "plaintext", "inversion-exact", "first").errors == 3);
}
