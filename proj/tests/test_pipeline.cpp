#include <doctest.h>

#include <fstream>

#include "support/test_util.hpp"
#include "vwsd/errors.hpp"
#include "vwsd/evaluation.hpp"
#include "vwsd/features.hpp"
#include "vwsd/pipeline.hpp"

using namespace vwsd;
using nlohmann::json;
using testutil::TempDir;
using testutil::write_file;

namespace {

// A self-contained pipeline fixture: dataset + kb cache + config file.
struct PipelineFixture {
  TempDir tmp{"pipe"};
  std::filesystem::path config_path;

  explicit PipelineFixture(int n_samples = 6) {
    auto ds = testutil::write_fixture_dataset(tmp.path(), n_samples);

    // recorded kb cache: hits for even samples, misses for odd ones
    std::filesystem::create_directories(tmp / "kb" / "wikipedia");
    std::ofstream manifest(tmp / "kb" / "manifest.jsonl");
    for (int i = 0; i < n_samples; ++i) {
      json rec;
      rec["phrase"] = "word" + std::to_string(i) + " ctx" + std::to_string(i);
      rec["source"] = "wikipedia";
      json results = json::array();
      if (i % 2 == 0) {
        const std::string file = "wikipedia/blob" + std::to_string(i) + ".jpg";
        write_file(tmp / "kb" / file, "kb-bytes-" + std::to_string(i));
        results.push_back({{"url", "https://e.org/" + std::to_string(i) + ".jpg"},
                           {"title", "T"},
                           {"file", file}});
      }
      rec["results"] = std::move(results);
      manifest << rec.dump() << '\n';
    }
    manifest.close();

    json config = {
        {"data", "data.tsv"},
        {"gold", "gold.txt"},
        {"images", "images"},
        {"cache_root", "cache"},
        {"seed", 0},
        {"metric", "cosine"},
        {"penalty", {{"enabled", true}, {"alpha", 1.0}}},
        {"embedder", {{"kind", "mock"}, {"seed", 0}, {"dim", 32}}},
        {"llm", {{"kind", "stub"}, {"seed", 0}}},
        {"captioner", {{"kind", "stub"}, {"seed", 0}, {"mode", "greedy"}}},
        {"kb",
         {{"sources", json::array({"wikipedia"})},
          {"k", 10},
          {"client", "none"},
          {"fixture", "kb"}}},
        {"templates", json::array({"meaning_of"})},
        {"families", json::array({"baseline+penalty", "enhanced:meaning_of+penalty",
                                  "captions:t", "captions:te:meaning_of",
                                  "kb:wikipedia"})},
        {"ltr",
         {{"n_estimators", 60}, {"early_stopping_rounds", 20}, {"min_child_samples", 5}}},
        {"split_fraction", 0.2},
        {"qa", {{"cot", true}}},
        {"parallelism", 2},
    };
    config_path = tmp / "config.json";
    write_file(config_path, config.dump(2));
  }

  PipelineConfig load(const std::filesystem::path& cache) const {
    PipelineConfig cfg = PipelineConfig::from_file(config_path);
    cfg.cache_root = cache;
    return cfg;
  }
};

void run_all_stages(Pipeline& p) {
  p.prepare();
  p.embed();
  p.enhance();
  p.caption();
  p.kb_fetch();
  p.score();
  p.features();
  p.train();
  p.predict();
  p.qa();
}

}  // namespace

TEST_CASE("config parsing and validation") {
  TempDir tmp("cfg");
  SUBCASE("missing required keys") {
    write_file(tmp / "c.json", R"({"data": "d.tsv"})");
    try {
      PipelineConfig::from_file(tmp / "c.json");
      FAIL("expected ConfigInvalid");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::ConfigInvalid);
    }
  }
  SUBCASE("invalid JSON") {
    write_file(tmp / "c.json", "{nope");
    CHECK_THROWS_AS(PipelineConfig::from_file(tmp / "c.json"), Error);
  }
  SUBCASE("unknown metric") {
    write_file(tmp / "c.json",
               R"({"data":"d","images":"i","cache_root":"c","metric":"chebyshev"})");
    CHECK_THROWS_AS(PipelineConfig::from_file(tmp / "c.json"), Error);
  }
  SUBCASE("unknown template") {
    write_file(tmp / "c.json",
               R"({"data":"d","images":"i","cache_root":"c","templates":["bogus"]})");
    CHECK_THROWS_AS(PipelineConfig::from_file(tmp / "c.json"), Error);
  }
  SUBCASE("negative alpha") {
    write_file(tmp / "c.json",
               R"({"data":"d","images":"i","cache_root":"c","penalty":{"alpha":-1}})");
    CHECK_THROWS_AS(PipelineConfig::from_file(tmp / "c.json"), Error);
  }
  SUBCASE("relative paths resolve against the config file") {
    write_file(tmp / "c.json", R"({"data":"d.tsv","images":"imgs","cache_root":"cc"})");
    const PipelineConfig cfg = PipelineConfig::from_file(tmp / "c.json");
    CHECK(cfg.data == tmp / "d.tsv");
    CHECK(cfg.images == tmp / "imgs");
  }
}

TEST_CASE("dotted-path overrides rewrite any config field") {
  PipelineFixture fixture;
  const PipelineConfig cfg = PipelineConfig::from_file(
      fixture.config_path, {{"metric", "manhattan"},
                            {"embedder.seed", "9"},
                            {"ltr.n_estimators", "25"},
                            {"penalty.alpha", "0.5"},
                            {"qa.cot", "false"}});
  CHECK(cfg.metric == "manhattan");
  CHECK(cfg.embedder["seed"] == 9);
  CHECK(cfg.ltr["n_estimators"] == 25);
  CHECK(cfg.penalty_alpha == doctest::Approx(0.5));
  CHECK(cfg.qa["cot"] == false);

  // non-JSON values fall back to strings; invalid results still validate
  CHECK_THROWS_AS(PipelineConfig::from_file(fixture.config_path,
                                            {{"metric", "chebyshev"}}),
                  Error);
}

TEST_CASE("family shorthand parsing") {
  PipelineFixture fixture;
  PipelineConfig cfg = fixture.load(fixture.tmp / "cache0");

  SUBCASE("configured families parse to canonical ids") {
    Pipeline p(cfg);
    const auto specs = p.family_specs();
    REQUIRE(specs.size() == 5);
    CHECK(p.family_id(specs[0]) == "baseline+penalty");
    CHECK(p.family_id(specs[1]) == "enhanced:meaning_of+penalty");
    CHECK(p.family_id(specs[2]) == "captions:stub-cap/s0-greedy:cosine:t");
    CHECK(p.family_id(specs[3]) == "captions:stub-cap/s0-greedy:cosine:te:meaning_of");
    CHECK(p.family_id(specs[4]) == "kb:wikipedia:cosine");
  }
  SUBCASE("'all' expands per configuration") {
    cfg.families = {"all"};
    Pipeline p(cfg);
    const auto specs = p.family_specs();
    // baseline + 1 template + captions(t) + captions(te x1) + kb x1
    CHECK(specs.size() == 5);
  }
  SUBCASE("metric suffix overrides the default") {
    cfg.families = {"captions:t:manhattan", "kb:wikipedia:euclidean"};
    Pipeline p(cfg);
    const auto specs = p.family_specs();
    CHECK(p.family_id(specs[0]) == "captions:stub-cap/s0-greedy:manhattan:t");
    CHECK(p.family_id(specs[1]) == "kb:wikipedia:euclidean");
  }
  SUBCASE("invalid shorthands") {
    for (const char* bad :
         {"bogus", "enhanced:", "enhanced:not_configured", "captions:te",
          "captions:x", "kb:", "kb:wiki", "baseline:extra", "kb:wikipedia+penalty"}) {
      cfg.families = {bad};
      Pipeline p(cfg);
      CAPTURE(bad);
      CHECK_THROWS_AS(p.family_specs(), Error);
    }
  }
}

TEST_CASE("full pipeline end to end on the library API") {
  PipelineFixture fixture;
  PipelineConfig cfg = fixture.load(fixture.tmp / "cacheA");
  Pipeline p(cfg);
  run_all_stages(p);

  // artifacts exist
  const auto predict_dir = p.predict().dir;
  CHECK(std::filesystem::exists(predict_dir / "predictions.tsv"));

  const EvalReport report = p.evaluate(std::nullopt, "ltr");
  CHECK(report.n == 6);
  CHECK(report.accuracy >= 0.0);
  CHECK(report.mrr >= report.accuracy);

  // evaluate matches the evaluation module run directly on the predictions
  const Dataset ds = load_dataset(cfg.data, cfg.gold, cfg.images);
  const auto rankings = read_predictions(predict_dir / "predictions.tsv", ds);
  std::vector<std::string> golds;
  for (const auto& s : ds.samples) golds.push_back(*s.gold);
  CHECK(report.accuracy == doctest::Approx(accuracy(rankings, golds)).epsilon(1e-15));
  CHECK(report.mrr == doctest::Approx(mrr(rankings, golds)).epsilon(1e-15));
}

TEST_CASE("stage idempotence: a second invocation is a no-op") {
  PipelineFixture fixture;
  Pipeline p(fixture.load(fixture.tmp / "cacheB"));
  run_all_stages(p);

  Pipeline again(fixture.load(fixture.tmp / "cacheB"));
  CHECK(again.prepare().already_satisfied);
  CHECK(again.embed().already_satisfied);
  CHECK(again.enhance().already_satisfied);
  CHECK(again.caption().already_satisfied);
  CHECK(again.kb_fetch().already_satisfied);
  CHECK(again.score().already_satisfied);
  CHECK(again.features().already_satisfied);
  CHECK(again.train().already_satisfied);
  CHECK(again.predict().already_satisfied);
  CHECK(again.qa().already_satisfied);
}

TEST_CASE("end-to-end determinism across separate cache roots") {
  PipelineFixture fixture;
  Pipeline a(fixture.load(fixture.tmp / "cacheC"));
  run_all_stages(a);
  Pipeline b(fixture.load(fixture.tmp / "cacheD"));
  run_all_stages(b);

  const std::string pa = testutil::read_file(a.predict().dir / "predictions.tsv");
  const std::string pb = testutil::read_file(b.predict().dir / "predictions.tsv");
  CHECK(pa == pb);
  CHECK_FALSE(pa.empty());

  const std::string qa_a = testutil::read_file(a.qa().dir / "predictions.tsv");
  const std::string qa_b = testutil::read_file(b.qa().dir / "predictions.tsv");
  CHECK(qa_a == qa_b);
}

TEST_CASE("config changes re-key the affected stages") {
  PipelineFixture fixture;
  PipelineConfig cfg = fixture.load(fixture.tmp / "cacheE");
  Pipeline p(cfg);
  p.prepare();
  p.embed();

  // a different embedder seed must produce a fresh embed artifact
  cfg.embedder["seed"] = 1;
  Pipeline p2(cfg);
  const auto result = p2.embed();
  CHECK_FALSE(result.already_satisfied);
}

TEST_CASE("missing upstream artifacts name the stage and fail cleanly") {
  PipelineFixture fixture;
  Pipeline p(fixture.load(fixture.tmp / "cacheF"));
  try {
    p.score();
    FAIL("expected MissingUpstreamArtifact");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MissingUpstreamArtifact);
    CHECK(std::string(e.what()).find("embed") != std::string::npos);
  }
  try {
    p.predict();
    FAIL("expected MissingUpstreamArtifact");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MissingUpstreamArtifact);
  }
}

TEST_CASE("kb family marks phrases without kb hits as missing") {
  PipelineFixture fixture;
  Pipeline p(fixture.load(fixture.tmp / "cacheG"));
  p.prepare();
  p.embed();
  p.enhance();
  p.caption();
  p.kb_fetch();
  const auto score_dir = p.score().dir;

  // the kb family file records present=false for odd samples (no kb hits)
  std::optional<std::filesystem::path> kb_file;
  for (const auto& entry : std::filesystem::directory_iterator(score_dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("family_kb_", 0) == 0) kb_file = entry.path();
  }
  REQUIRE(kb_file.has_value());
  std::ifstream in(*kb_file);
  const json doc = json::parse(in);
  int missing = 0;
  for (const auto& row : doc.at("samples")) {
    if (!row.at("present").get<bool>()) ++missing;
  }
  CHECK(missing == 3);  // samples 1, 3, 5

  // features gain an availability column for the kb family only
  const auto features_dir = p.features().dir;
  const FeatureMatrix m = read_matrix_csv(features_dir / "features.csv");
  int avail_cols = 0;
  for (const auto& name : m.column_names) {
    if (name.find(":avail") != std::string::npos) ++avail_cols;
  }
  CHECK(avail_cols == 1);
  CHECK(m.n_cols() == 5 * 5 + 1);
}

TEST_CASE("family selection changes the feature schema and both train") {
  PipelineFixture fixture;

  PipelineConfig small = fixture.load(fixture.tmp / "cacheK");
  small.families = {"baseline+penalty"};
  Pipeline ps(small);
  ps.prepare();
  ps.embed();
  ps.score();
  const FeatureMatrix m_small = read_matrix_csv(ps.features().dir / "features.csv");
  CHECK(m_small.n_cols() == 5);
  ps.train();

  PipelineConfig wide = fixture.load(fixture.tmp / "cacheK");  // same cache root
  Pipeline pw(wide);
  pw.enhance();
  pw.caption();
  pw.kb_fetch();
  pw.score();
  const FeatureMatrix m_wide = read_matrix_csv(pw.features().dir / "features.csv");
  CHECK(m_wide.n_cols() == 5 * 5 + 1);
  pw.train();

  // both artifacts coexist under one cache, keyed by their family sets
  CHECK(m_small.schema_fingerprint() != m_wide.schema_fingerprint());
}

TEST_CASE("prediction file round trip and validation") {
  PipelineFixture fixture;
  const PipelineConfig cfg = fixture.load(fixture.tmp / "cacheH");
  const Dataset ds = load_dataset(cfg.data, cfg.gold, cfg.images);

  std::vector<std::optional<Ranking>> rankings;
  for (const auto& sample : ds.samples) {
    if (sample.sample_id == 2) {
      rankings.emplace_back(std::nullopt);  // abstention line
      continue;
    }
    Ranking r;
    r.sample_id = sample.sample_id;
    r.candidates = sample.candidates;
    std::reverse(r.candidates.begin(), r.candidates.end());
    for (int j = 0; j < 10; ++j) r.scores.push_back(10.0 - j);
    rankings.emplace_back(std::move(r));
  }
  const auto path = fixture.tmp / "preds.tsv";
  write_predictions(path, rankings);
  const auto back = read_predictions(path, ds);
  REQUIRE(back.size() == rankings.size());
  CHECK_FALSE(back[2].has_value());
  CHECK(back[0]->candidates == rankings[0]->candidates);

  // a non-permutation line is rejected
  std::string corrupted = testutil::read_file(path);
  const size_t tab = corrupted.find('\t');
  corrupted = "bogus.jpg" + corrupted.substr(tab);
  write_file(fixture.tmp / "bad.tsv", corrupted);
  CHECK_THROWS_AS(read_predictions(fixture.tmp / "bad.tsv", ds), Error);
}

TEST_CASE("beam captioning flows through caption, score and qa stages") {
  PipelineFixture fixture;
  PipelineConfig cfg = fixture.load(fixture.tmp / "cacheBeam");
  cfg.captioner["mode"] = "beam";
  cfg.qa["cot"] = false;
  Pipeline p(cfg);
  p.prepare();
  p.embed();
  p.enhance();
  p.caption();
  p.kb_fetch();
  p.score();
  const auto qa_dir = p.qa().dir;

  // transcripts use the beam question and comma-joined choices
  const std::string transcript = testutil::read_file(qa_dir / "transcript.jsonl");
  CHECK(transcript.find("no_cot_beam") != std::string::npos);
  CHECK(transcript.find("most appropriate group of captions") != std::string::npos);
}

TEST_CASE("evaluate on fixture rankings matches the evaluation oracle") {
  PipelineFixture fixture;
  const PipelineConfig cfg = fixture.load(fixture.tmp / "cacheJ");
  const Dataset ds = load_dataset(cfg.data, cfg.gold, cfg.images);

  // place gold at ranks [1, 2, 4, 1, 3, 10]
  const std::vector<int> gold_ranks = {1, 2, 4, 1, 3, 10};
  std::vector<std::optional<Ranking>> rankings;
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& sample = ds.samples[i];
    Ranking r;
    r.sample_id = sample.sample_id;
    std::vector<std::string> rest;
    for (const auto& cid : sample.candidates) {
      if (cid != *sample.gold) rest.push_back(cid);
    }
    const int rank = gold_ranks[i];
    for (int pos = 1; pos <= 10; ++pos) {
      if (pos == rank) {
        r.candidates.push_back(*sample.gold);
      } else {
        r.candidates.push_back(rest.front());
        rest.erase(rest.begin());
      }
      r.scores.push_back(10.0 - pos);
    }
    rankings.emplace_back(std::move(r));
  }
  const auto path = fixture.tmp / "fixture_preds.tsv";
  write_predictions(path, rankings);

  Pipeline p(cfg);
  const EvalReport report = p.evaluate(path, "fixture");
  const double want_acc = 2.0 / 6.0;
  const double want_mrr = (1.0 + 0.5 + 0.25 + 1.0 + 1.0 / 3.0 + 0.1) / 6.0;
  CHECK(report.accuracy == doctest::Approx(want_acc).epsilon(1e-15));
  CHECK(report.mrr == doctest::Approx(want_mrr).epsilon(1e-15));
}

TEST_CASE("cache lock is exclusive") {
  TempDir tmp("lock");
  CacheLock first(tmp / "cache");
  CHECK_THROWS_AS(CacheLock second(tmp / "cache"), Error);
}

TEST_CASE("family rankings written by score evaluate like any prediction file") {
  PipelineFixture fixture;
  PipelineConfig cfg = fixture.load(fixture.tmp / "cacheI");
  Pipeline p(cfg);
  p.prepare();
  p.embed();
  p.enhance();
  p.caption();
  p.kb_fetch();
  const auto score_dir = p.score().dir;

  std::optional<std::filesystem::path> baseline_rankings;
  for (const auto& entry : std::filesystem::directory_iterator(score_dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("rankings_baseline", 0) == 0) baseline_rankings = entry.path();
  }
  REQUIRE(baseline_rankings.has_value());
  const EvalReport report = p.evaluate(*baseline_rankings, "baseline+penalty");
  CHECK(report.n == 6);
  CHECK(report.mrr >= report.accuracy);
}
