#include <doctest.h>

#include <cmath>

#include "support/test_util.hpp"
#include "vwsd/detrng.hpp"
#include "vwsd/errors.hpp"
#include "vwsd/features.hpp"

using namespace vwsd;
using testutil::TempDir;

namespace {

// Independent hand-arithmetic oracle for the five feature steps.
std::array<std::array<double, 5>, 10> oracle_features(
    const std::array<double, 10>& scores) {
  double b = scores[0];
  for (double s : scores) b = std::max(b, s);
  double c = 0.0;
  for (double s : scores) c += s;
  c /= 10.0;
  std::array<std::array<double, 5>, 10> rows{};
  for (int j = 0; j < 10; ++j) {
    rows[j] = {scores[j], b, c, scores[j] - b, scores[j] - c};
  }
  return rows;
}

Dataset tiny_dataset(int n, bool with_gold) {
  Dataset ds;
  ds.split_name = "tiny";
  for (int i = 0; i < n; ++i) {
    Sample s;
    s.sample_id = i;
    s.target_word = "w";
    s.phrase = "w ctx";
    for (int j = 0; j < 10; ++j) {
      s.candidates.push_back("s" + std::to_string(i) + "c" + std::to_string(j));
    }
    if (with_gold) s.gold = s.candidates[static_cast<size_t>(i % 10)];
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

FamilyScores random_family(const std::string& id, int n, DetRng& rng) {
  FamilyScores fam;
  fam.family_id = id;
  for (int i = 0; i < n; ++i) {
    std::array<double, 10> scores{};
    for (auto& s : scores) s = rng.next_double() * 2 - 1;
    fam.scores.push_back(scores);
  }
  fam.present.assign(static_cast<size_t>(n), true);
  return fam;
}

}  // namespace

TEST_CASE("documented hand case: [0.2, 0.5, 0.3, 0 x7]") {
  std::array<double, 10> scores{};
  scores[0] = 0.2;
  scores[1] = 0.5;
  scores[2] = 0.3;
  const auto rows = extract_family_features(scores);

  CHECK(rows[0][1] == doctest::Approx(0.5));   // b = max
  CHECK(rows[0][2] == doctest::Approx(0.1));   // c = mean
  CHECK(rows[1][3] == doctest::Approx(0.0));   // d at the argmax
  CHECK(rows[0][4] == doctest::Approx(0.1));   // e = a - c = 0.2 - 0.1
  for (int j = 0; j < 10; ++j) {
    CHECK(rows[j][0] == doctest::Approx(scores[j]));
  }
}

TEST_CASE("constant scores degenerate to d = e = 0") {
  std::array<double, 10> scores;
  scores.fill(0.4);
  const auto rows = extract_family_features(scores);
  for (int j = 0; j < 10; ++j) {
    CHECK(rows[j][1] == doctest::Approx(0.4));
    CHECK(rows[j][2] == doctest::Approx(0.4));
    CHECK(rows[j][3] == 0.0);
    CHECK(rows[j][4] == doctest::Approx(0.0));
  }
}

TEST_CASE("feature extraction matches hand arithmetic on 500 random vectors") {
  DetRng rng(2024);
  for (int trial = 0; trial < 500; ++trial) {
    std::array<double, 10> scores{};
    for (auto& s : scores) s = rng.next_double() * 20 - 10;
    const auto rows = extract_family_features(scores);
    const auto expect = oracle_features(scores);

    double max_d = -1e300;
    double sum_e = 0.0;
    for (int j = 0; j < 10; ++j) {
      for (int step = 0; step < 5; ++step) {
        CHECK(rows[j][step] == doctest::Approx(expect[j][step]).epsilon(1e-9));
      }
      // b and c columns constant within the group
      CHECK(rows[j][1] == rows[0][1]);
      CHECK(rows[j][2] == rows[0][2]);
      CHECK(rows[j][3] <= 1e-12);  // d <= 0
      max_d = std::max(max_d, rows[j][3]);
      sum_e += rows[j][4];
    }
    CHECK(std::fabs(max_d) < 1e-12);  // max d = 0
    CHECK(std::fabs(sum_e) < 1e-9);   // sum e = 0
  }
}

TEST_CASE("non-finite scores are rejected") {
  std::array<double, 10> scores{};
  scores[3] = std::numeric_limits<double>::quiet_NaN();
  try {
    extract_family_features(scores);
    FAIL("expected NonFiniteScore");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NonFiniteScore);
  }
  scores[3] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(extract_family_features(scores), Error);
}

TEST_CASE("assemble: one family, three samples -> 30 x 5") {
  DetRng rng(7);
  const Dataset ds = tiny_dataset(3, true);
  const auto fam = random_family("baseline", 3, rng);
  const FeatureMatrix m = assemble_matrix({fam}, ds, true);

  CHECK(m.n_rows() == 30);
  CHECK(m.n_cols() == 5);  // no availability column for a complete family
  CHECK(m.n_groups() == 3);
  CHECK(m.column_names == std::vector<std::string>{"baseline:a", "baseline:b",
                                                   "baseline:c", "baseline:d",
                                                   "baseline:e"});
  // labels: 1 exactly at the gold row of each group
  for (size_t g = 0; g < 3; ++g) {
    int gold_count = 0;
    for (int j = 0; j < 10; ++j) {
      gold_count += m.labels[g * 10 + static_cast<size_t>(j)];
    }
    CHECK(gold_count == 1);
    CHECK(m.labels[g * 10 + g] == 1);  // gold = candidate i for sample i
  }
}

TEST_CASE("missing family samples impute zeros plus an availability column") {
  DetRng rng(8);
  const Dataset ds = tiny_dataset(4, true);
  auto fam = random_family("kb:wikipedia:cosine", 4, rng);
  fam.present[2] = false;
  fam.scores[2].fill(123.0);  // must be ignored

  const FeatureMatrix m = assemble_matrix({fam}, ds, true);
  CHECK(m.n_cols() == 6);
  CHECK(m.column_names[5] == "kb:wikipedia:cosine:avail");

  for (int j = 0; j < 10; ++j) {
    const double* row = m.row(2 * 10 + static_cast<size_t>(j));
    for (int s = 0; s < 5; ++s) CHECK(row[s] == 0.0);
    CHECK(row[5] == 0.0);  // availability 0
  }
  const double* present_row = m.row(0);
  CHECK(present_row[5] == 1.0);
}

TEST_CASE("ensemble column count: 5 per family + one per incomplete family") {
  DetRng rng(9);
  const Dataset ds = tiny_dataset(5, true);
  std::vector<FamilyScores> families;
  // 4 prompt families + baseline + captions: complete
  for (const char* id : {"baseline+penalty", "enhanced:exact+penalty",
                         "enhanced:what_is+penalty", "enhanced:describe+penalty",
                         "enhanced:meaning_of+penalty", "captions:x:cosine:t"}) {
    families.push_back(random_family(id, 5, rng));
  }
  // kb: incomplete
  auto kb = random_family("kb:wikipedia:cosine", 5, rng);
  kb.present[1] = false;
  families.push_back(kb);

  const FeatureMatrix m = assemble_matrix(families, ds, true);
  CHECK(m.n_cols() == 5 * 7 + 1);
}

TEST_CASE("assemble misalignment and label errors") {
  DetRng rng(10);
  const Dataset ds = tiny_dataset(3, true);

  auto short_family = random_family("baseline", 2, rng);
  try {
    assemble_matrix({short_family}, ds, true);
    FAIL("expected GroupMisalignment");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::GroupMisalignment);
  }

  const Dataset unlabeled = tiny_dataset(3, false);
  auto fam = random_family("baseline", 3, rng);
  try {
    assemble_matrix({fam}, unlabeled, true);
    FAIL("expected NoLabels");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NoLabels);
  }
  // unlabeled assembly is fine
  const FeatureMatrix m = assemble_matrix({fam}, unlabeled, false);
  CHECK_FALSE(m.has_labels());
}

TEST_CASE("csv round trip is bit-exact and schema-stable") {
  TempDir tmp("feat_csv");
  DetRng rng(11);
  const Dataset ds = tiny_dataset(6, true);
  auto fam_a = random_family("baseline+penalty", 6, rng);
  auto fam_b = random_family("kb:wikipedia:cosine", 6, rng);
  fam_b.present[4] = false;

  const FeatureMatrix m = assemble_matrix({fam_a, fam_b}, ds, true);
  write_matrix_csv(m, tmp / "features.csv");
  CHECK(std::filesystem::exists(tmp / "features.csv.schema.json"));

  const FeatureMatrix back = read_matrix_csv(tmp / "features.csv");
  CHECK(back.column_names == m.column_names);
  CHECK(back.sample_ids == m.sample_ids);
  CHECK(back.candidate_ids == m.candidate_ids);
  CHECK(back.labels == m.labels);
  REQUIRE(back.values.size() == m.values.size());
  for (size_t i = 0; i < m.values.size(); ++i) {
    REQUIRE(back.values[i] == m.values[i]);  // %.17g round-trips exactly
  }
  CHECK(back.schema_fingerprint() == m.schema_fingerprint());
}
