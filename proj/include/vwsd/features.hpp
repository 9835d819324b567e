#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "vwsd/dataset.hpp"

namespace vwsd {

// Canonical scores of one scoring family over a dataset, ten per sample in
// candidate order, with a mask for samples the family could not score
// (e.g. a phrase with no Wikidata hits).
struct FamilyScores {
  std::string family_id;
  std::vector<std::array<double, kCandidatesPerSample>> scores;  // per sample
  std::vector<bool> present;  // per sample; empty means all present

  bool sample_present(size_t idx) const { return present.empty() || present[idx]; }
};

inline constexpr int kFeatureSteps = 5;  // a..e

// The five per-candidate feature steps derived from one score vector:
//   a = score, b = max(scores), c = mean(scores), d = a - b, e = a - c.
// Rows are candidates, columns are steps. Throws NonFiniteScore.
std::array<std::array<double, kFeatureSteps>, kCandidatesPerSample>
extract_family_features(const std::array<double, kCandidatesPerSample>& scores);

// Grouped feature rows for the ranker. Rows are candidates (10 per sample),
// columns are 5 steps per family plus a 0/1 availability column for every
// family that is missing somewhere. Missing cells impute 0 in all steps.
struct FeatureMatrix {
  std::vector<std::string> column_names;
  std::vector<double> values;  // row-major
  std::vector<int> sample_ids;              // per group
  std::vector<std::string> candidate_ids;   // per row
  std::vector<int> labels;                  // per row, 1 = gold; empty when unlabeled

  size_t n_cols() const { return column_names.size(); }
  size_t n_rows() const { return candidate_ids.size(); }
  size_t n_groups() const { return sample_ids.size(); }
  bool has_labels() const { return !labels.empty(); }

  const double* row(size_t r) const { return values.data() + r * n_cols(); }

  // Canonical schema description and its SHA-256 fingerprint. Two matrices
  // with equal fingerprints are column-compatible.
  std::string schema_json() const;
  std::string schema_fingerprint() const;
};

// Throws GroupMisalignment when family score tables disagree with the
// dataset, NoLabels when labels are requested but gold is absent.
FeatureMatrix assemble_matrix(const std::vector<FamilyScores>& families,
                              const Dataset& dataset, bool with_labels);

// CSV interchange: header `sample_id,candidate_id,label,<column>...` plus a
// sidecar JSON schema next to it (same path with .schema.json appended).
void write_matrix_csv(const FeatureMatrix& matrix, const std::filesystem::path& path);
FeatureMatrix read_matrix_csv(const std::filesystem::path& path);

}  // namespace vwsd
