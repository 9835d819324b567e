#include "vwsd/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "vwsd/digest.hpp"
#include "vwsd/errors.hpp"

namespace vwsd {

using nlohmann::json;

std::array<std::array<double, kFeatureSteps>, kCandidatesPerSample>
extract_family_features(const std::array<double, kCandidatesPerSample>& scores) {
  double max_score = -std::numeric_limits<double>::infinity();
  double sum = 0.0;
  for (double s : scores) {
    if (!std::isfinite(s)) {
      throw Error(ErrorCode::NonFiniteScore, "feature extraction requires finite scores");
    }
    max_score = std::max(max_score, s);
    sum += s;
  }
  const double mean_score = sum / static_cast<double>(kCandidatesPerSample);

  std::array<std::array<double, kFeatureSteps>, kCandidatesPerSample> rows{};
  for (int j = 0; j < kCandidatesPerSample; ++j) {
    rows[j][0] = scores[j];               // a
    rows[j][1] = max_score;               // b
    rows[j][2] = mean_score;              // c
    rows[j][3] = scores[j] - max_score;   // d
    rows[j][4] = scores[j] - mean_score;  // e
  }
  return rows;
}

namespace {

const char* kStepNames[kFeatureSteps] = {"a", "b", "c", "d", "e"};

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string FeatureMatrix::schema_json() const {
  json schema;
  schema["group_size"] = kCandidatesPerSample;
  schema["has_labels"] = has_labels();
  schema["columns"] = column_names;
  return schema.dump();
}

std::string FeatureMatrix::schema_fingerprint() const {
  // Labels do not affect column compatibility between train and predict.
  json schema;
  schema["group_size"] = kCandidatesPerSample;
  schema["columns"] = column_names;
  return sha256_hex(schema.dump());
}

FeatureMatrix assemble_matrix(const std::vector<FamilyScores>& families,
                              const Dataset& dataset, bool with_labels) {
  if (families.empty()) {
    throw Error(ErrorCode::InvalidArgument, "assemble_matrix needs at least one family");
  }
  const size_t n_samples = dataset.samples.size();
  for (const auto& fam : families) {
    if (fam.scores.size() != n_samples ||
        (!fam.present.empty() && fam.present.size() != n_samples)) {
      throw Error(ErrorCode::GroupMisalignment,
                  "family '" + fam.family_id + "' covers " +
                      std::to_string(fam.scores.size()) + " samples, dataset has " +
                      std::to_string(n_samples));
    }
  }

  FeatureMatrix matrix;
  std::vector<bool> family_incomplete(families.size(), false);
  for (size_t f = 0; f < families.size(); ++f) {
    for (size_t s = 0; s < n_samples; ++s) {
      if (!families[f].sample_present(s)) {
        family_incomplete[f] = true;
        break;
      }
    }
    for (const char* step : kStepNames) {
      matrix.column_names.push_back(families[f].family_id + ":" + step);
    }
    if (family_incomplete[f]) {
      matrix.column_names.push_back(families[f].family_id + ":avail");
    }
  }

  const size_t n_cols = matrix.column_names.size();
  matrix.values.reserve(n_samples * kCandidatesPerSample * n_cols);
  matrix.sample_ids.reserve(n_samples);
  matrix.candidate_ids.reserve(n_samples * kCandidatesPerSample);
  if (with_labels) matrix.labels.reserve(n_samples * kCandidatesPerSample);

  for (size_t s = 0; s < n_samples; ++s) {
    const Sample& sample = dataset.samples[s];
    matrix.sample_ids.push_back(sample.sample_id);

    // per-family feature rows for this sample
    std::vector<std::array<std::array<double, kFeatureSteps>, kCandidatesPerSample>>
        family_rows(families.size());
    for (size_t f = 0; f < families.size(); ++f) {
      if (families[f].sample_present(s)) {
        family_rows[f] = extract_family_features(families[f].scores[s]);
      } else {
        for (auto& row : family_rows[f]) row.fill(0.0);
      }
    }

    for (int j = 0; j < kCandidatesPerSample; ++j) {
      matrix.candidate_ids.push_back(sample.candidates[j]);
      for (size_t f = 0; f < families.size(); ++f) {
        for (int step = 0; step < kFeatureSteps; ++step) {
          matrix.values.push_back(family_rows[f][j][step]);
        }
        if (family_incomplete[f]) {
          matrix.values.push_back(families[f].sample_present(s) ? 1.0 : 0.0);
        }
      }
      if (with_labels) {
        if (!sample.gold) {
          throw Error(ErrorCode::NoLabels,
                      "sample " + std::to_string(sample.sample_id) + " has no gold label");
        }
        matrix.labels.push_back(sample.candidates[j] == *sample.gold ? 1 : 0);
      }
    }
  }
  return matrix;
}

void write_matrix_csv(const FeatureMatrix& matrix, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw Error(ErrorCode::IoError, "cannot write " + path.string());
  }
  out << "sample_id,candidate_id,label";
  for (const auto& name : matrix.column_names) out << ',' << name;
  out << '\n';

  const size_t n_cols = matrix.n_cols();
  for (size_t r = 0; r < matrix.n_rows(); ++r) {
    out << matrix.sample_ids[r / kCandidatesPerSample] << ',' << matrix.candidate_ids[r]
        << ',';
    if (matrix.has_labels()) out << matrix.labels[r];
    const double* row = matrix.row(r);
    for (size_t c = 0; c < n_cols; ++c) out << ',' << format_double(row[c]);
    out << '\n';
  }
  out.close();

  std::ofstream schema(path.string() + ".schema.json", std::ios::binary | std::ios::trunc);
  schema << matrix.schema_json() << '\n';
}

FeatureMatrix read_matrix_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(ErrorCode::IoError, "cannot read " + path.string());
  }
  std::string line;
  if (!std::getline(in, line)) {
    throw Error(ErrorCode::IoError, "empty feature file " + path.string());
  }

  FeatureMatrix matrix;
  {
    std::stringstream header(line);
    std::string field;
    int idx = 0;
    while (std::getline(header, field, ',')) {
      if (idx >= 3) matrix.column_names.push_back(field);
      ++idx;
    }
  }

  bool labels_seen = false;
  int row_in_group = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::getline(ss, field, ',');
    const int sample_id = std::stoi(field);
    std::getline(ss, field, ',');
    matrix.candidate_ids.push_back(field);
    std::getline(ss, field, ',');
    if (!field.empty()) {
      matrix.labels.push_back(std::stoi(field));
      labels_seen = true;
    }
    while (std::getline(ss, field, ',')) {
      matrix.values.push_back(std::strtod(field.c_str(), nullptr));
    }
    if (row_in_group == 0) matrix.sample_ids.push_back(sample_id);
    row_in_group = (row_in_group + 1) % kCandidatesPerSample;
  }
  if (labels_seen && matrix.labels.size() != matrix.candidate_ids.size()) {
    throw Error(ErrorCode::IoError, "partial label column in " + path.string());
  }
  if (matrix.values.size() != matrix.n_rows() * matrix.n_cols() ||
      matrix.n_rows() != matrix.n_groups() * kCandidatesPerSample) {
    throw Error(ErrorCode::IoError, "ragged feature file " + path.string());
  }
  return matrix;
}

}  // namespace vwsd
