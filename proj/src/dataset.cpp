#include "vwsd/dataset.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "vwsd/errors.hpp"

namespace vwsd {

namespace {

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(ErrorCode::IoError, "cannot open " + path.string());
  }
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  // A final empty line is an artifact of the trailing LF, not a record.
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  return lines;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  size_t start = 0;
  while (true) {
    size_t pos = line.find('\t', start);
    if (pos == std::string::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return fields;
}

}  // namespace

bool phrase_contains_token(const std::string& phrase, const std::string& word) {
  std::istringstream ss(phrase);
  std::string token;
  while (ss >> token) {
    if (token == word) return true;
  }
  return false;
}

Dataset load_dataset(const std::filesystem::path& data_path,
                     const std::optional<std::filesystem::path>& gold_path,
                     const std::filesystem::path& image_dir) {
  Dataset dataset;
  dataset.split_name = data_path.stem().string();
  dataset.image_dir = image_dir;

  const auto lines = read_lines(data_path);

  std::vector<std::string> gold_lines;
  if (gold_path) {
    gold_lines = read_lines(*gold_path);
    if (gold_lines.size() != lines.size()) {
      throw Error(ErrorCode::CountMismatch,
                  "gold file has " + std::to_string(gold_lines.size()) +
                      " lines, data file has " + std::to_string(lines.size()));
    }
  }

  dataset.samples.reserve(lines.size());
  for (size_t i = 0; i < lines.size(); ++i) {
    const auto fields = split_tabs(lines[i]);
    if (fields.size() != 2 + kCandidatesPerSample) {
      throw Error(ErrorCode::MalformedLine,
                  "line " + std::to_string(i + 1) + " has " +
                      std::to_string(fields.size()) + " fields, expected 12");
    }
    Sample sample;
    sample.sample_id = static_cast<int>(i);
    sample.target_word = fields[0];
    sample.phrase = fields[1];
    if (sample.target_word.empty() || sample.phrase.empty()) {
      throw Error(ErrorCode::MalformedLine,
                  "line " + std::to_string(i + 1) + " has an empty target word or phrase");
    }
    sample.candidates.assign(fields.begin() + 2, fields.end());

    std::set<std::string> seen;
    for (const auto& id : sample.candidates) {
      if (id.empty()) {
        throw Error(ErrorCode::MalformedLine,
                    "line " + std::to_string(i + 1) + " has an empty candidate id");
      }
      if (!seen.insert(id).second) {
        throw Error(ErrorCode::MalformedLine,
                    "line " + std::to_string(i + 1) + " repeats candidate '" + id + "'");
      }
    }

    if (gold_path) {
      const std::string& gold = gold_lines[i];
      if (!seen.count(gold)) {
        throw Error(ErrorCode::GoldMismatch,
                    "line " + std::to_string(i + 1) + " gold '" + gold +
                        "' is not among the candidates");
      }
      sample.gold = gold;
    }

    if (!phrase_contains_token(sample.phrase, sample.target_word)) {
      dataset.warnings.push_back("line " + std::to_string(i + 1) + ": phrase '" +
                                 sample.phrase + "' does not contain target word '" +
                                 sample.target_word + "' as a token");
    }

    dataset.samples.push_back(std::move(sample));
  }

  return dataset;
}

std::vector<std::string> validate_images(const Dataset& dataset) {
  std::vector<std::string> missing;
  std::set<std::string> reported;
  for (const auto& sample : dataset.samples) {
    for (const auto& id : sample.candidates) {
      if (reported.count(id)) continue;
      if (!std::filesystem::exists(dataset.image_dir / id)) {
        missing.push_back(id);
        reported.insert(id);
      } else {
        reported.insert(id);
      }
    }
  }
  return missing;
}

std::string serialize_dataset(const Dataset& dataset) {
  std::string out;
  for (const auto& sample : dataset.samples) {
    out += sample.target_word;
    out += '\t';
    out += sample.phrase;
    for (const auto& id : sample.candidates) {
      out += '\t';
      out += id;
    }
    out += '\n';
  }
  return out;
}

}  // namespace vwsd
