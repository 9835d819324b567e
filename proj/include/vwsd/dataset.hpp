#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace vwsd {

constexpr int kCandidatesPerSample = 10;

// One VWSD instance: an ambiguous target word inside a short phrase plus
// ten candidate images, exactly one of which is correct.
struct Sample {
  int sample_id = 0;
  std::string target_word;
  std::string phrase;
  std::vector<std::string> candidates;  // exactly 10, distinct
  std::optional<std::string> gold;      // member of candidates when present
};

struct Dataset {
  std::string split_name;
  std::vector<Sample> samples;
  std::filesystem::path image_dir;
  // Soft findings collected during load (e.g. phrase does not contain the
  // target word as a token). Never fatal.
  std::vector<std::string> warnings;
};

// Reads a tab-separated data file (target_word, phrase, 10 image ids per
// line) and an optional gold file aligned by line number.
//
// Throws MalformedLine, GoldMismatch or CountMismatch.
Dataset load_dataset(const std::filesystem::path& data_path,
                     const std::optional<std::filesystem::path>& gold_path,
                     const std::filesystem::path& image_dir);

// Candidate ids that do not resolve to a file under image_dir, unique and
// in first-seen order. Report-only, never throws.
std::vector<std::string> validate_images(const Dataset& dataset);

// Inverse of load_dataset for the data file (gold excluded). Output is
// byte-identical to the input modulo trailing whitespace.
std::string serialize_dataset(const Dataset& dataset);

// True when `word` appears in `phrase` as a whitespace-delimited token.
bool phrase_contains_token(const std::string& phrase, const std::string& word);

}  // namespace vwsd
