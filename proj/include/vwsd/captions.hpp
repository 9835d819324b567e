#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "vwsd/embeddings.hpp"
#include "vwsd/scoring.hpp"

namespace vwsd {

enum class CaptionMode { greedy, beam };

const char* caption_mode_name(CaptionMode mode);
CaptionMode caption_mode_from_name(const std::string& name);

// Captions for one image after post-processing: one caption for greedy, up
// to ten deduplicated captions for beam. Never empty, never blank, and no
// caption is a substring of another.
struct CaptionSet {
  std::string image_id;
  CaptionMode mode = CaptionMode::greedy;
  std::vector<std::string> captions;
  std::string captioner_id;
};

// Captioning model adapter. Real captioners (BLIP/GiT families) sit behind
// this; the id encodes the exact decoding configuration.
class CaptionBackend {
 public:
  virtual ~CaptionBackend() = default;
  virtual const std::string& captioner_id() const = 0;
  // greedy -> exactly 1 caption; beam -> up to 10 raw captions, pre-dedup.
  virtual std::vector<std::string> caption_file(const std::filesystem::path& image_file,
                                                CaptionMode mode) = 0;
};

// Deterministic captioner for tests and the mock pipeline; captions are a
// seeded function of the image bytes. Beam mode intentionally emits
// duplicates and substrings so dedup stays exercised end to end.
std::unique_ptr<CaptionBackend> hash_stub_captioner(uint64_t seed);

struct GeneratedCaptions {
  std::vector<std::string> raw;  // pre-dedup, as returned by the backend
  CaptionSet set;                // post-dedup
};

GeneratedCaptions generate_captions(CaptionBackend& captioner, const std::string& image_id,
                                    const std::filesystem::path& image_dir,
                                    CaptionMode mode);

// Removes every caption that (after trimming and lowercasing) equals or is a
// contiguous substring of a surviving caption. Exact duplicates keep the
// first occurrence; survivor order follows first occurrence. Idempotent.
std::vector<std::string> dedup_captions(const std::vector<std::string>& raw);

// Phrase-to-caption text retrieval: each candidate scores the maximum
// canonical similarity between the phrase embedding and its captions'
// embeddings. Accepts an enhanced phrase in place of the original.
Ranking rank_by_captions(int sample_id, const std::vector<std::string>& candidates,
                         const std::string& phrase_text,
                         const std::map<std::string, CaptionSet>& caption_sets,
                         EmbeddingBackend& text_embedder, Metric metric);

// Append-only JSONL cache of raw (pre-dedup) captioner output, keyed by
// (captioner_id, image_id, mode).
class CaptionCache {
 public:
  explicit CaptionCache(std::filesystem::path path = {});

  std::optional<std::vector<std::string>> lookup(const std::string& captioner_id,
                                                 const std::string& image_id,
                                                 CaptionMode mode) const;
  void store(const std::string& captioner_id, const std::string& image_id,
             CaptionMode mode, const std::vector<std::string>& raw_captions);

 private:
  std::filesystem::path path_;
  std::map<std::string, std::vector<std::string>> entries_;
  mutable std::mutex mutex_;
};

// generate_captions with a read-through cache; hits never touch the backend.
GeneratedCaptions generate_captions_cached(CaptionBackend& captioner,
                                           const std::string& image_id,
                                           const std::filesystem::path& image_dir,
                                           CaptionMode mode, CaptionCache& cache);

}  // namespace vwsd
