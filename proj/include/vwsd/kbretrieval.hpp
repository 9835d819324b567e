#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vwsd/dataset.hpp"
#include "vwsd/embeddings.hpp"
#include "vwsd/scoring.hpp"

namespace vwsd {

enum class KbSource { wikipedia, wikidata };

const char* kb_source_name(KbSource source);
KbSource kb_source_from_name(const std::string& name);

// One reference image pulled from a knowledge base article.
struct KbImageRef {
  std::filesystem::path local_path;
  std::string url;
  std::string title;
};

// Reference images fetched for a phrase. May be empty; an empty set is a
// recorded miss, never an error.
struct KbImageSet {
  std::string phrase;
  KbSource source = KbSource::wikipedia;
  std::vector<KbImageRef> images;  // at most k, article-relevance order
};

struct KbHit {
  std::string url;
  std::string title;
};

// Search + download contract for a knowledge base. The live client talks to
// the public Wikipedia/Wikidata APIs; tests replay a warm cache and never
// reach a client at all.
class KbClient {
 public:
  virtual ~KbClient() = default;
  // Primary images of the articles matching the phrase, most relevant first.
  virtual std::vector<KbHit> search_primary_images(const std::string& phrase,
                                                   KbSource source, int limit) = 0;
  virtual std::string fetch_bytes(const std::string& url) = 0;
};

struct KbClientConfig {
  std::string user_agent = "vwsd-pipeline/1.0";
  double requests_per_second = 5.0;
};

std::unique_ptr<KbClient> http_kb_client(const KbClientConfig& config = {});

// Fetches up to k primary article images for a phrase, writing blobs to
// cache_dir/<source>/<sha256(url)>.<ext> and appending to the JSONL manifest.
// A warm manifest entry replays with zero client calls, including recorded
// empty results. Throws NetworkError only after bounded retries; client may
// be null when the cache is known to be warm.
KbImageSet fetch_kb_images(KbClient* client, const std::string& phrase, KbSource source,
                           int k, const std::filesystem::path& cache_dir);

enum class KbAggregate { max, mean };

// Image-to-image ranking: each candidate scores the aggregate (max by
// default) canonical similarity against the KB reference images. Returns
// nothing when the KB set is empty. All embeddings must share one space.
std::optional<Ranking> rank_by_kb_images(
    const Sample& sample, const KbImageSet& kb,
    const std::unordered_map<std::string, Embedding>& candidate_embs,
    const std::vector<Embedding>& kb_embs, Metric metric,
    KbAggregate aggregate = KbAggregate::max);

// Convenience overload that embeds through the backend.
std::optional<Ranking> rank_by_kb_images(const Sample& sample, const KbImageSet& kb,
                                         EmbeddingBackend& image_embedder,
                                         const std::filesystem::path& image_dir,
                                         Metric metric,
                                         KbAggregate aggregate = KbAggregate::max);

}  // namespace vwsd
