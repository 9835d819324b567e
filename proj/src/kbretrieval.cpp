#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "vwsd/kbretrieval.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <fstream>
#include <limits>
#include <mutex>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "vwsd/digest.hpp"
#include "vwsd/errors.hpp"

namespace vwsd {

using nlohmann::json;

const char* kb_source_name(KbSource source) {
  return source == KbSource::wikipedia ? "wikipedia" : "wikidata";
}

KbSource kb_source_from_name(const std::string& name) {
  if (name == "wikipedia") return KbSource::wikipedia;
  if (name == "wikidata") return KbSource::wikidata;
  throw Error(ErrorCode::InvalidArgument, "unknown kb source '" + name + "'");
}

namespace {

std::string url_extension(const std::string& url) {
  const size_t query = std::min(url.find('?'), url.find('#'));
  const std::string path = url.substr(0, query);
  const size_t slash = path.find_last_of('/');
  const std::string last = slash == std::string::npos ? path : path.substr(slash + 1);
  const size_t dot = last.find_last_of('.');
  if (dot == std::string::npos || dot + 1 >= last.size()) return ".img";
  std::string ext = last.substr(dot + 1);
  if (ext.size() > 5) return ".img";
  for (char& c : ext) {
    if (!std::isalnum(static_cast<unsigned char>(c))) return ".img";
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  return "." + ext;
}

std::filesystem::path blob_path(const std::filesystem::path& cache_dir, KbSource source,
                                const std::string& url) {
  return cache_dir / kb_source_name(source) / (sha256_hex(url) + url_extension(url));
}

std::filesystem::path manifest_path(const std::filesystem::path& cache_dir) {
  return cache_dir / "manifest.jsonl";
}

std::optional<KbImageSet> replay_from_manifest(const std::filesystem::path& cache_dir,
                                               const std::string& phrase, KbSource source,
                                               int k) {
  std::ifstream in(manifest_path(cache_dir));
  if (!in) return std::nullopt;
  std::string line;
  std::optional<KbImageSet> found;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json rec = json::parse(line, nullptr, false);
    if (rec.is_discarded()) continue;
    if (rec.value("phrase", "") != phrase || rec.value("source", "") != kb_source_name(source)) {
      continue;
    }
    KbImageSet set;
    set.phrase = phrase;
    set.source = source;
    for (const auto& item : rec.value("results", json::array())) {
      if (static_cast<int>(set.images.size()) >= k) break;
      KbImageRef ref;
      ref.url = item.value("url", "");
      ref.title = item.value("title", "");
      ref.local_path = cache_dir / item.value("file", "");
      if (!std::filesystem::exists(ref.local_path)) return std::nullopt;  // stale cache
      set.images.push_back(std::move(ref));
    }
    found = std::move(set);  // last record wins
  }
  return found;
}

void append_manifest(const std::filesystem::path& cache_dir, const std::string& phrase,
                     KbSource source, const KbImageSet& set) {
  json rec;
  rec["phrase"] = phrase;
  rec["source"] = kb_source_name(source);
  json results = json::array();
  for (const auto& ref : set.images) {
    json item;
    item["url"] = ref.url;
    item["title"] = ref.title;
    item["file"] = std::filesystem::relative(ref.local_path, cache_dir).generic_string();
    results.push_back(std::move(item));
  }
  rec["results"] = std::move(results);
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  rec["timestamp"] = static_cast<int64_t>(now);
  std::ofstream out(manifest_path(cache_dir), std::ios::app);
  out << rec.dump() << '\n';
}

template <typename Fn>
auto with_retries(int max_attempts, int backoff_ms, Fn&& fn) {
  int backoff = backoff_ms;
  for (int attempt = 1;; ++attempt) {
    try {
      return fn();
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NetworkError || attempt >= max_attempts) throw;
      if (backoff > 0) {
        std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
        backoff *= 2;
      }
    }
  }
}

}  // namespace

KbImageSet fetch_kb_images(KbClient* client, const std::string& phrase, KbSource source,
                           int k, const std::filesystem::path& cache_dir) {
  if (phrase.empty()) {
    throw Error(ErrorCode::InvalidArgument, "kb fetch requires a non-blank phrase");
  }
  std::filesystem::create_directories(cache_dir / kb_source_name(source));

  if (auto cached = replay_from_manifest(cache_dir, phrase, source, k)) {
    return *cached;
  }
  if (!client) {
    throw Error(ErrorCode::NetworkError,
                "no recorded fetch for '" + phrase + "' and no client available");
  }

  const auto hits = with_retries(3, 250, [&] {
    return client->search_primary_images(phrase, source, k);
  });

  KbImageSet set;
  set.phrase = phrase;
  set.source = source;
  for (const auto& hit : hits) {
    if (static_cast<int>(set.images.size()) >= k) break;
    KbImageRef ref;
    ref.url = hit.url;
    ref.title = hit.title;
    ref.local_path = blob_path(cache_dir, source, hit.url);
    if (!std::filesystem::exists(ref.local_path)) {
      const std::string bytes =
          with_retries(3, 250, [&] { return client->fetch_bytes(hit.url); });
      std::ofstream out(ref.local_path, std::ios::binary | std::ios::trunc);
      out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    set.images.push_back(std::move(ref));
  }
  append_manifest(cache_dir, phrase, source, set);
  return set;
}

std::optional<Ranking> rank_by_kb_images(
    const Sample& sample, const KbImageSet& kb,
    const std::unordered_map<std::string, Embedding>& candidate_embs,
    const std::vector<Embedding>& kb_embs, Metric metric, KbAggregate aggregate) {
  if (kb.images.empty() || kb_embs.empty()) return std::nullopt;

  std::string space;
  for (const auto& e : kb_embs) {
    if (space.empty()) space = e.space_id;
    if (e.space_id != space) {
      throw Error(ErrorCode::SpaceMismatch, "kb embeddings span multiple spaces");
    }
  }

  std::vector<double> scores;
  scores.reserve(sample.candidates.size());
  for (const auto& id : sample.candidates) {
    auto it = candidate_embs.find(id);
    if (it == candidate_embs.end()) {
      throw Error(ErrorCode::MissingEmbedding, "no embedding for candidate '" + id + "'");
    }
    if (it->second.space_id != space) {
      throw Error(ErrorCode::SpaceMismatch,
                  "candidate '" + id + "' embedded in '" + it->second.space_id +
                      "', kb images in '" + space + "'");
    }
    double acc = aggregate == KbAggregate::max ? -std::numeric_limits<double>::infinity()
                                               : 0.0;
    for (const auto& kb_emb : kb_embs) {
      const double s = similarity(kb_emb, it->second, metric);
      if (aggregate == KbAggregate::max) {
        acc = std::max(acc, s);
      } else {
        acc += s;
      }
    }
    if (aggregate == KbAggregate::mean) acc /= static_cast<double>(kb_embs.size());
    scores.push_back(acc);
  }
  return make_ranking(sample.sample_id, sample.candidates, scores);
}

std::optional<Ranking> rank_by_kb_images(const Sample& sample, const KbImageSet& kb,
                                         EmbeddingBackend& image_embedder,
                                         const std::filesystem::path& image_dir,
                                         Metric metric, KbAggregate aggregate) {
  if (kb.images.empty()) return std::nullopt;
  std::vector<std::filesystem::path> kb_files;
  kb_files.reserve(kb.images.size());
  for (const auto& ref : kb.images) kb_files.push_back(ref.local_path);
  const auto kb_embs = image_embedder.encode_image_files(kb_files);

  const auto cand_embs_vec = embed_images(image_embedder, sample.candidates, image_dir);
  std::unordered_map<std::string, Embedding> cand_embs;
  for (size_t i = 0; i < sample.candidates.size(); ++i) {
    cand_embs[sample.candidates[i]] = cand_embs_vec[i];
  }
  return rank_by_kb_images(sample, kb, cand_embs, kb_embs, metric, aggregate);
}

// ---------------------------------------------------------------------------
// Live HTTP client
// ---------------------------------------------------------------------------

namespace {

std::string percent_encode(const std::string& s) {
  static const char* hexdig = "0123456789ABCDEF";
  std::string out;
  for (unsigned char c : s) {
    if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~') {
      out += static_cast<char>(c);
    } else {
      out += '%';
      out += hexdig[c >> 4];
      out += hexdig[c & 0xf];
    }
  }
  return out;
}

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string target;  // /path?query
};

SplitUrl split_url(const std::string& url) {
  const size_t scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw Error(ErrorCode::NetworkError, "unsupported url: " + url);
  }
  const size_t host_end = url.find('/', scheme_end + 3);
  if (host_end == std::string::npos) return {url, "/"};
  return {url.substr(0, host_end), url.substr(host_end)};
}

class HttpKbClient final : public KbClient {
 public:
  explicit HttpKbClient(KbClientConfig config) : config_(std::move(config)) {}

  std::vector<KbHit> search_primary_images(const std::string& phrase, KbSource source,
                                           int limit) override {
    const std::string origin = source == KbSource::wikipedia
                                   ? "https://en.wikipedia.org"
                                   : "https://www.wikidata.org";
    json search = get_json(
        origin, "/w/api.php?action=query&list=search&format=json&srlimit=" +
                    std::to_string(std::max(limit * 2, limit)) +
                    "&srsearch=" + percent_encode(phrase));
    std::vector<KbHit> hits;
    for (const auto& item : search.at("query").at("search")) {
      if (static_cast<int>(hits.size()) >= limit) break;
      const std::string title = item.at("title").get<std::string>();
      std::optional<std::string> image_url =
          source == KbSource::wikipedia ? wikipedia_page_image(origin, title)
                                        : wikidata_entity_image(origin, title);
      if (image_url) hits.push_back({*image_url, title});
    }
    return hits;
  }

  std::string fetch_bytes(const std::string& url) override {
    const auto [origin, target] = split_url(url);
    httplib::Client client(origin);
    prepare(client);
    throttle();
    auto res = client.Get(target);
    if (!res || res->status < 200 || res->status >= 300) {
      throw Error(ErrorCode::NetworkError,
                  "download failed for " + url +
                      (res ? " (status " + std::to_string(res->status) + ")" : ""));
    }
    return res->body;
  }

 private:
  void prepare(httplib::Client& client) {
    client.set_default_headers({{"User-Agent", config_.user_agent}});
    client.set_follow_location(true);
    client.set_read_timeout(30, 0);
  }

  void throttle() {
    std::lock_guard<std::mutex> lock(mutex_);
    const auto min_gap = std::chrono::duration<double>(1.0 / config_.requests_per_second);
    const auto now = std::chrono::steady_clock::now();
    const auto earliest = last_request_ + std::chrono::duration_cast<
                              std::chrono::steady_clock::duration>(min_gap);
    if (now < earliest) std::this_thread::sleep_until(earliest);
    last_request_ = std::chrono::steady_clock::now();
  }

  json get_json(const std::string& origin, const std::string& target) {
    httplib::Client client(origin);
    prepare(client);
    throttle();
    auto res = client.Get(target);
    if (!res || res->status < 200 || res->status >= 300) {
      throw Error(ErrorCode::NetworkError,
                  "request failed: " + origin + target +
                      (res ? " (status " + std::to_string(res->status) + ")" : ""));
    }
    json body = json::parse(res->body, nullptr, false);
    if (body.is_discarded()) {
      throw Error(ErrorCode::NetworkError, "malformed response from " + origin);
    }
    return body;
  }

  // Lead image of a Wikipedia article via the page-image endpoint.
  std::optional<std::string> wikipedia_page_image(const std::string& origin,
                                                  const std::string& title) {
    json reply = get_json(origin,
                          "/w/api.php?action=query&prop=pageimages&piprop=original"
                          "&format=json&titles=" +
                              percent_encode(title));
    const auto& pages = reply.at("query").at("pages");
    for (const auto& [_, page] : pages.items()) {
      if (page.contains("original")) {
        return page.at("original").at("source").get<std::string>();
      }
    }
    return std::nullopt;
  }

  // Canonical image property (P18) of a Wikidata entity, resolved through
  // the Commons file redirector.
  std::optional<std::string> wikidata_entity_image(const std::string& origin,
                                                   const std::string& entity) {
    json reply = get_json(origin, "/w/api.php?action=wbgetclaims&property=P18&format=json"
                                  "&entity=" +
                                      percent_encode(entity));
    if (!reply.contains("claims") || !reply.at("claims").contains("P18")) {
      return std::nullopt;
    }
    const auto& claims = reply.at("claims").at("P18");
    if (claims.empty()) return std::nullopt;
    const std::string file_name = claims[0]
                                      .at("mainsnak")
                                      .at("datavalue")
                                      .at("value")
                                      .get<std::string>();
    std::string encoded = percent_encode(file_name);
    return "https://commons.wikimedia.org/wiki/Special:FilePath/" + encoded;
  }

  KbClientConfig config_;
  std::mutex mutex_;
  std::chrono::steady_clock::time_point last_request_{};
};

}  // namespace

std::unique_ptr<KbClient> http_kb_client(const KbClientConfig& config) {
  return std::make_unique<HttpKbClient>(config);
}

}  // namespace vwsd
