#include <doctest.h>

#include <algorithm>

#include "support/test_util.hpp"
#include "vwsd/detrng.hpp"
#include "vwsd/errors.hpp"
#include "vwsd/kbretrieval.hpp"

using namespace vwsd;
using testutil::TempDir;
using testutil::write_file;

namespace {

class FakeKbClient final : public KbClient {
 public:
  void add(const std::string& phrase, KbSource source, std::vector<KbHit> hits) {
    hits_[key(phrase, source)] = std::move(hits);
  }
  void add_bytes(const std::string& url, std::string bytes) {
    bytes_[url] = std::move(bytes);
  }

  std::vector<KbHit> search_primary_images(const std::string& phrase, KbSource source,
                                           int limit) override {
    ++searches_;
    auto it = hits_.find(key(phrase, source));
    if (it == hits_.end()) return {};
    auto hits = it->second;
    if (static_cast<int>(hits.size()) > limit) hits.resize(static_cast<size_t>(limit));
    return hits;
  }

  std::string fetch_bytes(const std::string& url) override {
    ++downloads_;
    auto it = bytes_.find(url);
    if (it == bytes_.end()) {
      throw Error(ErrorCode::NetworkError, "no bytes for " + url);
    }
    return it->second;
  }

  int searches() const { return searches_; }
  int downloads() const { return downloads_; }

 private:
  static std::string key(const std::string& phrase, KbSource source) {
    return phrase + "|" + kb_source_name(source);
  }
  std::map<std::string, std::vector<KbHit>> hits_;
  std::map<std::string, std::string> bytes_;
  int searches_ = 0;
  int downloads_ = 0;
};

Sample ten_candidate_sample() {
  Sample sample;
  sample.sample_id = 0;
  for (int j = 0; j < kCandidatesPerSample; ++j) {
    sample.candidates.push_back("c" + std::to_string(j) + ".jpg");
  }
  return sample;
}

}  // namespace

TEST_CASE("fetch downloads, caches and records; replay is call-free") {
  TempDir tmp("kb_fetch");
  FakeKbClient client;
  client.add("rowing dory", KbSource::wikipedia,
             {{"https://example.org/media/dory.jpg", "Dory"},
              {"https://example.org/media/boat.png", "Boat"}});
  client.add_bytes("https://example.org/media/dory.jpg", "dory-bytes");
  client.add_bytes("https://example.org/media/boat.png", "boat-bytes");

  const KbImageSet set =
      fetch_kb_images(&client, "rowing dory", KbSource::wikipedia, 10, tmp.path());
  REQUIRE(set.images.size() == 2);
  CHECK(set.images[0].title == "Dory");
  CHECK(set.images[0].url == "https://example.org/media/dory.jpg");
  CHECK(std::filesystem::exists(set.images[0].local_path));
  CHECK(testutil::read_file(set.images[0].local_path) == "dory-bytes");
  // cache layout: <source>/<sha256(url)>.<ext>
  CHECK(set.images[0].local_path.parent_path().filename() == "wikipedia");
  CHECK(set.images[0].local_path.extension() == ".jpg");
  CHECK(set.images[1].local_path.extension() == ".png");
  CHECK(set.images[0].local_path.stem().string().size() == 64);
  CHECK(client.searches() == 1);
  CHECK(client.downloads() == 2);

  // warm replay: identical set, zero client calls
  const KbImageSet replay =
      fetch_kb_images(&client, "rowing dory", KbSource::wikipedia, 10, tmp.path());
  CHECK(client.searches() == 1);
  CHECK(client.downloads() == 2);
  REQUIRE(replay.images.size() == 2);
  CHECK(replay.images[0].url == set.images[0].url);
  CHECK(replay.images[0].local_path == set.images[0].local_path);

  // even with no client at all
  const KbImageSet offline =
      fetch_kb_images(nullptr, "rowing dory", KbSource::wikipedia, 10, tmp.path());
  CHECK(offline.images.size() == 2);
}

TEST_CASE("zero article hits produce a recorded empty set, not an error") {
  TempDir tmp("kb_empty");
  FakeKbClient client;
  const KbImageSet set =
      fetch_kb_images(&client, "xyzzy nonsense", KbSource::wikidata, 10, tmp.path());
  CHECK(set.images.empty());
  CHECK(set.source == KbSource::wikidata);

  // the miss replays without a client
  const KbImageSet replay =
      fetch_kb_images(nullptr, "xyzzy nonsense", KbSource::wikidata, 10, tmp.path());
  CHECK(replay.images.empty());
}

TEST_CASE("fetch caps the set at k") {
  TempDir tmp("kb_cap");
  FakeKbClient client;
  std::vector<KbHit> hits;
  for (int i = 0; i < 15; ++i) {
    const std::string url = "https://example.org/i" + std::to_string(i) + ".jpg";
    hits.push_back({url, "T" + std::to_string(i)});
    client.add_bytes(url, "b" + std::to_string(i));
  }
  client.add("crowded phrase", KbSource::wikipedia, hits);

  const KbImageSet set =
      fetch_kb_images(&client, "crowded phrase", KbSource::wikipedia, 10, tmp.path());
  CHECK(set.images.size() == 10);
  // article-relevance order preserved
  for (int i = 0; i < 10; ++i) CHECK(set.images[i].title == "T" + std::to_string(i));
}

TEST_CASE("missing cache without a client raises NetworkError") {
  TempDir tmp("kb_noclient");
  try {
    fetch_kb_images(nullptr, "uncached", KbSource::wikipedia, 10, tmp.path());
    FAIL("expected NetworkError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NetworkError);
  }
}

TEST_CASE("rank_by_kb_images: an exact image copy wins under cosine") {
  TempDir tmp("kb_rank");
  const Sample sample = ten_candidate_sample();
  for (const auto& id : sample.candidates) {
    write_file(tmp / "images" / id, "candidate-" + id);
  }
  // the kb set holds a byte-for-byte copy of candidate 5
  write_file(tmp / "kb" / "copy.jpg", "candidate-c5.jpg");
  KbImageSet kb;
  kb.phrase = "p";
  kb.source = KbSource::wikipedia;
  kb.images.push_back({tmp / "kb" / "copy.jpg", "https://example.org/copy.jpg", "Copy"});

  auto backend = mock_backend(12, 32);
  const auto ranking =
      rank_by_kb_images(sample, kb, *backend, tmp / "images", Metric::cosine);
  REQUIRE(ranking.has_value());
  CHECK(ranking->candidates.front() == "c5.jpg");
  CHECK(ranking->scores.front() == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("rank_by_kb_images matches the exhaustive grid oracle") {
  TempDir tmp("kb_grid");
  const Sample sample = ten_candidate_sample();
  for (const auto& id : sample.candidates) {
    write_file(tmp / "images" / id, "img:" + id);
  }
  KbImageSet kb;
  kb.phrase = "p";
  std::vector<std::filesystem::path> kb_files;
  for (int i = 0; i < 3; ++i) {
    const auto path = tmp / "kb" / ("w" + std::to_string(i) + ".jpg");
    write_file(path, "kbimg:" + std::to_string(i));
    kb.images.push_back({path, "https://e.org/w" + std::to_string(i), "W"});
    kb_files.push_back(path);
  }

  auto backend = mock_backend(13, 16);
  for (const Metric metric : {Metric::cosine, Metric::euclidean, Metric::manhattan}) {
    const auto ranking = rank_by_kb_images(sample, kb, *backend, tmp / "images", metric);
    REQUIRE(ranking.has_value());

    const auto kb_embs = backend->encode_image_files(kb_files);
    const auto cand_embs = embed_images(*backend, sample.candidates, tmp / "images");
    std::vector<double> oracle;
    for (int j = 0; j < 10; ++j) {
      double best = -1e300;
      for (const auto& kb_emb : kb_embs) {
        best = std::max(best, similarity(kb_emb, cand_embs[static_cast<size_t>(j)], metric));
      }
      oracle.push_back(best);
    }
    const Ranking expected = make_ranking(0, sample.candidates, oracle);
    CHECK(ranking->candidates == expected.candidates);
  }
}

TEST_CASE("mean aggregation matches its own oracle") {
  TempDir tmp("kb_mean");
  const Sample sample = ten_candidate_sample();
  for (const auto& id : sample.candidates) write_file(tmp / "images" / id, "i:" + id);
  KbImageSet kb;
  std::vector<std::filesystem::path> kb_files;
  for (int i = 0; i < 4; ++i) {
    const auto path = tmp / "kb" / ("m" + std::to_string(i) + ".jpg");
    write_file(path, "kb:" + std::to_string(i));
    kb.images.push_back({path, "u" + std::to_string(i), "W"});
    kb_files.push_back(path);
  }
  auto backend = mock_backend(14, 16);
  const auto ranking = rank_by_kb_images(sample, kb, *backend, tmp / "images",
                                         Metric::cosine, KbAggregate::mean);
  REQUIRE(ranking.has_value());

  const auto kb_embs = backend->encode_image_files(kb_files);
  const auto cand_embs = embed_images(*backend, sample.candidates, tmp / "images");
  std::vector<double> oracle;
  for (int j = 0; j < 10; ++j) {
    double sum = 0.0;
    for (const auto& kb_emb : kb_embs) {
      sum += similarity(kb_emb, cand_embs[static_cast<size_t>(j)], Metric::cosine);
    }
    oracle.push_back(sum / 4.0);
  }
  CHECK(ranking->candidates == make_ranking(0, sample.candidates, oracle).candidates);
}

TEST_CASE("empty kb set yields no ranking") {
  TempDir tmp("kb_absent");
  const Sample sample = ten_candidate_sample();
  auto backend = mock_backend(15, 8);
  KbImageSet kb;
  CHECK_FALSE(rank_by_kb_images(sample, kb, *backend, tmp.path(), Metric::cosine)
                  .has_value());
}

TEST_CASE("space mismatch is rejected") {
  const Sample sample = ten_candidate_sample();
  auto space_a = mock_backend(1, 8);
  auto space_b = mock_backend(2, 8);

  std::unordered_map<std::string, Embedding> cand_embs;
  for (const auto& id : sample.candidates) {
    cand_embs[id] = embed_texts(*space_a, {id})[0];
  }
  KbImageSet kb;
  kb.images.push_back({"/tmp/x.jpg", "u", "t"});
  const std::vector<Embedding> kb_embs = {embed_texts(*space_b, {"kb"})[0]};

  try {
    rank_by_kb_images(sample, kb, cand_embs, kb_embs, Metric::cosine);
    FAIL("expected SpaceMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::SpaceMismatch);
  }
}

TEST_CASE("manifest records are append-only JSONL with the documented fields") {
  TempDir tmp("kb_manifest");
  FakeKbClient client;
  client.add("p1", KbSource::wikipedia, {{"https://e.org/a.jpg", "A"}});
  client.add_bytes("https://e.org/a.jpg", "a");
  fetch_kb_images(&client, "p1", KbSource::wikipedia, 10, tmp.path());
  fetch_kb_images(&client, "p2", KbSource::wikipedia, 10, tmp.path());  // empty

  const std::string manifest = testutil::read_file(tmp / "manifest.jsonl");
  CHECK(std::count(manifest.begin(), manifest.end(), '\n') == 2);
  CHECK(manifest.find("\"phrase\":\"p1\"") != std::string::npos);
  CHECK(manifest.find("\"source\":\"wikipedia\"") != std::string::npos);
  CHECK(manifest.find("\"url\":\"https://e.org/a.jpg\"") != std::string::npos);
  CHECK(manifest.find("\"title\":\"A\"") != std::string::npos);
}
