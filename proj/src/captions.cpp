#include "vwsd/captions.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "vwsd/detrng.hpp"
#include "vwsd/errors.hpp"

namespace vwsd {

const char* caption_mode_name(CaptionMode mode) {
  return mode == CaptionMode::greedy ? "greedy" : "beam";
}

CaptionMode caption_mode_from_name(const std::string& name) {
  if (name == "greedy") return CaptionMode::greedy;
  if (name == "beam") return CaptionMode::beam;
  throw Error(ErrorCode::InvalidArgument, "unknown caption mode '" + name + "'");
}

namespace {

std::string normalize_caption(const std::string& s) {
  size_t begin = 0;
  size_t end = s.size();
  while (begin < end && std::isspace(static_cast<unsigned char>(s[begin]))) ++begin;
  while (end > begin && std::isspace(static_cast<unsigned char>(s[end - 1]))) --end;
  std::string out = s.substr(begin, end - begin);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

}  // namespace

std::vector<std::string> dedup_captions(const std::vector<std::string>& raw) {
  struct Entry {
    size_t original_index;
    std::string normalized;
  };
  std::vector<Entry> entries;
  entries.reserve(raw.size());
  for (size_t i = 0; i < raw.size(); ++i) {
    std::string norm = normalize_caption(raw[i]);
    if (norm.empty()) continue;  // blank captions never survive
    entries.push_back({i, std::move(norm)});
  }

  // Longest first so a survivor can never be contained in a later entry;
  // ties by original position so exact duplicates keep the first.
  std::vector<size_t> order(entries.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (entries[a].normalized.size() != entries[b].normalized.size()) {
      return entries[a].normalized.size() > entries[b].normalized.size();
    }
    return entries[a].original_index < entries[b].original_index;
  });

  std::vector<size_t> survivors;  // indices into entries
  for (size_t idx : order) {
    const std::string& norm = entries[idx].normalized;
    bool contained = false;
    for (size_t kept : survivors) {
      if (entries[kept].normalized.find(norm) != std::string::npos) {
        contained = true;
        break;
      }
    }
    if (!contained) survivors.push_back(idx);
  }

  std::sort(survivors.begin(), survivors.end());  // back to first-occurrence order
  std::vector<std::string> out;
  out.reserve(survivors.size());
  for (size_t idx : survivors) out.push_back(raw[entries[idx].original_index]);
  return out;
}

GeneratedCaptions generate_captions(CaptionBackend& captioner, const std::string& image_id,
                                    const std::filesystem::path& image_dir,
                                    CaptionMode mode) {
  const auto path = image_dir / image_id;
  if (!std::filesystem::exists(path)) {
    throw Error(ErrorCode::ImageUnreadable, "cannot read image '" + image_id + "'");
  }
  GeneratedCaptions result;
  result.raw = captioner.caption_file(path, mode);
  if (mode == CaptionMode::greedy && result.raw.size() != 1) {
    throw Error(ErrorCode::BackendUnavailable,
                "greedy captioner returned " + std::to_string(result.raw.size()) +
                    " captions for '" + image_id + "'");
  }
  if (mode == CaptionMode::beam && result.raw.size() > 10) {
    result.raw.resize(10);
  }
  result.set.image_id = image_id;
  result.set.mode = mode;
  result.set.captioner_id = captioner.captioner_id();
  result.set.captions = dedup_captions(result.raw);
  if (result.set.captions.empty()) {
    throw Error(ErrorCode::BackendUnavailable,
                "captioner produced no usable caption for '" + image_id + "'");
  }
  return result;
}

Ranking rank_by_captions(int sample_id, const std::vector<std::string>& candidates,
                         const std::string& phrase_text,
                         const std::map<std::string, CaptionSet>& caption_sets,
                         EmbeddingBackend& text_embedder, Metric metric) {
  for (const auto& id : candidates) {
    auto it = caption_sets.find(id);
    if (it == caption_sets.end() || it->second.captions.empty()) {
      throw Error(ErrorCode::MissingCaptions, "no captions for candidate '" + id + "'");
    }
  }

  // One batched call: phrase first, then every caption in candidate order.
  std::vector<std::string> texts;
  texts.push_back(phrase_text);
  std::vector<std::pair<size_t, size_t>> spans;  // per candidate: [begin, end)
  for (const auto& id : candidates) {
    const auto& set = caption_sets.at(id);
    spans.emplace_back(texts.size(), texts.size() + set.captions.size());
    texts.insert(texts.end(), set.captions.begin(), set.captions.end());
  }
  const auto embs = embed_texts(text_embedder, texts);
  const Embedding& phrase_emb = embs[0];

  std::vector<double> scores;
  scores.reserve(candidates.size());
  for (const auto& [begin, end] : spans) {
    double best = -std::numeric_limits<double>::infinity();
    for (size_t i = begin; i < end; ++i) {
      best = std::max(best, similarity(phrase_emb, embs[i], metric));
    }
    scores.push_back(best);
  }
  return make_ranking(sample_id, candidates, scores);
}

namespace {

const char* kNouns[] = {"boat", "tree", "tower", "plate", "card", "horse",
                        "bridge", "lantern", "valley", "market"};
const char* kAdjectives[] = {"small", "wooden", "bright", "old", "quiet",
                             "striped", "narrow", "pale"};
const char* kSettings[] = {"in the water", "on a hill", "near a wall", "at dusk",
                           "under a sky", "beside a road"};

class HashStubCaptioner final : public CaptionBackend {
 public:
  explicit HashStubCaptioner(uint64_t seed)
      : seed_(seed), id_("stub-cap/s" + std::to_string(seed)) {}

  const std::string& captioner_id() const override { return id_; }

  std::vector<std::string> caption_file(const std::filesystem::path& image_file,
                                        CaptionMode mode) override {
    std::ifstream in(image_file, std::ios::binary);
    if (!in) {
      throw Error(ErrorCode::ImageUnreadable, "cannot read " + image_file.string());
    }
    std::string bytes((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    uint64_t state = fnv1a64(bytes, 0x636170ull ^ seed_);

    auto pick = [&state](const char* const* pool, size_t n) {
      return std::string(pool[splitmix64(state) % n]);
    };
    const std::string adj = pick(kAdjectives, std::size(kAdjectives));
    const std::string noun = pick(kNouns, std::size(kNouns));
    const std::string setting = pick(kSettings, std::size(kSettings));
    const std::string base = "a " + adj + " " + noun + " " + setting;

    if (mode == CaptionMode::greedy) return {base + "."};

    // Beam output mimics real sampled beams: duplicates, substrings and a
    // few genuinely distinct strings.
    std::vector<std::string> beams;
    beams.push_back(base);
    beams.push_back(base);  // exact duplicate
    beams.push_back("a " + adj + " " + noun);  // substring of base
    beams.push_back(base + " with a " + pick(kNouns, std::size(kNouns)));
    beams.push_back(noun + " " + setting);
    for (int i = 0; i < 5; ++i) {
      beams.push_back("a " + pick(kAdjectives, std::size(kAdjectives)) + " " +
                      pick(kNouns, std::size(kNouns)) + " " +
                      pick(kSettings, std::size(kSettings)));
    }
    return beams;
  }

 private:
  uint64_t seed_;
  std::string id_;
};

}  // namespace

std::unique_ptr<CaptionBackend> hash_stub_captioner(uint64_t seed) {
  return std::make_unique<HashStubCaptioner>(seed);
}

// ---------------------------------------------------------------------------
// Caption cache
// ---------------------------------------------------------------------------

namespace {

std::string caption_cache_key(const std::string& captioner_id, const std::string& image_id,
                              CaptionMode mode) {
  return captioner_id + '\x1f' + image_id + '\x1f' + caption_mode_name(mode);
}

}  // namespace

CaptionCache::CaptionCache(std::filesystem::path path) : path_(std::move(path)) {
  if (path_.empty() || !std::filesystem::exists(path_)) return;
  std::ifstream in(path_);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto rec = nlohmann::json::parse(line, nullptr, false);
    if (rec.is_discarded()) continue;
    entries_[caption_cache_key(rec.value("captioner_id", ""), rec.value("image_id", ""),
                               caption_mode_from_name(rec.value("mode", "greedy")))] =
        rec.value("captions", std::vector<std::string>{});
  }
}

std::optional<std::vector<std::string>> CaptionCache::lookup(
    const std::string& captioner_id, const std::string& image_id, CaptionMode mode) const {
  std::lock_guard<std::mutex> lock(mutex_);
  auto it = entries_.find(caption_cache_key(captioner_id, image_id, mode));
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void CaptionCache::store(const std::string& captioner_id, const std::string& image_id,
                         CaptionMode mode, const std::vector<std::string>& raw_captions) {
  std::lock_guard<std::mutex> lock(mutex_);
  auto [it, inserted] =
      entries_.emplace(caption_cache_key(captioner_id, image_id, mode), raw_captions);
  if (!inserted || path_.empty()) return;
  nlohmann::json rec;
  rec["captioner_id"] = captioner_id;
  rec["image_id"] = image_id;
  rec["mode"] = caption_mode_name(mode);
  rec["captions"] = raw_captions;
  rec["timestamp"] = static_cast<int64_t>(
      std::chrono::system_clock::to_time_t(std::chrono::system_clock::now()));
  std::ofstream out(path_, std::ios::app);
  out << rec.dump() << '\n';
}

GeneratedCaptions generate_captions_cached(CaptionBackend& captioner,
                                           const std::string& image_id,
                                           const std::filesystem::path& image_dir,
                                           CaptionMode mode, CaptionCache& cache) {
  if (auto hit = cache.lookup(captioner.captioner_id(), image_id, mode)) {
    GeneratedCaptions result;
    result.raw = *hit;
    result.set.image_id = image_id;
    result.set.mode = mode;
    result.set.captioner_id = captioner.captioner_id();
    result.set.captions = dedup_captions(result.raw);
    if (result.set.captions.empty()) {
      throw Error(ErrorCode::BackendUnavailable,
                  "cached captions for '" + image_id + "' are all blank");
    }
    return result;
  }
  GeneratedCaptions result = generate_captions(captioner, image_id, image_dir, mode);
  cache.store(captioner.captioner_id(), image_id, mode, result.raw);
  return result;
}

}  // namespace vwsd
