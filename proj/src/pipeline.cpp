#include "vwsd/pipeline.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

#include "vwsd/captions.hpp"
#include "vwsd/digest.hpp"
#include "vwsd/embeddings.hpp"
#include "vwsd/enhancement.hpp"
#include "vwsd/errors.hpp"
#include "vwsd/features.hpp"
#include "vwsd/kbretrieval.hpp"
#include "vwsd/llm.hpp"
#include "vwsd/ltr.hpp"
#include "vwsd/parallel.hpp"
#include "vwsd/qa.hpp"

namespace vwsd {

using nlohmann::json;

namespace {

std::string iso_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string sanitize_for_filename(const std::string& name) {
  std::string out;
  for (char c : name) {
    out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
  }
  return out + "_" + sha256_hex(name).substr(0, 8);
}

json require_object(const json& doc, const char* key) {
  if (!doc.contains(key)) return json::object();
  if (!doc.at(key).is_object()) {
    throw Error(ErrorCode::ConfigInvalid, std::string("'") + key + "' must be an object");
  }
  return doc.at(key);
}

}  // namespace

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

PipelineConfig PipelineConfig::from_file(
    const std::filesystem::path& path,
    const std::vector<std::pair<std::string, std::string>>& overrides) {
  std::ifstream in(path);
  if (!in) {
    throw Error(ErrorCode::ConfigInvalid, "cannot open config " + path.string());
  }
  json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) {
    throw Error(ErrorCode::ConfigInvalid, "config is not valid JSON: " + path.string());
  }
  for (const auto& [dotted, raw_value] : overrides) {
    if (dotted.empty()) {
      throw Error(ErrorCode::ConfigInvalid, "--set requires key.path=value");
    }
    json* node = &doc;
    size_t start = 0;
    while (true) {
      const size_t dot = dotted.find('.', start);
      const std::string key = dotted.substr(start, dot - start);
      if (key.empty()) {
        throw Error(ErrorCode::ConfigInvalid, "empty path segment in --set " + dotted);
      }
      if (dot == std::string::npos) {
        json value = json::parse(raw_value, nullptr, false);
        (*node)[key] = value.is_discarded() ? json(raw_value) : value;
        break;
      }
      node = &(*node)[key];
      start = dot + 1;
    }
  }
  PipelineConfig config = from_json(doc);
  // relative paths resolve against the config file location
  const auto base = path.parent_path();
  auto resolve = [&](std::filesystem::path& p) {
    if (!p.empty() && p.is_relative()) p = base / p;
  };
  resolve(config.data);
  resolve(config.images);
  resolve(config.cache_root);
  if (config.gold) resolve(*config.gold);
  if (config.penalty_phrases) resolve(*config.penalty_phrases);
  if (config.kb.contains("fixture")) {
    std::filesystem::path f = config.kb["fixture"].get<std::string>();
    if (f.is_relative()) f = base / f;
    config.kb["fixture"] = f.string();
  }
  return config;
}

PipelineConfig PipelineConfig::from_json(const json& doc) {
  PipelineConfig config;
  if (!doc.contains("data") || !doc.contains("images") || !doc.contains("cache_root")) {
    throw Error(ErrorCode::ConfigInvalid, "config requires data, images and cache_root");
  }
  config.data = doc.at("data").get<std::string>();
  config.images = doc.at("images").get<std::string>();
  config.cache_root = doc.at("cache_root").get<std::string>();
  if (doc.contains("gold") && !doc.at("gold").is_null()) {
    config.gold = std::filesystem::path(doc.at("gold").get<std::string>());
  }
  config.seed = doc.value("seed", 0ull);
  config.metric = doc.value("metric", std::string("cosine"));
  metric_from_name(config.metric);  // validates

  const json penalty = require_object(doc, "penalty");
  config.penalty_enabled = penalty.value("enabled", true);
  config.penalty_alpha = penalty.value("alpha", 1.0);
  if (config.penalty_alpha < 0.0) {
    throw Error(ErrorCode::ConfigInvalid, "penalty alpha must be >= 0");
  }
  if (penalty.contains("phrases") && !penalty.at("phrases").is_null()) {
    config.penalty_phrases =
        std::filesystem::path(penalty.at("phrases").get<std::string>());
  }

  config.embedder = require_object(doc, "embedder");
  if (config.embedder.empty()) {
    config.embedder = {{"kind", "mock"}, {"seed", 0}, {"dim", 64}};
  }
  config.llm = require_object(doc, "llm");
  if (config.llm.empty()) config.llm = {{"kind", "stub"}, {"seed", 0}};
  config.captioner = require_object(doc, "captioner");
  if (config.captioner.empty()) {
    config.captioner = {{"kind", "stub"}, {"seed", 0}, {"mode", "greedy"}};
  }
  config.kb = require_object(doc, "kb");
  if (config.kb.empty()) config.kb = {{"sources", json::array({"wikipedia"})}, {"k", 10}};

  config.templates = doc.value("templates", std::vector<std::string>{});
  for (const auto& name : config.templates) {
    if (!find_template(name)) {
      throw Error(ErrorCode::ConfigInvalid, "unknown template '" + name + "'");
    }
  }
  config.families = doc.value("families", std::vector<std::string>{});
  config.ltr = require_object(doc, "ltr");
  config.split_fraction = doc.value("split_fraction", 0.2);
  config.qa = require_object(doc, "qa");
  config.parallelism = doc.value("parallelism", 4);
  if (config.parallelism < 1) {
    throw Error(ErrorCode::ConfigInvalid, "parallelism must be >= 1");
  }
  return config;
}

json PipelineConfig::to_json() const {
  json doc;
  doc["data"] = data.string();
  if (gold) doc["gold"] = gold->string();
  doc["images"] = images.string();
  doc["cache_root"] = cache_root.string();
  doc["seed"] = seed;
  doc["metric"] = metric;
  doc["penalty"] = {{"enabled", penalty_enabled}, {"alpha", penalty_alpha}};
  if (penalty_phrases) doc["penalty"]["phrases"] = penalty_phrases->string();
  doc["embedder"] = embedder;
  doc["llm"] = llm;
  doc["captioner"] = captioner;
  doc["kb"] = kb;
  doc["templates"] = templates;
  doc["families"] = families;
  doc["ltr"] = ltr;
  doc["split_fraction"] = split_fraction;
  doc["qa"] = qa;
  doc["parallelism"] = parallelism;
  return doc;
}

// ---------------------------------------------------------------------------
// Family specs
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(item);
  return out;
}

FamilySpec parse_family(const std::string& shorthand,
                        const std::vector<std::string>& templates) {
  std::string body = shorthand;
  bool penalty = false;
  if (body.size() > 8 && body.substr(body.size() - 8) == "+penalty") {
    penalty = true;
    body = body.substr(0, body.size() - 8);
  }
  const auto parts = split_on(body, ':');
  FamilySpec spec;
  spec.penalty = penalty;

  auto check_template = [&](const std::string& name) {
    if (!find_template(name)) {
      throw Error(ErrorCode::ConfigInvalid,
                  "family '" + shorthand + "' names unknown template '" + name + "'");
    }
    if (std::find(templates.begin(), templates.end(), name) == templates.end()) {
      throw Error(ErrorCode::ConfigInvalid,
                  "family '" + shorthand + "' needs template '" + name +
                      "' which is not in the configured template list");
    }
  };

  if (parts.empty() || parts[0].empty()) {
    throw Error(ErrorCode::ConfigInvalid, "empty family spec");
  }
  if (parts[0] == "baseline") {
    spec.kind = FamilySpec::Kind::baseline;
    if (parts.size() != 1) {
      throw Error(ErrorCode::ConfigInvalid, "malformed family '" + shorthand + "'");
    }
    return spec;
  }
  if (parts[0] == "enhanced") {
    spec.kind = FamilySpec::Kind::enhanced;
    if (parts.size() != 2) {
      throw Error(ErrorCode::ConfigInvalid, "malformed family '" + shorthand + "'");
    }
    check_template(parts[1]);
    spec.template_name = parts[1];
    return spec;
  }
  if (parts[0] == "captions") {
    if (penalty) {
      throw Error(ErrorCode::ConfigInvalid,
                  "caption families take no penalty: '" + shorthand + "'");
    }
    spec.kind = FamilySpec::Kind::captions;
    size_t next = 1;
    if (next >= parts.size()) {
      throw Error(ErrorCode::ConfigInvalid, "malformed family '" + shorthand + "'");
    }
    if (parts[next] == "t") {
      spec.enhanced_phrase = false;
      ++next;
    } else if (parts[next] == "te") {
      spec.enhanced_phrase = true;
      ++next;
      if (next >= parts.size()) {
        throw Error(ErrorCode::ConfigInvalid, "malformed family '" + shorthand + "'");
      }
      check_template(parts[next]);
      spec.template_name = parts[next];
      ++next;
    } else {
      throw Error(ErrorCode::ConfigInvalid, "malformed family '" + shorthand + "'");
    }
    if (next < parts.size()) {
      spec.metric = parts[next];
      metric_from_name(spec.metric);
      ++next;
    }
    if (next != parts.size()) {
      throw Error(ErrorCode::ConfigInvalid, "malformed family '" + shorthand + "'");
    }
    return spec;
  }
  if (parts[0] == "kb") {
    if (penalty) {
      throw Error(ErrorCode::ConfigInvalid,
                  "kb families take no penalty: '" + shorthand + "'");
    }
    spec.kind = FamilySpec::Kind::kb;
    if (parts.size() < 2 || parts.size() > 3) {
      throw Error(ErrorCode::ConfigInvalid, "malformed family '" + shorthand + "'");
    }
    kb_source_from_name(parts[1]);
    spec.kb_source = parts[1];
    if (parts.size() == 3) {
      spec.metric = parts[2];
      metric_from_name(spec.metric);
    }
    return spec;
  }
  throw Error(ErrorCode::ConfigInvalid, "unknown family kind in '" + shorthand + "'");
}

}  // namespace

std::vector<FamilySpec> Pipeline::family_specs() const {
  std::vector<FamilySpec> specs;
  for (const auto& shorthand : config_.families) {
    if (shorthand == "all") {
      FamilySpec baseline;
      baseline.kind = FamilySpec::Kind::baseline;
      baseline.penalty = config_.penalty_enabled;
      specs.push_back(baseline);
      for (const auto& tmpl : config_.templates) {
        FamilySpec enhanced;
        enhanced.kind = FamilySpec::Kind::enhanced;
        enhanced.template_name = tmpl;
        enhanced.penalty = config_.penalty_enabled;
        specs.push_back(enhanced);
      }
      FamilySpec captions_t;
      captions_t.kind = FamilySpec::Kind::captions;
      specs.push_back(captions_t);
      for (const auto& tmpl : config_.templates) {
        FamilySpec captions_te;
        captions_te.kind = FamilySpec::Kind::captions;
        captions_te.enhanced_phrase = true;
        captions_te.template_name = tmpl;
        specs.push_back(captions_te);
      }
      for (const auto& source : config_.kb.value("sources", std::vector<std::string>{})) {
        FamilySpec kb;
        kb.kind = FamilySpec::Kind::kb;
        kb.kb_source = source;
        specs.push_back(kb);
      }
      continue;
    }
    specs.push_back(parse_family(shorthand, config_.templates));
  }
  if (specs.empty()) {
    throw Error(ErrorCode::ConfigInvalid, "no scoring families configured");
  }
  return specs;
}

std::string Pipeline::family_id(const FamilySpec& spec) const {
  const std::string metric = spec.metric.empty() ? config_.metric : spec.metric;
  switch (spec.kind) {
    case FamilySpec::Kind::baseline:
      return spec.penalty ? "baseline+penalty" : "baseline";
    case FamilySpec::Kind::enhanced:
      return "enhanced:" + spec.template_name + (spec.penalty ? "+penalty" : "");
    case FamilySpec::Kind::captions: {
      const std::string captioner_id =
          config_.captioner.value("kind", std::string("stub")) == "stub"
              ? "stub-cap/s" + std::to_string(config_.captioner.value("seed", 0))
              : config_.captioner.value("id", std::string("captioner"));
      const std::string mode = config_.captioner.value("mode", std::string("greedy"));
      const std::string phrase_part =
          spec.enhanced_phrase ? "te:" + spec.template_name : std::string("t");
      return "captions:" + captioner_id + "-" + mode + ":" + metric + ":" + phrase_part;
    }
    case FamilySpec::Kind::kb:
      return "kb:" + spec.kb_source + ":" + metric;
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Backends from config
// ---------------------------------------------------------------------------

namespace {

std::unique_ptr<EmbeddingBackend> make_embedder(const json& cfg) {
  const std::string kind = cfg.value("kind", std::string("mock"));
  if (kind == "mock") {
    return mock_backend(cfg.value("seed", 0ull), cfg.value("dim", 64ull));
  }
  throw Error(ErrorCode::ConfigInvalid,
              "unknown embedder kind '" + kind + "' (adapters: mock)");
}

std::unique_ptr<CompletionBackend> make_llm(const json& cfg) {
  const std::string kind = cfg.value("kind", std::string("stub"));
  if (kind == "stub") return hash_stub_llm(cfg.value("seed", 0ull));
  if (kind == "http") {
    HttpLlmConfig http;
    http.base_url = cfg.value("base_url", http.base_url);
    http.path = cfg.value("path", http.path);
    http.model = cfg.value("model", std::string());
    http.api_key_env = cfg.value("api_key_env", http.api_key_env);
    http.chat = cfg.value("chat", false);
    return http_llm(http);
  }
  throw Error(ErrorCode::ConfigInvalid,
              "unknown llm kind '" + kind + "' (adapters: stub, http)");
}

LlmParams llm_params_from(const json& cfg, const std::string& llm_id) {
  LlmParams params;
  params.max_tokens = cfg.value("max_tokens", 100);
  params.temperature = cfg.value("temperature", 0.0);
  params.llm_id = llm_id;
  return params;
}

std::unique_ptr<CaptionBackend> make_captioner(const json& cfg) {
  const std::string kind = cfg.value("kind", std::string("stub"));
  if (kind == "stub") return hash_stub_captioner(cfg.value("seed", 0ull));
  throw Error(ErrorCode::ConfigInvalid,
              "unknown captioner kind '" + kind + "' (adapters: stub)");
}

}  // namespace

// ---------------------------------------------------------------------------
// Stage plumbing
// ---------------------------------------------------------------------------

Pipeline::Pipeline(PipelineConfig config) : config_(std::move(config)) {
  std::filesystem::create_directories(config_.cache_root);
}

const Dataset& Pipeline::dataset() {
  if (!dataset_) {
    dataset_ = load_dataset(config_.data, config_.gold, config_.images);
  }
  return *dataset_;
}

std::string Pipeline::images_fingerprint() {
  if (images_fp_) return *images_fp_;
  std::set<std::string> ids;
  for (const auto& sample : dataset().samples) {
    ids.insert(sample.candidates.begin(), sample.candidates.end());
  }
  std::string acc;
  for (const auto& id : ids) {
    acc += id;
    acc += ':';
    const auto path = config_.images / id;
    acc += std::filesystem::exists(path) ? sha256_file_hex(path) : std::string("absent");
    acc += '\n';
  }
  images_fp_ = sha256_hex(acc);
  return *images_fp_;
}

std::filesystem::path Pipeline::stage_dir(const std::string& name,
                                          const std::string& digest) const {
  return config_.cache_root / name / digest.substr(0, 16);
}

StageResult Pipeline::run_stage(
    const std::string& name, const json& digest_inputs,
    const std::function<void(const std::filesystem::path&)>& body) {
  const std::string digest = sha256_hex(digest_inputs.dump());
  const auto dir = stage_dir(name, digest);
  if (std::filesystem::exists(dir / "manifest.json")) {
    return {dir, true};
  }
  std::filesystem::create_directories(dir);
  body(dir);

  json manifest;
  manifest["stage"] = name;
  manifest["digest"] = digest;
  manifest["inputs"] = digest_inputs;
  manifest["created"] = iso_timestamp();
  const auto tmp = dir / "manifest.json.tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << manifest.dump(2) << '\n';
  }
  std::filesystem::rename(tmp, dir / "manifest.json");
  return {dir, false};
}

std::filesystem::path Pipeline::require_stage(const std::string& name,
                                              const json& digest_inputs) {
  const std::string digest = sha256_hex(digest_inputs.dump());
  const auto dir = stage_dir(name, digest);
  if (!std::filesystem::exists(dir / "manifest.json")) {
    throw Error(ErrorCode::MissingUpstreamArtifact,
                "stage '" + name + "' has not produced its artifact yet; run `vwsd " +
                    name + "` first");
  }
  return dir;
}

// ---------------------------------------------------------------------------
// Digest inputs per stage
// ---------------------------------------------------------------------------

nlohmann::json Pipeline::prepare_inputs() {
  json inputs;
  inputs["stage"] = "prepare";
  inputs["data_sha"] = sha256_file_hex(config_.data);
  inputs["gold_sha"] = config_.gold ? sha256_file_hex(*config_.gold) : std::string();
  return inputs;
}

nlohmann::json Pipeline::embed_inputs() {
  json inputs;
  inputs["stage"] = "embed";
  inputs["data_sha"] = sha256_file_hex(config_.data);
  inputs["images_sha"] = images_fingerprint();
  inputs["embedder"] = config_.embedder;
  return inputs;
}

nlohmann::json Pipeline::enhance_inputs() {
  json inputs;
  inputs["stage"] = "enhance";
  inputs["data_sha"] = sha256_file_hex(config_.data);
  inputs["llm"] = config_.llm;
  inputs["templates"] = config_.templates;
  return inputs;
}

nlohmann::json Pipeline::caption_inputs() {
  json inputs;
  inputs["stage"] = "caption";
  inputs["data_sha"] = sha256_file_hex(config_.data);
  inputs["images_sha"] = images_fingerprint();
  inputs["captioner"] = config_.captioner;
  return inputs;
}

nlohmann::json Pipeline::kb_inputs() {
  json inputs;
  inputs["stage"] = "kb-fetch";
  inputs["data_sha"] = sha256_file_hex(config_.data);
  json kb = config_.kb;
  if (kb.contains("fixture")) {
    const std::filesystem::path manifest =
        std::filesystem::path(kb["fixture"].get<std::string>()) / "manifest.jsonl";
    kb["fixture_sha"] =
        std::filesystem::exists(manifest) ? sha256_file_hex(manifest) : std::string();
  }
  inputs["kb"] = kb;
  return inputs;
}

nlohmann::json Pipeline::score_inputs() {
  json inputs;
  inputs["stage"] = "score";
  inputs["embed"] = embed_inputs();
  inputs["metric"] = config_.metric;
  inputs["penalty"] = {{"enabled", config_.penalty_enabled},
                       {"alpha", config_.penalty_alpha}};
  if (config_.penalty_phrases) {
    inputs["penalty"]["phrases_sha"] = sha256_file_hex(*config_.penalty_phrases);
  }
  std::vector<std::string> ids;
  bool needs_enhance = false, needs_captions = false, needs_kb = false;
  for (const auto& spec : family_specs()) {
    ids.push_back(family_id(spec));
    needs_enhance |= spec.kind == FamilySpec::Kind::enhanced ||
                     (spec.kind == FamilySpec::Kind::captions && spec.enhanced_phrase);
    needs_captions |= spec.kind == FamilySpec::Kind::captions;
    needs_kb |= spec.kind == FamilySpec::Kind::kb;
  }
  inputs["families"] = ids;
  if (needs_enhance) inputs["enhance"] = enhance_inputs();
  if (needs_captions) inputs["caption"] = caption_inputs();
  if (needs_kb) inputs["kb"] = kb_inputs();
  return inputs;
}

nlohmann::json Pipeline::features_inputs() {
  json inputs;
  inputs["stage"] = "features";
  inputs["score"] = score_inputs();
  inputs["with_labels"] = config_.gold.has_value();
  return inputs;
}

nlohmann::json Pipeline::train_inputs() {
  json inputs;
  inputs["stage"] = "train-ltr";
  inputs["features"] = features_inputs();
  inputs["ltr"] = config_.ltr;
  inputs["split_fraction"] = config_.split_fraction;
  inputs["seed"] = config_.seed;
  return inputs;
}

nlohmann::json Pipeline::predict_inputs() {
  json inputs;
  inputs["stage"] = "predict";
  inputs["train"] = train_inputs();
  return inputs;
}

nlohmann::json Pipeline::qa_inputs() {
  json inputs;
  inputs["stage"] = "qa";
  inputs["caption"] = caption_inputs();
  inputs["llm"] = config_.llm;
  inputs["qa"] = config_.qa;
  return inputs;
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

StageResult Pipeline::prepare() {
  return run_stage("prepare", prepare_inputs(), [&](const std::filesystem::path& dir) {
    const Dataset& ds = dataset();
    const auto missing = validate_images(ds);
    json summary;
    summary["split"] = ds.split_name;
    summary["samples"] = ds.samples.size();
    summary["gold"] = config_.gold.has_value();
    summary["warnings"] = ds.warnings;
    summary["missing_images"] = missing;
    std::ofstream out(dir / "summary.json", std::ios::binary | std::ios::trunc);
    out << summary.dump(2) << '\n';
  });
}

StageResult Pipeline::embed() {
  return run_stage("embed", embed_inputs(), [&](const std::filesystem::path& dir) {
    const Dataset& ds = dataset();
    auto backend = make_embedder(config_.embedder);
    EmbeddingStore store(dir / "store");

    std::vector<std::string> phrases;
    std::set<std::string> seen_phrase;
    for (const auto& sample : ds.samples) {
      if (seen_phrase.insert(sample.phrase).second) phrases.push_back(sample.phrase);
    }
    const auto phrase_embs = embed_texts(*backend, phrases);
    for (size_t i = 0; i < phrases.size(); ++i) {
      store.put(backend->space_id(), EmbeddingKind::text, phrases[i], phrase_embs[i]);
    }

    std::vector<std::string> image_ids;
    std::set<std::string> seen_image;
    for (const auto& sample : ds.samples) {
      for (const auto& id : sample.candidates) {
        if (seen_image.insert(id).second) image_ids.push_back(id);
      }
    }
    const auto image_embs = embed_images(*backend, image_ids, config_.images);
    for (size_t i = 0; i < image_ids.size(); ++i) {
      store.put(backend->space_id(), EmbeddingKind::image, image_ids[i], image_embs[i]);
    }
    store.flush();
  });
}

StageResult Pipeline::enhance() {
  return run_stage("enhance", enhance_inputs(), [&](const std::filesystem::path& dir) {
    if (config_.templates.empty()) {
      throw Error(ErrorCode::ConfigInvalid, "enhance stage needs a template list");
    }
    const Dataset& ds = dataset();
    auto llm = make_llm(config_.llm);
    const LlmParams params = llm_params_from(config_.llm, llm->llm_id());

    std::filesystem::create_directories(config_.cache_root / "caches");
    EnhancementCache cache(config_.cache_root / "caches" / "enhancement.jsonl");

    std::vector<PromptTemplate> templates;
    for (const auto& name : config_.templates) {
      auto tmpl = find_template(name);
      if (!tmpl) {
        throw Error(ErrorCode::ConfigInvalid, "unknown template '" + name + "'");
      }
      templates.push_back(*tmpl);
    }

    const auto result =
        enhance_split(*llm, templates, ds, params, cache, config_.parallelism);

    std::ofstream out(dir / "enhanced.jsonl", std::ios::binary | std::ios::trunc);
    for (const auto& [key, cell] : result.cells) {
      json rec;
      rec["template"] = key.first;
      rec["sample_id"] = key.second;
      rec["phrase"] = cell.phrase;
      rec["rendered_prompt"] = cell.rendered_prompt;
      rec["generation"] = cell.generation;
      rec["enhanced_text"] = cell.enhanced_text;
      rec["llm_id"] = cell.llm_id;
      rec["fallback"] = cell.fallback;
      out << rec.dump() << '\n';
    }
    if (!result.failures.empty()) {
      json failures = result.failures;
      std::ofstream fail(dir / "failures.json", std::ios::binary | std::ios::trunc);
      fail << failures.dump(2) << '\n';
    }
  });
}

StageResult Pipeline::caption() {
  return run_stage("caption", caption_inputs(), [&](const std::filesystem::path& dir) {
    const Dataset& ds = dataset();
    auto captioner = make_captioner(config_.captioner);
    const CaptionMode mode =
        caption_mode_from_name(config_.captioner.value("mode", std::string("greedy")));

    std::filesystem::create_directories(config_.cache_root / "caches");
    CaptionCache cache(config_.cache_root / "caches" / "captions.jsonl");

    std::vector<std::string> image_ids;
    std::set<std::string> seen;
    for (const auto& sample : ds.samples) {
      for (const auto& id : sample.candidates) {
        if (seen.insert(id).second) image_ids.push_back(id);
      }
    }

    std::vector<GeneratedCaptions> generated(image_ids.size());
    run_indexed(image_ids.size(), config_.parallelism, [&](size_t i) {
      generated[i] =
          generate_captions_cached(*captioner, image_ids[i], config_.images, mode, cache);
    });

    std::ofstream out(dir / "captions.jsonl", std::ios::binary | std::ios::trunc);
    for (const auto& g : generated) {
      json rec;
      rec["image_id"] = g.set.image_id;
      rec["mode"] = caption_mode_name(g.set.mode);
      rec["captioner_id"] = g.set.captioner_id;
      rec["raw"] = g.raw;
      rec["captions"] = g.set.captions;
      out << rec.dump() << '\n';
    }
  });
}

StageResult Pipeline::kb_fetch() {
  return run_stage("kb-fetch", kb_inputs(), [&](const std::filesystem::path& dir) {
    const auto kb_dir = dir / "kb";
    std::filesystem::create_directories(kb_dir);

    // seed from a recorded fixture when configured
    if (config_.kb.contains("fixture")) {
      const std::filesystem::path fixture = config_.kb["fixture"].get<std::string>();
      if (std::filesystem::exists(fixture)) {
        std::filesystem::copy(fixture, kb_dir,
                              std::filesystem::copy_options::recursive |
                                  std::filesystem::copy_options::overwrite_existing);
      }
    }

    std::unique_ptr<KbClient> client;
    if (config_.kb.value("client", std::string("none")) == "http") {
      KbClientConfig client_config;
      client_config.user_agent = config_.kb.value("user_agent", client_config.user_agent);
      client_config.requests_per_second =
          config_.kb.value("rate_limit", client_config.requests_per_second);
      client = http_kb_client(client_config);
    }

    const int k = config_.kb.value("k", 10);
    json summary = json::array();
    for (const auto& source_name :
         config_.kb.value("sources", std::vector<std::string>{"wikipedia"})) {
      const KbSource source = kb_source_from_name(source_name);
      for (const auto& sample : dataset().samples) {
        const KbImageSet set =
            fetch_kb_images(client.get(), sample.phrase, source, k, kb_dir);
        summary.push_back({{"sample_id", sample.sample_id},
                           {"source", source_name},
                           {"images", set.images.size()}});
      }
    }
    std::ofstream out(dir / "coverage.json", std::ios::binary | std::ios::trunc);
    out << summary.dump(2) << '\n';
  });
}

// ---------------------------------------------------------------------------
// Score stage
// ---------------------------------------------------------------------------

namespace {

struct EnhancedLookup {
  // (template, sample_id) -> enhanced text
  std::map<std::pair<std::string, int>, std::string> texts;
};

EnhancedLookup load_enhanced(const std::filesystem::path& file) {
  EnhancedLookup lookup;
  std::ifstream in(file);
  if (!in) {
    throw Error(ErrorCode::IoError, "cannot read " + file.string());
  }
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json rec = json::parse(line);
    lookup.texts[{rec.at("template").get<std::string>(), rec.at("sample_id").get<int>()}] =
        rec.at("enhanced_text").get<std::string>();
  }
  return lookup;
}

std::map<std::string, CaptionSet> load_caption_sets(const std::filesystem::path& file) {
  std::map<std::string, CaptionSet> sets;
  std::ifstream in(file);
  if (!in) {
    throw Error(ErrorCode::IoError, "cannot read " + file.string());
  }
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json rec = json::parse(line);
    CaptionSet set;
    set.image_id = rec.at("image_id").get<std::string>();
    set.mode = caption_mode_from_name(rec.at("mode").get<std::string>());
    set.captioner_id = rec.at("captioner_id").get<std::string>();
    set.captions = rec.at("captions").get<std::vector<std::string>>();
    sets[set.image_id] = std::move(set);
  }
  return sets;
}

// Candidate-order scores recovered from a ranking.
std::array<double, kCandidatesPerSample> scores_in_candidate_order(
    const Ranking& ranking, const std::vector<std::string>& candidates) {
  std::array<double, kCandidatesPerSample> scores{};
  for (int j = 0; j < kCandidatesPerSample; ++j) {
    for (size_t r = 0; r < ranking.candidates.size(); ++r) {
      if (ranking.candidates[r] == candidates[static_cast<size_t>(j)]) {
        scores[static_cast<size_t>(j)] = ranking.scores[r];
        break;
      }
    }
  }
  return scores;
}

}  // namespace

StageResult Pipeline::score() {
  return run_stage("score", score_inputs(), [&](const std::filesystem::path& dir) {
    const Dataset& ds = dataset();
    const auto specs = family_specs();

    bool needs_enhance = false, needs_captions = false, needs_kb = false;
    for (const auto& spec : specs) {
      needs_enhance |= spec.kind == FamilySpec::Kind::enhanced ||
                       (spec.kind == FamilySpec::Kind::captions && spec.enhanced_phrase);
      needs_captions |= spec.kind == FamilySpec::Kind::captions;
      needs_kb |= spec.kind == FamilySpec::Kind::kb;
    }

    const auto embed_dir = require_stage("embed", embed_inputs());
    EnhancedLookup enhanced;
    if (needs_enhance) {
      enhanced = load_enhanced(require_stage("enhance", enhance_inputs()) / "enhanced.jsonl");
    }
    std::map<std::string, CaptionSet> caption_sets;
    if (needs_captions) {
      caption_sets =
          load_caption_sets(require_stage("caption", caption_inputs()) / "captions.jsonl");
    }
    std::filesystem::path kb_dir;
    if (needs_kb) {
      kb_dir = require_stage("kb-fetch", kb_inputs()) / "kb";
    }

    auto backend = make_embedder(config_.embedder);
    EmbeddingStore store(embed_dir / "store");
    const std::string space = backend->space_id();

    auto stored_text = [&](const std::string& text) -> Embedding {
      auto e = store.get(space, EmbeddingKind::text, text);
      if (!e) {
        throw Error(ErrorCode::MissingEmbedding,
                    "phrase not present in embed artifact: '" + text + "'");
      }
      return *e;
    };
    auto stored_image = [&](const std::string& id) -> Embedding {
      auto e = store.get(space, EmbeddingKind::image, id);
      if (!e) {
        throw Error(ErrorCode::MissingEmbedding,
                    "image not present in embed artifact: '" + id + "'");
      }
      return *e;
    };

    // candidate embeddings, shared across families
    std::unordered_map<std::string, Embedding> candidate_embs;
    std::map<std::string, Embedding> candidate_embs_ordered;
    for (const auto& sample : ds.samples) {
      for (const auto& id : sample.candidates) {
        if (!candidate_embs.count(id)) {
          Embedding e = stored_image(id);
          candidate_embs_ordered[id] = e;
          candidate_embs[id] = std::move(e);
        }
      }
    }

    // penalty table over the configured phrase pool
    std::optional<PenaltyTable> penalty;
    bool any_penalty = false;
    for (const auto& spec : specs) any_penalty |= spec.penalty;
    if (any_penalty) {
      std::vector<Embedding> pool;
      if (config_.penalty_phrases) {
        const Dataset pool_ds =
            load_dataset(*config_.penalty_phrases, std::nullopt, config_.images);
        std::vector<std::string> texts;
        for (const auto& s : pool_ds.samples) texts.push_back(s.phrase);
        pool = embed_texts(*backend, texts);
      } else {
        for (const auto& sample : ds.samples) pool.push_back(stored_text(sample.phrase));
      }
      penalty = compute_penalty(pool, candidate_embs_ordered, config_.penalty_alpha);
    }

    // in-memory memo for texts not present in the store (enhanced, captions)
    std::unordered_map<std::string, Embedding> text_memo;
    auto embed_text_once = [&](const std::string& text) -> const Embedding& {
      auto it = text_memo.find(text);
      if (it != text_memo.end()) return it->second;
      auto embs = embed_texts(*backend, {text});
      return text_memo.emplace(text, std::move(embs[0])).first->second;
    };

    for (const auto& spec : specs) {
      const std::string id = family_id(spec);
      const Metric metric =
          metric_from_name(spec.metric.empty() ? config_.metric : spec.metric);
      const PenaltyTable* penalty_ptr = spec.penalty ? &*penalty : nullptr;

      FamilyScores family;
      family.family_id = id;
      family.scores.resize(ds.samples.size());
      family.present.assign(ds.samples.size(), true);
      std::vector<std::optional<Ranking>> rankings(ds.samples.size());

      for (size_t s = 0; s < ds.samples.size(); ++s) {
        const Sample& sample = ds.samples[s];
        std::optional<Ranking> ranking;

        switch (spec.kind) {
          case FamilySpec::Kind::baseline: {
            ranking = rank_vl(sample, stored_text(sample.phrase), candidate_embs, metric,
                              penalty_ptr);
            break;
          }
          case FamilySpec::Kind::enhanced: {
            const auto it = enhanced.texts.find({spec.template_name, sample.sample_id});
            if (it == enhanced.texts.end()) {
              throw Error(ErrorCode::MissingUpstreamArtifact,
                          "enhance artifact lacks template '" + spec.template_name +
                              "' for sample " + std::to_string(sample.sample_id) +
                              "; re-run `vwsd enhance`");
            }
            ranking = rank_vl(sample, embed_text_once(it->second), candidate_embs, metric,
                              penalty_ptr);
            break;
          }
          case FamilySpec::Kind::captions: {
            std::string phrase_text = sample.phrase;
            if (spec.enhanced_phrase) {
              const auto it = enhanced.texts.find({spec.template_name, sample.sample_id});
              if (it == enhanced.texts.end()) {
                throw Error(ErrorCode::MissingUpstreamArtifact,
                            "enhance artifact lacks template '" + spec.template_name +
                                "' for sample " + std::to_string(sample.sample_id) +
                                "; re-run `vwsd enhance`");
              }
              phrase_text = it->second;
            }
            std::map<std::string, CaptionSet> sample_sets;
            for (const auto& cid : sample.candidates) {
              auto cit = caption_sets.find(cid);
              if (cit == caption_sets.end()) {
                throw Error(ErrorCode::MissingCaptions,
                            "caption artifact lacks image '" + cid + "'");
              }
              sample_sets[cid] = cit->second;
            }
            ranking = rank_by_captions(sample.sample_id, sample.candidates, phrase_text,
                                       sample_sets, *backend, metric);
            break;
          }
          case FamilySpec::Kind::kb: {
            const KbImageSet set =
                fetch_kb_images(nullptr, sample.phrase, kb_source_from_name(spec.kb_source),
                                config_.kb.value("k", 10), kb_dir);
            ranking =
                rank_by_kb_images(sample, set, *backend, config_.images, metric,
                                  config_.kb.value("aggregate", std::string("max")) == "mean"
                                      ? KbAggregate::mean
                                      : KbAggregate::max);
            break;
          }
        }

        if (ranking) {
          family.scores[s] = scores_in_candidate_order(*ranking, sample.candidates);
          rankings[s] = std::move(ranking);
        } else {
          family.scores[s].fill(0.0);
          family.present[s] = false;
        }
      }

      // write family scores + rankings
      const std::string base = sanitize_for_filename(id);
      json doc;
      doc["family_id"] = id;
      doc["metric"] = metric_name(metric);
      doc["penalty_applied"] = spec.penalty;
      doc["penalty_alpha"] = spec.penalty ? config_.penalty_alpha : 0.0;
      json samples = json::array();
      for (size_t s = 0; s < ds.samples.size(); ++s) {
        json row;
        row["sample_id"] = ds.samples[s].sample_id;
        row["present"] = static_cast<bool>(family.present[s]);
        row["scores"] = family.scores[s];
        samples.push_back(std::move(row));
      }
      doc["samples"] = std::move(samples);
      {
        std::ofstream out(dir / ("family_" + base + ".json"),
                          std::ios::binary | std::ios::trunc);
        out << doc.dump() << '\n';
      }
      write_predictions(dir / ("rankings_" + base + ".tsv"), rankings);
    }

    // index of family ids to artifact files
    json index;
    for (const auto& spec : specs) {
      const std::string id = family_id(spec);
      index[id] = {{"scores", "family_" + sanitize_for_filename(id) + ".json"},
                   {"rankings", "rankings_" + sanitize_for_filename(id) + ".tsv"}};
    }
    std::ofstream out(dir / "families.json", std::ios::binary | std::ios::trunc);
    out << index.dump(2) << '\n';
  });
}

// ---------------------------------------------------------------------------
// Features / LTR / predict
// ---------------------------------------------------------------------------

namespace {

FamilyScores load_family_scores(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) {
    throw Error(ErrorCode::IoError, "cannot read " + file.string());
  }
  json doc = json::parse(in);
  FamilyScores family;
  family.family_id = doc.at("family_id").get<std::string>();
  for (const auto& row : doc.at("samples")) {
    std::array<double, kCandidatesPerSample> scores{};
    const auto& values = row.at("scores");
    for (int j = 0; j < kCandidatesPerSample; ++j) {
      scores[static_cast<size_t>(j)] = values.at(static_cast<size_t>(j)).get<double>();
    }
    family.scores.push_back(scores);
    family.present.push_back(row.at("present").get<bool>());
  }
  return family;
}

}  // namespace

StageResult Pipeline::features() {
  return run_stage("features", features_inputs(), [&](const std::filesystem::path& dir) {
    const Dataset& ds = dataset();
    const auto score_dir = require_stage("score", score_inputs());

    std::vector<FamilyScores> families;
    for (const auto& spec : family_specs()) {
      const std::string id = family_id(spec);
      families.push_back(
          load_family_scores(score_dir / ("family_" + sanitize_for_filename(id) + ".json")));
    }
    const FeatureMatrix matrix = assemble_matrix(families, ds, config_.gold.has_value());
    write_matrix_csv(matrix, dir / "features.csv");
  });
}

StageResult Pipeline::train() {
  return run_stage("train-ltr", train_inputs(), [&](const std::filesystem::path& dir) {
    const auto features_dir = require_stage("features", features_inputs());
    const FeatureMatrix matrix = read_matrix_csv(features_dir / "features.csv");

    LtrHyperparams params;
    params.n_estimators = config_.ltr.value("n_estimators", params.n_estimators);
    params.early_stopping_rounds =
        config_.ltr.value("early_stopping_rounds", params.early_stopping_rounds);
    params.learning_rate = config_.ltr.value("learning_rate", params.learning_rate);
    params.feature_fraction = config_.ltr.value("feature_fraction", params.feature_fraction);
    params.max_bin = config_.ltr.value("max_bin", params.max_bin);
    params.min_child_samples =
        config_.ltr.value("min_child_samples", params.min_child_samples);
    params.reg_alpha = config_.ltr.value("reg_alpha", params.reg_alpha);
    params.seed = config_.seed;

    const LtrModel model = train_ltr(matrix, params, config_.split_fraction);
    model.save(dir / "model.json");
  });
}

StageResult Pipeline::predict() {
  return run_stage("predict", predict_inputs(), [&](const std::filesystem::path& dir) {
    const auto train_dir = require_stage("train-ltr", train_inputs());
    const auto features_dir = require_stage("features", features_inputs());

    const LtrModel model = LtrModel::load(train_dir / "model.json");
    const FeatureMatrix matrix = read_matrix_csv(features_dir / "features.csv");
    const auto rankings = predict_rank(model, matrix);

    std::vector<std::optional<Ranking>> lines;
    lines.reserve(rankings.size());
    for (const auto& r : rankings) lines.emplace_back(r);
    write_predictions(dir / "predictions.tsv", lines);
  });
}

StageResult Pipeline::qa() {
  return run_stage("qa", qa_inputs(), [&](const std::filesystem::path& dir) {
    const Dataset& ds = dataset();
    const auto caption_dir = require_stage("caption", caption_inputs());
    const auto caption_sets = load_caption_sets(caption_dir / "captions.jsonl");

    auto llm = make_llm(config_.llm);
    const LlmParams params = llm_params_from(config_.llm, llm->llm_id());
    const bool use_cot = config_.qa.value("cot", true);
    const CaptionMode base =
        caption_mode_from_name(config_.captioner.value("mode", std::string("greedy")));

    std::filesystem::create_directories(config_.cache_root / "caches");
    QaCache cache(config_.cache_root / "caches" / "qa.jsonl");

    std::vector<QaResult> results(ds.samples.size());
    run_indexed(ds.samples.size(), config_.parallelism, [&](size_t s) {
      const Sample& sample = ds.samples[s];
      std::vector<CaptionSet> ordered;
      for (const auto& cid : sample.candidates) {
        auto it = caption_sets.find(cid);
        if (it == caption_sets.end()) {
          throw Error(ErrorCode::MissingCaptions,
                      "caption artifact lacks image '" + cid + "'");
        }
        ordered.push_back(it->second);
      }
      results[s] = use_cot ? run_cot(*llm, sample.sample_id, sample.phrase, ordered, base,
                                     params, cache)
                           : run_no_cot(*llm, sample.sample_id, sample.phrase, ordered,
                                        base, params, cache);
    });

    std::ofstream transcript(dir / "transcript.jsonl", std::ios::binary | std::ios::trunc);
    std::vector<std::optional<Ranking>> rankings;
    size_t abstentions = 0;
    for (size_t s = 0; s < results.size(); ++s) {
      const QaResult& r = results[s];
      json rec;
      rec["sample_id"] = r.sample_id;
      rec["mode"] = qa_mode_name(r.mode);
      rec["prompts"] = r.prompts;
      rec["responses"] = r.responses;
      rec["answer_letter"] =
          r.answer_letter ? std::string(1, *r.answer_letter) : std::string();
      transcript << rec.dump() << '\n';

      auto ranking = qa_to_ranking(r, ds.samples[s].candidates);
      if (!ranking) ++abstentions;
      rankings.push_back(std::move(ranking));
    }
    write_predictions(dir / "predictions.tsv", rankings);

    json summary;
    summary["samples"] = results.size();
    summary["abstentions"] = abstentions;
    summary["mode"] = use_cot ? "cot" : "no_cot";
    std::ofstream out(dir / "summary.json", std::ios::binary | std::ios::trunc);
    out << summary.dump(2) << '\n';
  });
}

EvalReport Pipeline::evaluate(const std::optional<std::filesystem::path>& predictions,
                              const std::string& system_id) {
  const Dataset& ds = dataset();
  if (!config_.gold) {
    throw Error(ErrorCode::MissingGold, "evaluate requires a gold file");
  }
  std::filesystem::path file;
  if (predictions) {
    file = *predictions;
  } else {
    file = require_stage("predict", predict_inputs()) / "predictions.tsv";
  }
  const auto rankings = read_predictions(file, ds);
  std::vector<std::string> golds;
  for (const auto& sample : ds.samples) golds.push_back(*sample.gold);
  return evaluate_system(system_id, rankings, golds);
}

// ---------------------------------------------------------------------------
// Prediction files
// ---------------------------------------------------------------------------

void write_predictions(const std::filesystem::path& path,
                       const std::vector<std::optional<Ranking>>& rankings) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw Error(ErrorCode::IoError, "cannot write " + path.string());
  }
  for (const auto& ranking : rankings) {
    if (ranking) {
      for (size_t i = 0; i < ranking->candidates.size(); ++i) {
        if (i > 0) out << '\t';
        out << ranking->candidates[i];
      }
    }
    out << '\n';
  }
}

std::vector<std::optional<Ranking>> read_predictions(const std::filesystem::path& path,
                                                     const Dataset& dataset) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(ErrorCode::IoError, "cannot read predictions " + path.string());
  }
  std::vector<std::optional<Ranking>> rankings;
  std::string line;
  size_t idx = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (idx >= dataset.samples.size()) {
      throw Error(ErrorCode::MalformedLine, "more prediction lines than samples");
    }
    if (line.empty()) {
      rankings.emplace_back(std::nullopt);
      ++idx;
      continue;
    }
    std::vector<std::string> ids;
    std::stringstream ss(line);
    std::string id;
    while (std::getline(ss, id, '\t')) ids.push_back(id);

    const Sample& sample = dataset.samples[idx];
    std::multiset<std::string> want(sample.candidates.begin(), sample.candidates.end());
    std::multiset<std::string> got(ids.begin(), ids.end());
    if (want != got) {
      throw Error(ErrorCode::MalformedLine,
                  "prediction line " + std::to_string(idx + 1) +
                      " is not a permutation of the sample's candidates");
    }
    Ranking ranking;
    ranking.sample_id = sample.sample_id;
    ranking.candidates = std::move(ids);
    for (size_t i = 0; i < ranking.candidates.size(); ++i) {
      ranking.scores.push_back(static_cast<double>(ranking.candidates.size() - i));
    }
    rankings.emplace_back(std::move(ranking));
    ++idx;
  }
  if (idx != dataset.samples.size()) {
    throw Error(ErrorCode::CountMismatch,
                "prediction file has " + std::to_string(idx) + " lines, dataset has " +
                    std::to_string(dataset.samples.size()));
  }
  return rankings;
}

// ---------------------------------------------------------------------------
// Cache lock
// ---------------------------------------------------------------------------

CacheLock::CacheLock(const std::filesystem::path& cache_root) {
  std::filesystem::create_directories(cache_root);
  const auto lock_path = cache_root / ".lock";
  fd_ = ::open(lock_path.c_str(), O_CREAT | O_RDWR, 0644);
  if (fd_ < 0) {
    throw Error(ErrorCode::IoError, "cannot open lock file " + lock_path.string());
  }
  if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(fd_);
    fd_ = -1;
    throw Error(ErrorCode::IoError,
                "another pipeline invocation holds the cache lock at " +
                    lock_path.string());
  }
}

CacheLock::~CacheLock() {
  if (fd_ >= 0) {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
}

}  // namespace vwsd
