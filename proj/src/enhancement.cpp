#include "vwsd/enhancement.hpp"

#include <chrono>
#include <fstream>

#include <nlohmann/json.hpp>

#include "vwsd/errors.hpp"
#include "vwsd/parallel.hpp"

namespace vwsd {

using nlohmann::json;

namespace {

constexpr const char* kPlaceholder = "<phrase>";

std::string iso_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

bool is_blank(const std::string& s) {
  for (unsigned char c : s) {
    if (!std::isspace(c)) return false;
  }
  return true;
}

}  // namespace

std::string render_template(const PromptTemplate& tmpl, const std::string& phrase) {
  std::string out = tmpl.pattern;
  size_t pos = 0;
  const size_t placeholder_len = std::string(kPlaceholder).size();
  while ((pos = out.find(kPlaceholder, pos)) != std::string::npos) {
    out.replace(pos, placeholder_len, phrase);
    pos += phrase.size();
  }
  return out;
}

const std::vector<PromptTemplate>& builtin_templates() {
  static const std::vector<PromptTemplate> templates = {
      {"exact", "<phrase> "},
      {"what_is", "What is <phrase>?"},
      {"describe", "Describe <phrase>."},
      {"meaning_of", "What is the meaning of <phrase>?"},
      {"would_say", "To describe <phrase> I would say that"},
      {"could_describe", "I could describe <phrase> as "},
      {"write_description", "Write a description of <phrase>."},
  };
  return templates;
}

std::optional<PromptTemplate> find_template(const std::string& name) {
  for (const auto& t : builtin_templates()) {
    if (t.name == name) return t;
  }
  return std::nullopt;
}

EnhancementCache::Key EnhancementCache::make_key(const std::string& llm_id,
                                                 const std::string& template_name,
                                                 const std::string& phrase,
                                                 const LlmParams& params) {
  return {llm_id, template_name, phrase, params.max_tokens, params.temperature};
}

EnhancementCache::EnhancementCache(std::filesystem::path path) : path_(std::move(path)) {
  if (path_.empty() || !std::filesystem::exists(path_)) return;
  std::ifstream in(path_);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json rec = json::parse(line, nullptr, false);
    if (rec.is_discarded()) continue;
    LlmParams p;
    p.max_tokens = rec.value("max_tokens", 0);
    p.temperature = rec.value("temperature", 0.0);
    entries_[make_key(rec.value("llm_id", ""), rec.value("template", ""),
                      rec.value("phrase", ""), p)] = rec.value("generation", "");
  }
}

std::optional<std::string> EnhancementCache::lookup(const std::string& llm_id,
                                                    const std::string& template_name,
                                                    const std::string& phrase,
                                                    const LlmParams& params) const {
  std::lock_guard<std::mutex> lock(mutex_);
  auto it = entries_.find(make_key(llm_id, template_name, phrase, params));
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void EnhancementCache::store(const std::string& llm_id, const std::string& template_name,
                             const std::string& phrase, const LlmParams& params,
                             const std::string& generation) {
  std::lock_guard<std::mutex> lock(mutex_);
  auto [it, inserted] = entries_.emplace(make_key(llm_id, template_name, phrase, params),
                                         generation);
  if (!inserted || path_.empty()) return;
  json rec;
  rec["llm_id"] = llm_id;
  rec["template"] = template_name;
  rec["phrase"] = phrase;
  rec["max_tokens"] = params.max_tokens;
  rec["temperature"] = params.temperature;
  rec["generation"] = generation;
  rec["timestamp"] = iso_timestamp();
  std::ofstream out(path_, std::ios::app);
  out << rec.dump() << '\n';
}

EnhancedPhrase enhance_phrase(CompletionBackend& llm, const PromptTemplate& tmpl,
                              const std::string& phrase, const LlmParams& params,
                              EnhancementCache& cache, const RetryPolicy& retry) {
  if (is_blank(phrase)) {
    throw Error(ErrorCode::EmptyInput, "cannot enhance a blank phrase");
  }
  EnhancedPhrase result;
  result.phrase = phrase;
  result.template_name = tmpl.name;
  result.rendered_prompt = render_template(tmpl, phrase);
  result.llm_id = llm.llm_id();

  if (auto hit = cache.lookup(llm.llm_id(), tmpl.name, phrase, params)) {
    result.generation = *hit;
  } else {
    result.generation = complete_with_retries(llm, result.rendered_prompt, params, retry);
    cache.store(llm.llm_id(), tmpl.name, phrase, params, result.generation);
  }
  result.enhanced_text = result.rendered_prompt + result.generation;
  return result;
}

EnhanceSplitResult enhance_split(CompletionBackend& llm,
                                 const std::vector<PromptTemplate>& templates,
                                 const Dataset& dataset, const LlmParams& params,
                                 EnhancementCache& cache, int parallelism,
                                 const RetryPolicy& retry) {
  EnhanceSplitResult result;
  const size_t n_cells = templates.size() * dataset.samples.size();
  std::vector<EnhancedPhrase> cells(n_cells);
  std::vector<std::string> failures(n_cells);

  run_indexed(n_cells, parallelism, [&](size_t idx) {
    const auto& tmpl = templates[idx / dataset.samples.size()];
    const auto& sample = dataset.samples[idx % dataset.samples.size()];
    try {
      cells[idx] = enhance_phrase(llm, tmpl, sample.phrase, params, cache, retry);
    } catch (const Error& e) {
      EnhancedPhrase fallback;
      fallback.phrase = sample.phrase;
      fallback.template_name = tmpl.name;
      fallback.rendered_prompt = render_template(tmpl, sample.phrase);
      fallback.enhanced_text = sample.phrase;
      fallback.llm_id = llm.llm_id();
      fallback.fallback = true;
      cells[idx] = std::move(fallback);
      failures[idx] = tmpl.name + "/" + std::to_string(sample.sample_id) + ": " + e.what();
    }
  });

  for (size_t idx = 0; idx < n_cells; ++idx) {
    const auto& tmpl = templates[idx / dataset.samples.size()];
    const auto& sample = dataset.samples[idx % dataset.samples.size()];
    result.cells[{tmpl.name, sample.sample_id}] = std::move(cells[idx]);
    if (!failures[idx].empty()) result.failures.push_back(std::move(failures[idx]));
  }
  return result;
}

}  // namespace vwsd
