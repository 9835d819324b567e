#pragma once

#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vwsd/dataset.hpp"
#include "vwsd/llm.hpp"

namespace vwsd {

// A named prompt pattern with the `<phrase>` placeholder.
struct PromptTemplate {
  std::string name;
  std::string pattern;
};

// Exact string substitution of every placeholder occurrence.
std::string render_template(const PromptTemplate& tmpl, const std::string& phrase);

// The seven built-in enhancement prompts, in registry order:
// exact, what_is, describe, meaning_of, would_say, could_describe,
// write_description.
const std::vector<PromptTemplate>& builtin_templates();

std::optional<PromptTemplate> find_template(const std::string& name);

// An LLM-expanded phrase. The enhanced text keeps the rendered prompt as its
// prefix, mirroring how the expansions are consumed downstream; an empty
// generation records a refusal rather than dropping the cell.
struct EnhancedPhrase {
  std::string phrase;
  std::string template_name;
  std::string rendered_prompt;
  std::string generation;
  std::string enhanced_text;  // rendered_prompt + generation
  std::string llm_id;
  bool fallback = false;  // generation failed; enhanced_text is the raw phrase
};

// Append-only JSONL cache of completions, keyed by
// (llm_id, template, phrase, max_tokens, temperature). Thread-safe appends.
class EnhancementCache {
 public:
  // In-memory only when path is empty.
  explicit EnhancementCache(std::filesystem::path path = {});

  std::optional<std::string> lookup(const std::string& llm_id,
                                    const std::string& template_name,
                                    const std::string& phrase, const LlmParams& params) const;

  void store(const std::string& llm_id, const std::string& template_name,
             const std::string& phrase, const LlmParams& params,
             const std::string& generation);

  size_t size() const { return entries_.size(); }

 private:
  using Key = std::tuple<std::string, std::string, std::string, int, double>;
  static Key make_key(const std::string& llm_id, const std::string& template_name,
                      const std::string& phrase, const LlmParams& params);

  std::filesystem::path path_;
  std::map<Key, std::string> entries_;
  mutable std::mutex mutex_;
};

// One phrase through one template. A cache hit short-circuits the backend.
EnhancedPhrase enhance_phrase(CompletionBackend& llm, const PromptTemplate& tmpl,
                              const std::string& phrase, const LlmParams& params,
                              EnhancementCache& cache,
                              const RetryPolicy& retry = RetryPolicy{});

// Batch enhancement over a whole split. Permanent per-cell failures fall back
// to the original phrase (flagged) instead of aborting; the report lists them.
struct EnhanceSplitResult {
  // (template_name, sample_id) -> enhancement
  std::map<std::pair<std::string, int>, EnhancedPhrase> cells;
  std::vector<std::string> failures;  // human-readable, one per fallback cell
};

EnhanceSplitResult enhance_split(CompletionBackend& llm,
                                 const std::vector<PromptTemplate>& templates,
                                 const Dataset& dataset, const LlmParams& params,
                                 EnhancementCache& cache, int parallelism = 4,
                                 const RetryPolicy& retry = RetryPolicy{});

}  // namespace vwsd
