#pragma once

#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "vwsd/captions.hpp"
#include "vwsd/llm.hpp"
#include "vwsd/scoring.hpp"

namespace vwsd {

enum class QaMode { think_greedy, think_beam, no_cot_greedy, no_cot_beam, cot_followup };

const char* qa_mode_name(QaMode mode);

// A multiple-choice question over the ten candidate captions, labeled (A)
// through (J) in candidate order.
struct QaPrompt {
  QaMode mode = QaMode::think_greedy;
  std::string phrase;
  std::vector<std::string> choices;  // exactly 10 choice texts
  std::string rendered;
};

// Renders the question for a phrase from per-candidate caption sets, in
// candidate order. Greedy modes require exactly one caption per candidate;
// beam modes join each candidate's captions with ", ".
// Throws CaptionCountMismatch.
QaPrompt build_qa_prompt(const std::string& phrase,
                         const std::vector<CaptionSet>& candidate_captions, QaMode mode);

// Second-stage prompt: the think prompt, the model's reasoning, then the
// verbatim answer-extraction line.
QaPrompt build_cot_followup(const QaPrompt& think_prompt, const std::string& reasoning);

// First unambiguous answer letter in a model response:
//   1. a parenthesized capital "(X)" with X in A..J, else
//   2. a standalone capital A..J delimited by non-alphanumerics after the
//      phrase "answer is", else
//   absent. Never throws.
std::optional<char> parse_answer_letter(const std::string& text);

struct QaResult {
  int sample_id = 0;
  QaMode mode = QaMode::think_greedy;
  std::optional<std::string> reasoning;  // CoT only
  std::optional<char> answer_letter;     // absent = abstention
  std::string raw_response;              // final-stage response
  std::vector<std::string> prompts;      // every prompt sent, in order
  std::vector<std::string> responses;    // every response received, in order
};

// Prompt-hash keyed completion cache so each CoT stage replays independently.
class QaCache {
 public:
  explicit QaCache(std::filesystem::path path = {});
  std::optional<std::string> lookup(const std::string& llm_id, const std::string& prompt,
                                    const LlmParams& params) const;
  void store(const std::string& llm_id, const std::string& prompt, const LlmParams& params,
             const std::string& response);

 private:
  std::filesystem::path path_;
  std::map<std::string, std::string> entries_;
  mutable std::mutex mutex_;
};

// Two-stage chain-of-thought run: the think prompt elicits reasoning, the
// follow-up extracts the answer letter.
QaResult run_cot(CompletionBackend& llm, int sample_id, const std::string& phrase,
                 const std::vector<CaptionSet>& candidate_captions, CaptionMode base,
                 const LlmParams& params, QaCache& cache,
                 const RetryPolicy& retry = RetryPolicy{});

// Single-stage run without chain-of-thought.
QaResult run_no_cot(CompletionBackend& llm, int sample_id, const std::string& phrase,
                    const std::vector<CaptionSet>& candidate_captions, CaptionMode base,
                    const LlmParams& params, QaCache& cache,
                    const RetryPolicy& retry = RetryPolicy{});

// Turns a QA choice into a full ranking: the chosen candidate first, the
// rest in candidate order. Abstentions yield no ranking.
std::optional<Ranking> qa_to_ranking(const QaResult& result,
                                     const std::vector<std::string>& candidates);

}  // namespace vwsd
