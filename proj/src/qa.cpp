#include "vwsd/qa.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

#include "vwsd/digest.hpp"
#include "vwsd/errors.hpp"

namespace vwsd {

using nlohmann::json;

namespace {

// Exact prompt building blocks. The apostrophe in the think suffix is
// U+2019, not ASCII.
constexpr const char* kThinkSuffix = "A: Let’s think step by step. ";
constexpr const char* kNoCotSuffix = "A: ";
constexpr const char* kFollowup = "Therefore, among A through J, the answer is ";

bool is_beam_mode(QaMode mode) {
  return mode == QaMode::think_beam || mode == QaMode::no_cot_beam;
}

bool is_think_mode(QaMode mode) {
  return mode == QaMode::think_greedy || mode == QaMode::think_beam;
}

}  // namespace

const char* qa_mode_name(QaMode mode) {
  switch (mode) {
    case QaMode::think_greedy: return "think_greedy";
    case QaMode::think_beam: return "think_beam";
    case QaMode::no_cot_greedy: return "no_cot_greedy";
    case QaMode::no_cot_beam: return "no_cot_beam";
    case QaMode::cot_followup: return "cot_followup";
  }
  return "?";
}

QaPrompt build_qa_prompt(const std::string& phrase,
                         const std::vector<CaptionSet>& candidate_captions, QaMode mode) {
  if (mode == QaMode::cot_followup) {
    throw Error(ErrorCode::InvalidArgument,
                "cot_followup is rendered by build_cot_followup");
  }
  if (candidate_captions.size() != kCandidatesPerSample) {
    throw Error(ErrorCode::CaptionCountMismatch,
                "need captions for exactly 10 candidates, got " +
                    std::to_string(candidate_captions.size()));
  }

  QaPrompt prompt;
  prompt.mode = mode;
  prompt.phrase = phrase;
  for (const auto& set : candidate_captions) {
    if (set.captions.empty()) {
      throw Error(ErrorCode::CaptionCountMismatch,
                  "candidate '" + set.image_id + "' has no captions");
    }
    if (!is_beam_mode(mode)) {
      if (set.captions.size() != 1) {
        throw Error(ErrorCode::CaptionCountMismatch,
                    "greedy QA needs exactly one caption per candidate, '" +
                        set.image_id + "' has " + std::to_string(set.captions.size()));
      }
      prompt.choices.push_back(set.captions.front());
    } else {
      std::string joined;
      for (size_t i = 0; i < set.captions.size(); ++i) {
        if (i > 0) joined += ", ";
        joined += set.captions[i];
      }
      prompt.choices.push_back(std::move(joined));
    }
  }

  std::string text = "Q: What is the most appropriate ";
  text += is_beam_mode(mode) ? "group of captions" : "caption";
  text += " for the " + phrase + "?\nAnswer choices:";
  for (size_t i = 0; i < prompt.choices.size(); ++i) {
    text += " (";
    text += static_cast<char>('A' + i);
    text += ") ";
    text += prompt.choices[i];
  }
  text += "\n";
  text += is_think_mode(mode) ? kThinkSuffix : kNoCotSuffix;
  prompt.rendered = std::move(text);
  return prompt;
}

QaPrompt build_cot_followup(const QaPrompt& think_prompt, const std::string& reasoning) {
  if (!is_think_mode(think_prompt.mode)) {
    throw Error(ErrorCode::InvalidArgument, "follow-up requires a think prompt");
  }
  QaPrompt followup;
  followup.mode = QaMode::cot_followup;
  followup.phrase = think_prompt.phrase;
  followup.choices = think_prompt.choices;
  followup.rendered = think_prompt.rendered + reasoning + "\n" + kFollowup;
  return followup;
}

std::optional<char> parse_answer_letter(const std::string& text) {
  // rule 1: first "(X)" with X in A..J
  for (size_t i = 0; i + 2 < text.size(); ++i) {
    if (text[i] == '(' && text[i + 2] == ')' && text[i + 1] >= 'A' && text[i + 1] <= 'J') {
      return text[i + 1];
    }
  }
  // rule 2: standalone capital A..J after "answer is"
  const size_t anchor = text.find("answer is");
  if (anchor == std::string::npos) return std::nullopt;
  auto is_word_char = [](unsigned char c) { return std::isalnum(c) != 0; };
  for (size_t i = anchor + 9; i < text.size(); ++i) {
    const char c = text[i];
    if (c < 'A' || c > 'J') continue;
    const bool left_ok = i == 0 || !is_word_char(static_cast<unsigned char>(text[i - 1]));
    const bool right_ok =
        i + 1 >= text.size() || !is_word_char(static_cast<unsigned char>(text[i + 1]));
    if (left_ok && right_ok) return c;
  }
  return std::nullopt;
}

QaCache::QaCache(std::filesystem::path path) : path_(std::move(path)) {
  if (path_.empty() || !std::filesystem::exists(path_)) return;
  std::ifstream in(path_);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json rec = json::parse(line, nullptr, false);
    if (rec.is_discarded()) continue;
    entries_[rec.value("key", "")] = rec.value("response", "");
  }
}

namespace {

std::string qa_cache_key(const std::string& llm_id, const std::string& prompt,
                         const LlmParams& params) {
  return llm_id + "|" + std::to_string(params.max_tokens) + "|" +
         std::to_string(params.temperature) + "|" + sha256_hex(prompt);
}

}  // namespace

std::optional<std::string> QaCache::lookup(const std::string& llm_id,
                                           const std::string& prompt,
                                           const LlmParams& params) const {
  std::lock_guard<std::mutex> lock(mutex_);
  auto it = entries_.find(qa_cache_key(llm_id, prompt, params));
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void QaCache::store(const std::string& llm_id, const std::string& prompt,
                    const LlmParams& params, const std::string& response) {
  std::lock_guard<std::mutex> lock(mutex_);
  const std::string key = qa_cache_key(llm_id, prompt, params);
  auto [it, inserted] = entries_.emplace(key, response);
  if (!inserted || path_.empty()) return;
  json rec;
  rec["key"] = key;
  rec["response"] = response;
  std::ofstream out(path_, std::ios::app);
  out << rec.dump() << '\n';
}

namespace {

std::string cached_complete(CompletionBackend& llm, const std::string& prompt,
                            const LlmParams& params, QaCache& cache,
                            const RetryPolicy& retry) {
  if (auto hit = cache.lookup(llm.llm_id(), prompt, params)) return *hit;
  const std::string response = complete_with_retries(llm, prompt, params, retry);
  cache.store(llm.llm_id(), prompt, params, response);
  return response;
}

}  // namespace

QaResult run_cot(CompletionBackend& llm, int sample_id, const std::string& phrase,
                 const std::vector<CaptionSet>& candidate_captions, CaptionMode base,
                 const LlmParams& params, QaCache& cache, const RetryPolicy& retry) {
  const QaMode mode =
      base == CaptionMode::greedy ? QaMode::think_greedy : QaMode::think_beam;
  const QaPrompt think = build_qa_prompt(phrase, candidate_captions, mode);

  QaResult result;
  result.sample_id = sample_id;
  result.mode = mode;

  const std::string reasoning = cached_complete(llm, think.rendered, params, cache, retry);
  result.prompts.push_back(think.rendered);
  result.responses.push_back(reasoning);
  result.reasoning = reasoning;

  const QaPrompt followup = build_cot_followup(think, reasoning);
  const std::string answer = cached_complete(llm, followup.rendered, params, cache, retry);
  result.prompts.push_back(followup.rendered);
  result.responses.push_back(answer);
  result.raw_response = answer;
  result.answer_letter = parse_answer_letter(answer);
  return result;
}

QaResult run_no_cot(CompletionBackend& llm, int sample_id, const std::string& phrase,
                    const std::vector<CaptionSet>& candidate_captions, CaptionMode base,
                    const LlmParams& params, QaCache& cache, const RetryPolicy& retry) {
  const QaMode mode =
      base == CaptionMode::greedy ? QaMode::no_cot_greedy : QaMode::no_cot_beam;
  const QaPrompt prompt = build_qa_prompt(phrase, candidate_captions, mode);

  QaResult result;
  result.sample_id = sample_id;
  result.mode = mode;
  const std::string answer = cached_complete(llm, prompt.rendered, params, cache, retry);
  result.prompts.push_back(prompt.rendered);
  result.responses.push_back(answer);
  result.raw_response = answer;
  result.answer_letter = parse_answer_letter(answer);
  return result;
}

std::optional<Ranking> qa_to_ranking(const QaResult& result,
                                     const std::vector<std::string>& candidates) {
  if (!result.answer_letter) return std::nullopt;
  const size_t chosen = static_cast<size_t>(*result.answer_letter - 'A');
  if (chosen >= candidates.size()) return std::nullopt;

  Ranking ranking;
  ranking.sample_id = result.sample_id;
  ranking.candidates.push_back(candidates[chosen]);
  ranking.scores.push_back(1.0);
  for (size_t i = 0; i < candidates.size(); ++i) {
    if (i == chosen) continue;
    ranking.candidates.push_back(candidates[i]);
    ranking.scores.push_back(0.0);
  }
  return ranking;
}

}  // namespace vwsd
