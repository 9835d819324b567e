#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

namespace vwsd {

// Decoding parameters for one completion call. Greedy decoding with a hard
// 100-token cap by default; temperature 0 means deterministic wherever the
// provider honors it.
struct LlmParams {
  int max_tokens = 100;
  double temperature = 0.0;
  std::string llm_id;
};

// Minimal completion contract every LLM adapter satisfies. complete() takes
// the full prompt and returns only the continuation.
class CompletionBackend {
 public:
  virtual ~CompletionBackend() = default;
  virtual const std::string& llm_id() const = 0;
  // Throws BackendUnavailable or RateLimited.
  virtual std::string complete(const std::string& prompt, const LlmParams& params) = 0;
};

struct RetryPolicy {
  int max_attempts = 3;
  int backoff_ms = 250;  // doubled per retry; 0 in tests
};

// Retries RateLimited with backoff and BackendUnavailable a bounded number
// of times, then rethrows the last failure.
std::string complete_with_retries(CompletionBackend& backend, const std::string& prompt,
                                  const LlmParams& params, const RetryPolicy& policy);

// Test backend: canned responses keyed by exact prompt, with an optional
// fallback; counts calls so cache contracts can be asserted. Safe under the
// bounded parallelism the batch operations use.
class ScriptedCompletionBackend final : public CompletionBackend {
 public:
  explicit ScriptedCompletionBackend(std::string llm_id = "scripted")
      : llm_id_(std::move(llm_id)) {}

  void respond(const std::string& prompt, const std::string& response) {
    std::lock_guard<std::mutex> lock(mutex_);
    canned_[prompt] = response;
  }
  void set_fallback(std::function<std::string(const std::string&)> fn) {
    std::lock_guard<std::mutex> lock(mutex_);
    fallback_ = std::move(fn);
  }
  void fail_next(int times) {
    std::lock_guard<std::mutex> lock(mutex_);
    fail_next_ = times;
  }

  int calls() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return calls_;
  }

  const std::string& llm_id() const override { return llm_id_; }
  std::string complete(const std::string& prompt, const LlmParams& params) override;

 private:
  std::string llm_id_;
  std::map<std::string, std::string> canned_;
  std::function<std::string(const std::string&)> fallback_;
  int fail_next_ = 0;
  int calls_ = 0;
  mutable std::mutex mutex_;
};

// Deterministic pseudo-text generator used by the mock pipeline: the
// continuation is a seeded function of the prompt alone.
std::unique_ptr<CompletionBackend> hash_stub_llm(uint64_t seed);

// Adapter for completion-style HTTP APIs (OpenAI-compatible). The API key is
// read from the named environment variable at call time; chat-style
// endpoints receive the prompt as a single user message.
struct HttpLlmConfig {
  std::string base_url = "https://api.openai.com";
  std::string path = "/v1/completions";
  std::string model;
  std::string api_key_env = "OPENAI_API_KEY";
  bool chat = false;
  int timeout_sec = 60;
};

std::unique_ptr<CompletionBackend> http_llm(const HttpLlmConfig& config);

}  // namespace vwsd
