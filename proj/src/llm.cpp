#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "vwsd/llm.hpp"

#include <chrono>
#include <cstdlib>
#include <mutex>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "vwsd/detrng.hpp"
#include "vwsd/errors.hpp"

namespace vwsd {

using nlohmann::json;

std::string complete_with_retries(CompletionBackend& backend, const std::string& prompt,
                                  const LlmParams& params, const RetryPolicy& policy) {
  int backoff = policy.backoff_ms;
  for (int attempt = 1;; ++attempt) {
    try {
      return backend.complete(prompt, params);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::RateLimited && e.code() != ErrorCode::BackendUnavailable) {
        throw;
      }
      if (attempt >= policy.max_attempts) throw;
      if (backoff > 0) {
        std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
        backoff *= 2;
      }
    }
  }
}

std::string ScriptedCompletionBackend::complete(const std::string& prompt,
                                                const LlmParams& params) {
  (void)params;
  std::function<std::string(const std::string&)> fallback;
  {
    std::lock_guard<std::mutex> lock(mutex_);
    ++calls_;
    if (fail_next_ > 0) {
      --fail_next_;
      throw Error(ErrorCode::BackendUnavailable, "scripted failure");
    }
    auto it = canned_.find(prompt);
    if (it != canned_.end()) return it->second;
    fallback = fallback_;
  }
  if (fallback) return fallback(prompt);
  throw Error(ErrorCode::BackendUnavailable, "no scripted response for prompt");
}

namespace {

// Fixed vocabulary for the hash stub; keeps generations legible in fixtures.
const char* kStubWords[] = {
    "amber",  "basalt", "cedar",  "dune",   "ember",  "fjord",  "garnet", "harbor",
    "indigo", "juniper", "kelp",  "lattice", "marble", "nectar", "onyx",  "prairie",
};

class HashStubBackend final : public CompletionBackend {
 public:
  explicit HashStubBackend(uint64_t seed)
      : seed_(seed), llm_id_("stub-llm/s" + std::to_string(seed)) {}

  const std::string& llm_id() const override { return llm_id_; }

  std::string complete(const std::string& prompt, const LlmParams& params) override {
    uint64_t state = fnv1a64(prompt, 0x632a6f7368ull ^ seed_);

    // Multiple-choice prompts get an answer-shaped reply so downstream
    // letter parsing sees realistic traffic; one in seven abstains.
    const bool multiple_choice = prompt.find("Answer choices:") != std::string::npos;
    const bool extraction =
        prompt.find("Therefore, among A through J, the answer is") != std::string::npos;
    if (extraction || (multiple_choice && prompt.size() >= 4 &&
                       prompt.compare(prompt.size() - 4, 4, "\nA: ") == 0)) {
      const uint64_t roll = splitmix64(state);
      if (roll % 7 == 0) {
        return "not applicable without more information.";
      }
      const char letter = static_cast<char>('A' + splitmix64(state) % 10);
      std::string out = extraction ? "(" : "The most appropriate choice is (";
      out += letter;
      out += ") ";
      out += kStubWords[splitmix64(state) % (sizeof(kStubWords) / sizeof(kStubWords[0]))];
      out += ".";
      return out;
    }

    const int word_budget = std::max(1, std::min(params.max_tokens / 8, 12));
    std::string out;
    for (int i = 0; i < word_budget; ++i) {
      uint64_t w = splitmix64(state);
      out += (i == 0 ? "" : " ");
      out += kStubWords[w % (sizeof(kStubWords) / sizeof(kStubWords[0]))];
    }
    return out;
  }

 private:
  uint64_t seed_;
  std::string llm_id_;
};

class HttpBackend final : public CompletionBackend {
 public:
  explicit HttpBackend(HttpLlmConfig config)
      : config_(std::move(config)), llm_id_(config_.model.empty() ? "http" : config_.model) {}

  const std::string& llm_id() const override { return llm_id_; }

  std::string complete(const std::string& prompt, const LlmParams& params) override {
    json body;
    body["model"] = config_.model;
    body["max_tokens"] = params.max_tokens;
    body["temperature"] = params.temperature;
    if (config_.chat) {
      body["messages"] = json::array({{{"role", "user"}, {"content", prompt}}});
    } else {
      body["prompt"] = prompt;
    }

    httplib::Client client(config_.base_url);
    client.set_read_timeout(config_.timeout_sec, 0);
    httplib::Headers headers;
    if (const char* key = std::getenv(config_.api_key_env.c_str())) {
      headers.emplace("Authorization", std::string("Bearer ") + key);
    }
    auto res = client.Post(config_.path, headers, body.dump(), "application/json");
    if (!res) {
      throw Error(ErrorCode::BackendUnavailable, "no response from " + config_.base_url);
    }
    if (res->status == 429) {
      throw Error(ErrorCode::RateLimited, "provider returned 429");
    }
    if (res->status < 200 || res->status >= 300) {
      throw Error(ErrorCode::BackendUnavailable,
                  "provider returned status " + std::to_string(res->status));
    }
    json reply = json::parse(res->body, nullptr, false);
    if (reply.is_discarded() || !reply.contains("choices") || reply["choices"].empty()) {
      throw Error(ErrorCode::BackendUnavailable, "malformed completion response");
    }
    const json& choice = reply["choices"][0];
    if (config_.chat) return choice.at("message").at("content").get<std::string>();
    return choice.at("text").get<std::string>();
  }

 private:
  HttpLlmConfig config_;
  std::string llm_id_;
};

}  // namespace

std::unique_ptr<CompletionBackend> hash_stub_llm(uint64_t seed) {
  return std::make_unique<HashStubBackend>(seed);
}

std::unique_ptr<CompletionBackend> http_llm(const HttpLlmConfig& config) {
  return std::make_unique<HttpBackend>(config);
}

}  // namespace vwsd
