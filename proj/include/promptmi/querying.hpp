#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "promptmi/corpus.hpp"

namespace promptmi {

struct ModelEndpointConfig {
  std::string model_id;
  std::string endpoint_url;
  /// Name of the environment variable holding the API key. Keys are never
  /// taken from flags or config files.
  std::string api_key_env = "PROMPTMI_API_KEY";
  double temperature = 1.0;
  int max_tokens = 64;
  int k_samples = 1;
  std::chrono::milliseconds request_timeout{60000};
  std::size_t max_parallel = 4;
  int max_retries = 3;
  std::chrono::milliseconds initial_backoff{500};
  int max_rate_limited = 8;
  /// Wire adapter. Only "chat-completions" ships.
  std::string provider = "chat-completions";

  void validate() const;
};

struct SamplingPlan {
  /// Prompt sent in the system role. Empty for a third-party service, which
  /// applies its own hidden prompt; only the user turn is sent then.
  std::optional<SystemPrompt> system_prompt;
  /// Identifier stored in records when system_prompt is empty.
  std::string system_prompt_label = "deployed";
  std::vector<TaskPrompt> task_prompts;
  int k = 1;
  ModelEndpointConfig endpoint;

  std::string record_system_prompt_id() const;
  std::size_t total_requests() const { return task_prompts.size() * static_cast<std::size_t>(k); }
  void validate() const;
};

struct SamplingSummary {
  /// Every record of the plan, ordered by task prompt then sample index.
  std::vector<GenerationRecord> records;
  std::size_t requests_issued = 0;
  std::size_t skipped_existing = 0;
  std::size_t retries = 0;
};

using LogFn = std::function<void(std::string_view)>;

/// {"model", "messages": [{"role": "system", ...}, {"role": "user", ...}],
///  "temperature", "max_tokens", "n": 1}
std::string render_chat_request(std::string_view system_text, std::string_view user_text,
                                const ModelEndpointConfig& cfg);

/// Same shape with only the user message.
std::string render_user_request(std::string_view user_text, const ModelEndpointConfig& cfg);

struct ChatReply {
  std::string text;
  std::int64_t token_count = 0;
};

/// Reads choices[0].message.content and usage.completion_tokens (whitespace
/// token count when usage is absent).
ChatReply parse_chat_response(std::string_view body, const ModelEndpointConfig& cfg);

std::int64_t count_whitespace_tokens(std::string_view text);

/// Samples k responses per task prompt, one request per sample, appending
/// each record to `corpus_path` as it arrives. Records already present are
/// skipped, so an interrupted run resumes where it stopped.
SamplingSummary sample_generations(const SamplingPlan& plan, const std::filesystem::path& corpus_path,
                                   const LogFn& log = {});

}  // namespace promptmi
