#include "promptmi/querying.hpp"

#include <atomic>
#include <cstdlib>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "json_io.hpp"
#include "promptmi/error.hpp"
#include "promptmi/http.hpp"

namespace promptmi {

void ModelEndpointConfig::validate() const {
  if (model_id.empty()) throw ConfigError("model_id is required");
  if (endpoint_url.empty()) throw ConfigError("endpoint URL is required");
  parse_url(endpoint_url);
  if (!(temperature >= 0.0)) throw ConfigError("temperature must be nonnegative");
  if (max_tokens < 1) throw ConfigError("max_tokens must be positive");
  if (k_samples < 1) throw ConfigError("k_samples must be positive");
  if (max_parallel < 1) throw ConfigError("max_parallel must be positive");
  if (max_retries < 0) throw ConfigError("max_retries must be nonnegative");
  if (provider != "chat-completions")
    throw ConfigError("unsupported provider adapter '" + provider + "'");
}

std::string SamplingPlan::record_system_prompt_id() const {
  return system_prompt ? system_prompt->id : system_prompt_label;
}

void SamplingPlan::validate() const {
  endpoint.validate();
  if (k < 1) throw ConfigError("k must be positive");
  if (task_prompts.empty()) throw ConfigError("sampling plan has no task prompts");
  if (system_prompt && system_prompt->text.empty()) throw ConfigError("system prompt text is empty");
  if (!system_prompt && system_prompt_label.empty())
    throw ConfigError("system prompt label is empty");
  std::set<std::string> ids;
  for (const auto& t : task_prompts) {
    if (t.text.empty()) throw ConfigError("task prompt '" + t.id + "' has empty text");
    if (!ids.insert(t.id).second) throw ConfigError("duplicate task prompt id '" + t.id + "'");
  }
}

namespace {

detail::ojson base_request(const ModelEndpointConfig& cfg) {
  if (cfg.provider != "chat-completions")
    throw ConfigError("unsupported provider adapter '" + cfg.provider + "'");
  detail::ojson j;
  j["model"] = cfg.model_id;
  j["messages"] = detail::ojson::array();
  return j;
}

detail::ojson message(std::string_view role, std::string_view content) {
  detail::ojson m;
  m["role"] = role;
  m["content"] = content;
  return m;
}

std::string finish_request(detail::ojson j, const ModelEndpointConfig& cfg) {
  j["temperature"] = cfg.temperature;
  j["max_tokens"] = cfg.max_tokens;
  j["n"] = 1;
  return j.dump();
}

}  // namespace

std::string render_chat_request(std::string_view system_text, std::string_view user_text,
                                const ModelEndpointConfig& cfg) {
  if (system_text.empty()) throw ConfigError("system text is empty");
  if (user_text.empty()) throw ConfigError("user text is empty");
  auto j = base_request(cfg);
  j["messages"].push_back(message("system", system_text));
  j["messages"].push_back(message("user", user_text));
  return finish_request(std::move(j), cfg);
}

std::string render_user_request(std::string_view user_text, const ModelEndpointConfig& cfg) {
  if (user_text.empty()) throw ConfigError("user text is empty");
  auto j = base_request(cfg);
  j["messages"].push_back(message("user", user_text));
  return finish_request(std::move(j), cfg);
}

std::int64_t count_whitespace_tokens(std::string_view text) {
  std::int64_t count = 0;
  bool in_token = false;
  for (char c : text) {
    const bool space = c == ' ' || c == '\t' || c == '\n' || c == '\r';
    if (!space && !in_token) ++count;
    in_token = !space;
  }
  return count;
}

ChatReply parse_chat_response(std::string_view body, const ModelEndpointConfig& cfg) {
  if (cfg.provider != "chat-completions")
    throw ConfigError("unsupported provider adapter '" + cfg.provider + "'");
  nlohmann::json j;
  try {
    j = detail::parse_object(body);
  } catch (const Error& e) {
    throw SamplingError(std::string("malformed chat response: ") + e.what());
  }
  ChatReply reply;
  try {
    const auto& choices = j.at("choices");
    if (!choices.is_array() || choices.empty()) throw SamplingError("response has no choices");
    const auto& content = choices[0].at("message").at("content");
    reply.text = content.is_null() ? std::string() : content.get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw SamplingError(std::string("malformed chat response: ") + e.what());
  }
  if (auto usage = j.find("usage"); usage != j.end() && usage->contains("completion_tokens"))
    reply.token_count = (*usage)["completion_tokens"].get<std::int64_t>();
  else
    reply.token_count = count_whitespace_tokens(reply.text);
  return reply;
}

SamplingSummary sample_generations(const SamplingPlan& plan, const std::filesystem::path& corpus_path,
                                   const LogFn& log) {
  plan.validate();
  const auto say = [&](const std::string& msg) {
    if (log) log(msg);
  };
  const std::string sp_id = plan.record_system_prompt_id();
  const ModelEndpointConfig& ep = plan.endpoint;

  CorpusManifest manifest;
  manifest.n_task_prompts = static_cast<int>(plan.task_prompts.size());
  manifest.k_samples = plan.k;
  manifest.model_id = ep.model_id;

  std::map<GenerationRecord::Key, GenerationRecord> have;
  std::error_code ec;
  if (std::filesystem::exists(corpus_path, ec) && std::filesystem::file_size(corpus_path, ec) > 0) {
    auto existing = read_corpus(corpus_path);
    for (auto& r : existing.records) have.emplace(r.key(), std::move(r));
  }
  CorpusAppender appender(corpus_path, manifest);

  struct Job {
    std::size_t task;
    int sample;
  };
  std::vector<Job> jobs;
  SamplingSummary summary;
  for (std::size_t t = 0; t < plan.task_prompts.size(); ++t)
    for (int s = 0; s < plan.k; ++s) {
      if (have.count({sp_id, plan.task_prompts[t].id, s, ep.model_id}) != 0)
        ++summary.skipped_existing;
      else
        jobs.push_back({t, s});
    }
  if (summary.skipped_existing > 0)
    say("resuming: " + std::to_string(summary.skipped_existing) + " of " +
        std::to_string(plan.total_requests()) + " samples already in " + corpus_path.string());

  const Url url = parse_url(ep.endpoint_url);
  Headers headers;
  if (const char* key = std::getenv(ep.api_key_env.c_str()); key != nullptr && *key != '\0')
    headers.emplace_back("Authorization", std::string("Bearer ") + key);
  RetryPolicy policy;
  policy.max_attempts = ep.max_retries + 1;
  policy.max_rate_limited = ep.max_rate_limited;
  policy.initial_backoff = ep.initial_backoff;
  policy.timeout = ep.request_timeout;

  std::mutex mutex;
  std::atomic<std::size_t> next{0};
  std::atomic<bool> abort{false};
  std::vector<std::string> failures;
  std::set<std::pair<std::size_t, int>> done;

  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size() && !abort; i = next++) {
      const auto& job = jobs[i];
      const auto& task = plan.task_prompts[job.task];
      const std::string tag = "(" + task.id + ", " + std::to_string(job.sample) + ")";
      try {
        const std::string body = plan.system_prompt
                                     ? render_chat_request(plan.system_prompt->text, task.text, ep)
                                     : render_user_request(task.text, ep);
        const auto outcome = post_json(url, body, headers, policy, [&](const RetryEvent& e) {
          std::lock_guard lock(mutex);
          say("retry " + tag + " after " + e.reason + " (attempt " + std::to_string(e.attempt) +
              ", backoff " + std::to_string(e.delay.count()) + " ms)");
        });
        const auto reply = parse_chat_response(outcome.response.body, ep);
        GenerationRecord r;
        r.system_prompt_id = sp_id;
        r.task_prompt_id = task.id;
        r.sample_index = job.sample;
        r.model_id = ep.model_id;
        r.response_text = reply.text;
        r.token_count = reply.token_count;
        r.created_at = now_utc();
        r.sampler = {ep.temperature, ep.max_tokens};
        std::lock_guard lock(mutex);
        appender.append(r);
        ++summary.requests_issued;
        summary.retries += static_cast<std::size_t>(outcome.retries);
        if (outcome.retries > 0)
          say("sample " + tag + " succeeded with retry count " + std::to_string(outcome.retries));
        done.emplace(job.task, job.sample);
        have.emplace(r.key(), std::move(r));
      } catch (const Error& e) {
        std::lock_guard lock(mutex);
        ++summary.requests_issued;
        failures.push_back(tag + ": " + e.what());
        abort = true;
      }
    }
  };

  const std::size_t workers = std::min(ep.max_parallel, std::max<std::size_t>(jobs.size(), 1));
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  if (!failures.empty()) {
    std::ostringstream os;
    const std::size_t completed = summary.skipped_existing + done.size();
    os << "sampling aborted: " << completed << " of " << plan.total_requests()
       << " samples complete; missing:";
    std::size_t listed = 0;
    for (const auto& job : jobs) {
      if (done.count({job.task, job.sample}) != 0) continue;
      if (listed++ == 10) {
        os << " ...";
        break;
      }
      os << " (" << plan.task_prompts[job.task].id << ", " << job.sample << ")";
    }
    os << "; first failure: " << failures.front() << "; rerun to resume";
    throw SamplingError(os.str());
  }

  for (const auto& task : plan.task_prompts)
    for (int s = 0; s < plan.k; ++s)
      summary.records.push_back(have.at({sp_id, task.id, s, ep.model_id}));
  return summary;
}

}  // namespace promptmi
