#include <httplib.h>

#include <algorithm>
#include <charconv>
#include <thread>

#include "promptmi/error.hpp"
#include "promptmi/http.hpp"

namespace promptmi {

std::string Url::origin() const { return scheme + "://" + host + ":" + std::to_string(port); }

std::string Url::str() const { return origin() + path; }

Url parse_url(std::string_view text) {
  Url url;
  const auto sep = text.find("://");
  if (sep == std::string_view::npos) throw ConfigError("URL lacks a scheme: '" + std::string(text) + "'");
  url.scheme = std::string(text.substr(0, sep));
  if (url.scheme != "http" && url.scheme != "https")
    throw ConfigError("unsupported URL scheme '" + url.scheme + "'");
  std::string_view rest = text.substr(sep + 3);
  const auto slash = rest.find('/');
  std::string_view authority = rest.substr(0, slash);
  url.path = slash == std::string_view::npos ? "/" : std::string(rest.substr(slash));
  url.port = url.scheme == "https" ? 443 : 80;
  if (const auto colon = authority.rfind(':'); colon != std::string_view::npos) {
    const auto port_text = authority.substr(colon + 1);
    int port = 0;
    const auto [ptr, ec] = std::from_chars(port_text.data(), port_text.data() + port_text.size(), port);
    if (ec != std::errc{} || ptr != port_text.data() + port_text.size() || port <= 0 || port > 65535)
      throw ConfigError("invalid port in URL '" + std::string(text) + "'");
    url.port = port;
    authority = authority.substr(0, colon);
  }
  if (authority.empty()) throw ConfigError("URL lacks a host: '" + std::string(text) + "'");
  url.host = std::string(authority);
  return url;
}

namespace {

std::chrono::milliseconds backoff_for(const RetryPolicy& policy, int retry_number) {
  auto delay = policy.initial_backoff;
  for (int i = 1; i < retry_number && delay < policy.max_backoff; ++i) delay *= 2;
  return std::min(delay, policy.max_backoff);
}

}  // namespace

PostOutcome post_json(const Url& url, const std::string& body, const Headers& headers,
                      const RetryPolicy& policy,
                      const std::function<void(const RetryEvent&)>& on_retry) {
  httplib::Client client(url.origin());
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(policy.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(policy.timeout - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  client.set_write_timeout(secs.count(), usecs.count());

  httplib::Headers request_headers;
  for (const auto& [k, v] : headers) request_headers.emplace(k, v);

  int failures = 0;
  int rate_limited = 0;
  int retries = 0;
  for (int attempt = 1;; ++attempt) {
    auto result = client.Post(url.path, request_headers, body, "application/json");
    int status = 0;
    std::string reason;
    if (!result) {
      reason = httplib::to_string(result.error());
    } else {
      status = result->status;
      if (status >= 200 && status < 300) return {{status, result->body}, retries};
      reason = "HTTP " + std::to_string(status);
      if (status != 429 && status < 500) {
        throw TransportError(reason + " from " + url.str() + " (terminal, attempt " +
                                 std::to_string(attempt) + "): " + result->body.substr(0, 200),
                             status, attempt);
      }
    }
    bool give_up = false;
    if (status == 429) {
      give_up = ++rate_limited > policy.max_rate_limited;
    } else {
      give_up = ++failures >= policy.max_attempts;
    }
    if (give_up)
      throw TransportError(reason + " from " + url.str() + " after " + std::to_string(attempt) +
                               " attempts (" + std::to_string(retries) + " retries)",
                           status, attempt);
    ++retries;
    const auto delay = backoff_for(policy, retries);
    if (on_retry) on_retry({attempt, status, reason, delay});
    std::this_thread::sleep_for(delay);
  }
}

}  // namespace promptmi
