#pragma once

// Minimal JSON-over-HTTP client with retry handling, shared by the chat and
// embedding clients.

#include <chrono>
#include <functional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace promptmi {

struct Url {
  std::string scheme;  // "http" or "https"
  std::string host;
  int port = 0;
  std::string path;  // always starts with '/'

  std::string origin() const;
  std::string str() const;
};

/// Throws ConfigError on anything other than http(s)://host[:port][/path].
Url parse_url(std::string_view text);

struct HttpResponse {
  int status = 0;
  std::string body;
};

using Headers = std::vector<std::pair<std::string, std::string>>;

struct RetryPolicy {
  /// Attempts for transport failures and 5xx responses (first try included).
  int max_attempts = 3;
  /// 429 responses back off and retry without consuming max_attempts, up to
  /// this many times.
  int max_rate_limited = 8;
  std::chrono::milliseconds initial_backoff{500};
  std::chrono::milliseconds max_backoff{30000};
  std::chrono::milliseconds timeout{60000};
};

struct RetryEvent {
  int attempt;  // 1-based attempt that failed
  int status;   // 0 for transport errors
  std::string reason;
  std::chrono::milliseconds delay;
};

struct PostOutcome {
  HttpResponse response;
  int retries = 0;
};

/// POSTs `body` as application/json. Returns the first 2xx response.
/// 4xx other than 429 is terminal; failures throw TransportError carrying the
/// attempt count and endpoint.
PostOutcome post_json(const Url& url, const std::string& body, const Headers& headers,
                      const RetryPolicy& policy,
                      const std::function<void(const RetryEvent&)>& on_retry = {});

}  // namespace promptmi
