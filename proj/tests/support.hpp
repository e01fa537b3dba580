#pragma once

#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <sstream>
#include <string>
#include <thread>

#include "promptmi/embedding.hpp"
#include "promptmi/rng.hpp"

namespace testing {

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("promptmi-test-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

/// httplib server on an ephemeral loopback port, running on its own thread.
class StubServer {
 public:
  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

  StubServer() = default;
  ~StubServer() { stop(); }

  void post(const std::string& path, Handler handler) {
    server_.Post(path, [this, h = std::move(handler)](const httplib::Request& req,
                                                        httplib::Response& res) {
      ++requests_;
      h(req, res);
    });
  }

  void start() {
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  void stop() {
    if (thread_.joinable()) {
      server_.stop();
      thread_.join();
    }
  }

  std::string url(const std::string& path) const {
    return "http://127.0.0.1:" + std::to_string(port_) + path;
  }
  int requests() const { return requests_.load(); }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<int> requests_{0};
};

inline std::string chat_reply(const std::string& text) {
  return R"({"choices":[{"index":0,"message":{"role":"assistant","content":)" +
         nlohmann::json(text).dump() + R"(}}],"usage":{"completion_tokens":)" +
         std::to_string(std::count(text.begin(), text.end(), ' ') + 1) + "}}";
}

/// Chat handler whose reply is a deterministic function of the request body
/// and of how many times that exact body has been seen.
class DeterministicChat {
 public:
  void operator()(const httplib::Request& req, httplib::Response& res) {
    std::size_t seen;
    {
      std::lock_guard lock(state_->mutex);
      seen = state_->counts[req.body]++;
    }
    const auto seed = promptmi::derive_seed(promptmi::derive_seed(0, std::string_view(req.body)), seen);
    promptmi::Rng rng(seed);
    static const char* words[] = {"alpha", "beta", "gamma", "delta", "omega", "sigma", "tau", "pi"};
    std::string text;
    const auto len = 3 + rng.below(6);
    for (std::uint64_t i = 0; i < len; ++i) text += std::string(i ? " " : "") + words[rng.below(8)];
    res.set_content(chat_reply(text), "application/json");
  }

 private:
  struct State {
    std::mutex mutex;
    std::map<std::string, std::size_t> counts;
  };
  std::shared_ptr<State> state_ = std::make_shared<State>();
};

/// One block of explicit vectors.
inline promptmi::GroupedEmbeddings block_of(std::initializer_list<std::initializer_list<double>> rows) {
  std::vector<double> flat;
  std::size_t k = 0, dim = 0;
  for (const auto& r : rows) {
    dim = r.size();
    flat.insert(flat.end(), r.begin(), r.end());
    ++k;
  }
  return promptmi::GroupedEmbeddings(1, k, dim, std::move(flat));
}

inline promptmi::GroupedEmbeddings random_grouped(std::size_t n, std::size_t k, std::size_t dim,
                                                  std::uint64_t seed) {
  promptmi::Rng rng(seed);
  std::vector<double> flat(n * k * dim);
  for (auto& x : flat) x = rng.normal();
  return promptmi::GroupedEmbeddings(n, k, dim, std::move(flat));
}

}  // namespace testing
