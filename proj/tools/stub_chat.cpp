// Local stand-in for a chat-completions service. Each system prompt maps to a
// persona whose replies draw from a persona-specific vocabulary, so corpora
// sampled from it behave like real prompt-conditioned output.

#include <httplib.h>
#include <json.hpp>

#include <CLI11.hpp>

#include <atomic>
#include <iostream>
#include <string>
#include <vector>

#include "promptmi/querying.hpp"
#include "promptmi/rng.hpp"

namespace {

const std::vector<std::string> kCommon{
    "the", "a", "answer", "is", "here", "and", "you", "can", "this", "that", "with", "for",
    "it", "we", "think", "about", "question", "so", "well", "also"};

const std::vector<std::vector<std::string>> kPersonaWords{
    {"arr", "matey", "ship", "sea", "treasure", "sail", "captain", "deck", "ahoy", "plunder"},
    {"indeed", "certainly", "kindly", "regards", "formal", "respectfully", "sir", "madam",
     "therefore", "accordingly"},
    {"code", "function", "compile", "bug", "stack", "loop", "variable", "deploy", "test", "debug"},
    {"recipe", "bake", "flour", "oven", "spice", "simmer", "taste", "salt", "butter", "chop"},
    {"planet", "orbit", "star", "galaxy", "telescope", "comet", "nebula", "gravity", "moon",
     "cosmos"},
    {"yo", "dude", "awesome", "chill", "vibe", "totally", "rad", "cool", "bro", "sweet"},
};

std::string reply(const std::string& system, const std::string& user, promptmi::Rng& rng,
                  int max_tokens) {
  std::vector<std::string> persona;
  if (!system.empty()) {
    const auto h = promptmi::derive_seed(0, std::string_view(system));
    persona = kPersonaWords[h % kPersonaWords.size()];
    promptmi::Rng prng(h);
    promptmi::shuffle(std::span<std::string>(persona), prng);
    persona.resize(6);
  }
  std::vector<std::string> topic;
  {
    std::string word;
    for (char c : user + " ") {
      if (std::isalnum(static_cast<unsigned char>(c))) {
        word += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      } else if (!word.empty()) {
        topic.push_back(word);
        word.clear();
      }
    }
  }
  const int length = std::min<int>(max_tokens, 8 + static_cast<int>(rng.below(16)));
  std::string out;
  for (int i = 0; i < length; ++i) {
    const double u = rng.uniform();
    const std::string* w;
    if (!persona.empty() && u < 0.35) {
      w = &persona[rng.below(persona.size())];
    } else if (!topic.empty() && u < 0.6) {
      w = &topic[rng.below(topic.size())];
    } else {
      w = &kCommon[rng.below(kCommon.size())];
    }
    out += (out.empty() ? "" : " ") + *w;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stub chat-completions server for local runs"};
  std::string host = "127.0.0.1";
  int port = 8089;
  std::uint64_t seed = 0;
  int fail_first = 0;
  app.add_option("--host", host)->capture_default_str();
  app.add_option("--port", port)->capture_default_str();
  app.add_option("--seed", seed)->capture_default_str();
  app.add_option("--rate-limit-first", fail_first, "Answer the first N requests with 429")
      ->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  httplib::Server server;
  std::atomic<std::uint64_t> counter{0};
  std::atomic<int> limited{0};
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    if (limited.fetch_add(1) < fail_first) {
      res.status = 429;
      res.set_content(R"({"error":"rate limited"})", "application/json");
      return;
    }
    nlohmann::json body;
    try {
      body = nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::exception& e) {
      res.status = 400;
      res.set_content(nlohmann::json{{"error", e.what()}}.dump(), "application/json");
      return;
    }
    std::string system, user;
    for (const auto& m : body.value("messages", nlohmann::json::array())) {
      if (m.value("role", "") == "system") system = m.value("content", "");
      if (m.value("role", "") == "user") user = m.value("content", "");
    }
    promptmi::Rng rng(promptmi::derive_seed(seed, counter.fetch_add(1)));
    const std::string text = reply(system, user, rng, body.value("max_tokens", 64));
    nlohmann::json out{
        {"model", body.value("model", "stub")},
        {"choices", {{{"index", 0}, {"message", {{"role", "assistant"}, {"content", text}}}}}},
        {"usage", {{"completion_tokens", promptmi::count_whitespace_tokens(text)}}}};
    res.set_content(out.dump(), "application/json");
  });

  std::cerr << "stub chat server on http://" << host << ":" << port << "/v1/chat/completions\n";
  if (!server.listen(host, port)) {
    std::cerr << "error: cannot listen on " << host << ":" << port << "\n";
    return 1;
  }
  return 0;
}
