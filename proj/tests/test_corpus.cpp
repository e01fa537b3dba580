#include <doctest.h>

#include "promptmi/corpus.hpp"
#include "promptmi/error.hpp"
#include "support.hpp"

using namespace promptmi;

namespace {

GenerationRecord rec(std::string sp, std::string task, int sample, std::string text = "hello") {
  GenerationRecord r;
  r.system_prompt_id = std::move(sp);
  r.task_prompt_id = std::move(task);
  r.sample_index = sample;
  r.model_id = "m";
  r.response_text = std::move(text);
  r.token_count = 1;
  r.created_at = parse_timestamp("2025-01-02T03:04:05.678Z");
  return r;
}

CorpusManifest manifest(int n, int k) {
  CorpusManifest m;
  m.n_task_prompts = n;
  m.k_samples = k;
  m.model_id = "m";
  return m;
}

}  // namespace

TEST_CASE("timestamps round-trip with millisecond precision") {
  const auto t = parse_timestamp("2025-01-02T03:04:05.678Z");
  CHECK(format_timestamp(t) == "2025-01-02T03:04:05.678Z");
  CHECK(format_timestamp(parse_timestamp("1999-12-31T23:59:59Z")) == "1999-12-31T23:59:59.000Z");
  CHECK_THROWS_AS(parse_timestamp("yesterday"), CorpusError);
}

TEST_CASE("sha256 and system prompt hashes") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  auto p = SystemPrompt::make("p", "You are a helpful assistant");
  CHECK(p.hash_matches());
  p.text += ".";
  CHECK_FALSE(p.hash_matches());
  // Typo-level variants hash differently.
  CHECK(SystemPrompt::make("a", "colour").content_hash != SystemPrompt::make("b", "color").content_hash);
}

TEST_CASE("corpus write/read round-trip") {
  testing::TempDir dir;
  std::vector<GenerationRecord> records{rec("p", "t1", 0, "a \"quoted\"\nline"), rec("p", "t1", 1),
                                        rec("p", "t2", 0), rec("p", "t2", 1)};
  write_corpus(records, manifest(2, 2), dir / "c.jsonl");
  const auto c = read_corpus(dir / "c.jsonl");
  CHECK(c.manifest == manifest(2, 2));
  CHECK(c.records == records);
}

TEST_CASE("corpus validation") {
  SUBCASE("duplicate keys") {
    CHECK_THROWS_AS(validate_records({rec("p", "t", 0), rec("p", "t", 0)}, manifest(1, 2)), CorpusError);
  }
  SUBCASE("sample index out of range") {
    CHECK_THROWS_AS(validate_records({rec("p", "t", 2)}, manifest(1, 2)), CorpusError);
  }
  SUBCASE("bad manifest") {
    CHECK_THROWS_AS(manifest(0, 1).validate(), CorpusError);
    auto m = manifest(1, 1);
    m.schema_version = 99;
    CHECK_THROWS_AS(m.validate(), CorpusError);
  }
  SUBCASE("malformed lines carry line numbers") {
    testing::TempDir dir;
    testing::write_file(dir / "bad.jsonl",
                        R"({"n_task_prompts":1,"k_samples":1,"model_id":"m","schema_version":1})"
                        "\n{not json}\n");
    try {
      read_corpus(dir / "bad.jsonl");
      FAIL("expected a corpus error");
    } catch (const CorpusError& e) {
      CHECK(std::string(e.what()).find("bad.jsonl:2:") != std::string::npos);
    }
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(read_corpus("/nonexistent/c.jsonl"), CorpusError); }
}

TEST_CASE("group_records") {
  std::vector<GenerationRecord> records{rec("p", "t2", 1), rec("p", "t1", 0), rec("q", "t1", 0),
                                        rec("p", "t2", 0), rec("p", "t1", 1)};
  const auto blocks = group_records(records, "p", {"t1", "t2"}, 2);
  REQUIRE(blocks.size() == 2);
  CHECK(blocks[0][0].task_prompt_id == "t1");
  CHECK(blocks[0][1].sample_index == 1);
  CHECK(blocks[1][0].task_prompt_id == "t2");
  CHECK(blocks[1][0].sample_index == 0);

  CHECK(system_prompt_ids(records) == std::vector<std::string>{"p", "q"});
  CHECK(task_prompt_ids(records, "p") == std::vector<std::string>{"t2", "t1"});

  SUBCASE("missing sample names the tuple") {
    records.pop_back();
    try {
      group_records(records, "p", {"t1", "t2"}, 2);
      FAIL("expected a corpus error");
    } catch (const CorpusError& e) {
      CHECK(std::string(e.what()).find("t1") != std::string::npos);
    }
  }
  SUBCASE("unlisted task prompt") {
    CHECK_THROWS_AS(group_records(records, "p", {"t1"}, 2), CorpusError);
  }
}

TEST_CASE("CorpusAppender creates, appends and checks the manifest") {
  testing::TempDir dir;
  {
    CorpusAppender a(dir / "c.jsonl", manifest(1, 2));
    a.append(rec("p", "t", 0));
  }
  {
    CorpusAppender a(dir / "c.jsonl", manifest(1, 2));
    a.append(rec("p", "t", 1));
  }
  CHECK(read_corpus(dir / "c.jsonl").records.size() == 2);
  CHECK_THROWS_AS(CorpusAppender(dir / "c.jsonl", manifest(1, 3)), CorpusError);
}

TEST_CASE("prompt files") {
  testing::TempDir dir;
  const std::vector<SystemPrompt> prompts{SystemPrompt::make("a", "first"), SystemPrompt::make("b", "second")};
  write_system_prompts(prompts, dir / "p.jsonl");
  CHECK(read_system_prompts(dir / "p.jsonl") == prompts);

  testing::write_file(dir / "t.jsonl", "{\"id\":\"t1\",\"text\":\"hi\"}\n\n{\"id\":\"t2\",\"text\":\"yo\"}\n");
  const auto tasks = read_task_prompts(dir / "t.jsonl");
  REQUIRE(tasks.size() == 2);
  CHECK(tasks[1].text == "yo");
  testing::write_file(dir / "dup.jsonl", "{\"id\":\"t1\",\"text\":\"hi\"}\n{\"id\":\"t1\",\"text\":\"yo\"}\n");
  CHECK_THROWS_AS(read_task_prompts(dir / "dup.jsonl"), Error);
}
