#pragma once

// Data model and on-disk format for system prompts, task prompts and sampled
// generations.
//
// Corpus file (UTF-8, newline-delimited JSON):
//   line 1      manifest  {"n_task_prompts", "k_samples", "model_id", "schema_version"}
//   lines 2..N  records   {"system_prompt_id", "task_prompt_id", "sample_index",
//                          "model_id", "response_text", "token_count",
//                          "created_at", "sampler": {"temperature", "max_tokens"}}

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

namespace promptmi {

inline constexpr int kCorpusSchemaVersion = 1;

using Timestamp = std::chrono::sys_time<std::chrono::milliseconds>;

/// "2026-10-19T08:15:02.123Z"
std::string format_timestamp(Timestamp t);
Timestamp parse_timestamp(std::string_view text);
Timestamp now_utc();

/// Lower-case hex SHA-256 of `text`.
std::string sha256_hex(std::string_view text);

struct SystemPrompt {
  std::string id;
  std::string text;
  std::string content_hash;
  std::optional<std::string> source_label;

  static SystemPrompt make(std::string id, std::string text,
                           std::optional<std::string> source_label = std::nullopt);

  /// True when content_hash still matches text.
  bool hash_matches() const;

  friend bool operator==(const SystemPrompt&, const SystemPrompt&) = default;
};

struct TaskPrompt {
  std::string id;
  std::string text;
  std::vector<std::string> target_prompt_ids;

  friend bool operator==(const TaskPrompt&, const TaskPrompt&) = default;
};

struct SamplerSettings {
  double temperature = 1.0;
  int max_tokens = 64;

  friend bool operator==(const SamplerSettings&, const SamplerSettings&) = default;
};

struct GenerationRecord {
  std::string system_prompt_id;
  std::string task_prompt_id;
  int sample_index = 0;
  std::string model_id;
  std::string response_text;
  std::int64_t token_count = 0;
  Timestamp created_at{};
  SamplerSettings sampler;

  using Key = std::tuple<std::string, std::string, int, std::string>;
  Key key() const { return {system_prompt_id, task_prompt_id, sample_index, model_id}; }

  friend bool operator==(const GenerationRecord&, const GenerationRecord&) = default;
};

std::string describe_key(const GenerationRecord::Key& key);

struct CorpusManifest {
  int n_task_prompts = 1;
  int k_samples = 1;
  std::string model_id;
  int schema_version = kCorpusSchemaVersion;

  void validate() const;

  friend bool operator==(const CorpusManifest&, const CorpusManifest&) = default;
};

struct Corpus {
  CorpusManifest manifest;
  std::vector<GenerationRecord> records;
};

/// Checks key uniqueness and sample_index bounds. Throws CorpusError.
void validate_records(const std::vector<GenerationRecord>& records,
                      const CorpusManifest& manifest);

void write_corpus(const std::vector<GenerationRecord>& records,
                  const CorpusManifest& manifest,
                  const std::filesystem::path& destination);

Corpus read_corpus(const std::filesystem::path& source);

/// Append-only writer used while sampling. Creates the file with a manifest
/// line when it does not exist; otherwise checks the stored manifest agrees.
class CorpusAppender {
 public:
  CorpusAppender(const std::filesystem::path& path, const CorpusManifest& manifest);

  void append(const GenerationRecord& record);
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

using RecordBlocks = std::vector<std::vector<GenerationRecord>>;

/// Arranges the records of one system prompt into n blocks (one per entry of
/// task_prompt_ids, in that order) of k records ordered by sample_index.
/// Records of other system prompts are ignored; records of this system prompt
/// with an unlisted task prompt, or with sample_index >= k, are an error.
RecordBlocks group_records(const std::vector<GenerationRecord>& records,
                           std::string_view system_prompt_id,
                           const std::vector<std::string>& task_prompt_ids, int k);

/// Distinct system prompt ids in first-appearance order.
std::vector<std::string> system_prompt_ids(const std::vector<GenerationRecord>& records);

/// Distinct task prompt ids used with `system_prompt_id`, in first-appearance
/// order.
std::vector<std::string> task_prompt_ids(const std::vector<GenerationRecord>& records,
                                         std::string_view system_prompt_id);

/// Prompt files: one JSON object per line ({"id", "text", ...}).
std::vector<SystemPrompt> read_system_prompts(const std::filesystem::path& source);
void write_system_prompts(const std::vector<SystemPrompt>& prompts,
                          const std::filesystem::path& destination);
std::vector<TaskPrompt> read_task_prompts(const std::filesystem::path& source);

}  // namespace promptmi
