#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "promptmi/corpus.hpp"

namespace promptmi {

/// Finite, fixed-length real vector.
class EmbeddingVector {
 public:
  EmbeddingVector() = default;
  explicit EmbeddingVector(std::vector<double> values);

  std::size_t dim() const noexcept { return values_.size(); }
  std::span<const double> values() const noexcept { return values_; }
  double operator[](std::size_t i) const noexcept { return values_[i]; }

  friend bool operator==(const EmbeddingVector&, const EmbeddingVector&) = default;

 private:
  std::vector<double> values_;
};

/// n blocks (one per task prompt) of k vectors each, stored contiguously in
/// block-major order.
class GroupedEmbeddings {
 public:
  GroupedEmbeddings(std::size_t n, std::size_t k, std::size_t dim, std::vector<double> flat);

  static GroupedEmbeddings from_blocks(const std::vector<std::vector<EmbeddingVector>>& blocks);

  std::size_t n() const noexcept { return n_; }
  std::size_t k() const noexcept { return k_; }
  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return n_ * k_; }

  std::span<const double> at(std::size_t block, std::size_t sample) const;
  EmbeddingVector vector(std::size_t block, std::size_t sample) const;
  /// The k vectors of one block, concatenated.
  std::span<const double> block(std::size_t block) const;
  std::span<const double> flat() const noexcept { return data_; }

  bool same_shape(const GroupedEmbeddings& other) const noexcept {
    return n_ == other.n_ && k_ == other.k_ && dim_ == other.dim_;
  }

  /// First n blocks, first k samples of each.
  GroupedEmbeddings prefix(std::size_t n, std::size_t k) const;

  friend bool operator==(const GroupedEmbeddings&, const GroupedEmbeddings&) = default;

 private:
  std::size_t n_;
  std::size_t k_;
  std::size_t dim_;
  std::vector<double> data_;
};

enum class EmbedderKind { mock, remote };

struct EmbedderSpec {
  EmbedderKind kind = EmbedderKind::mock;
  std::optional<std::string> endpoint;
  /// Mock: also the hash salt. Remote: a leading "openai:" selects the
  /// {"data": [{"embedding": [...]}]} response adapter; anything else uses
  /// {"embeddings": [[...]]}.
  std::string model_name = "mock";
  std::size_t dim = 384;
  std::size_t batch_size = 32;
  /// L2-normalize each vector after embedding. Off by default: vectors are
  /// averaged exactly as returned.
  bool normalize_embeddings = false;
  std::string api_key_env = "PROMPTMI_EMBED_API_KEY";
  std::size_t max_parallel = 1;
  int max_attempts = 3;
  std::chrono::milliseconds timeout{60000};
  std::chrono::milliseconds initial_backoff{500};

  void validate() const;
  /// "mock:<model>/<dim>" or "remote:<model>/<dim>"; embeddings with different
  /// identities are not comparable.
  std::string identity() const;
};

EmbedderKind parse_embedder_kind(std::string_view name);
std::string_view to_string(EmbedderKind kind);

/// Deterministic unit-norm vector seeded by SHA-256(salt, dim, text).
EmbeddingVector mock_embed(std::string_view text, std::size_t dim, std::string_view seed_salt);

std::vector<EmbeddingVector> embed_texts(const EmbedderSpec& spec,
                                         const std::vector<std::string>& texts);

GroupedEmbeddings embed_grouped(const EmbedderSpec& spec, const RecordBlocks& blocks);

/// Remote wire format: {"model": <name>, "input": [<text>, ...]}.
std::string render_embedding_request(const EmbedderSpec& spec,
                                     std::span<const std::string> texts);
std::vector<EmbeddingVector> parse_embedding_response(const EmbedderSpec& spec,
                                                      std::string_view body,
                                                      std::size_t expected_count);

/// Embedding dump: corpus-compatible JSONL holding vectors instead of text.
///   line 1      {"kind": "embeddings", "n_task_prompts", "k_samples", "model_id",
///                "schema_version", "embedder", "dim"}
///   lines 2..N  {"system_prompt_id", "task_prompt_id", "sample_index", "embedding": [...]}
struct EmbeddedSample {
  std::string system_prompt_id;
  std::string task_prompt_id;
  int sample_index = 0;
  EmbeddingVector embedding;

  friend bool operator==(const EmbeddedSample&, const EmbeddedSample&) = default;
};

struct EmbeddingDump {
  CorpusManifest manifest;
  std::string embedder;
  std::size_t dim = 0;
  std::vector<EmbeddedSample> samples;

  std::vector<std::string> system_prompt_ids() const;
  std::vector<std::string> task_prompt_ids(std::string_view system_prompt_id) const;
  GroupedEmbeddings group(std::string_view system_prompt_id,
                          const std::vector<std::string>& task_prompt_ids) const;
};

EmbeddingDump embed_corpus(const EmbedderSpec& spec, const Corpus& corpus);

/// Puts both groups into one dump under the given system prompt ids, with task
/// prompt ids "t0".."t{n-1}".
EmbeddingDump make_dump(const std::vector<std::pair<std::string, const GroupedEmbeddings*>>& groups,
                        std::string model_id, std::string embedder);

void write_embedding_dump(const EmbeddingDump& dump, const std::filesystem::path& destination);
EmbeddingDump read_embedding_dump(const std::filesystem::path& source);

/// True when the first line of `path` declares an embedding dump.
bool is_embedding_dump(const std::filesystem::path& path);

}  // namespace promptmi
