#include "promptmi/embedding.hpp"

#include <openssl/evp.h>

#include <array>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <thread>

#include "json_io.hpp"
#include "promptmi/error.hpp"
#include "promptmi/http.hpp"
#include "promptmi/rng.hpp"

namespace promptmi {

EmbeddingVector::EmbeddingVector(std::vector<double> values) : values_(std::move(values)) {
  if (values_.empty()) throw EmbeddingError("embedding vector must have positive dimension");
  for (std::size_t i = 0; i < values_.size(); ++i)
    if (!std::isfinite(values_[i]))
      throw EmbeddingError("embedding component " + std::to_string(i) + " is not finite");
}

GroupedEmbeddings::GroupedEmbeddings(std::size_t n, std::size_t k, std::size_t dim,
                                     std::vector<double> flat)
    : n_(n), k_(k), dim_(dim), data_(std::move(flat)) {
  if (n_ == 0 || k_ == 0 || dim_ == 0)
    throw ShapeError("grouped embeddings need positive n, k and dim");
  if (data_.size() != n_ * k_ * dim_)
    throw ShapeError("grouped embeddings: expected " + std::to_string(n_ * k_ * dim_) +
                     " values, got " + std::to_string(data_.size()));
  for (double v : data_)
    if (!std::isfinite(v)) throw EmbeddingError("grouped embeddings contain a non-finite value");
}

GroupedEmbeddings GroupedEmbeddings::from_blocks(
    const std::vector<std::vector<EmbeddingVector>>& blocks) {
  if (blocks.empty() || blocks.front().empty())
    throw ShapeError("grouped embeddings need at least one block and one sample");
  const std::size_t k = blocks.front().size();
  const std::size_t dim = blocks.front().front().dim();
  std::vector<double> flat;
  flat.reserve(blocks.size() * k * dim);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    if (blocks[b].size() != k)
      throw ShapeError("block " + std::to_string(b) + " has " + std::to_string(blocks[b].size()) +
                       " vectors, expected " + std::to_string(k));
    for (const auto& v : blocks[b]) {
      if (v.dim() != dim)
        throw ShapeError("block " + std::to_string(b) + " holds a vector of dim " +
                         std::to_string(v.dim()) + ", expected " + std::to_string(dim));
      flat.insert(flat.end(), v.values().begin(), v.values().end());
    }
  }
  return GroupedEmbeddings(blocks.size(), k, dim, std::move(flat));
}

std::span<const double> GroupedEmbeddings::at(std::size_t block, std::size_t sample) const {
  if (block >= n_ || sample >= k_) throw ShapeError("grouped embeddings index out of range");
  return std::span<const double>(data_).subspan((block * k_ + sample) * dim_, dim_);
}

EmbeddingVector GroupedEmbeddings::vector(std::size_t block, std::size_t sample) const {
  const auto v = at(block, sample);
  return EmbeddingVector(std::vector<double>(v.begin(), v.end()));
}

std::span<const double> GroupedEmbeddings::block(std::size_t block) const {
  if (block >= n_) throw ShapeError("block index out of range");
  return std::span<const double>(data_).subspan(block * k_ * dim_, k_ * dim_);
}

GroupedEmbeddings GroupedEmbeddings::prefix(std::size_t n, std::size_t k) const {
  if (n == 0 || k == 0 || n > n_ || k > k_)
    throw ShapeError("prefix (" + std::to_string(n) + ", " + std::to_string(k) +
                     ") exceeds available (" + std::to_string(n_) + ", " + std::to_string(k_) +
                     ")");
  std::vector<double> flat;
  flat.reserve(n * k * dim_);
  for (std::size_t b = 0; b < n; ++b) {
    const auto blk = block(b);
    flat.insert(flat.end(), blk.begin(), blk.begin() + static_cast<std::ptrdiff_t>(k * dim_));
  }
  return GroupedEmbeddings(n, k, dim_, std::move(flat));
}

EmbedderKind parse_embedder_kind(std::string_view name) {
  if (name == "mock") return EmbedderKind::mock;
  if (name == "remote") return EmbedderKind::remote;
  throw ConfigError("unknown embedder kind '" + std::string(name) + "' (expected mock or remote)");
}

std::string_view to_string(EmbedderKind kind) {
  return kind == EmbedderKind::mock ? "mock" : "remote";
}

void EmbedderSpec::validate() const {
  if (dim == 0) throw ConfigError("embedder dim must be positive");
  if (batch_size == 0) throw ConfigError("embedder batch_size must be positive");
  if (max_parallel == 0) throw ConfigError("embedder max_parallel must be positive");
  if (max_attempts < 1) throw ConfigError("embedder max_attempts must be positive");
  if (kind == EmbedderKind::remote && (!endpoint || endpoint->empty()))
    throw ConfigError("remote embedder requires an endpoint");
  if (kind == EmbedderKind::mock && dim < 2) throw ConfigError("mock embedder requires dim >= 2");
}

std::string EmbedderSpec::identity() const {
  return std::string(to_string(kind)) + ":" + model_name + "/" + std::to_string(dim) +
         (normalize_embeddings ? "/l2" : "");
}

EmbeddingVector mock_embed(std::string_view text, std::size_t dim, std::string_view seed_salt) {
  if (dim < 2) throw ConfigError("mock embedder requires dim >= 2");
  std::string material;
  material.reserve(seed_salt.size() + text.size() + 24);
  material.append(seed_salt);
  material.push_back('\0');
  material.append(std::to_string(dim));
  material.push_back('\0');
  material.append(text);
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(material.data(), material.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1)
    throw EmbeddingError("SHA-256 digest failed");
  std::uint64_t seed = 0;
  for (int i = 0; i < 8; ++i) seed = (seed << 8) | digest[static_cast<std::size_t>(i)];

  Rng rng(seed);
  std::vector<double> values(dim);
  double norm2 = 0.0;
  do {
    norm2 = 0.0;
    for (auto& v : values) {
      v = rng.normal();
      norm2 += v * v;
    }
  } while (norm2 == 0.0);
  const double inv = 1.0 / std::sqrt(norm2);
  for (auto& v : values) v *= inv;
  return EmbeddingVector(std::move(values));
}

std::string render_embedding_request(const EmbedderSpec& spec,
                                     std::span<const std::string> texts) {
  std::string model = spec.model_name;
  if (model.rfind("openai:", 0) == 0) model = model.substr(7);
  detail::ojson j;
  j["model"] = model;
  j["input"] = detail::ojson::array();
  for (const auto& t : texts) j["input"].push_back(t);
  return j.dump();
}

std::vector<EmbeddingVector> parse_embedding_response(const EmbedderSpec& spec,
                                                      std::string_view body,
                                                      std::size_t expected_count) {
  const auto j = detail::parse_object(body);
  std::vector<std::vector<double>> raw;
  if (spec.model_name.rfind("openai:", 0) == 0) {
    const auto it = j.find("data");
    if (it == j.end() || !it->is_array())
      throw EmbeddingError("embedding response lacks a 'data' array");
    raw.resize(it->size());
    std::vector<bool> filled(it->size(), false);
    for (std::size_t i = 0; i < it->size(); ++i) {
      const auto& item = (*it)[i];
      const std::size_t index = item.contains("index") ? item["index"].get<std::size_t>() : i;
      if (index >= raw.size() || filled[index])
        throw EmbeddingError("embedding response has a bad or repeated index");
      raw[index] = item.at("embedding").get<std::vector<double>>();
      filled[index] = true;
    }
  } else {
    const auto it = j.find("embeddings");
    if (it == j.end() || !it->is_array())
      throw EmbeddingError("embedding response lacks an 'embeddings' array");
    raw = it->get<std::vector<std::vector<double>>>();
  }
  if (raw.size() != expected_count)
    throw EmbeddingError("embedding response holds " + std::to_string(raw.size()) +
                         " vectors for " + std::to_string(expected_count) + " texts");
  std::vector<EmbeddingVector> out;
  out.reserve(raw.size());
  for (auto& values : raw) {
    if (values.size() != spec.dim)
      throw EmbeddingError("dimension mismatch: endpoint returned dim " +
                           std::to_string(values.size()) + ", expected " +
                           std::to_string(spec.dim));
    out.emplace_back(std::move(values));
  }
  return out;
}

namespace {

struct IndexedFailure : EmbeddingError {
  IndexedFailure(const std::string& what, std::size_t index) : EmbeddingError(what), index(index) {}
  std::size_t index;
};

std::vector<EmbeddingVector> remote_batch(const EmbedderSpec& spec, const Url& url,
                                          std::span<const std::string> texts) {
  Headers headers;
  if (const char* key = std::getenv(spec.api_key_env.c_str()); key != nullptr && *key != '\0')
    headers.emplace_back("Authorization", std::string("Bearer ") + key);
  RetryPolicy policy;
  policy.max_attempts = spec.max_attempts;
  policy.timeout = spec.timeout;
  policy.initial_backoff = spec.initial_backoff;
  const auto outcome = post_json(url, render_embedding_request(spec, texts), headers, policy);
  return parse_embedding_response(spec, outcome.response.body, texts.size());
}

std::vector<EmbeddingVector> embed_all(const EmbedderSpec& spec,
                                       const std::vector<std::string>& texts) {
  spec.validate();
  for (std::size_t i = 0; i < texts.size(); ++i)
    if (texts[i].empty()) throw IndexedFailure("cannot embed empty text at index " + std::to_string(i), i);

  std::vector<EmbeddingVector> out(texts.size());
  const std::size_t n_batches = (texts.size() + spec.batch_size - 1) / spec.batch_size;
  auto run_batch = [&](std::size_t b) {
    const std::size_t begin = b * spec.batch_size;
    const std::size_t end = std::min(texts.size(), begin + spec.batch_size);
    const std::span<const std::string> slice(texts.data() + begin, end - begin);
    std::vector<EmbeddingVector> got;
    if (spec.kind == EmbedderKind::mock) {
      for (const auto& t : slice) got.push_back(mock_embed(t, spec.dim, spec.model_name));
    } else {
      try {
        got = remote_batch(spec, parse_url(*spec.endpoint), slice);
      } catch (const TransportError&) {
        throw;
      } catch (const Error& e) {
        throw IndexedFailure(e.what(), begin);
      }
    }
    for (std::size_t i = 0; i < got.size(); ++i) out[begin + i] = std::move(got[i]);
  };

  const std::size_t workers = spec.kind == EmbedderKind::mock ? 1 : std::min(spec.max_parallel, n_batches);
  if (workers <= 1) {
    for (std::size_t b = 0; b < n_batches; ++b) run_batch(b);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t b = next++; b < n_batches; b = next++) {
          try {
            run_batch(b);
          } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!first_error) first_error = std::current_exception();
            next = n_batches;
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
  }

  if (spec.normalize_embeddings) {
    for (auto& v : out) {
      double norm2 = 0.0;
      for (double x : v.values()) norm2 += x * x;
      if (norm2 == 0.0) throw EmbeddingError("cannot L2-normalize a zero embedding");
      std::vector<double> scaled(v.values().begin(), v.values().end());
      const double inv = 1.0 / std::sqrt(norm2);
      for (auto& x : scaled) x *= inv;
      v = EmbeddingVector(std::move(scaled));
    }
  }
  return out;
}

}  // namespace

std::vector<EmbeddingVector> embed_texts(const EmbedderSpec& spec,
                                         const std::vector<std::string>& texts) {
  try {
    return embed_all(spec, texts);
  } catch (const IndexedFailure& e) {
    throw EmbeddingError(e.what());
  }
}

GroupedEmbeddings embed_grouped(const EmbedderSpec& spec, const RecordBlocks& blocks) {
  if (blocks.empty() || blocks.front().empty()) throw ShapeError("no blocks to embed");
  const std::size_t k = blocks.front().size();
  std::vector<std::string> texts;
  texts.reserve(blocks.size() * k);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    if (blocks[b].size() != k)
      throw ShapeError("block " + std::to_string(b) + " has " + std::to_string(blocks[b].size()) +
                       " records, expected " + std::to_string(k));
    for (const auto& r : blocks[b]) texts.push_back(r.response_text);
  }
  std::vector<EmbeddingVector> vectors;
  try {
    vectors = embed_all(spec, texts);
  } catch (const IndexedFailure& e) {
    throw EmbeddingError("block " + std::to_string(e.index / k) + ", sample " +
                         std::to_string(e.index % k) + ": " + e.what());
  }
  std::vector<double> flat;
  flat.reserve(vectors.size() * spec.dim);
  for (const auto& v : vectors) flat.insert(flat.end(), v.values().begin(), v.values().end());
  return GroupedEmbeddings(blocks.size(), k, spec.dim, std::move(flat));
}

std::vector<std::string> EmbeddingDump::system_prompt_ids() const {
  std::vector<std::string> out;
  std::set<std::string, std::less<>> seen;
  for (const auto& s : samples)
    if (seen.insert(s.system_prompt_id).second) out.push_back(s.system_prompt_id);
  return out;
}

std::vector<std::string> EmbeddingDump::task_prompt_ids(std::string_view system_prompt_id) const {
  std::vector<std::string> out;
  std::set<std::string, std::less<>> seen;
  for (const auto& s : samples)
    if (s.system_prompt_id == system_prompt_id && seen.insert(s.task_prompt_id).second)
      out.push_back(s.task_prompt_id);
  return out;
}

GroupedEmbeddings EmbeddingDump::group(std::string_view system_prompt_id,
                                       const std::vector<std::string>& task_prompt_ids) const {
  const auto k = static_cast<std::size_t>(manifest.k_samples);
  std::map<std::string, std::size_t, std::less<>> block_of;
  for (std::size_t i = 0; i < task_prompt_ids.size(); ++i) block_of.emplace(task_prompt_ids[i], i);
  std::vector<const EmbeddedSample*> slots(task_prompt_ids.size() * k, nullptr);
  for (const auto& s : samples) {
    if (s.system_prompt_id != system_prompt_id) continue;
    const auto it = block_of.find(s.task_prompt_id);
    if (it == block_of.end())
      throw CorpusError("unknown task prompt '" + s.task_prompt_id + "' for system prompt '" +
                        std::string(system_prompt_id) + "'");
    auto& slot = slots[it->second * k + static_cast<std::size_t>(s.sample_index)];
    if (slot != nullptr)
      throw CorpusError("duplicate embedding for (" + s.task_prompt_id + ", " +
                        std::to_string(s.sample_index) + ")");
    slot = &s;
  }
  std::vector<double> flat;
  flat.reserve(slots.size() * dim);
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i] == nullptr)
      throw CorpusError("missing sample (task_prompt_id=" + task_prompt_ids[i / k] +
                        ", sample_index=" + std::to_string(i % k) + ") for system prompt '" +
                        std::string(system_prompt_id) + "'");
    const auto v = slots[i]->embedding.values();
    flat.insert(flat.end(), v.begin(), v.end());
  }
  return GroupedEmbeddings(task_prompt_ids.size(), k, dim, std::move(flat));
}

EmbeddingDump embed_corpus(const EmbedderSpec& spec, const Corpus& corpus) {
  std::vector<std::string> texts;
  texts.reserve(corpus.records.size());
  for (const auto& r : corpus.records) texts.push_back(r.response_text);
  auto vectors = embed_texts(spec, texts);
  EmbeddingDump dump;
  dump.manifest = corpus.manifest;
  dump.embedder = spec.identity();
  dump.dim = spec.dim;
  dump.samples.reserve(vectors.size());
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    const auto& r = corpus.records[i];
    dump.samples.push_back({r.system_prompt_id, r.task_prompt_id, r.sample_index, std::move(vectors[i])});
  }
  return dump;
}

EmbeddingDump make_dump(const std::vector<std::pair<std::string, const GroupedEmbeddings*>>& groups,
                        std::string model_id, std::string embedder) {
  if (groups.empty()) throw ShapeError("no groups to dump");
  const auto& first = *groups.front().second;
  EmbeddingDump dump;
  dump.manifest.n_task_prompts = static_cast<int>(first.n());
  dump.manifest.k_samples = static_cast<int>(first.k());
  dump.manifest.model_id = std::move(model_id);
  dump.embedder = std::move(embedder);
  dump.dim = first.dim();
  for (const auto& [id, g] : groups) {
    if (!g->same_shape(first)) throw ShapeError("groups in one dump must share (n, k, dim)");
    for (std::size_t b = 0; b < g->n(); ++b)
      for (std::size_t s = 0; s < g->k(); ++s)
        dump.samples.push_back({id, "t" + std::to_string(b), static_cast<int>(s), g->vector(b, s)});
  }
  return dump;
}

void write_embedding_dump(const EmbeddingDump& dump, const std::filesystem::path& destination) {
  std::ofstream out(destination, std::ios::binary | std::ios::trunc);
  if (!out) throw CorpusError("cannot open '" + destination.string() + "' for writing");
  detail::ojson header;
  header["kind"] = "embeddings";
  header["n_task_prompts"] = dump.manifest.n_task_prompts;
  header["k_samples"] = dump.manifest.k_samples;
  header["model_id"] = dump.manifest.model_id;
  header["schema_version"] = dump.manifest.schema_version;
  header["embedder"] = dump.embedder;
  header["dim"] = dump.dim;
  out << header.dump() << '\n';
  for (const auto& s : dump.samples) {
    detail::ojson j;
    j["system_prompt_id"] = s.system_prompt_id;
    j["task_prompt_id"] = s.task_prompt_id;
    j["sample_index"] = s.sample_index;
    j["embedding"] = detail::ojson(std::vector<double>(s.embedding.values().begin(),
                                                       s.embedding.values().end()));
    out << j.dump() << '\n';
  }
  out.flush();
  if (!out) throw CorpusError("write failed for '" + destination.string() + "'");
}

EmbeddingDump read_embedding_dump(const std::filesystem::path& source) {
  std::ifstream in(source, std::ios::binary);
  if (!in) throw CorpusError("cannot open embedding dump '" + source.string() + "'");
  EmbeddingDump dump;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  std::set<std::tuple<std::string, std::string, int>> seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = detail::parse_object(line);
      if (!have_header) {
        if (j.value("kind", std::string()) != "embeddings")
          throw CorpusError("not an embedding dump (missing \"kind\": \"embeddings\")");
        dump.manifest.schema_version = detail::require<int>(j, "schema_version");
        dump.manifest.n_task_prompts = detail::require<int>(j, "n_task_prompts");
        dump.manifest.k_samples = detail::require<int>(j, "k_samples");
        dump.manifest.model_id = detail::require<std::string>(j, "model_id");
        dump.manifest.validate();
        dump.embedder = detail::require<std::string>(j, "embedder");
        dump.dim = detail::require<std::size_t>(j, "dim");
        if (dump.dim == 0) throw CorpusError("dim must be positive");
        have_header = true;
        continue;
      }
      EmbeddedSample s;
      s.system_prompt_id = detail::require<std::string>(j, "system_prompt_id");
      s.task_prompt_id = detail::require<std::string>(j, "task_prompt_id");
      s.sample_index = detail::require<int>(j, "sample_index");
      s.embedding = EmbeddingVector(detail::require<std::vector<double>>(j, "embedding"));
      if (s.sample_index < 0 || s.sample_index >= dump.manifest.k_samples)
        throw CorpusError("sample_index " + std::to_string(s.sample_index) + " outside [0, " +
                          std::to_string(dump.manifest.k_samples) + ")");
      if (s.embedding.dim() != dump.dim)
        throw CorpusError("embedding has dim " + std::to_string(s.embedding.dim()) +
                          ", header declares " + std::to_string(dump.dim));
      if (!seen.emplace(s.system_prompt_id, s.task_prompt_id, s.sample_index).second)
        throw CorpusError("duplicate embedding key");
      dump.samples.push_back(std::move(s));
    } catch (const Error& e) {
      throw CorpusError(source.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!have_header) throw CorpusError("embedding dump '" + source.string() + "' is empty");
  return dump;
}

bool is_embedding_dump(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorpusError("cannot open '" + path.string() + "'");
  std::string line;
  std::getline(in, line);
  try {
    const auto j = detail::parse_object(line);
    return j.value("kind", std::string()) == "embeddings";
  } catch (const Error&) {
    return false;
  }
}

}  // namespace promptmi
