#include "promptmi/corpus.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "json_io.hpp"
#include "promptmi/error.hpp"

namespace promptmi {

namespace chr = std::chrono;

std::string format_timestamp(Timestamp t) {
  const auto days = chr::floor<chr::days>(t);
  const chr::year_month_day ymd{days};
  const chr::hh_mm_ss hms{t - days};
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02ld:%02ld:%02ld.%03ldZ",
                static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
                static_cast<unsigned>(ymd.day()), static_cast<long>(hms.hours().count()),
                static_cast<long>(hms.minutes().count()),
                static_cast<long>(hms.seconds().count()),
                static_cast<long>(hms.subseconds().count()));
  return buf;
}

Timestamp parse_timestamp(std::string_view text) {
  int y = 0;
  unsigned mo = 0, d = 0, h = 0, mi = 0, s = 0, ms = 0;
  const std::string str(text);
  int consumed = 0;
  const int fields = std::sscanf(str.c_str(), "%4d-%2u-%2uT%2u:%2u:%2u%n", &y, &mo, &d, &h,
                                 &mi, &s, &consumed);
  if (fields != 6) throw CorpusError("malformed timestamp '" + str + "'");
  std::string_view rest = text.substr(static_cast<std::size_t>(consumed));
  if (!rest.empty() && rest.front() == '.') {
    rest.remove_prefix(1);
    std::size_t digits = 0;
    while (digits < rest.size() && rest[digits] >= '0' && rest[digits] <= '9') ++digits;
    if (digits == 0) throw CorpusError("malformed timestamp '" + str + "'");
    std::string frac(rest.substr(0, digits));
    frac.resize(3, '0');
    ms = static_cast<unsigned>(std::stoul(frac));
    rest.remove_prefix(digits);
  }
  if (rest != "Z") throw CorpusError("timestamp must be UTC ('Z' suffix): '" + str + "'");
  const chr::year_month_day ymd{chr::year{y}, chr::month{mo}, chr::day{d}};
  if (!ymd.ok() || h > 23 || mi > 59 || s > 60)
    throw CorpusError("timestamp out of range '" + str + "'");
  return chr::sys_days{ymd} + chr::hours{h} + chr::minutes{mi} + chr::seconds{s} +
         chr::milliseconds{ms};
}

Timestamp now_utc() { return chr::floor<chr::milliseconds>(chr::system_clock::now()); }

std::string sha256_hex(std::string_view text) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 digest failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

SystemPrompt SystemPrompt::make(std::string id, std::string text,
                                std::optional<std::string> source_label) {
  SystemPrompt p;
  p.content_hash = sha256_hex(text);
  p.id = std::move(id);
  p.text = std::move(text);
  p.source_label = std::move(source_label);
  return p;
}

bool SystemPrompt::hash_matches() const { return content_hash == sha256_hex(text); }

std::string describe_key(const GenerationRecord::Key& key) {
  std::ostringstream os;
  os << "(system_prompt_id=" << std::get<0>(key) << ", task_prompt_id=" << std::get<1>(key)
     << ", sample_index=" << std::get<2>(key) << ", model_id=" << std::get<3>(key) << ")";
  return os.str();
}

void CorpusManifest::validate() const {
  if (n_task_prompts < 1) throw CorpusError("manifest n_task_prompts must be positive");
  if (k_samples < 1) throw CorpusError("manifest k_samples must be positive");
  if (schema_version != kCorpusSchemaVersion)
    throw CorpusError("unsupported corpus schema_version " + std::to_string(schema_version) +
                      " (supported: " + std::to_string(kCorpusSchemaVersion) + ")");
}

namespace {

using detail::ojson;

ojson manifest_to_json(const CorpusManifest& m) {
  ojson j;
  j["n_task_prompts"] = m.n_task_prompts;
  j["k_samples"] = m.k_samples;
  j["model_id"] = m.model_id;
  j["schema_version"] = m.schema_version;
  return j;
}

CorpusManifest manifest_from_json(const ojson& j) {
  CorpusManifest m;
  m.schema_version = detail::require<int>(j, "schema_version");
  if (m.schema_version != kCorpusSchemaVersion)
    throw CorpusError("unsupported corpus schema_version " + std::to_string(m.schema_version) +
                      " (supported: " + std::to_string(kCorpusSchemaVersion) + ")");
  m.n_task_prompts = detail::require<int>(j, "n_task_prompts");
  m.k_samples = detail::require<int>(j, "k_samples");
  m.model_id = detail::require<std::string>(j, "model_id");
  m.validate();
  return m;
}

ojson record_to_json(const GenerationRecord& r) {
  ojson j;
  j["system_prompt_id"] = r.system_prompt_id;
  j["task_prompt_id"] = r.task_prompt_id;
  j["sample_index"] = r.sample_index;
  j["model_id"] = r.model_id;
  j["response_text"] = r.response_text;
  j["token_count"] = r.token_count;
  j["created_at"] = format_timestamp(r.created_at);
  ojson sampler;
  sampler["temperature"] = r.sampler.temperature;
  sampler["max_tokens"] = r.sampler.max_tokens;
  j["sampler"] = std::move(sampler);
  return j;
}

GenerationRecord record_from_json(const ojson& j) {
  GenerationRecord r;
  r.system_prompt_id = detail::require<std::string>(j, "system_prompt_id");
  r.task_prompt_id = detail::require<std::string>(j, "task_prompt_id");
  r.sample_index = detail::require<int>(j, "sample_index");
  r.model_id = detail::require<std::string>(j, "model_id");
  r.response_text = detail::require<std::string>(j, "response_text");
  r.token_count = detail::require<std::int64_t>(j, "token_count");
  r.created_at = parse_timestamp(detail::require<std::string>(j, "created_at"));
  const auto& sampler = detail::require_object(j, "sampler");
  r.sampler.temperature = detail::require<double>(sampler, "temperature");
  r.sampler.max_tokens = detail::require<int>(sampler, "max_tokens");
  if (r.sample_index < 0) throw CorpusError("sample_index must be nonnegative");
  if (r.token_count < 0) throw CorpusError("token_count must be nonnegative");
  if (r.sampler.temperature < 0) throw CorpusError("sampler.temperature must be nonnegative");
  if (r.sampler.max_tokens < 1) throw CorpusError("sampler.max_tokens must be positive");
  return r;
}

}  // namespace

void validate_records(const std::vector<GenerationRecord>& records,
                      const CorpusManifest& manifest) {
  std::set<GenerationRecord::Key> seen;
  for (const auto& r : records) {
    if (r.sample_index < 0 || r.sample_index >= manifest.k_samples)
      throw CorpusError("sample_index " + std::to_string(r.sample_index) + " outside [0, " +
                        std::to_string(manifest.k_samples) + ") for " + describe_key(r.key()));
    if (!seen.insert(r.key()).second)
      throw CorpusError("duplicate record key " + describe_key(r.key()));
  }
}

void write_corpus(const std::vector<GenerationRecord>& records, const CorpusManifest& manifest,
                  const std::filesystem::path& destination) {
  manifest.validate();
  validate_records(records, manifest);
  std::ofstream out(destination, std::ios::binary | std::ios::trunc);
  if (!out) throw CorpusError("cannot open '" + destination.string() + "' for writing");
  out << manifest_to_json(manifest).dump() << '\n';
  for (const auto& r : records) out << record_to_json(r).dump() << '\n';
  out.flush();
  if (!out) throw CorpusError("write failed for '" + destination.string() + "'");
}

Corpus read_corpus(const std::filesystem::path& source) {
  std::ifstream in(source, std::ios::binary);
  if (!in) throw CorpusError("cannot open corpus '" + source.string() + "'");
  Corpus corpus;
  std::string line;
  std::size_t line_no = 0;
  bool have_manifest = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = detail::parse_object(line);
      if (!have_manifest) {
        corpus.manifest = manifest_from_json(j);
        have_manifest = true;
      } else {
        corpus.records.push_back(record_from_json(j));
      }
    } catch (const Error& e) {
      throw CorpusError(source.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!have_manifest) throw CorpusError("corpus '" + source.string() + "' has no manifest line");
  try {
    validate_records(corpus.records, corpus.manifest);
  } catch (const Error& e) {
    throw CorpusError(source.string() + ": " + e.what());
  }
  return corpus;
}

CorpusAppender::CorpusAppender(const std::filesystem::path& path, const CorpusManifest& manifest)
    : path_(path) {
  manifest.validate();
  std::error_code ec;
  const bool exists = std::filesystem::exists(path, ec) && std::filesystem::file_size(path, ec) > 0;
  if (exists) {
    const Corpus existing = read_corpus(path);
    if (existing.manifest != manifest)
      throw CorpusError("corpus '" + path.string() + "' has a different manifest (n=" +
                        std::to_string(existing.manifest.n_task_prompts) +
                        ", k=" + std::to_string(existing.manifest.k_samples) +
                        ", model_id=" + existing.manifest.model_id + ")");
    out_.open(path, std::ios::binary | std::ios::app);
  } else {
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (out_) out_ << manifest_to_json(manifest).dump() << '\n' << std::flush;
  }
  if (!out_) throw CorpusError("cannot open '" + path.string() + "' for appending");
}

void CorpusAppender::append(const GenerationRecord& record) {
  out_ << record_to_json(record).dump() << '\n' << std::flush;
  if (!out_) throw CorpusError("append failed for '" + path_.string() + "'");
}

RecordBlocks group_records(const std::vector<GenerationRecord>& records,
                           std::string_view system_prompt_id,
                           const std::vector<std::string>& task_prompt_ids, int k) {
  if (k < 1) throw CorpusError("k must be positive");
  if (task_prompt_ids.empty()) throw CorpusError("task prompt list is empty");
  std::map<std::string, std::size_t, std::less<>> block_of;
  for (std::size_t i = 0; i < task_prompt_ids.size(); ++i)
    if (!block_of.emplace(task_prompt_ids[i], i).second)
      throw CorpusError("task prompt id '" + task_prompt_ids[i] + "' listed twice");

  const auto kk = static_cast<std::size_t>(k);
  std::vector<std::vector<const GenerationRecord*>> slots(
      task_prompt_ids.size(), std::vector<const GenerationRecord*>(kk, nullptr));
  for (const auto& r : records) {
    if (r.system_prompt_id != system_prompt_id) continue;
    const auto it = block_of.find(r.task_prompt_id);
    if (it == block_of.end())
      throw CorpusError("unknown task prompt '" + r.task_prompt_id + "' for system prompt '" +
                        std::string(system_prompt_id) + "'");
    if (r.sample_index < 0 || r.sample_index >= k)
      throw CorpusError("extra sample " + describe_key(r.key()) + " (k=" + std::to_string(k) +
                        ")");
    auto& slot = slots[it->second][static_cast<std::size_t>(r.sample_index)];
    if (slot != nullptr) throw CorpusError("duplicate record key " + describe_key(r.key()));
    slot = &r;
  }

  RecordBlocks blocks(task_prompt_ids.size());
  for (std::size_t i = 0; i < slots.size(); ++i) {
    blocks[i].reserve(kk);
    for (std::size_t j = 0; j < kk; ++j) {
      if (slots[i][j] == nullptr)
        throw CorpusError("missing sample (task_prompt_id=" + task_prompt_ids[i] +
                          ", sample_index=" + std::to_string(j) + ") for system prompt '" +
                          std::string(system_prompt_id) + "'");
      blocks[i].push_back(*slots[i][j]);
    }
  }
  return blocks;
}

std::vector<std::string> system_prompt_ids(const std::vector<GenerationRecord>& records) {
  std::vector<std::string> out;
  std::set<std::string, std::less<>> seen;
  for (const auto& r : records)
    if (seen.insert(r.system_prompt_id).second) out.push_back(r.system_prompt_id);
  return out;
}

std::vector<std::string> task_prompt_ids(const std::vector<GenerationRecord>& records,
                                         std::string_view system_prompt_id) {
  std::vector<std::string> out;
  std::set<std::string, std::less<>> seen;
  for (const auto& r : records)
    if (r.system_prompt_id == system_prompt_id && seen.insert(r.task_prompt_id).second)
      out.push_back(r.task_prompt_id);
  return out;
}

namespace {

template <typename Fn>
void for_each_json_line(const std::filesystem::path& source, Fn&& fn) {
  std::ifstream in(source, std::ios::binary);
  if (!in) throw CorpusError("cannot open '" + source.string() + "'");
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      fn(detail::parse_object(line));
    } catch (const Error& e) {
      throw CorpusError(source.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

}  // namespace

std::vector<SystemPrompt> read_system_prompts(const std::filesystem::path& source) {
  std::vector<SystemPrompt> prompts;
  std::set<std::string> ids;
  for_each_json_line(source, [&](const ojson& j) {
    std::optional<std::string> label;
    if (auto it = j.find("source_label"); it != j.end() && !it->is_null()) {
      label = it->is_string() ? it->get<std::string>() : it->dump();
    }
    auto p = SystemPrompt::make(detail::require<std::string>(j, "id"),
                                detail::require<std::string>(j, "text"), std::move(label));
    if (auto it = j.find("content_hash"); it != j.end() && it->get<std::string>() != p.content_hash)
      throw CorpusError("content_hash does not match text for system prompt '" + p.id + "'");
    if (!ids.insert(p.id).second) throw CorpusError("duplicate system prompt id '" + p.id + "'");
    prompts.push_back(std::move(p));
  });
  return prompts;
}

void write_system_prompts(const std::vector<SystemPrompt>& prompts,
                          const std::filesystem::path& destination) {
  std::ofstream out(destination, std::ios::binary | std::ios::trunc);
  if (!out) throw CorpusError("cannot open '" + destination.string() + "' for writing");
  for (const auto& p : prompts) {
    ojson j;
    j["id"] = p.id;
    j["text"] = p.text;
    j["content_hash"] = p.content_hash;
    if (p.source_label) j["source_label"] = *p.source_label;
    out << j.dump() << '\n';
  }
}

std::vector<TaskPrompt> read_task_prompts(const std::filesystem::path& source) {
  std::vector<TaskPrompt> prompts;
  std::set<std::string> ids;
  for_each_json_line(source, [&](const ojson& j) {
    TaskPrompt t;
    t.id = detail::require<std::string>(j, "id");
    t.text = detail::require<std::string>(j, "text");
    if (t.text.empty()) throw CorpusError("task prompt '" + t.id + "' has empty text");
    if (auto it = j.find("target_prompt_ids"); it != j.end())
      t.target_prompt_ids = it->get<std::vector<std::string>>();
    if (!ids.insert(t.id).second) throw CorpusError("duplicate task prompt id '" + t.id + "'");
    prompts.push_back(std::move(t));
  });
  return prompts;
}

}  // namespace promptmi
