#include "promptmi/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>

#include "promptmi/blackbox.hpp"
#include "promptmi/corpus.hpp"
#include "promptmi/embedding.hpp"
#include "promptmi/error.hpp"
#include "promptmi/evaluation.hpp"
#include "promptmi/querying.hpp"
#include "promptmi/serialize.hpp"
#include "promptmi/stat_test.hpp"
#include "promptmi/synthetic.hpp"

#ifndef PROMPTMI_VERSION
#define PROMPTMI_VERSION "0.0.0"
#endif

namespace promptmi::cli {

std::string tool_version() { return PROMPTMI_VERSION; }

std::map<std::string, std::string> parse_key_value_config(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  const auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    std::string content = trim(line);
    if (content.empty() || content.front() == '#') continue;
    const auto eq = content.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    std::string key = trim(content.substr(0, eq));
    std::string value = trim(content.substr(eq + 1));
    if (value.size() >= 2 && (value.front() == '"' || value.front() == '\'') &&
        value.back() == value.front()) {
      value = value.substr(1, value.size() - 2);
    } else if (const auto hash = value.find(" #"); hash != std::string::npos) {
      value = trim(value.substr(0, hash));
    }
    std::replace(key.begin(), key.end(), '-', '_');
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    out[key] = value;
  }
  return out;
}

namespace {

using Clock = std::chrono::steady_clock;

struct Common {
  std::uint64_t seed = 0;
  double alpha = 0.05;
  std::size_t permutations = 10'000;
  std::string p_value_rule = "paper_ratio";
  unsigned threads = 1;
  std::string embedder = "mock";
  std::string embed_endpoint;
  std::string embed_model = "mock";
  std::size_t embed_dim = 384;
  std::size_t embed_batch = 32;
  std::size_t embed_parallel = 1;
  bool normalize_embeddings = false;
  std::string embed_api_key_env = "PROMPTMI_EMBED_API_KEY";
  std::string out;

  TestConfig test_config(std::string_view stage) const {
    TestConfig cfg;
    cfg.n_permutations = permutations;
    cfg.alpha = alpha;
    cfg.rng_seed = derive_seed(seed, stage);
    cfg.p_value_rule = parse_p_value_rule(p_value_rule);
    cfg.threads = threads;
    cfg.validate();
    return cfg;
  }

  EmbedderSpec embedder_spec() const {
    EmbedderSpec spec;
    spec.kind = parse_embedder_kind(embedder);
    if (!embed_endpoint.empty()) spec.endpoint = embed_endpoint;
    spec.model_name = embed_model;
    spec.dim = embed_dim;
    spec.batch_size = embed_batch;
    spec.max_parallel = embed_parallel;
    spec.normalize_embeddings = normalize_embeddings;
    spec.api_key_env = embed_api_key_env;
    spec.validate();
    return spec;
  }

  Json echo() const {
    Json j;
    j["seed"] = seed;
    j["alpha"] = alpha;
    j["permutations"] = permutations;
    j["p_value_rule"] = p_value_rule;
    j["embedder"] = embedder;
    j["embed_endpoint"] = embed_endpoint;
    j["embed_model"] = embed_model;
    j["embed_dim"] = embed_dim;
    j["embed_batch"] = embed_batch;
    j["normalize_embeddings"] = normalize_embeddings;
    return j;
  }
};

// Timing and the final report document.
class Report {
 public:
  explicit Report(std::string command) : command_(std::move(command)), start_(Clock::now()) {}

  template <typename Fn>
  auto stage(const std::string& name, Fn&& fn) {
    const auto t0 = Clock::now();
    if constexpr (std::is_void_v<decltype(fn())>) {
      fn();
      timing_[name] = seconds_since(t0);
    } else {
      auto value = fn();
      timing_[name] = seconds_since(t0);
      return value;
    }
  }

  Json document(Json config_echo, Json result) const {
    Json j;
    j["command"] = command_;
    j["config_echo"] = std::move(config_echo);
    j["result"] = std::move(result);
    Json timing = timing_;
    timing["total"] = seconds_since(start_);
    j["timing"] = std::move(timing);
    Json versions;
    versions["report_schema_version"] = kReportSchemaVersion;
    versions["corpus_schema_version"] = kCorpusSchemaVersion;
    versions["tool_version"] = tool_version();
    j["versions"] = std::move(versions);
    return j;
  }

 private:
  static double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
  }

  std::string command_;
  Clock::time_point start_;
  Json timing_ = Json::object();
};

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw ConfigError("write failed for '" + path.string() + "'");
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// A corpus file or an embedding dump, viewed as a source of grouped embeddings.
class GroupSource {
 public:
  static std::shared_ptr<GroupSource> open(const std::filesystem::path& path) {
    auto src = std::make_shared<GroupSource>();
    src->path_ = path;
    if (is_embedding_dump(path)) {
      src->dump_ = read_embedding_dump(path);
    } else {
      src->corpus_ = read_corpus(path);
    }
    return src;
  }

  const std::filesystem::path& path() const { return path_; }
  bool is_dump() const { return dump_.has_value(); }
  const CorpusManifest& manifest() const { return dump_ ? dump_->manifest : corpus_->manifest; }

  std::vector<std::string> system_prompt_ids() const {
    return dump_ ? dump_->system_prompt_ids() : promptmi::system_prompt_ids(corpus_->records);
  }

  std::vector<std::string> task_ids(const std::string& sp) const {
    return dump_ ? dump_->task_prompt_ids(sp) : promptmi::task_prompt_ids(corpus_->records, sp);
  }

  /// Explicit id, or the only system prompt in the file.
  std::string resolve_prompt(const std::string& requested) const {
    const auto ids = system_prompt_ids();
    if (!requested.empty()) {
      if (std::find(ids.begin(), ids.end(), requested) == ids.end())
        throw ConfigError("system prompt '" + requested + "' not found in " + path_.string());
      return requested;
    }
    if (ids.size() != 1)
      throw ConfigError(path_.string() + " holds " + std::to_string(ids.size()) +
                        " system prompts; choose one with a prompt-id flag");
    return ids.front();
  }

  std::string embedder_identity(const EmbedderSpec& spec) const {
    return dump_ ? dump_->embedder : spec.identity();
  }

  GroupedEmbeddings embeddings(const std::string& sp, const std::vector<std::string>& task_ids,
                               const EmbedderSpec& spec,
                               const std::optional<SweepCell>& cell = std::nullopt) {
    const auto key = std::make_tuple(sp, task_ids, cell ? cell->n : 0, cell ? cell->k : 0,
                                     cell ? cell->max_tokens.value_or(0) : 0);
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    GroupedEmbeddings result = compute(sp, task_ids, spec, cell);
    cache_.emplace(key, result);
    return result;
  }

 private:
  GroupedEmbeddings compute(const std::string& sp, const std::vector<std::string>& task_ids,
                            const EmbedderSpec& spec, const std::optional<SweepCell>& cell) const {
    if (dump_) {
      auto full = dump_->group(sp, task_ids);
      if (!cell) return full;
      if (cell->max_tokens)
        throw ConfigError("max_tokens sweeps need text corpora; " + path_.string() +
                          " holds embeddings");
      return full.prefix(cell->n, cell->k);
    }
    auto blocks = group_records(corpus_->records, sp, task_ids, corpus_->manifest.k_samples);
    if (cell) blocks = restrict_blocks(blocks, *cell);
    return embed_grouped(spec, blocks);
  }

  std::filesystem::path path_;
  std::optional<Corpus> corpus_;
  std::optional<EmbeddingDump> dump_;
  std::map<std::tuple<std::string, std::vector<std::string>, std::size_t, std::size_t, int>,
           GroupedEmbeddings>
      cache_;
};

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& s : items) out += (out.empty() ? "" : ", ") + s;
  return out;
}

// Task prompt order of `reference`; both sides must use the same id set.
std::vector<std::string> common_task_ids(const GroupSource& a, const std::string& a_sp,
                                         const GroupSource& b, const std::string& b_sp) {
  const auto ta = a.task_ids(a_sp);
  const auto tb = b.task_ids(b_sp);
  const std::set<std::string> sa(ta.begin(), ta.end()), sb(tb.begin(), tb.end());
  if (sa != sb) {
    std::vector<std::string> only_a, only_b;
    std::set_difference(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(only_a));
    std::set_difference(sb.begin(), sb.end(), sa.begin(), sa.end(), std::back_inserter(only_b));
    throw ConfigError("task prompt sets differ; only in " + a.path().string() + ": [" +
                      join(only_a) + "]; only in " + b.path().string() + ": [" + join(only_b) + "]");
  }
  return ta;
}

void check_same_embedder(const std::vector<std::pair<std::string, std::string>>& identities) {
  for (const auto& [path, id] : identities)
    if (id != identities.front().second)
      throw ConfigError("embedder mismatch: " + identities.front().first + " uses '" +
                        identities.front().second + "' but " + path + " uses '" + id + "'");
}

void emit_report(const Common& common, const Json& doc, std::ostream& out) {
  if (!common.out.empty()) {
    write_text(common.out, doc.dump(2) + "\n");
    out << "report written to " << common.out << "\n";
  }
}

std::string fmt_p(double p) {
  std::ostringstream os;
  os.precision(6);
  os << p;
  return os.str();
}

// ---------------------------------------------------------------- generate

struct GenerateArgs {
  std::string system_prompt_file;
  std::string system_prompt_id;
  bool all_prompts = false;
  std::string task_prompts_file;
  std::string model;
  std::string endpoint;
  int k = 1;
  double temperature = 1.0;
  int max_tokens = 64;
  std::size_t max_parallel = 4;
  int max_retries = 3;
  int timeout_ms = 60000;
  int backoff_ms = 500;
  std::string api_key_env = "PROMPTMI_API_KEY";
  std::string corpus_out;
};

std::vector<SystemPrompt> load_system_prompts(const std::string& file, const std::string& id,
                                              bool all) {
  const std::filesystem::path path(file);
  if (path.extension() == ".jsonl") {
    auto prompts = read_system_prompts(path);
    if (all) return prompts;
    if (id.empty()) {
      if (prompts.size() != 1)
        throw ConfigError(file + " holds " + std::to_string(prompts.size()) +
                          " prompts; pass --system-prompt-id or --all-prompts");
      return prompts;
    }
    for (auto& p : prompts)
      if (p.id == id) return {p};
    throw ConfigError("system prompt '" + id + "' not found in " + file);
  }
  std::string text = read_text(path);
  while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
  return {SystemPrompt::make(id.empty() ? path.stem().string() : id, std::move(text))};
}

ModelEndpointConfig endpoint_config(const GenerateArgs& a) {
  ModelEndpointConfig ep;
  ep.model_id = a.model;
  ep.endpoint_url = a.endpoint;
  ep.api_key_env = a.api_key_env;
  ep.temperature = a.temperature;
  ep.max_tokens = a.max_tokens;
  ep.k_samples = a.k;
  ep.request_timeout = std::chrono::milliseconds(a.timeout_ms);
  ep.initial_backoff = std::chrono::milliseconds(a.backoff_ms);
  ep.max_parallel = a.max_parallel;
  ep.max_retries = a.max_retries;
  ep.validate();
  return ep;
}

Json generate_echo(const GenerateArgs& a) {
  Json j;
  j["system_prompt_file"] = a.system_prompt_file;
  j["system_prompt_id"] = a.system_prompt_id;
  j["all_prompts"] = a.all_prompts;
  j["task_prompts_file"] = a.task_prompts_file;
  j["model"] = a.model;
  j["endpoint"] = a.endpoint;
  j["k"] = a.k;
  j["temperature"] = a.temperature;
  j["max_tokens"] = a.max_tokens;
  j["max_parallel"] = a.max_parallel;
  j["max_retries"] = a.max_retries;
  j["api_key_env"] = a.api_key_env;
  j["out"] = a.corpus_out;
  return j;
}

// Samples every selected prompt into one corpus; returns a summary object.
Json run_generate(const GenerateArgs& a, std::ostream& err) {
  const auto tasks = read_task_prompts(a.task_prompts_file);
  const auto ep = endpoint_config(a);
  std::vector<std::optional<SystemPrompt>> prompts;
  if (a.system_prompt_file.empty()) {
    prompts.emplace_back(std::nullopt);
  } else {
    for (auto& p : load_system_prompts(a.system_prompt_file, a.system_prompt_id, a.all_prompts))
      prompts.emplace_back(std::move(p));
  }
  const LogFn log = [&](std::string_view msg) { err << "[generate] " << msg << "\n"; };
  Json summary = Json::array();
  for (const auto& prompt : prompts) {
    SamplingPlan plan;
    plan.system_prompt = prompt;
    if (!prompt && !a.system_prompt_id.empty()) plan.system_prompt_label = a.system_prompt_id;
    plan.task_prompts = tasks;
    plan.k = a.k;
    plan.endpoint = ep;
    const auto s = sample_generations(plan, a.corpus_out, log);
    Json item;
    item["system_prompt_id"] = plan.record_system_prompt_id();
    if (prompt) item["content_hash"] = prompt->content_hash;
    item["records"] = s.records.size();
    item["requests_issued"] = s.requests_issued;
    item["skipped_existing"] = s.skipped_existing;
    item["retries"] = s.retries;
    summary.push_back(std::move(item));
  }
  return summary;
}

// -------------------------------------------------------------------- test

struct TestArgs {
  std::string known;
  std::string target;
  std::string known_prompt_id;
  std::string target_prompt_id;
  bool allow_model_mismatch = false;
};

struct TestOutcome {
  PermutationTestResult result;
  std::string known_prompt;
  std::string target_prompt;
  std::size_t n = 0, k = 0, dim = 0;
};

TestOutcome run_test(const TestArgs& a, const Common& common, Report& report) {
  const auto spec = common.embedder_spec();
  const auto cfg = common.test_config("permutation");
  auto known = GroupSource::open(a.known);
  auto target = a.target == a.known ? known : GroupSource::open(a.target);
  if (!a.allow_model_mismatch && known->manifest().model_id != target->manifest().model_id)
    throw ConfigError("model ids differ ('" + known->manifest().model_id + "' vs '" +
                      target->manifest().model_id +
                      "'); pass --allow-model-mismatch or use the blackbox command");
  if (known->manifest().k_samples != target->manifest().k_samples)
    throw ConfigError("corpora declare different k (" + std::to_string(known->manifest().k_samples) +
                      " vs " + std::to_string(target->manifest().k_samples) + ")");
  check_same_embedder({{a.known, known->embedder_identity(spec)},
                       {a.target, target->embedder_identity(spec)}});
  TestOutcome o;
  o.known_prompt = known->resolve_prompt(a.known_prompt_id);
  o.target_prompt = target->resolve_prompt(a.target_prompt_id);
  const auto tasks = common_task_ids(*known, o.known_prompt, *target, o.target_prompt);
  auto [v_known, v_target] = report.stage("embed", [&] {
    return std::make_pair(known->embeddings(o.known_prompt, tasks, spec),
                          target->embeddings(o.target_prompt, tasks, spec));
  });
  o.n = v_known.n();
  o.k = v_known.k();
  o.dim = v_known.dim();
  o.result = report.stage("test", [&] { return permutation_test(v_target, v_known, cfg); });
  return o;
}

Json test_echo(const TestArgs& a, const Common& common) {
  Json j = common.echo();
  j["known"] = a.known;
  j["target"] = a.target;
  j["known_prompt_id"] = a.known_prompt_id;
  j["target_prompt_id"] = a.target_prompt_id;
  j["allow_model_mismatch"] = a.allow_model_mismatch;
  return j;
}

int finish_test(const TestOutcome& o, const Json& echo, const Common& common, Report& report,
                std::ostream& out) {
  Json result = to_json(o.result);
  result["known_prompt_id"] = o.known_prompt;
  result["target_prompt_id"] = o.target_prompt;
  result["n"] = o.n;
  result["k"] = o.k;
  result["dim"] = o.dim;
  out << "s_obs     " << o.result.s_obs << "\n"
      << "p-value   " << fmt_p(o.result.p_value) << " (" << o.result.extreme_count << " of "
      << o.result.n_permutations_run << " permutations as extreme)\n"
      << "decision  "
      << (o.result.decision == Decision::distinct ? "prompts are distinct"
                                                  : "insufficient evidence to claim prompts are distinct")
      << " at alpha " << common.alpha << "\n";
  emit_report(common, report.document(echo, result), out);
  return o.result.decision == Decision::distinct ? kExitDistinct : kExitInsufficientEvidence;
}

// ---------------------------------------------------------------- blackbox

struct BlackboxArgs {
  std::string target;
  std::string target_prompt_id;
  std::vector<std::string> references;
  std::string reference_prompt_id;
};

int run_blackbox(const BlackboxArgs& a, const Common& common, std::ostream& out) {
  Report report("blackbox");
  const auto spec = common.embedder_spec();
  const auto cfg = common.test_config("permutation");
  auto target = GroupSource::open(a.target);
  const auto target_sp = target->resolve_prompt(a.target_prompt_id);
  std::vector<std::shared_ptr<GroupSource>> refs;
  std::vector<std::pair<std::string, std::string>> identities{{a.target, target->embedder_identity(spec)}};
  for (const auto& path : a.references) {
    refs.push_back(GroupSource::open(path));
    identities.emplace_back(path, refs.back()->embedder_identity(spec));
    if (refs.back()->manifest().k_samples != target->manifest().k_samples)
      throw ConfigError(path + " declares k=" + std::to_string(refs.back()->manifest().k_samples) +
                        ", target declares k=" + std::to_string(target->manifest().k_samples));
  }
  check_same_embedder(identities);

  std::vector<NamedEmbeddings> named;
  GroupedEmbeddings v_target = report.stage("embed", [&] {
    std::vector<std::string> tasks = target->task_ids(target_sp);
    for (const auto& ref : refs) {
      const auto sp = ref->resolve_prompt(a.reference_prompt_id);
      tasks = common_task_ids(*target, target_sp, *ref, sp);
      named.emplace_back(ref->manifest().model_id, ref->embeddings(sp, tasks, spec));
    }
    return target->embeddings(target_sp, tasks, spec);
  });
  const auto result = report.stage("test", [&] { return blackbox_test(v_target, named, cfg); });

  for (const auto& r : result.per_reference)
    out << "reference " << r.model_id << ": p = " << fmt_p(r.result.p_value) << "\n";
  out << "max p     " << fmt_p(result.max_p) << " vs corrected alpha " << result.corrected_alpha
      << " (alpha " << common.alpha << " / " << result.m << ")\n"
      << "decision  "
      << (result.decision == Decision::distinct ? "prompts are distinct"
                                                : "insufficient evidence to claim prompts are distinct")
      << "\n";
  Json echo = common.echo();
  echo["target"] = a.target;
  echo["target_prompt_id"] = a.target_prompt_id;
  echo["references"] = a.references;
  echo["reference_prompt_id"] = a.reference_prompt_id;
  emit_report(common, report.document(echo, to_json(result)), out);
  return result.decision == Decision::distinct ? kExitDistinct : kExitInsufficientEvidence;
}

// ---------------------------------------------------------- evaluate/sweep

struct PairCorpora {
  std::string corpora_dir;
  std::string known;
  std::string target;

  std::pair<std::shared_ptr<GroupSource>, std::shared_ptr<GroupSource>> open() const {
    std::string k = known, t = target;
    if (!corpora_dir.empty()) {
      if (k.empty()) k = (std::filesystem::path(corpora_dir) / "known.jsonl").string();
      if (t.empty()) t = (std::filesystem::path(corpora_dir) / "target.jsonl").string();
    }
    if (k.empty() || t.empty())
      throw ConfigError("need --corpora-dir or both --known and --target");
    auto ks = GroupSource::open(k);
    auto ts = t == k ? ks : GroupSource::open(t);
    return {ks, ts};
  }
};

void write_evaluation_outputs(const EvaluationReport& report, const Common& common) {
  if (common.out.empty()) return;
  std::filesystem::path base(common.out);
  base.replace_extension();
  write_text(base.string() + ".pairs.csv", per_pair_csv(report));
  if (report.roc) write_text(base.string() + ".roc.csv", roc_csv(*report.roc));
}

void print_metrics(const EvaluationReport& r, std::ostream& out) {
  const auto opt = [](const std::optional<double>& v) { return v ? fmt_p(*v) : std::string("undefined"); };
  const auto ms = [](const std::optional<MeanStd>& v) {
    return v ? fmt_p(v->mean) + " +/- " + fmt_p(v->std) : std::string("undefined");
  };
  out << "pairs                          " << r.per_pair.size() << "\n"
      << "FPR (distinct prompt missed)   " << opt(r.metrics.fpr) << "\n"
      << "FNR (reuse wrongly ruled out)  " << opt(r.metrics.fnr) << "\n"
      << "avg p, positive pairs          " << ms(r.metrics.avg_p_positive) << "\n"
      << "avg p, negative pairs          " << ms(r.metrics.avg_p_negative) << "\n";
  if (r.roc) out << "ROC AUC                        " << r.roc->auc << "\n";
}

struct EvaluateArgs {
  std::string pairs;
  PairCorpora corpora;
};

int run_evaluate(const EvaluateArgs& a, const Common& common, std::ostream& out) {
  Report report("evaluate");
  const auto spec = common.embedder_spec();
  const auto cfg = common.test_config("evaluate");
  const auto pairs = read_pairs(a.pairs);
  auto [known, target] = a.corpora.open();
  check_same_embedder({{known->path().string(), known->embedder_identity(spec)},
                       {target->path().string(), target->embedder_identity(spec)}});
  const PairMaterializer materialize = [&](const PromptPair& p, std::size_t) {
    const auto tasks = common_task_ids(*known, p.known_prompt_id, *target, p.deployed_prompt_id);
    return std::make_pair(known->embeddings(p.known_prompt_id, tasks, spec),
                          target->embeddings(p.deployed_prompt_id, tasks, spec));
  };
  const auto result = report.stage("evaluate", [&] { return evaluate_pairs(pairs, materialize, cfg); });
  print_metrics(result, out);
  Json echo = common.echo();
  echo["pairs"] = a.pairs;
  echo["corpora_dir"] = a.corpora.corpora_dir;
  echo["known"] = a.corpora.known;
  echo["target"] = a.corpora.target;
  write_evaluation_outputs(result, common);
  emit_report(common, report.document(echo, to_json(result)), out);
  return 0;
}

struct SweepArgs {
  std::vector<std::size_t> n_values;
  std::vector<std::size_t> k_values;
  std::vector<int> max_tokens_values;
  std::string csv;
  std::string pairs;
  PairCorpora corpora;
  bool synthetic = false;
  std::size_t trials = 200;
  double sep = 0.1;
  std::size_t dim = 32;
  double noise = 1.0;
  double offset = 0.5;
  double dispersion = 1.0;
};

int run_sweep(const SweepArgs& a, const Common& common, std::ostream& out) {
  Report report("sweep");
  const auto cfg = common.test_config("sweep");
  const auto grid = make_grid(a.n_values, a.k_values, a.max_tokens_values);
  std::vector<SweepRow> rows;
  Json echo = common.echo();
  echo["n_values"] = a.n_values;
  echo["k_values"] = a.k_values;
  echo["max_tokens_values"] = a.max_tokens_values;

  if (a.synthetic) {
    if (!a.max_tokens_values.empty())
      throw ConfigError("max_tokens sweeps need text corpora, not --synthetic");
    SyntheticSpec base;
    base.dim = a.dim;
    base.n = *std::max_element(a.n_values.begin(), a.n_values.end());
    base.k = *std::max_element(a.k_values.begin(), a.k_values.end());
    base.within_noise = a.noise;
    base.per_block_offset = a.offset;
    base.effect_dispersion = a.dispersion;
    base.validate();
    std::vector<PromptPair> pairs;
    for (std::size_t t = 0; t < a.trials; ++t) {
      pairs.push_back({"neg-known-" + std::to_string(t), "neg-deployed-" + std::to_string(t),
                       PairLabel::negative, std::nullopt});
      pairs.push_back({"pos-" + std::to_string(t), "pos-" + std::to_string(t), PairLabel::positive,
                       std::nullopt});
    }
    const std::uint64_t data_seed = derive_seed(common.seed, "synth");
    std::map<std::size_t, std::pair<GroupedEmbeddings, GroupedEmbeddings>> cache;
    const CellMaterializer materialize = [&](const PromptPair& p, std::size_t i, const SweepCell& cell) {
      auto it = cache.find(i);
      if (it == cache.end()) {
        SyntheticSpec spec = base;
        spec.separation_angle = p.label == PairLabel::negative ? a.sep : 0.0;
        spec.rng_seed = derive_seed(data_seed, static_cast<std::uint64_t>(i));
        it = cache.emplace(i, generate_pair(spec)).first;
      }
      return std::make_pair(it->second.first.prefix(cell.n, cell.k),
                            it->second.second.prefix(cell.n, cell.k));
    };
    rows = report.stage("sweep", [&] { return budget_sweep(pairs, grid, materialize, cfg); });
    echo["synthetic"] = Json{{"trials", a.trials}, {"sep", a.sep}, {"dim", a.dim}, {"noise", a.noise},
                             {"offset", a.offset}, {"dispersion", a.dispersion}};
  } else {
    const auto spec = common.embedder_spec();
    const auto pairs = read_pairs(a.pairs);
    auto [known, target] = a.corpora.open();
    check_same_embedder({{known->path().string(), known->embedder_identity(spec)},
                         {target->path().string(), target->embedder_identity(spec)}});
    const CellMaterializer materialize = [&](const PromptPair& p, std::size_t, const SweepCell& cell) {
      const auto tasks = common_task_ids(*known, p.known_prompt_id, *target, p.deployed_prompt_id);
      return std::make_pair(known->embeddings(p.known_prompt_id, tasks, spec, cell),
                            target->embeddings(p.deployed_prompt_id, tasks, spec, cell));
    };
    rows = report.stage("sweep", [&] { return budget_sweep(pairs, grid, materialize, cfg); });
    echo["pairs"] = a.pairs;
    echo["corpora_dir"] = a.corpora.corpora_dir;
    echo["known"] = a.corpora.known;
    echo["target"] = a.corpora.target;
  }

  const std::string csv = sweep_csv(rows);
  if (!a.csv.empty()) write_text(a.csv, csv);
  out << csv;
  emit_report(common, report.document(echo, to_json(rows)), out);
  return 0;
}

// ------------------------------------------------------------------- synth

struct SynthArgs {
  SyntheticSpec spec;
  std::string data_out;
};

int run_synth(const SynthArgs& a, const Common& common, std::ostream& out) {
  Report report("synth");
  SyntheticSpec spec = a.spec;
  spec.rng_seed = common.seed;
  const auto [g1, g2] = report.stage("generate", [&] { return generate_pair(spec); });
  const auto dump = make_dump({{"group1", &g1}, {"group2", &g2}}, "synthetic",
                              "synthetic/" + std::to_string(spec.dim));
  write_embedding_dump(dump, a.data_out);
  out << "wrote " << 2 * g1.size() << " vectors (n=" << spec.n << ", k=" << spec.k
      << ", dim=" << spec.dim << ") to " << a.data_out << "\n";
  Json result;
  result["spec"] = to_json(spec);
  result["groups"] = Json::array({"group1", "group2"});
  result["observed_statistic"] = observed_statistic(g1, g2);
  Json echo = common.echo();
  echo["synthetic"] = to_json(spec);
  echo["data_out"] = a.data_out;
  emit_report(common, report.document(echo, result), out);
  return 0;
}

// ------------------------------------------------------------------- embed

int run_embed(const std::string& corpus_path, const std::string& dump_out, const Common& common,
              std::ostream& out) {
  Report report("embed");
  const auto spec = common.embedder_spec();
  const auto corpus = read_corpus(corpus_path);
  const auto dump = report.stage("embed", [&] { return embed_corpus(spec, corpus); });
  write_embedding_dump(dump, dump_out);
  out << "embedded " << dump.samples.size() << " responses with " << dump.embedder << " into "
      << dump_out << "\n";
  Json echo = common.echo();
  echo["corpus"] = corpus_path;
  echo["embeddings_out"] = dump_out;
  Json result;
  result["embedder"] = dump.embedder;
  result["vectors"] = dump.samples.size();
  emit_report(common, report.document(echo, result), out);
  return 0;
}

// ------------------------------------------------------------------- pairs

int run_pairs(const std::string& prompts_file, std::size_t negatives, const std::string& pairs_out,
              const Common& common, std::ostream& out) {
  const auto prompts = read_system_prompts(prompts_file);
  const auto pairs = build_pairs(prompts, negatives, derive_seed(common.seed, "pairs"));
  write_pairs(pairs, pairs_out);
  out << "wrote " << pairs.size() << " pairs (" << prompts.size() << " positive) to " << pairs_out
      << "\n";
  return 0;
}

// --------------------------------------------------------------------- run

const std::vector<std::string>& run_keys() {
  static const std::vector<std::string> keys{
      "system_prompt_file", "system_prompt_id", "task_prompts_file",
      "target_model",       "target_endpoint",  "target_api_key_env",
      "reference_model",    "reference_endpoint", "reference_api_key_env",
      "k",                  "temperature",      "max_tokens",
      "max_parallel",       "max_retries",      "timeout_ms",
      "backoff_ms",         "work_dir",         "allow_model_mismatch",
      "seed",               "alpha",            "permutations",
      "p_value_rule",       "embedder",         "embed_endpoint",
      "embed_model",        "embed_dim",        "embed_batch",
      "normalize_embeddings", "threads",        "out"};
  return keys;
}

std::string dashed(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return "--" + key;
}

template <typename T>
T convert(const std::map<std::string, std::string>& s, const std::string& key, T fallback) {
  const auto it = s.find(key);
  if (it == s.end() || it->second.empty()) return fallback;
  if constexpr (std::is_same_v<T, std::string>) {
    return it->second;
  } else if constexpr (std::is_same_v<T, bool>) {
    const auto& v = it->second;
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("key '" + key + "' expects a boolean, got '" + v + "'");
  } else {
    T value{};
    if (!CLI::detail::lexical_conversion<T, T>({it->second}, value))
      throw ConfigError("key '" + key + "' has an invalid value '" + it->second + "'");
    return value;
  }
}

bool dump_complete(const std::filesystem::path& path, const std::string& identity,
                   std::size_t expected) {
  std::error_code ec;
  if (!std::filesystem::exists(path, ec)) return false;
  try {
    const auto dump = read_embedding_dump(path);
    return dump.embedder == identity && dump.samples.size() == expected;
  } catch (const Error&) {
    return false;
  }
}

int run_end_to_end(const std::map<std::string, std::string>& s, std::ostream& out, std::ostream& err) {
  Report report("run");
  Common common;
  common.seed = convert<std::uint64_t>(s, "seed", 0);
  common.alpha = convert<double>(s, "alpha", 0.05);
  common.permutations = convert<std::size_t>(s, "permutations", 10'000);
  common.p_value_rule = convert<std::string>(s, "p_value_rule", "paper_ratio");
  common.threads = convert<unsigned>(s, "threads", 1);
  common.embedder = convert<std::string>(s, "embedder", "mock");
  common.embed_endpoint = convert<std::string>(s, "embed_endpoint", "");
  common.embed_model = convert<std::string>(s, "embed_model", "mock");
  common.embed_dim = convert<std::size_t>(s, "embed_dim", 384);
  common.embed_batch = convert<std::size_t>(s, "embed_batch", 32);
  common.normalize_embeddings = convert<bool>(s, "normalize_embeddings", false);
  common.out = convert<std::string>(s, "out", "");

  const std::filesystem::path work = convert<std::string>(s, "work_dir", "promptmi-run");
  std::filesystem::create_directories(work);
  if (common.out.empty()) common.out = (work / "report.json").string();

  GenerateArgs base;
  base.task_prompts_file = convert<std::string>(s, "task_prompts_file", "");
  base.k = convert<int>(s, "k", 10);
  base.temperature = convert<double>(s, "temperature", 1.0);
  base.max_tokens = convert<int>(s, "max_tokens", 64);
  base.max_parallel = convert<std::size_t>(s, "max_parallel", 4);
  base.max_retries = convert<int>(s, "max_retries", 3);
  base.timeout_ms = convert<int>(s, "timeout_ms", 60000);
  base.backoff_ms = convert<int>(s, "backoff_ms", 500);
  if (base.task_prompts_file.empty()) throw ConfigError("config lacks task_prompts_file");

  GenerateArgs target = base;
  target.model = convert<std::string>(s, "target_model", "");
  target.endpoint = convert<std::string>(s, "target_endpoint", "");
  target.api_key_env = convert<std::string>(s, "target_api_key_env", "PROMPTMI_API_KEY");
  target.system_prompt_id = "deployed";
  target.corpus_out = (work / "target.corpus.jsonl").string();

  GenerateArgs reference = base;
  reference.model = convert<std::string>(s, "reference_model", "");
  reference.endpoint = convert<std::string>(s, "reference_endpoint", "");
  reference.api_key_env = convert<std::string>(s, "reference_api_key_env", "PROMPTMI_API_KEY");
  reference.system_prompt_file = convert<std::string>(s, "system_prompt_file", "");
  reference.system_prompt_id = convert<std::string>(s, "system_prompt_id", "");
  reference.corpus_out = (work / "reference.corpus.jsonl").string();
  if (reference.system_prompt_file.empty()) throw ConfigError("config lacks system_prompt_file");

  std::string stage = "generate";
  try {
    Json generation;
    report.stage("generate", [&] {
      generation["target"] = run_generate(target, err);
      generation["reference"] = run_generate(reference, err);
    });

    stage = "embed";
    const auto spec = common.embedder_spec();
    const std::size_t expected = read_task_prompts(base.task_prompts_file).size() *
                                 static_cast<std::size_t>(base.k);
    for (const auto& side : {std::string("target"), std::string("reference")}) {
      const auto dump_path = work / (side + ".emb.jsonl");
      if (dump_complete(dump_path, spec.identity(), expected)) {
        err << "[run] embeddings for " << side << " already complete, skipping\n";
        continue;
      }
      report.stage("embed_" + side, [&] {
        const auto corpus = read_corpus(work / (side + ".corpus.jsonl"));
        write_embedding_dump(embed_corpus(spec, corpus), dump_path);
      });
    }

    stage = "test";
    TestArgs t;
    t.known = (work / "reference.emb.jsonl").string();
    t.target = (work / "target.emb.jsonl").string();
    t.allow_model_mismatch = true;
    const auto outcome = run_test(t, common, report);
    Json echo = common.echo();
    for (const auto& [key, value] : s) echo["settings"][key] = value;
    Json result_echo = echo;
    result_echo["generation"] = generation;
    return finish_test(outcome, result_echo, common, report, out);
  } catch (const Error& e) {
    throw Error("stage '" + stage + "' failed: " + e.what() + " (artifacts of earlier stages kept in " +
                work.string() + "; rerun to resume from '" + stage + "')");
  }
}

// ---------------------------------------------------------------- wiring

void add_common(CLI::App& app, Common& c) {
  app.add_option("--seed", c.seed, "Seed all randomness derives from")->capture_default_str();
  app.add_option("--alpha", c.alpha, "Significance level")->capture_default_str();
  app.add_option("--permutations", c.permutations, "Permutations per test")->capture_default_str();
  app.add_option("--p-value-rule", c.p_value_rule, "paper_ratio or add_one")->capture_default_str();
  app.add_option("--threads", c.threads, "Permutation worker threads (0 = all cores)")
      ->capture_default_str();
  app.add_option("--embedder", c.embedder, "mock or remote")->capture_default_str();
  app.add_option("--embed-endpoint", c.embed_endpoint, "Remote embedding endpoint URL");
  app.add_option("--embed-model", c.embed_model, "Embedding model name (mock: hash salt)")
      ->capture_default_str();
  app.add_option("--embed-dim", c.embed_dim, "Embedding dimension")->capture_default_str();
  app.add_option("--embed-batch", c.embed_batch, "Texts per embedding request")->capture_default_str();
  app.add_option("--embed-parallel", c.embed_parallel, "Concurrent embedding requests")
      ->capture_default_str();
  app.add_option("--embed-api-key-env", c.embed_api_key_env,
                 "Environment variable holding the embedding API key")
      ->capture_default_str();
  app.add_flag("--normalize-embeddings", c.normalize_embeddings,
               "L2-normalize embeddings before averaging");
  app.add_option("--out", c.out, "Write the JSON run report here");
}

void add_generate_options(CLI::App& cmd, GenerateArgs& g) {
  cmd.add_option("--system-prompt-file", g.system_prompt_file,
                 "Plain-text prompt or JSONL prompt list; omit for a third-party service");
  cmd.add_option("--system-prompt-id", g.system_prompt_id,
                 "Prompt to use from a JSONL list, or the record label");
  cmd.add_flag("--all-prompts", g.all_prompts, "Sample every prompt of a JSONL list");
  cmd.add_option("--task-prompts-file", g.task_prompts_file, "JSONL task prompts")->required();
  cmd.add_option("--model", g.model, "Model id")->required();
  cmd.add_option("--endpoint", g.endpoint, "Chat completions URL")->required();
  cmd.add_option("--k", g.k, "Samples per task prompt")->capture_default_str();
  cmd.add_option("--temperature", g.temperature)->capture_default_str();
  cmd.add_option("--max-tokens", g.max_tokens)->capture_default_str();
  cmd.add_option("--max-parallel", g.max_parallel)->capture_default_str();
  cmd.add_option("--max-retries", g.max_retries)->capture_default_str();
  cmd.add_option("--timeout-ms", g.timeout_ms)->capture_default_str();
  cmd.add_option("--backoff-ms", g.backoff_ms, "Initial retry backoff")->capture_default_str();
  cmd.add_option("--api-key-env", g.api_key_env, "Environment variable holding the API key")
      ->capture_default_str();
  cmd.add_option("--corpus", g.corpus_out, "Corpus file to create or resume")->required();
}

void add_pair_corpora(CLI::App& cmd, PairCorpora& c) {
  cmd.add_option("--corpora-dir", c.corpora_dir, "Directory holding known.jsonl and target.jsonl");
  cmd.add_option("--known", c.known, "Corpus or embeddings sampled with the known prompts");
  cmd.add_option("--target", c.target, "Corpus or embeddings sampled with the deployed prompts");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Check whether a chat service uses a given system prompt"};
  app.name(args.empty() ? "promptmi" : std::filesystem::path(args.front()).filename().string());
  app.require_subcommand(1);
  app.fallthrough();
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.set_version_flag("--version", tool_version());

  Common common;
  add_common(app, common);

  GenerateArgs gen;
  auto* generate = app.add_subcommand("generate", "Sample responses into a corpus");
  add_generate_options(*generate, gen);

  std::string embed_corpus_path, embed_out;
  auto* embed = app.add_subcommand("embed", "Embed a corpus into an embedding dump");
  embed->add_option("--corpus", embed_corpus_path)->required();
  embed->add_option("--embeddings-out", embed_out)->required();

  TestArgs test_args;
  auto* test = app.add_subcommand("test", "Permutation test of one known/target pair");
  test->add_option("--known", test_args.known, "Corpus/embeddings from the known prompt")->required();
  test->add_option("--target", test_args.target, "Corpus/embeddings from the service")->required();
  test->add_option("--known-prompt-id", test_args.known_prompt_id);
  test->add_option("--target-prompt-id", test_args.target_prompt_id);
  test->add_flag("--allow-model-mismatch", test_args.allow_model_mismatch);

  BlackboxArgs bb;
  auto* blackbox = app.add_subcommand("blackbox", "Test against several reference models");
  blackbox->add_option("--target", bb.target)->required();
  blackbox->add_option("--target-prompt-id", bb.target_prompt_id);
  blackbox->add_option("--reference", bb.references, "Reference corpus (repeatable)")
      ->required()
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  blackbox->add_option("--reference-prompt-id", bb.reference_prompt_id);

  EvaluateArgs ev;
  auto* evaluate = app.add_subcommand("evaluate", "Score labeled prompt pairs");
  evaluate->add_option("--pairs", ev.pairs, "Pairs JSON")->required();
  add_pair_corpora(*evaluate, ev.corpora);

  SweepArgs sw;
  std::string grid_file;
  auto* sweep = app.add_subcommand("sweep", "Average p-values over a budget grid");
  sweep->add_option("--grid", grid_file, "key = value file with n_values, k_values, max_tokens_values");
  sweep->add_option("--n-values", sw.n_values)->delimiter(',')->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  sweep->add_option("--k-values", sw.k_values)->delimiter(',')->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  sweep->add_option("--max-tokens-values", sw.max_tokens_values)
      ->delimiter(',')
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  sweep->add_option("--csv", sw.csv, "Write the sweep table here");
  sweep->add_option("--pairs", sw.pairs);
  add_pair_corpora(*sweep, sw.corpora);
  sweep->add_flag("--synthetic", sw.synthetic, "Sweep synthetic trials instead of corpora");
  sweep->add_option("--trials", sw.trials)->capture_default_str();
  sweep->add_option("--sep", sw.sep, "Synthetic separation angle for negative trials")->capture_default_str();
  sweep->add_option("--dim", sw.dim)->capture_default_str();
  sweep->add_option("--noise", sw.noise)->capture_default_str();
  sweep->add_option("--offset", sw.offset)->capture_default_str();
  sweep->add_option("--dispersion", sw.dispersion)->capture_default_str();

  SynthArgs sy;
  auto* synth = app.add_subcommand("synth", "Write a synthetic embedding pair");
  synth->add_option("--dim", sy.spec.dim)->capture_default_str();
  synth->add_option("--n", sy.spec.n)->capture_default_str();
  synth->add_option("--k", sy.spec.k)->capture_default_str();
  synth->add_option("--sep", sy.spec.separation_angle, "Angle between the groups (radians)")
      ->capture_default_str();
  synth->add_option("--noise", sy.spec.within_noise)->capture_default_str();
  synth->add_option("--offset", sy.spec.per_block_offset)->capture_default_str();
  synth->add_option("--dispersion", sy.spec.effect_dispersion)->capture_default_str();
  synth->add_option("--data-out", sy.data_out, "Embedding dump to write")->required();

  std::string prompts_file, pairs_out;
  std::size_t negatives = 1;
  auto* pairs = app.add_subcommand("pairs", "Build positive/negative prompt pairs");
  pairs->add_option("--prompts", prompts_file, "JSONL system prompts")->required();
  pairs->add_option("--negatives-per-positive", negatives)->capture_default_str();
  pairs->add_option("--pairs-out", pairs_out)->required();

  std::string run_config;
  std::map<std::string, std::string> run_flags;
  auto* run_cmd = app.add_subcommand("run", "End-to-end: generate, embed, test");
  run_cmd->add_option("--config", run_config, "key = value configuration file")->required();
  for (const auto& key : run_keys()) {
    if (app.get_option_no_throw(dashed(key)) != nullptr) continue;
    run_cmd->add_option(dashed(key), run_flags[key]);
  }

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (!grid_file.empty()) {
      const auto grid = parse_key_value_config(read_text(grid_file));
      const auto list = [&](const std::string& key, auto& target) {
        if (!target.empty()) return;
        const auto it = grid.find(key);
        if (it == grid.end()) return;
        std::string text = it->second;
        std::replace(text.begin(), text.end(), ',', ' ');
        text.erase(std::remove(text.begin(), text.end(), '['), text.end());
        text.erase(std::remove(text.begin(), text.end(), ']'), text.end());
        std::istringstream in(text);
        typename std::decay_t<decltype(target)>::value_type v{};
        while (in >> v) target.push_back(v);
        if (!in.eof()) throw ConfigError("grid key '" + key + "' holds a non-integer");
      };
      list("n_values", sw.n_values);
      list("k_values", sw.k_values);
      list("max_tokens_values", sw.max_tokens_values);
    }

    if (generate->parsed()) {
      Report report("generate");
      const auto summary = report.stage("generate", [&] { return run_generate(gen, err); });
      for (const auto& item : summary)
        out << item["system_prompt_id"].get<std::string>() << ": " << item["records"].get<std::size_t>()
            << " records, " << item["requests_issued"].get<std::size_t>() << " requests issued, "
            << item["skipped_existing"].get<std::size_t>() << " already present\n";
      emit_report(common, report.document(generate_echo(gen), summary), out);
      return 0;
    }
    if (embed->parsed()) return run_embed(embed_corpus_path, embed_out, common, out);
    if (test->parsed()) {
      Report report("test");
      const auto outcome = run_test(test_args, common, report);
      return finish_test(outcome, test_echo(test_args, common), common, report, out);
    }
    if (blackbox->parsed()) return run_blackbox(bb, common, out);
    if (evaluate->parsed()) return run_evaluate(ev, common, out);
    if (sweep->parsed()) return run_sweep(sw, common, out);
    if (synth->parsed()) return run_synth(sy, common, out);
    if (pairs->parsed()) return run_pairs(prompts_file, negatives, pairs_out, common, out);
    if (run_cmd->parsed()) {
      auto settings = parse_key_value_config(read_text(run_config));
      for (const auto& key : run_keys()) {
        if (const auto* opt = app.get_option_no_throw(dashed(key)); opt != nullptr) {
          if (opt->count() > 0) settings[key] = opt->as<std::string>();
        } else if (run_cmd->get_option(dashed(key))->count() > 0) {
          settings[key] = run_flags[key];
        }
      }
      for (const auto& [key, value] : settings)
        if (std::find(run_keys().begin(), run_keys().end(), key) == run_keys().end())
          throw ConfigError("unknown config key '" + key + "'");
      return run_end_to_end(settings, out, err);
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitError;
}

}  // namespace promptmi::cli
