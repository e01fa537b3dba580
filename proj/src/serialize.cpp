#include "promptmi/serialize.hpp"

#include "json_io.hpp"
#include "promptmi/error.hpp"

namespace promptmi {

namespace {

template <typename T>
Json optional_json(const std::optional<T>& v) {
  if (!v) return nullptr;
  if constexpr (std::is_arithmetic_v<T>) return *v;
  else return to_json(*v);
}

Decision parse_decision(const std::string& s) {
  if (s == "distinct") return Decision::distinct;
  if (s == "insufficient_evidence") return Decision::insufficient_evidence;
  throw Error("unknown decision '" + s + "'");
}

}  // namespace

Json to_json(const TestConfig& cfg) {
  Json j;
  j["n_permutations"] = cfg.n_permutations;
  j["alpha"] = cfg.alpha;
  j["rng_seed"] = cfg.rng_seed;
  j["p_value_rule"] = std::string(to_string(cfg.p_value_rule));
  return j;
}

Json to_json(const PermutationTestResult& r) {
  Json j;
  j["s_obs"] = r.s_obs;
  j["p_value"] = r.p_value;
  j["n_permutations_run"] = r.n_permutations_run;
  j["extreme_count"] = r.extreme_count;
  j["decision"] = std::string(to_string(r.decision));
  j["rng_seed"] = r.rng_seed;
  return j;
}

PermutationTestResult permutation_result_from_json(const Json& j) {
  PermutationTestResult r;
  r.s_obs = detail::require<double>(j, "s_obs");
  r.p_value = detail::require<double>(j, "p_value");
  r.n_permutations_run = detail::require<std::size_t>(j, "n_permutations_run");
  r.extreme_count = detail::require<std::size_t>(j, "extreme_count");
  r.decision = parse_decision(detail::require<std::string>(j, "decision"));
  r.rng_seed = detail::require<std::uint64_t>(j, "rng_seed");
  return r;
}

Json to_json(const BlackBoxResult& r) {
  Json j;
  j["m"] = r.m;
  j["max_p"] = r.max_p;
  j["corrected_alpha"] = r.corrected_alpha;
  j["decision"] = std::string(to_string(r.decision));
  j["per_reference"] = Json::array();
  for (const auto& ref : r.per_reference) {
    Json item;
    item["model_id"] = ref.model_id;
    item["result"] = to_json(ref.result);
    j["per_reference"].push_back(std::move(item));
  }
  return j;
}

Json to_json(const MeanStd& m) {
  Json j;
  j["mean"] = m.mean;
  j["std"] = m.std;
  j["count"] = m.count;
  return j;
}

Json to_json(const Metrics& m) {
  Json j;
  j["fpr"] = optional_json(m.fpr);
  j["fnr"] = optional_json(m.fnr);
  j["avg_p_positive"] = optional_json(m.avg_p_positive);
  j["avg_p_negative"] = optional_json(m.avg_p_negative);
  return j;
}

Json to_json(const RocCurve& roc) {
  Json j;
  j["auc"] = roc.auc;
  j["points"] = Json::array();
  for (const auto& p : roc.points) j["points"].push_back({{"alpha", p.alpha}, {"fpr", p.fpr}, {"tpr", p.tpr}});
  return j;
}

Json to_json(const PromptPair& pair) {
  Json j;
  j["known_prompt_id"] = pair.known_prompt_id;
  j["deployed_prompt_id"] = pair.deployed_prompt_id;
  j["label"] = std::string(to_string(pair.label));
  j["similarity_level"] = optional_json(pair.similarity_level);
  return j;
}

Json to_json(const EvaluationReport& report) {
  Json j;
  j["alpha"] = report.alpha;
  j["metrics"] = to_json(report.metrics);
  // Table-style names next to plain-language ones; positive = prompt reused.
  Json names;
  names["fpr"] = "distinct prompt not detected (negative pairs with p >= alpha)";
  names["fnr"] = "reuse wrongly ruled out (positive pairs with p < alpha)";
  j["metric_meaning"] = std::move(names);
  j["roc"] = report.roc ? to_json(*report.roc) : Json(nullptr);
  Json breakdown = Json::object();
  for (const auto& [level, b] : report.breakdown_by_similarity) {
    Json item;
    item["avg_p"] = to_json(b.avg_p);
    item["fpr"] = b.fpr;
    breakdown[std::to_string(level)] = std::move(item);
  }
  j["breakdown_by_similarity"] = std::move(breakdown);
  j["per_pair"] = Json::array();
  for (const auto& s : report.per_pair) {
    Json item = to_json(s.pair);
    item["p_value"] = s.p_value;
    item["decision"] = std::string(to_string(decide(s.p_value, report.alpha)));
    j["per_pair"].push_back(std::move(item));
  }
  return j;
}

EvaluationReport evaluation_report_from_json(const Json& j) {
  const double alpha = detail::require<double>(j, "alpha");
  std::vector<ScoredPair> scored;
  for (const auto& item : j.at("per_pair")) {
    ScoredPair s;
    s.pair.known_prompt_id = detail::require<std::string>(item, "known_prompt_id");
    s.pair.deployed_prompt_id = detail::require<std::string>(item, "deployed_prompt_id");
    s.pair.label = parse_pair_label(detail::require<std::string>(item, "label"));
    if (auto it = item.find("similarity_level"); it != item.end() && !it->is_null())
      s.pair.similarity_level = it->get<int>();
    s.p_value = detail::require<double>(item, "p_value");
    scored.push_back(std::move(s));
  }
  return summarize(std::move(scored), alpha);
}

Json to_json(const std::vector<SweepRow>& rows) {
  Json j = Json::array();
  for (const auto& r : rows) {
    Json item;
    item["n"] = r.cell.n;
    item["k"] = r.cell.k;
    item["max_tokens"] = optional_json(r.cell.max_tokens);
    item["total_tokens"] = optional_json(r.total_tokens);
    item["avg_p_negative"] = optional_json(r.avg_p_negative);
    item["avg_p_positive"] = optional_json(r.avg_p_positive);
    item["median_p_negative"] = optional_json(r.median_p_negative);
    item["median_p_positive"] = optional_json(r.median_p_positive);
    j.push_back(std::move(item));
  }
  return j;
}

Json to_json(const SyntheticSpec& spec) {
  Json j;
  j["dim"] = spec.dim;
  j["n"] = spec.n;
  j["k"] = spec.k;
  j["separation_angle"] = spec.separation_angle;
  j["within_noise"] = spec.within_noise;
  j["per_block_offset"] = spec.per_block_offset;
  j["effect_dispersion"] = spec.effect_dispersion;
  j["rng_seed"] = spec.rng_seed;
  return j;
}

Json to_json(const EmbedderSpec& spec) {
  Json j;
  j["kind"] = std::string(to_string(spec.kind));
  j["endpoint"] = spec.endpoint ? Json(*spec.endpoint) : Json(nullptr);
  j["model_name"] = spec.model_name;
  j["dim"] = spec.dim;
  j["batch_size"] = spec.batch_size;
  j["normalize_embeddings"] = spec.normalize_embeddings;
  return j;
}

}  // namespace promptmi
