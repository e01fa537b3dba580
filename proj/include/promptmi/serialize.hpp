#pragma once

// JSON forms of results and configurations, as written into run reports.

#include <json.hpp>

#include <vector>

#include "promptmi/blackbox.hpp"
#include "promptmi/embedding.hpp"
#include "promptmi/evaluation.hpp"
#include "promptmi/stat_test.hpp"
#include "promptmi/synthetic.hpp"

namespace promptmi {

using Json = nlohmann::ordered_json;

Json to_json(const TestConfig& cfg);
Json to_json(const PermutationTestResult& r);
Json to_json(const BlackBoxResult& r);
Json to_json(const MeanStd& m);
Json to_json(const Metrics& m);
Json to_json(const RocCurve& roc);
Json to_json(const EvaluationReport& report);
Json to_json(const std::vector<SweepRow>& rows);
Json to_json(const SyntheticSpec& spec);
Json to_json(const EmbedderSpec& spec);
Json to_json(const PromptPair& pair);

PermutationTestResult permutation_result_from_json(const Json& j);
/// Reads back per-pair scores and alpha and recomputes every summary field.
EvaluationReport evaluation_report_from_json(const Json& j);

}  // namespace promptmi
