#pragma once

// Testing a service whose backbone model is unknown: its generations are
// tested against generations of each of m reference models (all prompted with
// the known system prompt). The prompts are declared distinct only when the
// largest per-reference p-value falls below alpha / m.

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "promptmi/stat_test.hpp"

namespace promptmi {

struct ReferenceResult {
  std::string model_id;
  PermutationTestResult result;

  friend bool operator==(const ReferenceResult&, const ReferenceResult&) = default;
};

struct BlackBoxResult {
  std::vector<ReferenceResult> per_reference;
  double max_p = 0.0;
  double corrected_alpha = 0.0;
  Decision decision = Decision::insufficient_evidence;
  std::size_t m = 0;

  friend bool operator==(const BlackBoxResult&, const BlackBoxResult&) = default;
};

using NamedEmbeddings = std::pair<std::string, GroupedEmbeddings>;

double bonferroni_threshold(double alpha, std::size_t m);

/// Seed used for the reference at `index`: the run seed itself for index 0,
/// derive_seed(seed, index) otherwise, so a single reference reproduces the
/// plain test exactly.
std::uint64_t reference_seed(std::uint64_t seed, std::size_t index);

BlackBoxResult blackbox_test(const GroupedEmbeddings& target,
                             const std::vector<NamedEmbeddings>& references,
                             const TestConfig& cfg);

/// Aggregation only: max p, alpha / m, decision.
BlackBoxResult combine_reference_results(std::vector<ReferenceResult> per_reference, double alpha);

}  // namespace promptmi
