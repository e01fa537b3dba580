#pragma once

// Labeled prompt-pair experiments and their summaries.
//
// Label convention: a *positive* pair is one where the deployed prompt really
// is the known prompt (reuse). FNR is measured on positive pairs (reuse
// wrongly ruled out: p < alpha); FPR on negative pairs (distinct prompt not
// detected: p >= alpha).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "promptmi/corpus.hpp"
#include "promptmi/stat_test.hpp"

namespace promptmi {

enum class PairLabel { positive, negative };

std::string_view to_string(PairLabel label);
PairLabel parse_pair_label(std::string_view name);

struct PromptPair {
  std::string known_prompt_id;
  std::string deployed_prompt_id;
  PairLabel label = PairLabel::negative;
  std::optional<int> similarity_level;

  /// positive <=> same ids; similarity_level, when set, lies in 1..5.
  void validate() const;

  friend bool operator==(const PromptPair&, const PromptPair&) = default;
};

struct ScoredPair {
  PromptPair pair;
  double p_value = 1.0;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  std::size_t count = 0;

  friend bool operator==(const MeanStd&, const MeanStd&) = default;
};

/// Empty optionals mark metrics that are undefined because a label class is
/// empty.
struct Metrics {
  std::optional<double> fpr;
  std::optional<double> fnr;
  std::optional<MeanStd> avg_p_positive;
  std::optional<MeanStd> avg_p_negative;

  friend bool operator==(const Metrics&, const Metrics&) = default;
};

struct RocPoint {
  double alpha;  // threshold: a pair is declared distinct when p < alpha
  double fpr;    // positive pairs declared distinct
  double tpr;    // negative pairs declared distinct

  friend bool operator==(const RocPoint&, const RocPoint&) = default;
};

struct RocCurve {
  std::vector<RocPoint> points;
  double auc = 0.0;
};

struct SimilarityBreakdown {
  MeanStd avg_p;
  double fpr = 0.0;
};

struct EvaluationReport {
  std::vector<ScoredPair> per_pair;
  double alpha = 0.05;
  Metrics metrics;
  std::optional<RocCurve> roc;
  std::map<int, SimilarityBreakdown> breakdown_by_similarity;
};

/// One positive pair per prompt plus negatives_per_positive * |prompts|
/// negatives drawn without replacement from the ordered off-diagonal pairs.
std::vector<PromptPair> build_pairs(const std::vector<SystemPrompt>& prompts,
                                    std::size_t negatives_per_positive, std::uint64_t rng_seed);

Metrics compute_metrics(const std::vector<ScoredPair>& per_pair, double alpha);

/// Sweeps alpha over 0, every distinct p-value, and finally above 1. AUC by
/// trapezoid over the points. Throws when either label class is empty.
RocCurve roc_curve(const std::vector<ScoredPair>& per_pair);

/// Per similarity level over negative pairs carrying one.
std::map<int, SimilarityBreakdown> similarity_breakdown(const std::vector<ScoredPair>& per_pair,
                                                        double alpha);

/// Pure summary of already-scored pairs.
EvaluationReport summarize(std::vector<ScoredPair> per_pair, double alpha);

/// Embeddings for one side of a pair: (known group, deployed group).
using PairMaterializer = std::function<std::pair<GroupedEmbeddings, GroupedEmbeddings>(
    const PromptPair& pair, std::size_t pair_index)>;

/// Runs the permutation test on every pair with seed derive_seed(cfg.rng_seed,
/// pair index). The test compares (deployed, known) in that order.
EvaluationReport evaluate_pairs(const std::vector<PromptPair>& pairs,
                                const PairMaterializer& materialize, const TestConfig& cfg);

struct SweepCell {
  std::size_t n = 1;
  std::size_t k = 1;
  /// Response truncation in whitespace tokens; empty = untruncated.
  std::optional<int> max_tokens;

  friend bool operator==(const SweepCell&, const SweepCell&) = default;
};

struct SweepRow {
  SweepCell cell;
  /// n * k * max_tokens per side of a pair, when max_tokens is set.
  std::optional<std::int64_t> total_tokens;
  std::optional<MeanStd> avg_p_negative;
  std::optional<MeanStd> avg_p_positive;
  std::optional<double> median_p_negative;
  std::optional<double> median_p_positive;
};

/// Embeddings of a pair restricted to a sweep cell.
using CellMaterializer = std::function<std::pair<GroupedEmbeddings, GroupedEmbeddings>(
    const PromptPair& pair, std::size_t pair_index, const SweepCell& cell)>;

/// Cartesian grid, max_tokens outermost, then n, then k.
std::vector<SweepCell> make_grid(const std::vector<std::size_t>& n_values,
                                 const std::vector<std::size_t>& k_values,
                                 const std::vector<int>& max_tokens_values);

/// Pair i runs with seed derive_seed(seed, i) in every cell, so neighbouring
/// cells share random numbers and their differences reflect the budget.
std::vector<SweepRow> budget_sweep(const std::vector<PromptPair>& pairs,
                                   const std::vector<SweepCell>& grid,
                                   const CellMaterializer& materialize, const TestConfig& cfg);

/// Stable CSV: n,k,max_tokens,total_tokens,avg_p_negative,std_p_negative,
/// avg_p_positive,std_p_positive,median_p_negative,median_p_positive,
/// pairs_negative,pairs_positive. Undefined values are empty fields.
std::string sweep_csv(const std::vector<SweepRow>& rows);

/// pair_label,known_prompt_id,deployed_prompt_id,similarity_level,p_value,decision
std::string per_pair_csv(const EvaluationReport& report);
/// alpha,fpr,tpr
std::string roc_csv(const RocCurve& roc);

/// First `max_tokens` whitespace-separated tokens of `text`, joined by single spaces.
std::string truncate_tokens(std::string_view text, int max_tokens);

/// Record blocks for a cell: first n task prompts, first k samples, texts
/// truncated to max_tokens.
RecordBlocks restrict_blocks(const RecordBlocks& blocks, const SweepCell& cell);

double median(std::vector<double> values);

/// Pairs file: a JSON array of {"known_prompt_id", "deployed_prompt_id",
/// "label", "similarity_level"?}.
std::vector<PromptPair> read_pairs(const std::filesystem::path& source);
void write_pairs(const std::vector<PromptPair>& pairs, const std::filesystem::path& destination);

}  // namespace promptmi
