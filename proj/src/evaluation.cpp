#include "promptmi/evaluation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "json_io.hpp"
#include "promptmi/error.hpp"
#include "promptmi/rng.hpp"

namespace promptmi {

std::string_view to_string(PairLabel label) {
  return label == PairLabel::positive ? "positive" : "negative";
}

PairLabel parse_pair_label(std::string_view name) {
  if (name == "positive") return PairLabel::positive;
  if (name == "negative") return PairLabel::negative;
  throw ConfigError("unknown pair label '" + std::string(name) + "'");
}

void PromptPair::validate() const {
  const bool same = known_prompt_id == deployed_prompt_id;
  if (label == PairLabel::positive && !same)
    throw ConfigError("positive pair must use the same prompt on both sides (" + known_prompt_id +
                      " vs " + deployed_prompt_id + ")");
  if (label == PairLabel::negative && same)
    throw ConfigError("negative pair uses the same prompt on both sides (" + known_prompt_id + ")");
  if (similarity_level && (*similarity_level < 1 || *similarity_level > 5))
    throw ConfigError("similarity_level must lie in 1..5");
}

std::vector<PromptPair> build_pairs(const std::vector<SystemPrompt>& prompts,
                                    std::size_t negatives_per_positive, std::uint64_t rng_seed) {
  const std::size_t n = prompts.size();
  if (n < 2) throw ConfigError("building pairs needs at least two prompts");
  const std::size_t available = n * (n - 1);
  const std::size_t wanted = negatives_per_positive * n;
  if (wanted > available)
    throw ConfigError("requested " + std::to_string(wanted) + " negative pairs but only " +
                      std::to_string(available) + " distinct ordered pairs exist");

  std::vector<PromptPair> pairs;
  pairs.reserve(n + wanted);
  for (const auto& p : prompts) pairs.push_back({p.id, p.id, PairLabel::positive, std::nullopt});

  // Partial Fisher-Yates over the off-diagonal index space; index i encodes
  // (known = i / (n-1), deployed = j or j+1 skipping the diagonal).
  std::vector<std::size_t> index(available);
  std::iota(index.begin(), index.end(), std::size_t{0});
  Rng rng(rng_seed);
  for (std::size_t i = 0; i < wanted; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(available - i));
    std::swap(index[i], index[j]);
    const std::size_t known = index[i] / (n - 1);
    std::size_t deployed = index[i] % (n - 1);
    if (deployed >= known) ++deployed;
    pairs.push_back({prompts[known].id, prompts[deployed].id, PairLabel::negative, std::nullopt});
  }
  return pairs;
}

namespace {

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd out;
  out.count = values.size();
  if (values.empty()) return out;
  double sum = 0.0;
  for (double v : values) sum += v;
  out.mean = sum / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - out.mean) * (v - out.mean);
  out.std = std::sqrt(ss / static_cast<double>(values.size()));
  return out;
}

std::pair<std::vector<double>, std::vector<double>> split_by_label(
    const std::vector<ScoredPair>& per_pair) {
  std::vector<double> positive, negative;
  for (const auto& s : per_pair)
    (s.pair.label == PairLabel::positive ? positive : negative).push_back(s.p_value);
  return {positive, negative};
}

double fraction_below(const std::vector<double>& values, double alpha) {
  const auto below = std::count_if(values.begin(), values.end(), [&](double p) { return p < alpha; });
  return static_cast<double>(below) / static_cast<double>(values.size());
}

double fraction_at_or_above(const std::vector<double>& values, double alpha) {
  const auto above = std::count_if(values.begin(), values.end(), [&](double p) { return p >= alpha; });
  return static_cast<double>(above) / static_cast<double>(values.size());
}

}  // namespace

Metrics compute_metrics(const std::vector<ScoredPair>& per_pair, double alpha) {
  const auto [positive, negative] = split_by_label(per_pair);
  Metrics m;
  if (!positive.empty()) {
    m.fnr = fraction_below(positive, alpha);
    m.avg_p_positive = mean_std(positive);
  }
  if (!negative.empty()) {
    m.fpr = fraction_at_or_above(negative, alpha);
    m.avg_p_negative = mean_std(negative);
  }
  return m;
}

RocCurve roc_curve(const std::vector<ScoredPair>& per_pair) {
  const auto [positive, negative] = split_by_label(per_pair);
  if (positive.empty() || negative.empty())
    throw ConfigError("ROC curve needs both positive and negative pairs");
  std::vector<double> thresholds{0.0};
  for (const auto& s : per_pair) thresholds.push_back(s.p_value);
  thresholds.push_back(1.0);
  thresholds.push_back(std::nextafter(1.0, 2.0));
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  RocCurve roc;
  for (double a : thresholds)
    roc.points.push_back({a, fraction_below(positive, a), fraction_below(negative, a)});
  for (std::size_t i = 1; i < roc.points.size(); ++i) {
    const auto& p0 = roc.points[i - 1];
    const auto& p1 = roc.points[i];
    roc.auc += (p1.fpr - p0.fpr) * (p0.tpr + p1.tpr) / 2.0;
  }
  return roc;
}

std::map<int, SimilarityBreakdown> similarity_breakdown(const std::vector<ScoredPair>& per_pair,
                                                        double alpha) {
  std::map<int, std::vector<double>> by_level;
  for (const auto& s : per_pair)
    if (s.pair.label == PairLabel::negative && s.pair.similarity_level)
      by_level[*s.pair.similarity_level].push_back(s.p_value);
  std::map<int, SimilarityBreakdown> out;
  for (const auto& [level, ps] : by_level)
    out[level] = {mean_std(ps), fraction_at_or_above(ps, alpha)};
  return out;
}

EvaluationReport summarize(std::vector<ScoredPair> per_pair, double alpha) {
  EvaluationReport report;
  report.alpha = alpha;
  report.metrics = compute_metrics(per_pair, alpha);
  const auto [positive, negative] = split_by_label(per_pair);
  if (!positive.empty() && !negative.empty()) report.roc = roc_curve(per_pair);
  report.breakdown_by_similarity = similarity_breakdown(per_pair, alpha);
  report.per_pair = std::move(per_pair);
  return report;
}

EvaluationReport evaluate_pairs(const std::vector<PromptPair>& pairs,
                                const PairMaterializer& materialize, const TestConfig& cfg) {
  cfg.validate();
  std::vector<ScoredPair> scored;
  scored.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    pairs[i].validate();
    const auto [known, deployed] = materialize(pairs[i], i);
    TestConfig pair_cfg = cfg;
    pair_cfg.rng_seed = derive_seed(cfg.rng_seed, static_cast<std::uint64_t>(i));
    scored.push_back({pairs[i], permutation_test(deployed, known, pair_cfg).p_value});
  }
  return summarize(std::move(scored), cfg.alpha);
}

std::vector<SweepCell> make_grid(const std::vector<std::size_t>& n_values,
                                 const std::vector<std::size_t>& k_values,
                                 const std::vector<int>& max_tokens_values) {
  if (n_values.empty() || k_values.empty()) throw ConfigError("sweep grid needs n and k values");
  std::vector<std::optional<int>> tokens;
  if (max_tokens_values.empty()) tokens.emplace_back();
  for (int t : max_tokens_values) {
    if (t < 1) throw ConfigError("sweep max_tokens values must be positive");
    tokens.emplace_back(t);
  }
  std::vector<SweepCell> grid;
  for (const auto& t : tokens)
    for (auto n : n_values)
      for (auto k : k_values) {
        if (n == 0 || k == 0) throw ConfigError("sweep n and k values must be positive");
        grid.push_back({n, k, t});
      }
  return grid;
}

double median(std::vector<double> values) {
  if (values.empty()) throw ConfigError("median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t mid = values.size() / 2;
  return values.size() % 2 == 1 ? values[mid] : (values[mid - 1] + values[mid]) / 2.0;
}

std::vector<SweepRow> budget_sweep(const std::vector<PromptPair>& pairs,
                                   const std::vector<SweepCell>& grid,
                                   const CellMaterializer& materialize, const TestConfig& cfg) {
  cfg.validate();
  if (pairs.empty()) throw ConfigError("sweep needs at least one pair");
  std::vector<SweepRow> rows;
  rows.reserve(grid.size());
  for (const auto& cell : grid) {
    std::vector<double> positive, negative;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const auto [known, deployed] = materialize(pairs[i], i, cell);
      if (known.n() != cell.n || known.k() != cell.k)
        throw ShapeError("materialized pair does not match sweep cell (n=" + std::to_string(cell.n) +
                         ", k=" + std::to_string(cell.k) + ")");
      TestConfig pair_cfg = cfg;
      pair_cfg.rng_seed = derive_seed(cfg.rng_seed, static_cast<std::uint64_t>(i));
      const double p = permutation_test(deployed, known, pair_cfg).p_value;
      (pairs[i].label == PairLabel::positive ? positive : negative).push_back(p);
    }
    SweepRow row;
    row.cell = cell;
    if (cell.max_tokens)
      row.total_tokens = static_cast<std::int64_t>(cell.n * cell.k) * *cell.max_tokens;
    if (!negative.empty()) {
      row.avg_p_negative = mean_std(negative);
      row.median_p_negative = median(negative);
    }
    if (!positive.empty()) {
      row.avg_p_positive = mean_std(positive);
      row.median_p_positive = median(positive);
    }
    rows.push_back(row);
  }
  return rows;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename T>
std::string opt(const std::optional<T>& v) {
  if (!v) return "";
  if constexpr (std::is_floating_point_v<T>) return fmt(*v);
  else return std::to_string(*v);
}

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "n,k,max_tokens,total_tokens,avg_p_negative,std_p_negative,avg_p_positive,std_p_positive,"
        "median_p_negative,median_p_positive,pairs_negative,pairs_positive\n";
  for (const auto& r : rows) {
    os << r.cell.n << ',' << r.cell.k << ',' << opt(r.cell.max_tokens) << ','
       << opt(r.total_tokens) << ',';
    os << (r.avg_p_negative ? fmt(r.avg_p_negative->mean) + "," + fmt(r.avg_p_negative->std) : ",")
       << ',';
    os << (r.avg_p_positive ? fmt(r.avg_p_positive->mean) + "," + fmt(r.avg_p_positive->std) : ",")
       << ',';
    os << opt(r.median_p_negative) << ',' << opt(r.median_p_positive) << ','
       << (r.avg_p_negative ? r.avg_p_negative->count : 0) << ','
       << (r.avg_p_positive ? r.avg_p_positive->count : 0) << '\n';
  }
  return os.str();
}

std::string per_pair_csv(const EvaluationReport& report) {
  std::ostringstream os;
  os << "pair_label,known_prompt_id,deployed_prompt_id,similarity_level,p_value,decision\n";
  for (const auto& s : report.per_pair) {
    os << to_string(s.pair.label) << ',' << csv_field(s.pair.known_prompt_id) << ','
       << csv_field(s.pair.deployed_prompt_id) << ',' << opt(s.pair.similarity_level) << ','
       << fmt(s.p_value) << ',' << to_string(decide(s.p_value, report.alpha)) << '\n';
  }
  return os.str();
}

std::string roc_csv(const RocCurve& roc) {
  std::ostringstream os;
  os << "alpha,fpr,tpr\n";
  for (const auto& p : roc.points) os << fmt(p.alpha) << ',' << fmt(p.fpr) << ',' << fmt(p.tpr) << '\n';
  return os.str();
}

std::string truncate_tokens(std::string_view text, int max_tokens) {
  if (max_tokens < 1) throw ConfigError("max_tokens must be positive");
  std::string out;
  int count = 0;
  std::size_t i = 0;
  const auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; };
  while (i < text.size() && count < max_tokens) {
    while (i < text.size() && is_space(text[i])) ++i;
    if (i >= text.size()) break;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (!out.empty()) out += ' ';
    out.append(text.substr(start, i - start));
    ++count;
  }
  return out;
}

RecordBlocks restrict_blocks(const RecordBlocks& blocks, const SweepCell& cell) {
  if (cell.n > blocks.size() || blocks.empty() || cell.k > blocks.front().size())
    throw ShapeError("sweep cell (n=" + std::to_string(cell.n) + ", k=" + std::to_string(cell.k) +
                     ") exceeds corpus dimensions (n=" + std::to_string(blocks.size()) + ", k=" +
                     std::to_string(blocks.empty() ? 0 : blocks.front().size()) + ")");
  RecordBlocks out(blocks.begin(), blocks.begin() + static_cast<std::ptrdiff_t>(cell.n));
  for (auto& block : out) {
    block.resize(cell.k);
    if (cell.max_tokens)
      for (auto& r : block) r.response_text = truncate_tokens(r.response_text, *cell.max_tokens);
  }
  return out;
}

std::vector<PromptPair> read_pairs(const std::filesystem::path& source) {
  std::ifstream in(source, std::ios::binary);
  if (!in) throw ConfigError("cannot open pairs file '" + source.string() + "'");
  detail::ojson j;
  try {
    j = detail::ojson::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(source.string() + ": invalid JSON: " + e.what());
  }
  if (!j.is_array()) throw ConfigError(source.string() + ": expected a JSON array of pairs");
  std::vector<PromptPair> pairs;
  for (std::size_t i = 0; i < j.size(); ++i) {
    try {
      PromptPair p;
      p.known_prompt_id = detail::require<std::string>(j[i], "known_prompt_id");
      p.deployed_prompt_id = detail::require<std::string>(j[i], "deployed_prompt_id");
      p.label = parse_pair_label(detail::require<std::string>(j[i], "label"));
      if (auto it = j[i].find("similarity_level"); it != j[i].end() && !it->is_null())
        p.similarity_level = it->get<int>();
      p.validate();
      pairs.push_back(std::move(p));
    } catch (const Error& e) {
      throw ConfigError(source.string() + ": pair " + std::to_string(i) + ": " + e.what());
    }
  }
  return pairs;
}

void write_pairs(const std::vector<PromptPair>& pairs, const std::filesystem::path& destination) {
  detail::ojson j = detail::ojson::array();
  for (const auto& p : pairs) {
    detail::ojson item;
    item["known_prompt_id"] = p.known_prompt_id;
    item["deployed_prompt_id"] = p.deployed_prompt_id;
    item["label"] = std::string(to_string(p.label));
    if (p.similarity_level) item["similarity_level"] = *p.similarity_level;
    j.push_back(std::move(item));
  }
  std::ofstream out(destination, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot open '" + destination.string() + "' for writing");
  out << j.dump(2) << '\n';
}

}  // namespace promptmi
