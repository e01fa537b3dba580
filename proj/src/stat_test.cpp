#include "promptmi/stat_test.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <numeric>
#include <thread>
#include <vector>

#include "promptmi/error.hpp"

namespace promptmi {

std::string_view to_string(Decision d) {
  return d == Decision::distinct ? "distinct" : "insufficient_evidence";
}

std::string_view to_string(PValueRule r) {
  return r == PValueRule::paper_ratio ? "paper_ratio" : "add_one";
}

PValueRule parse_p_value_rule(std::string_view name) {
  if (name == "paper_ratio") return PValueRule::paper_ratio;
  if (name == "add_one") return PValueRule::add_one;
  throw ConfigError("unknown p-value rule '" + std::string(name) +
                    "' (expected paper_ratio or add_one)");
}

void TestConfig::validate() const {
  if (n_permutations < 1) throw ConfigError("n_permutations must be at least 1");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
}

EmbeddingVector mean_vector(std::span<const EmbeddingVector> vectors) {
  if (vectors.empty()) throw ShapeError("mean of an empty vector list");
  const std::size_t dim = vectors.front().dim();
  std::vector<double> sum(dim, 0.0);
  for (const auto& v : vectors) {
    if (v.dim() != dim)
      throw ShapeError("mean over vectors of dims " + std::to_string(dim) + " and " +
                       std::to_string(v.dim()));
    for (std::size_t i = 0; i < dim; ++i) sum[i] += v[i];
  }
  const double count = static_cast<double>(vectors.size());
  for (auto& x : sum) x /= count;
  return EmbeddingVector(std::move(sum));
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw ShapeError("cosine of vectors with dims " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()));
  double dot = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) throw DegenerateVectorError("cosine similarity of a zero-norm vector");
  double denom = std::sqrt(aa * bb);
  if (!std::isfinite(denom) || denom == 0.0) denom = std::sqrt(aa) * std::sqrt(bb);
  return std::clamp(dot / denom, -1.0, 1.0);
}

double cosine_similarity(const EmbeddingVector& a, const EmbeddingVector& b) {
  return cosine_similarity(a.values(), b.values());
}

namespace {

void require_same_shape(const GroupedEmbeddings& v1, const GroupedEmbeddings& v2) {
  if (!v1.same_shape(v2))
    throw ShapeError("group shapes differ: (n=" + std::to_string(v1.n()) + ", k=" +
                     std::to_string(v1.k()) + ", dim=" + std::to_string(v1.dim()) + ") vs (n=" +
                     std::to_string(v2.n()) + ", k=" + std::to_string(v2.k()) +
                     ", dim=" + std::to_string(v2.dim()) + ")");
}

// Evaluates the statistic for a split given as a per-block membership mask
// over the pooled 2k vectors (positions < k are v1's, >= k are v2's). Pooled
// vectors are always visited in position order, so the identity split
// reproduces observed_statistic bit for bit.
class SplitEvaluator {
 public:
  SplitEvaluator(const GroupedEmbeddings& v1, const GroupedEmbeddings& v2)
      : v1_(v1), v2_(v2), k_(v1.k()), dim_(v1.dim()), sum1_(dim_), sum2_(dim_) {}

  std::size_t pooled() const { return 2 * k_; }

  // in_first has n * 2k entries.
  double statistic(std::span<const unsigned char> in_first) {
    std::fill(sum1_.begin(), sum1_.end(), 0.0);
    std::fill(sum2_.begin(), sum2_.end(), 0.0);
    const std::size_t n = v1_.n();
    for (std::size_t b = 0; b < n; ++b) {
      const double* first = v1_.block(b).data();
      const double* second = v2_.block(b).data();
      const unsigned char* mask = in_first.data() + b * 2 * k_;
      for (std::size_t pos = 0; pos < 2 * k_; ++pos) {
        const double* vec = pos < k_ ? first + pos * dim_ : second + (pos - k_) * dim_;
        double* dst = mask[pos] ? sum1_.data() : sum2_.data();
        for (std::size_t d = 0; d < dim_; ++d) dst[d] += vec[d];
      }
    }
    const double count = static_cast<double>(n * k_);
    for (std::size_t d = 0; d < dim_; ++d) {
      sum1_[d] /= count;
      sum2_[d] /= count;
    }
    return cosine_similarity(sum1_, sum2_);
  }

 private:
  const GroupedEmbeddings& v1_;
  const GroupedEmbeddings& v2_;
  std::size_t k_;
  std::size_t dim_;
  std::vector<double> sum1_;
  std::vector<double> sum2_;
};

std::vector<unsigned char> identity_mask(std::size_t n, std::size_t k) {
  std::vector<unsigned char> mask(n * 2 * k, 0);
  for (std::size_t b = 0; b < n; ++b) std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(b * 2 * k), k, 1);
  return mask;
}

// Shuffles the pooled positions of every block; the first k after shuffling
// go to group 1. `order` is scratch space of size 2k.
void draw_split(std::size_t n, std::size_t k, Rng& rng, std::vector<std::size_t>& order,
                std::span<unsigned char> mask) {
  for (std::size_t b = 0; b < n; ++b) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(std::span<std::size_t>(order), rng);
    unsigned char* m = mask.data() + b * 2 * k;
    std::fill_n(m, 2 * k, 0);
    for (std::size_t i = 0; i < k; ++i) m[order[i]] = 1;
  }
}

}  // namespace

double observed_statistic(const GroupedEmbeddings& v1, const GroupedEmbeddings& v2) {
  require_same_shape(v1, v2);
  SplitEvaluator eval(v1, v2);
  return eval.statistic(identity_mask(v1.n(), v1.k()));
}

std::pair<GroupedEmbeddings, GroupedEmbeddings> permute_within_blocks(
    const GroupedEmbeddings& v1, const GroupedEmbeddings& v2, Rng& rng) {
  require_same_shape(v1, v2);
  const std::size_t n = v1.n(), k = v1.k(), dim = v1.dim();
  std::vector<double> out1, out2;
  out1.reserve(n * k * dim);
  out2.reserve(n * k * dim);
  std::vector<std::size_t> order(2 * k);
  for (std::size_t b = 0; b < n; ++b) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(std::span<std::size_t>(order), rng);
    for (std::size_t i = 0; i < 2 * k; ++i) {
      const std::size_t pos = order[i];
      const auto vec = pos < k ? v1.at(b, pos) : v2.at(b, pos - k);
      auto& dst = i < k ? out1 : out2;
      dst.insert(dst.end(), vec.begin(), vec.end());
    }
  }
  return {GroupedEmbeddings(n, k, dim, std::move(out1)), GroupedEmbeddings(n, k, dim, std::move(out2))};
}

double p_value_from_counts(std::size_t extreme_count, std::size_t total, PValueRule rule) {
  if (total == 0) throw ConfigError("p-value from zero permutations");
  if (rule == PValueRule::add_one)
    return static_cast<double>(extreme_count + 1) / static_cast<double>(total + 1);
  return static_cast<double>(extreme_count) / static_cast<double>(total);
}

Decision decide(double p_value, double alpha) {
  return p_value < alpha ? Decision::distinct : Decision::insufficient_evidence;
}

PermutationTestResult permutation_test(const GroupedEmbeddings& v1, const GroupedEmbeddings& v2,
                                       const TestConfig& cfg) {
  cfg.validate();
  require_same_shape(v1, v2);
  const double s_obs = observed_statistic(v1, v2);
  const std::size_t n = v1.n(), k = v1.k();
  const std::size_t total = cfg.n_permutations;

  unsigned workers = cfg.threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : cfg.threads;
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, total));

  struct Chunk {
    std::size_t extreme = 0;
    std::size_t failed_at = std::numeric_limits<std::size_t>::max();
    std::exception_ptr error;
  };
  std::vector<Chunk> chunks(workers);

  auto run_chunk = [&](unsigned w) {
    const std::size_t begin = total * w / workers;
    const std::size_t end = total * (w + 1) / workers;
    SplitEvaluator eval(v1, v2);
    std::vector<std::size_t> order(2 * k);
    std::vector<unsigned char> mask(n * 2 * k);
    auto& chunk = chunks[w];
    for (std::size_t i = begin; i < end; ++i) {
      Rng rng(derive_seed(cfg.rng_seed, i));
      draw_split(n, k, rng, order, mask);
      try {
        if (eval.statistic(mask) <= s_obs) ++chunk.extreme;
      } catch (...) {
        chunk.failed_at = i;
        chunk.error = std::current_exception();
        return;
      }
    }
  };

  if (workers == 1) {
    run_chunk(0);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(run_chunk, w);
    for (auto& t : pool) t.join();
  }

  std::size_t extreme = 0;
  for (const auto& c : chunks) {
    if (c.error) {
      try {
        std::rethrow_exception(c.error);
      } catch (const DegenerateVectorError& e) {
        throw DegenerateVectorError("permutation " + std::to_string(c.failed_at) + ": " + e.what());
      }
    }
    extreme += c.extreme;
  }

  PermutationTestResult r;
  r.s_obs = s_obs;
  r.n_permutations_run = total;
  r.extreme_count = extreme;
  r.p_value = p_value_from_counts(extreme, total, cfg.p_value_rule);
  r.decision = decide(r.p_value, cfg.alpha);
  r.rng_seed = cfg.rng_seed;
  return r;
}

std::uint64_t enumeration_size(std::size_t n, std::size_t k) {
  constexpr auto cap = std::numeric_limits<std::uint64_t>::max();
  // C(2k, k) built incrementally: C(2k, i) = C(2k, i-1) * (2k - i + 1) / i.
  unsigned __int128 per_block = 1;
  for (std::size_t i = 1; i <= k; ++i) {
    per_block = per_block * (2 * k - i + 1) / i;
    if (per_block > cap) return cap;
  }
  unsigned __int128 total = 1;
  for (std::size_t b = 0; b < n; ++b) {
    total *= per_block;
    if (total > cap) return cap;
  }
  return static_cast<std::uint64_t>(total);
}

PermutationTestResult exact_permutation_test(const GroupedEmbeddings& v1,
                                             const GroupedEmbeddings& v2, double alpha,
                                             std::uint64_t max_assignments) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
  require_same_shape(v1, v2);
  const std::size_t n = v1.n(), k = v1.k();
  const std::uint64_t size = enumeration_size(n, k);
  if (size > max_assignments)
    throw ConfigError("exact enumeration needs " + std::to_string(size) +
                      " assignments, above the limit of " + std::to_string(max_assignments));

  // All k-subsets of the 2k pooled positions, as masks.
  std::vector<std::vector<unsigned char>> subsets;
  std::vector<unsigned char> choose(2 * k, 0);
  std::fill_n(choose.begin(), k, 1);
  do {
    subsets.push_back(choose);
  } while (std::prev_permutation(choose.begin(), choose.end()));

  SplitEvaluator eval(v1, v2);
  const double s_obs = eval.statistic(identity_mask(n, k));

  std::vector<std::size_t> digit(n, 0);
  std::vector<unsigned char> mask(n * 2 * k);
  std::size_t extreme = 0, total = 0;
  for (;;) {
    for (std::size_t b = 0; b < n; ++b)
      std::copy(subsets[digit[b]].begin(), subsets[digit[b]].end(),
                mask.begin() + static_cast<std::ptrdiff_t>(b * 2 * k));
    if (eval.statistic(mask) <= s_obs) ++extreme;
    ++total;
    std::size_t b = 0;
    while (b < n && ++digit[b] == subsets.size()) digit[b++] = 0;
    if (b == n) break;
  }

  PermutationTestResult r;
  r.s_obs = s_obs;
  r.n_permutations_run = total;
  r.extreme_count = extreme;
  r.p_value = static_cast<double>(extreme) / static_cast<double>(total);
  r.decision = decide(r.p_value, alpha);
  r.rng_seed = 0;
  return r;
}

}  // namespace promptmi
