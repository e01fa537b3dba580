#include "promptmi/blackbox.hpp"

#include <algorithm>

#include "promptmi/error.hpp"

namespace promptmi {

double bonferroni_threshold(double alpha, std::size_t m) {
  if (m == 0) throw ConfigError("Bonferroni correction needs at least one comparison");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
  return alpha / static_cast<double>(m);
}

std::uint64_t reference_seed(std::uint64_t seed, std::size_t index) {
  return index == 0 ? seed : derive_seed(seed, static_cast<std::uint64_t>(index));
}

BlackBoxResult combine_reference_results(std::vector<ReferenceResult> per_reference, double alpha) {
  BlackBoxResult out;
  out.m = per_reference.size();
  out.corrected_alpha = bonferroni_threshold(alpha, out.m);
  out.max_p = 0.0;
  for (const auto& r : per_reference) out.max_p = std::max(out.max_p, r.result.p_value);
  out.decision = decide(out.max_p, out.corrected_alpha);
  out.per_reference = std::move(per_reference);
  return out;
}

BlackBoxResult blackbox_test(const GroupedEmbeddings& target,
                             const std::vector<NamedEmbeddings>& references,
                             const TestConfig& cfg) {
  cfg.validate();
  if (references.empty()) throw ConfigError("black-box test needs at least one reference model");
  for (const auto& [model_id, emb] : references)
    if (!emb.same_shape(target))
      throw ShapeError("reference '" + model_id + "' has shape (n=" + std::to_string(emb.n()) +
                       ", k=" + std::to_string(emb.k()) + ", dim=" + std::to_string(emb.dim()) +
                       "), target has (n=" + std::to_string(target.n()) + ", k=" +
                       std::to_string(target.k()) + ", dim=" + std::to_string(target.dim()) + ")");

  std::vector<ReferenceResult> per_reference;
  per_reference.reserve(references.size());
  for (std::size_t i = 0; i < references.size(); ++i) {
    TestConfig ref_cfg = cfg;
    ref_cfg.rng_seed = reference_seed(cfg.rng_seed, i);
    ref_cfg.alpha = bonferroni_threshold(cfg.alpha, references.size());
    auto result = permutation_test(target, references[i].second, ref_cfg);
    per_reference.push_back({references[i].first, result});
  }
  return combine_reference_results(std::move(per_reference), cfg.alpha);
}

}  // namespace promptmi
