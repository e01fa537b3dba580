#pragma once

// Offline generator of grouped unit-sphere embeddings with a controllable
// angle between the two groups.
//
// Construction, per seed:
//   * a global direction g and, orthogonal to it, a rotation axis e;
//   * per block b, a mean direction m_b: g rotated by per_block_offset towards
//     a random direction orthogonal to g (the task-prompt effect);
//   * per block b, an effect multiplier h_b = exp(s z - s^2 / 2), z ~ N(0, 1),
//     s = effect_dispersion (mean 1; s = 0 gives h_b = 1);
//   * group 1 samples around m_b, group 2 samples around m_b rotated by
//     separation_angle * h_b in the (g, e) plane;
//   * each sample is normalize(mean + within_noise * z / sqrt(dim)).
// With separation_angle = 0 both groups are i.i.d. within every block.

#include <cstddef>
#include <cstdint>
#include <utility>

#include "promptmi/embedding.hpp"

namespace promptmi {

struct SyntheticSpec {
  std::size_t dim = 32;
  std::size_t n = 10;
  std::size_t k = 5;
  double separation_angle = 0.0;
  double within_noise = 1.0;
  double per_block_offset = 0.5;
  /// Spread of how strongly each task prompt reveals the separation.
  double effect_dispersion = 1.0;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

/// (group 1, group 2), both n x k x dim, every vector unit-norm.
std::pair<GroupedEmbeddings, GroupedEmbeddings> generate_pair(const SyntheticSpec& spec);

}  // namespace promptmi
