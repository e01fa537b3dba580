#include "promptmi/synthetic.hpp"

#include <cmath>
#include <vector>

#include "promptmi/error.hpp"
#include "promptmi/rng.hpp"

namespace promptmi {

void SyntheticSpec::validate() const {
  if (dim < 2) throw ConfigError("synthetic data needs dim >= 2");
  if (n == 0 || k == 0) throw ConfigError("synthetic data needs positive n and k");
  if (!(separation_angle >= 0.0)) throw ConfigError("separation_angle must be nonnegative");
  if (!(within_noise > 0.0)) throw ConfigError("within_noise must be positive");
  if (!(per_block_offset >= 0.0)) throw ConfigError("per_block_offset must be nonnegative");
  if (!(effect_dispersion >= 0.0)) throw ConfigError("effect_dispersion must be nonnegative");
}

namespace {

using Vec = std::vector<double>;

double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void normalize(Vec& v) {
  const double norm = std::sqrt(dot(v, v));
  for (auto& x : v) x /= norm;
}

Vec gaussian(std::size_t dim, Rng& rng) {
  Vec v(dim);
  for (auto& x : v) x = rng.normal();
  return v;
}

// Random unit vector orthogonal to the unit vectors in `basis`.
Vec orthogonal_direction(const std::vector<const Vec*>& basis, std::size_t dim, Rng& rng) {
  for (;;) {
    Vec v = gaussian(dim, rng);
    for (const Vec* u : basis) {
      const double c = dot(v, *u);
      for (std::size_t i = 0; i < dim; ++i) v[i] -= c * (*u)[i];
    }
    if (dot(v, v) > 1e-12) {
      normalize(v);
      return v;
    }
  }
}

// Rotates v by `angle` in the plane spanned by orthonormal (a, b), a towards b.
Vec rotate(const Vec& v, const Vec& a, const Vec& b, double angle) {
  const double pa = dot(v, a), pb = dot(v, b);
  const double c = std::cos(angle), s = std::sin(angle);
  const double ra = c * pa - s * pb;
  const double rb = s * pa + c * pb;
  Vec out(v);
  for (std::size_t i = 0; i < v.size(); ++i) out[i] += (ra - pa) * a[i] + (rb - pb) * b[i];
  return out;
}

void append_samples(const Vec& mean, std::size_t k, double noise, Rng& rng, Vec& flat) {
  const std::size_t dim = mean.size();
  const double scale = noise / std::sqrt(static_cast<double>(dim));
  for (std::size_t s = 0; s < k; ++s) {
    Vec x(mean);
    for (auto& v : x) v += scale * rng.normal();
    double norm2 = dot(x, x);
    while (norm2 == 0.0) {
      x = mean;
      for (auto& v : x) v += scale * rng.normal();
      norm2 = dot(x, x);
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (auto& v : x) flat.push_back(v * inv);
  }
}

}  // namespace

std::pair<GroupedEmbeddings, GroupedEmbeddings> generate_pair(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.rng_seed);
  const std::size_t dim = spec.dim;

  Vec g = gaussian(dim, rng);
  normalize(g);
  const Vec axis = orthogonal_direction({&g}, dim, rng);

  Vec flat1, flat2;
  flat1.reserve(spec.n * spec.k * dim);
  flat2.reserve(spec.n * spec.k * dim);
  const double s = spec.effect_dispersion;
  for (std::size_t b = 0; b < spec.n; ++b) {
    const Vec towards = orthogonal_direction({&g}, dim, rng);
    const Vec mean1 = rotate(g, g, towards, spec.per_block_offset);
    const double multiplier = std::exp(s * rng.normal() - 0.5 * s * s);
    const Vec mean2 = rotate(mean1, g, axis, spec.separation_angle * multiplier);
    append_samples(mean1, spec.k, spec.within_noise, rng, flat1);
    append_samples(mean2, spec.k, spec.within_noise, rng, flat2);
  }
  return {GroupedEmbeddings(spec.n, spec.k, dim, std::move(flat1)),
          GroupedEmbeddings(spec.n, spec.k, dim, std::move(flat2))};
}

}  // namespace promptmi
