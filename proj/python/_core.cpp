#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <iostream>
#include <sstream>

#include "promptmi/blackbox.hpp"
#include "promptmi/cli.hpp"
#include "promptmi/embedding.hpp"
#include "promptmi/error.hpp"
#include "promptmi/evaluation.hpp"
#include "promptmi/stat_test.hpp"
#include "promptmi/synthetic.hpp"

namespace py = pybind11;
using namespace promptmi;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

GroupedEmbeddings to_grouped(const Array& a) {
  if (a.ndim() != 3)
    throw ShapeError("expected an array of shape (n, k, dim), got " + std::to_string(a.ndim()) +
                     " dimensions");
  const auto n = static_cast<std::size_t>(a.shape(0));
  const auto k = static_cast<std::size_t>(a.shape(1));
  const auto dim = static_cast<std::size_t>(a.shape(2));
  std::vector<double> flat(a.data(), a.data() + a.size());
  return GroupedEmbeddings(n, k, dim, std::move(flat));
}

Array to_array(const GroupedEmbeddings& g) {
  Array out({g.n(), g.k(), g.dim()});
  std::copy(g.flat().begin(), g.flat().end(), out.mutable_data());
  return out;
}

TestConfig make_config(std::size_t n_permutations, double alpha, std::uint64_t seed,
                       const std::string& rule, unsigned threads) {
  TestConfig cfg;
  cfg.n_permutations = n_permutations;
  cfg.alpha = alpha;
  cfg.rng_seed = seed;
  cfg.p_value_rule = parse_p_value_rule(rule);
  cfg.threads = threads;
  cfg.validate();
  return cfg;
}

py::dict result_dict(const PermutationTestResult& r) {
  py::dict d;
  d["s_obs"] = r.s_obs;
  d["p_value"] = r.p_value;
  d["n_permutations_run"] = r.n_permutations_run;
  d["extreme_count"] = r.extreme_count;
  d["decision"] = std::string(to_string(r.decision));
  d["rng_seed"] = r.rng_seed;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Permutation tests for system prompt reuse";

  py::register_exception<Error>(m, "PromptmiError", PyExc_ValueError);

  m.def("observed_statistic",
        [](const Array& v1, const Array& v2) { return observed_statistic(to_grouped(v1), to_grouped(v2)); },
        py::arg("v1"), py::arg("v2"));

  m.def(
      "permutation_test",
      [](const Array& v1, const Array& v2, std::size_t n_permutations, double alpha,
         std::uint64_t seed, const std::string& p_value_rule, unsigned threads) {
        const auto g1 = to_grouped(v1);
        const auto g2 = to_grouped(v2);
        const auto cfg = make_config(n_permutations, alpha, seed, p_value_rule, threads);
        PermutationTestResult r;
        {
          py::gil_scoped_release release;
          r = permutation_test(g1, g2, cfg);
        }
        return result_dict(r);
      },
      py::arg("v1"), py::arg("v2"), py::arg("n_permutations") = 10'000, py::arg("alpha") = 0.05,
      py::arg("seed") = 0, py::arg("p_value_rule") = "paper_ratio", py::arg("threads") = 1);

  m.def(
      "exact_permutation_test",
      [](const Array& v1, const Array& v2, double alpha, std::uint64_t max_assignments) {
        return result_dict(exact_permutation_test(to_grouped(v1), to_grouped(v2), alpha, max_assignments));
      },
      py::arg("v1"), py::arg("v2"), py::arg("alpha") = 0.05, py::arg("max_assignments") = 1'000'000);

  m.def(
      "blackbox_test",
      [](const Array& target, const std::vector<std::pair<std::string, Array>>& references,
         std::size_t n_permutations, double alpha, std::uint64_t seed, const std::string& p_value_rule) {
        std::vector<NamedEmbeddings> refs;
        for (const auto& [name, arr] : references) refs.emplace_back(name, to_grouped(arr));
        const auto r = blackbox_test(to_grouped(target), refs,
                                     make_config(n_permutations, alpha, seed, p_value_rule, 1));
        py::dict d;
        py::list per;
        for (const auto& ref : r.per_reference) {
          auto item = result_dict(ref.result);
          item["model_id"] = ref.model_id;
          per.append(item);
        }
        d["per_reference"] = per;
        d["max_p"] = r.max_p;
        d["corrected_alpha"] = r.corrected_alpha;
        d["decision"] = std::string(to_string(r.decision));
        d["m"] = r.m;
        return d;
      },
      py::arg("target"), py::arg("references"), py::arg("n_permutations") = 10'000,
      py::arg("alpha") = 0.05, py::arg("seed") = 0, py::arg("p_value_rule") = "paper_ratio");

  m.def(
      "synthetic_pair",
      [](std::size_t dim, std::size_t n, std::size_t k, double separation_angle, double within_noise,
         double per_block_offset, double effect_dispersion, std::uint64_t seed) {
        SyntheticSpec spec;
        spec.dim = dim;
        spec.n = n;
        spec.k = k;
        spec.separation_angle = separation_angle;
        spec.within_noise = within_noise;
        spec.per_block_offset = per_block_offset;
        spec.effect_dispersion = effect_dispersion;
        spec.rng_seed = seed;
        spec.validate();
        const auto [a, b] = generate_pair(spec);
        return py::make_tuple(to_array(a), to_array(b));
      },
      py::arg("dim") = 32, py::arg("n") = 10, py::arg("k") = 5, py::arg("separation_angle") = 0.0,
      py::arg("within_noise") = 1.0, py::arg("per_block_offset") = 0.5,
      py::arg("effect_dispersion") = 1.0, py::arg("seed") = 0);

  m.def(
      "mock_embed",
      [](const std::string& text, std::size_t dim, const std::string& model_name) {
        const auto v = mock_embed(text, dim, model_name);
        return std::vector<double>(v.values().begin(), v.values().end());
      },
      py::arg("text"), py::arg("dim") = 384, py::arg("model_name") = "mock");

  m.def(
      "compute_metrics",
      [](const std::vector<double>& p_values, const std::vector<bool>& positive, double alpha) {
        if (p_values.size() != positive.size())
          throw ShapeError("p_values and labels differ in length");
        std::vector<ScoredPair> scored;
        for (std::size_t i = 0; i < p_values.size(); ++i) {
          ScoredPair s;
          s.pair.label = positive[i] ? PairLabel::positive : PairLabel::negative;
          s.p_value = p_values[i];
          scored.push_back(s);
        }
        const auto mt = compute_metrics(scored, alpha);
        py::dict d;
        d["fpr"] = mt.fpr ? py::cast(*mt.fpr) : py::none();
        d["fnr"] = mt.fnr ? py::cast(*mt.fnr) : py::none();
        d["avg_p_positive"] = mt.avg_p_positive ? py::cast(mt.avg_p_positive->mean) : py::none();
        d["avg_p_negative"] = mt.avg_p_negative ? py::cast(mt.avg_p_negative->mean) : py::none();
        return d;
      },
      py::arg("p_values"), py::arg("positive"), py::arg("alpha") = 0.05);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        std::vector<std::string> argv{"promptmi"};
        argv.insert(argv.end(), args.begin(), args.end());
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(argv, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"));

  m.attr("__version__") = cli::tool_version();
}
