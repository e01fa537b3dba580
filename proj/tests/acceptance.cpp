// Acceptance checks. Prints one PASS/FAIL line per criterion; exits non-zero
// when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "oracle.hpp"
#include "promptmi/blackbox.hpp"
#include "promptmi/cli.hpp"
#include "promptmi/corpus.hpp"
#include "promptmi/evaluation.hpp"
#include "promptmi/querying.hpp"
#include "promptmi/stat_test.hpp"
#include "promptmi/synthetic.hpp"
#include "support.hpp"

using namespace promptmi;

namespace {

const std::filesystem::path kFixtures = PROMPTMI_FIXTURE_DIR;

struct Outcome {
  bool pass;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  std::function<Outcome()> check;
};

std::string num(double x) {
  std::ostringstream os;
  os.precision(6);
  os << x;
  return os.str();
}

std::string list(const std::vector<double>& xs) {
  std::string s = "[";
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? ", " : "") + num(xs[i]);
  return s + "]";
}

double mean(const std::vector<double>& xs) {
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

double fraction_below(const std::vector<double>& xs, double t) {
  return static_cast<double>(std::count_if(xs.begin(), xs.end(), [t](double x) { return x < t; })) /
         static_cast<double>(xs.size());
}

TestConfig mc(std::size_t permutations, std::uint64_t seed) {
  TestConfig cfg;
  cfg.n_permutations = permutations;
  cfg.rng_seed = seed;
  return cfg;
}

SyntheticSpec synth(std::size_t n, std::size_t k, double sep) {
  SyntheticSpec s;
  s.n = n;
  s.k = k;
  s.separation_angle = sep;
  return s;
}

// Trial t draws data from seed t and permutations from seed 1000 + t.
std::vector<double> trial_ps(SyntheticSpec spec, std::size_t trials, std::size_t permutations,
                             std::optional<std::pair<std::size_t, std::size_t>> prefix = std::nullopt) {
  std::vector<double> ps;
  ps.reserve(trials);
  for (std::size_t t = 0; t < trials; ++t) {
    spec.rng_seed = t;
    auto [a, b] = generate_pair(spec);
    if (prefix) {
      a = a.prefix(prefix->first, prefix->second);
      b = b.prefix(prefix->first, prefix->second);
    }
    ps.push_back(permutation_test(b, a, mc(permutations, 1000 + t)).p_value);
  }
  return ps;
}

GroupedEmbeddings columns(const GroupedEmbeddings& g, std::size_t first, std::size_t k) {
  std::vector<double> flat;
  flat.reserve(g.n() * k * g.dim());
  for (std::size_t b = 0; b < g.n(); ++b)
    for (std::size_t s = first; s < first + k; ++s) {
      const auto v = g.at(b, s);
      flat.insert(flat.end(), v.begin(), v.end());
    }
  return GroupedEmbeddings(g.n(), k, g.dim(), std::move(flat));
}

// ---------------------------------------------------------------- criteria

Outcome exact_oracle_equivalence() {
  const auto start = std::chrono::steady_clock::now();
  Rng rng(20250101);
  double worst = 0.0;
  for (int i = 0; i < 50; ++i) {
    const std::size_t n = 1 + rng.below(3), k = 1 + rng.below(2), dim = 2 + rng.below(7);
    const auto v1 = testing::random_grouped(n, k, dim, derive_seed(1, i));
    const auto v2 = testing::random_grouped(n, k, dim, derive_seed(2, i));
    const double exact = oracle::exact_p(v1, v2).p;
    const double p = permutation_test(v1, v2, mc(100'000, derive_seed(3, i))).p_value;
    worst = std::max(worst, std::abs(p - exact));
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {worst <= 0.02 && secs < 120.0, "max |mc - exact| = " + num(worst) + ", " + num(secs) + " s"};
}

Outcome hand_checkable_instance() {
  const auto v1 = testing::block_of({{1, 0}, {1, 0}});
  const auto v2 = testing::block_of({{0, 1}, {0, 1}});
  const auto exact = oracle::exact_p(v1, v2);
  const double p = permutation_test(v1, v2, mc(100'000, 7)).p_value;
  return {exact.p == 1.0 / 3.0 && std::abs(p - 1.0 / 3.0) <= 0.01,
          "exact " + std::to_string(exact.extreme) + "/" + std::to_string(exact.total) + ", monte carlo " + num(p)};
}

Outcome null_calibration() {
  const auto ps = trial_ps(synth(10, 5, 0.0), 1000, 1000);
  const double frac = fraction_below(ps, 0.05), m = mean(ps);
  return {frac >= 0.03 && frac <= 0.07 && m >= 0.46 && m <= 0.54,
          "fraction p < 0.05 = " + num(frac) + ", mean p = " + num(m)};
}

Outcome power_trend() {
  std::vector<double> medians;
  for (std::size_t k : {1, 5, 25}) medians.push_back(median(trial_ps(synth(10, k, 0.15), 200, 1000)));
  const bool monotone = std::is_sorted(medians.rbegin(), medians.rend());
  return {monotone && medians.back() <= 0.01, "median p at totals 10/50/250 = " + list(medians)};
}

Outcome budget_tradeoff() {
  const auto spec = synth(10, 100, 0.05);
  const double spread = median(trial_ps(spec, 200, 1000, std::make_pair(10, 10)));
  const double single = median(trial_ps(spec, 200, 1000, std::make_pair(1, 100)));
  return {spread <= single, "median p (n=10,k=10) = " + num(spread) + ", (n=1,k=100) = " + num(single)};
}

SyntheticSpec hard(std::size_t k, double sep) {
  auto s = synth(10, k, sep);
  s.within_noise = 0.2;
  s.effect_dispersion = 0.5;
  return s;
}

Outcome hard_example_trend() {
  std::vector<double> fpr;
  for (double sep : {0.02, 0.05, 0.1, 0.2, 0.4})
    fpr.push_back(1.0 - fraction_below(trial_ps(hard(2, sep), 200, 1000), 0.05));
  const double deep = 1.0 - fraction_below(trial_ps(hard(50, 0.02), 200, 1000), 0.05);
  const bool monotone = std::is_sorted(fpr.rbegin(), fpr.rend());
  return {monotone && deep <= 0.05, "FPR levels 1..5 at k=2 = " + list(fpr) + ", level 1 at k=50 = " + num(deep)};
}

Outcome blackbox_correctness() {
  const bool threshold = bonferroni_threshold(0.05, 6) == 0.05 / 6.0;
  const std::size_t n = 10, k = 5, trials = 500;
  std::size_t false_distinct = 0;
  double corrected = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    auto spec = synth(n, 4 * k, 0.0);
    spec.rng_seed = derive_seed(77, t);
    const auto [a, b] = generate_pair(spec);
    std::vector<GroupedEmbeddings> groups;
    for (std::size_t s = 0; s < 4; ++s) {
      groups.push_back(columns(a, s * k, k));
      groups.push_back(columns(b, s * k, k));
    }
    std::vector<NamedEmbeddings> refs;
    for (std::size_t r = 1; r <= 6; ++r) refs.emplace_back("ref" + std::to_string(r), groups[r]);
    const auto res = blackbox_test(groups[0], refs, mc(1000, derive_seed(78, t)));
    corrected = res.corrected_alpha;
    false_distinct += res.decision == Decision::distinct;
  }
  const double rate = static_cast<double>(false_distinct) / trials;

  const auto target = testing::random_grouped(5, 4, 16, 1), ref = testing::random_grouped(5, 4, 16, 2);
  const auto cfg = mc(2000, 99);
  const auto single = blackbox_test(target, {{"only", ref}}, cfg);
  const auto plain = permutation_test(target, ref, cfg);
  const bool identical = single.per_reference.size() == 1 && single.per_reference[0].result == plain &&
                         single.max_p == plain.p_value && single.decision == plain.decision;
  return {threshold && corrected == 0.05 / 6.0 && rate <= 0.07 && identical,
          "threshold " + num(corrected) + ", family-wise null rate " + num(rate) + ", m=1 identical " +
              (identical ? "yes" : "no")};
}

// ------------------------------------------------------------ determinism

struct CliRun {
  int code;
  std::string out, err;
};

CliRun cli(std::vector<std::string> args) {
  args.insert(args.begin(), "promptmi");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string result_payload(const std::filesystem::path& report) {
  return nlohmann::json::parse(testing::read_file(report)).at("result").dump();
}

std::string corpus_texts(const std::filesystem::path& corpus) {
  std::string s;
  for (const auto& r : read_corpus(corpus).records)
    s += r.system_prompt_id + "|" + r.task_prompt_id + "|" + std::to_string(r.sample_index) + "|" +
         r.response_text + "\n";
  return s;
}

Outcome determinism() {
  testing::TempDir dir;
  const auto d = [&](const std::string& name) { return (dir / name).string(); };
  std::vector<std::string> failures;
  int checked = 0;

  // Runs `once` twice and compares what it returns.
  const auto twice = [&](const std::string& name, const std::function<std::string()>& once) {
    ++checked;
    const auto first = once(), second = once();
    if (first.empty() || first != second) failures.push_back(name);
  };
  const auto with_report = [&](std::vector<std::string> args, std::vector<std::string> files = {}) {
    return [&, args, files] {
      std::vector<std::string> full{"--seed", "11", "--permutations", "300", "--embed-dim", "16", "--out",
                                    d("report.json")};
      full.insert(full.end(), args.begin(), args.end());
      const auto r = cli(full);
      if (r.code == cli::kExitError || r.code == cli::kExitUsage) return std::string();
      std::string payload = result_payload(d("report.json"));
      for (const auto& f : files) payload += testing::read_file(f);
      return payload;
    };
  };

  // Inputs shared by the commands below.
  write_system_prompts({SystemPrompt::make("a", "You are a pirate."), SystemPrompt::make("b", "You are a butler."),
                        SystemPrompt::make("c", "You are a chef.")},
                       dir / "prompts.jsonl");
  testing::write_file(dir / "tasks.jsonl",
                      "{\"id\":\"t1\",\"text\":\"hello\"}\n{\"id\":\"t2\",\"text\":\"what now\"}\n");

  twice("synth", with_report({"synth", "--n", "4", "--k", "3", "--sep", "0.3", "--data-out", d("s.jsonl")},
                             {d("s.jsonl")}));
  twice("test", with_report({"test", "--known", d("s.jsonl"), "--target", d("s.jsonl"), "--known-prompt-id",
                             "group1", "--target-prompt-id", "group2"}));

  // Sampled corpora: a fresh stub and an empty output for every run.
  const auto generate = [&](const std::string& corpus, const std::string& model) {
    return [&, corpus, model] {
      std::filesystem::remove(corpus);
      testing::StubServer server;
      server.post("/v1/chat/completions", testing::DeterministicChat{});
      server.start();
      const auto r = cli({"--out", d("report.json"), "generate", "--system-prompt-file", d("prompts.jsonl"),
                          "--all-prompts", "--task-prompts-file", d("tasks.jsonl"), "--model", model, "--endpoint",
                          server.url("/v1/chat/completions"), "--k", "3", "--max-parallel", "1", "--corpus",
                          corpus});
      if (r.code != 0) return std::string();
      return result_payload(d("report.json")) + corpus_texts(corpus);
    };
  };
  twice("generate", generate(d("known.jsonl"), "m"));
  generate(d("target.jsonl"), "m")();
  generate(d("ref.jsonl"), "ref-model")();

  twice("embed", with_report({"embed", "--corpus", d("known.jsonl"), "--embeddings-out", d("known.emb.jsonl")},
                             {d("known.emb.jsonl")}));
  twice("blackbox", with_report({"blackbox", "--target", d("target.jsonl"), "--target-prompt-id", "a",
                                 "--reference", d("ref.jsonl"), "--reference", d("known.jsonl"),
                                 "--reference-prompt-id", "a"}));
  twice("pairs", [&] {
    const auto r = cli({"--seed", "11", "pairs", "--prompts", d("prompts.jsonl"), "--pairs-out", d("pairs.json")});
    return r.code == 0 ? testing::read_file(d("pairs.json")) : std::string();
  });
  twice("evaluate", with_report({"evaluate", "--pairs", d("pairs.json"), "--corpora-dir", dir.path().string()},
                                {d("report.pairs.csv"), d("report.roc.csv")}));
  twice("sweep", with_report({"sweep", "--pairs", d("pairs.json"), "--corpora-dir", dir.path().string(),
                              "--n-values", "1,2", "--k-values", "1,3", "--csv", d("sweep.csv")},
                             {d("sweep.csv")}));
  twice("sweep --synthetic", with_report({"sweep", "--synthetic", "--trials", "4", "--n-values", "2,4",
                                          "--k-values", "2"}));

  twice("run", [&] {
    std::filesystem::remove_all(dir / "work");
    testing::StubServer server;
    server.post("/v1/chat/completions", testing::DeterministicChat{});
    server.start();
    const auto url = server.url("/v1/chat/completions");
    testing::write_file(dir / "run.cfg", "system_prompt_file = " + d("prompts.jsonl") +
                                             "\nsystem_prompt_id = b\ntask_prompts_file = " + d("tasks.jsonl") +
                                             "\ntarget_model = m\ntarget_endpoint = " + url +
                                             "\nreference_model = m\nreference_endpoint = " + url +
                                             "\nk = 3\nmax_parallel = 1\nembed_dim = 16\npermutations = 300\n"
                                             "seed = 11\nwork_dir = " + d("work") + "\n");
    const auto r = cli({"run", "--config", d("run.cfg")});
    if (r.code == cli::kExitError || r.code == cli::kExitUsage) return std::string();
    return result_payload(dir / "work" / "report.json");
  });

  std::string detail = std::to_string(checked - static_cast<int>(failures.size())) + " of " +
                       std::to_string(checked) + " commands byte-identical";
  for (const auto& f : failures) detail += "; differs: " + f;
  return {failures.empty(), detail};
}

// ------------------------------------------------------------ metrics, wire

ScoredPair scored(PairLabel label, double p) {
  ScoredPair s;
  s.pair = {"a", label == PairLabel::positive ? "a" : "b", label, std::nullopt};
  s.p_value = p;
  return s;
}

std::vector<ScoredPair> mix(const std::vector<double>& pos, const std::vector<double>& neg) {
  std::vector<ScoredPair> out;
  for (double p : pos) out.push_back(scored(PairLabel::positive, p));
  for (double p : neg) out.push_back(scored(PairLabel::negative, p));
  return out;
}

Outcome metric_arithmetic() {
  const auto fpr = compute_metrics(mix({}, {0.0, 0.0, 0.10}), 0.05).fpr;
  const auto fnr = compute_metrics(mix({0.50, 0.03}, {}), 0.05).fnr;
  const double perfect = roc_curve(mix({0.2, 0.5, 0.9}, {0.0, 0.0, 0.0})).auc;
  const double chance = roc_curve(mix({0.1, 0.4, 0.7}, {0.7, 0.1, 0.4})).auc;
  const bool ok = fpr && *fpr == 1.0 / 3.0 && fnr && *fnr == 0.5 && perfect == 1.0 && chance == 0.5;
  return {ok, "FPR " + num(fpr.value_or(-1)) + ", FNR " + num(fnr.value_or(-1)) + ", AUC " + num(perfect) +
                  " / " + num(chance)};
}

Outcome wire_fidelity() {
  ModelEndpointConfig cfg;
  cfg.model_id = "gpt-test";
  bool golden = render_chat_request("You are a helpful assistant", "Can you help me with a billing issue?", cfg) ==
                testing::read_file(kFixtures / "chat_request_default.json");
  ModelEndpointConfig greedy;
  greedy.model_id = "m";
  greedy.temperature = 0.0;
  greedy.max_tokens = 256;
  golden &= render_chat_request("Tab\there, quote \"q\", \xC3\xA9", "line1\nline2", greedy) ==
            testing::read_file(kFixtures / "chat_request_greedy.json");
  cfg.temperature = 0.7;
  golden &= render_user_request("Can you help me with a billing issue?", cfg) ==
            testing::read_file(kFixtures / "chat_request_user_only.json");

  testing::StubServer server;
  server.post("/v1/chat/completions", testing::DeterministicChat{});
  server.start();
  testing::TempDir dir;
  SamplingPlan plan;
  plan.system_prompt = SystemPrompt::make("sys", "You are terse.");
  for (int i = 0; i < 3; ++i) plan.task_prompts.push_back({"t" + std::to_string(i), "question " + std::to_string(i), {}});
  plan.k = 4;
  plan.endpoint.model_id = "m";
  plan.endpoint.endpoint_url = server.url("/v1/chat/completions");
  plan.endpoint.k_samples = 4;
  const auto first = sample_generations(plan, dir / "c.jsonl");
  group_records(read_corpus(dir / "c.jsonl").records, "sys", {"t0", "t1", "t2"}, 4);
  const int before = server.requests();
  const auto again = sample_generations(plan, dir / "c.jsonl");
  const bool resume = first.requests_issued == 12 && again.requests_issued == 0 && server.requests() == before;
  return {golden && resume, std::string("golden fixtures ") + (golden ? "match" : "differ") + ", " +
                                std::to_string(first.requests_issued) + " requests then " +
                                std::to_string(again.requests_issued) + " on rerun"};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "exact-oracle equivalence", exact_oracle_equivalence},
      {2, "hand-checkable instance", hand_checkable_instance},
      {3, "null calibration", null_calibration},
      {4, "power trend", power_trend},
      {5, "budget tradeoff", budget_tradeoff},
      {6, "hard-example trend", hard_example_trend},
      {7, "black-box correctness", blackbox_correctness},
      {8, "determinism", determinism},
      {9, "metric arithmetic", metric_arithmetic},
      {10, "wire fidelity", wire_fidelity},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << c.id << " (" << c.name << "): " << o.detail
              << std::endl;
  }
  std::cout << (criteria.size() - failed) << " of " << criteria.size() << " criteria passed" << std::endl;
  return failed ? 1 : 0;
}
