// Acceptance run: one PASS/FAIL line per criterion on stdout, details on
// stderr. Criteria 1-6 and the CH properties of 9 re-run the oracle test
// cases linked into this binary; 7-9 train the toy configuration on three
// seeds; 10 runs the CLI pipeline twice.

#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"

#include "tucp/analysis.hpp"
#include "tucp/config.hpp"

#include "CLI11.hpp"

#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

using namespace tucp;
namespace fs = std::filesystem;

namespace {

// ---- oracle test cases ----

struct Seen {
  static inline std::set<std::string> started;
  static inline std::set<std::string> failed;
};

struct Listener : doctest::IReporter {
  explicit Listener(const doctest::ContextOptions&) {}
  void report_query(const doctest::QueryData&) override {}
  void test_run_start() override {}
  void test_run_end(const doctest::TestRunStats&) override {}
  void test_case_start(const doctest::TestCaseData& d) override { current = d.m_name; Seen::started.insert(current); }
  void test_case_reenter(const doctest::TestCaseData&) override {}
  void test_case_end(const doctest::CurrentTestCaseStats& s) override {
    if (s.failure_flags != 0) Seen::failed.insert(current);
  }
  void test_case_exception(const doctest::TestCaseException&) override { Seen::failed.insert(current); }
  void subcase_start(const doctest::SubcaseSignature&) override {}
  void subcase_end() override {}
  void log_assert(const doctest::AssertData&) override {}
  void log_message(const doctest::MessageData&) override {}
  void test_case_skipped(const doctest::TestCaseData&) override {}
  std::string current;
};

DOCTEST_REGISTER_LISTENER("acceptance", 1, Listener);

// Runs exactly the named cases; all must run and pass.
bool run_cases(const std::vector<std::string>& names) {
  Seen::started.clear();
  Seen::failed.clear();
  std::string filter;
  for (auto n : names) {
    std::replace(n.begin(), n.end(), ',', '?');  // ',' separates filters; '?' matches one character
    filter += (filter.empty() ? "" : ",") + n;
  }
  doctest::Context ctx;
  ctx.setOption("test-case", filter.c_str());
  ctx.setOption("minimal", true);
  ctx.setOption("no-intro", true);
  const int rc = ctx.run();
  bool ok = rc == 0 && Seen::failed.empty();
  for (const auto& n : names) {
    if (!Seen::started.count(n)) {
      std::cerr << "  missing test case: " << n << '\n';
      ok = false;
    }
  }
  for (const auto& n : Seen::failed) std::cerr << "  failed: " << n << '\n';
  return ok;
}

void verdict(int id, bool ok, const std::string& what) {
  std::cout << "criterion " << id << ": " << (ok ? "PASS" : "FAIL") << "  " << what << std::endl;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- toy runs ----

// Regularized arm, pinned from the seed-1 sweep of the default grid.
constexpr double kRegBeta = 0.003;
constexpr double kRegLambda = 0.1;
// Permitted shortfall on the seeds after the first.
constexpr double kSeedTolerance = 5.0;

struct SeedOutcome {
  std::uint64_t seed = 0;
  sim::CorpusScores sl;
  sim::CorpusScores unreg, reg;
  analysis::SweepResult sweep;
  double seconds_c7 = 0.0;  // SL plus the two criterion-7 runs
  bool have_ch = false;
  analysis::PermutationTest ch;
};

sim::CorpusScores rl_arm(const seq::ModelParams<float>& sl, const sim::Corpus& corpus, const sim::Vocab& vocab,
                         const cfg::RunConfig& rc, double beta, double lambda, double sl_bleu) {
  auto c = rc.rl;
  c.beta = beta;
  c.lambda = lambda;
  const auto r = rl::rl_train(sl, corpus, vocab, c, sl_bleu);
  if (r.aborted) throw std::runtime_error("RL run aborted: " + r.abort_reason);
  return train::evaluate(r.final, corpus.test, vocab, c.eval, &sl).scores;
}

std::string show(const sim::CorpusScores& s) {
  std::ostringstream o;
  o.precision(4);
  o << "success " << s.success << " bleu " << s.bleu;
  return o.str();
}

SeedOutcome run_seed(std::uint64_t seed, bool with_ch) {
  SeedOutcome out;
  out.seed = seed;
  const auto rc = cfg::resolve("seed = " + std::to_string(seed) + "\n", {});
  const auto t0 = std::chrono::steady_clock::now();
  const auto corpus = sim::generate_corpus(rc.corpus);
  const auto vocab = corpus.vocab();
  auto mc = rc.model;
  mc.vocab = vocab.size();
  Rng rng(rc.seed);
  const auto sl = train::train_sl(seq::ModelParams<float>::init(mc, rng), corpus, vocab, rc.sl);
  out.sl = train::evaluate(sl.best, corpus.test, vocab, rc.sl.eval).scores;
  std::cerr << "  seed " << seed << " sl: " << show(out.sl) << " (" << seconds_since(t0) << " s)\n";
  out.unreg = rl_arm(sl.best, corpus, vocab, rc, 0.0, 0.0, sl.best_metrics.bleu);
  std::cerr << "  seed " << seed << " rl beta 0 lambda 0: " << show(out.unreg) << '\n';
  out.reg = rl_arm(sl.best, corpus, vocab, rc, kRegBeta, kRegLambda, sl.best_metrics.bleu);
  std::cerr << "  seed " << seed << " rl beta " << kRegBeta << " lambda " << kRegLambda << ": " << show(out.reg) << '\n';
  out.seconds_c7 = seconds_since(t0);

  const auto grid = analysis::make_grid({0.0, 0.003, 0.01}, {0.0, 0.1, 0.3});
  out.sweep = analysis::pareto_sweep(sl.best, corpus, vocab, grid, rc.rl, sl.best_metrics.bleu, 1);
  std::istringstream table(analysis::format_sweep(out.sweep));
  for (std::string line; std::getline(table, line);) std::cerr << "    " << line << '\n';

  if (with_ch) {
    const auto e = analysis::export_latents(sl.best, corpus.test, vocab);
    Rng perm(seed);
    out.ch = analysis::permutation_test(analysis::compact_labels(e.by_domain()), 200, perm);
    out.have_ch = true;
    std::cerr << "  seed " << seed << " CH(domain) " << out.ch.observed << " null q99 " << out.ch.quantile(0.99) << '\n';
  }
  return out;
}

// Threshold met outright on the first seed, within the tolerance on the rest.
bool meets(double value, double threshold, bool at_least, bool first) {
  const double slack = first ? 0.0 : kSeedTolerance;
  return at_least ? value >= threshold - slack : value < threshold + slack;
}

bool criterion7(const std::vector<SeedOutcome>& seeds, std::string& what) {
  bool ok = true;
  std::ostringstream w;
  w.precision(4);
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    const auto& s = seeds[i];
    const bool first = i == 0;
    const bool sl_ok = meets(s.sl.bleu, 60, true, first) && meets(s.sl.success, 50, true, first);
    const bool unreg_ok = meets(s.unreg.success, 90, true, first) && meets(s.unreg.bleu, 15, false, first);
    const bool reg_ok = meets(s.reg.success, 85, true, first) && meets(s.reg.bleu, 40, true, first);
    const bool time_ok = s.seconds_c7 < 1800;
    ok = ok && sl_ok && unreg_ok && reg_ok && time_ok;
    w << " s" << s.seed << "[sl " << (sl_ok ? "ok" : "no") << ", unreg " << (unreg_ok ? "ok" : "no") << " (" << s.unreg.success
      << "/" << s.unreg.bleu << "), reg " << (reg_ok ? "ok" : "no") << " (" << s.reg.success << "/" << s.reg.bleu << "), "
      << static_cast<int>(s.seconds_c7) << " s]";
  }
  what = "directional toy reproduction (success/bleu):" + w.str();
  return ok;
}

bool criterion8(const std::vector<SeedOutcome>& seeds, std::string& what) {
  bool ok = true;
  std::ostringstream w;
  w.precision(4);
  for (const auto& s : seeds) {
    const auto& rows = s.sweep.rows;
    bool all_ok = s.sweep.fit_ok;
    double max_success = -1.0;
    const analysis::SweepRow* origin = nullptr;
    for (const auto& r : rows) {
      all_ok = all_ok && r.ok;
      if (!r.ok) continue;
      max_success = std::max(max_success, r.final_metrics.success);
      if (r.cell.beta == 0.0 && r.cell.lambda == 0.0) origin = &r;
    }
    if (!all_ok || origin == nullptr) {
      ok = false;
      w << " s" << s.seed << "[sweep incomplete]";
      continue;
    }
    const double slope = s.sweep.fit.slope(max_success);
    bool origin_min = true;
    for (const auto& r : rows) {
      if (std::abs(r.final_metrics.success - origin->final_metrics.success) <= 5.0 &&
          r.final_metrics.bleu < origin->final_metrics.bleu) {
        origin_min = false;
      }
    }
    ok = ok && slope < 0.0 && origin_min;
    w << " s" << s.seed << "[slope " << slope << " at " << max_success << ", (0,0) min " << (origin_min ? "yes" : "no") << "]";
  }
  what = "Pareto sweep:" + w.str();
  return ok;
}

// ---- criterion 10 ----

struct Proc {
  int code = -1;
  std::string out;
};

Proc sh(const std::string& cmd) {
  Proc r;
  FILE* p = popen((cmd + " 2>/dev/null").c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), p)) r.out += buf.data();
  const int st = pclose(p);
  r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

bool criterion10(std::string& what) {
  const fs::path root = fs::temp_directory_path() / ("tucp_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  const std::string cmd = std::string(TUCP_CLI) + " pipeline --n_dialogues 200 --sl_epochs 3 --rl_epochs 20 --out " + root.string();
  const auto a = sh(cmd), b = sh(cmd);
  bool ok = a.code == 0 && b.code == 0;
  std::string dirs[2];
  for (int i = 0; i < 2; ++i) {
    std::istringstream in(i == 0 ? a.out : b.out);
    for (std::string line; std::getline(in, line);)
      if (line.rfind("run_dir ", 0) == 0) dirs[i] = line.substr(8);
  }
  ok = ok && !dirs[0].empty() && dirs[0] != dirs[1];
  std::size_t bytes = 0;
  for (const char* f : {"sl_metrics.jsonl", "rl_metrics.jsonl", "test_scores.txt"}) {
    if (!ok) break;
    const auto x = slurp(fs::path(dirs[0]) / f), y = slurp(fs::path(dirs[1]) / f);
    ok = ok && !x.empty() && x == y;
    bytes += x.size();
  }
  std::error_code ec;
  for (const auto& e : fs::recursive_directory_iterator(root, ec)) fs::permissions(e.path(), fs::perms::owner_all, fs::perm_options::add, ec);
  fs::remove_all(root, ec);
  what = "two pipeline runs (seed 1, single worker), metrics logs " + std::string(ok ? "byte-identical" : "differ or missing") +
         " (" + std::to_string(bytes) + " bytes)";
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria 1-10"};
  std::vector<int> only;
  std::size_t n_seeds = 3;
  app.add_option("--criteria", only, "subset of criteria to run")->delimiter(',');
  app.add_option("--seeds", n_seeds, "seeds for criteria 7 and 8")->capture_default_str()->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);
  auto want = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };

  int failures = 0;
  auto cases = [&](int id, const std::vector<std::string>& names, const std::string& what) {
    if (!want(id)) return;
    const auto t0 = std::chrono::steady_clock::now();
    const bool ok = run_cases(names);
    std::ostringstream w;
    w.precision(3);
    w << what << " (" << seconds_since(t0) << " s)";
    verdict(id, ok, w.str());
    failures += !ok;
  };

  cases(1, {"every op passes grad_check on 100 random points", "end-to-end gradient check of the lite and TUCP losses",
            "end-to-end gradient check of a teacher-forced loss"},
        "gradient integrity");
  cases(2, {"kl_gauss agrees with the Monte-Carlo oracle on 50 random pairs", "kl_cat", "sym_kl is exactly symmetric", "log_prob"},
        "distribution oracles");
  cases(3, {"bound on KL to the true posterior holds on random chains", "approximation gap vanishes on bijective chains"},
        "discrete-chain bound and equality case");
  cases(4, {"TUCP without shuffle, pp term or learned prior reduces to the lite ELBO bitwise",
            "weighted_ce against a log-sum-exp oracle"},
        "objective reductions");
  cases(5, {"lambda = 0 step equals plain REINFORCE under a shared seed", "lambda = 1 step uses no fresh rollouts once the buffer is filled",
            "substitution rate matches lambda", "replay buffer accepts only successful dialogues"},
        "replay semantics");
  cases(6, {"decoder arrays stay bit-identical across 100 RL steps"}, "frozen decoder");

  std::vector<SeedOutcome> seeds;
  if (want(7) || want(8) || want(9)) {
    for (std::uint64_t s = 1; s <= (want(7) || want(8) ? n_seeds : 1); ++s) {
      try {
        seeds.push_back(run_seed(s, s == 1 && want(9)));
      } catch (const std::exception& e) {
        std::cerr << "  seed " << s << " failed: " << e.what() << '\n';
      }
    }
  }
  const bool all_seeds = seeds.size() == n_seeds;
  if (want(7)) {
    std::string what = "no seed runs completed";
    const bool ok = all_seeds && criterion7(seeds, what);
    verdict(7, ok, what);
    failures += !ok;
  }
  if (want(8)) {
    std::string what = "no seed runs completed";
    const bool ok = all_seeds && criterion8(seeds, what);
    verdict(8, ok, what);
    failures += !ok;
  }
  if (want(9)) {
    const bool props = run_cases({"calinski-harabasz hand case", "calinski-harabasz invariances"});
    const bool have = !seeds.empty() && seeds.front().have_ch;
    const bool above = have && seeds.front().ch.observed > seeds.front().ch.quantile(0.99);
    std::ostringstream w;
    w.precision(5);
    w << "CH properties " << (props ? "hold" : "fail");
    if (have) w << "; SL latents CH(domain) " << seeds.front().ch.observed << " vs null q99 " << seeds.front().ch.quantile(0.99);
    verdict(9, props && above, w.str());
    failures += !(props && above);
  }
  if (want(10)) {
    std::string what;
    const bool ok = criterion10(what);
    verdict(10, ok, what);
    failures += !ok;
  }
  return failures == 0 ? 0 : 1;
}
