// tucp: corpus generation, SL and RL training, evaluation, sweeps and latent
// export. Errors go to stderr as one line: "error<TAB>code<TAB>message".

#include "tucp/analysis.hpp"
#include "tucp/config.hpp"
#include "tucp/rl.hpp"
#include "tucp/training.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;
using namespace tucp;
using json = nlohmann::ordered_json;

namespace {

enum Exit { kOk = 0, kInternal = 1, kUsage = 2, kMissing = 3, kMismatch = 4, kTraining = 5 };

struct CliError : std::runtime_error {
  CliError(Exit c, std::string code_name, const std::string& msg)
      : std::runtime_error(msg), code(c), name(std::move(code_name)) {}
  Exit code;
  std::string name;
};

[[noreturn]] void fail(Exit c, const std::string& name, const std::string& msg) { throw CliError(c, name, msg); }

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(kMissing, "missing_file", "cannot read " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) fail(kInternal, "io", "cannot write " + p.string());
}

std::string file_hash(const fs::path& p) { return sim::hex64(sim::fnv1a64(read_file(p))); }

// ---- options shared by every subcommand ----

struct Common {
  std::string config_path;
  std::string out = "runs";
  std::string corpus_path;
  std::map<std::string, std::string> values;
  std::vector<std::pair<std::string, CLI::Option*>> key_opts;
};

void add_common(CLI::App* sub, Common& c, bool with_corpus = true) {
  sub->add_option("--config", c.config_path, "config file of 'key = value' lines");
  sub->add_option("--out", c.out, "root directory for run directories")->capture_default_str();
  if (with_corpus) sub->add_option("--corpus", c.corpus_path, "corpus file (generated from the config when omitted)");
  for (const auto& k : cfg::keys()) {
    c.key_opts.emplace_back(k.key, sub->add_option("--" + k.key, c.values[k.key], k.help));
  }
}

std::vector<std::pair<std::string, std::string>> overrides(const Common& c) {
  std::vector<std::pair<std::string, std::string>> o;
  for (const auto& [k, opt] : c.key_opts)
    if (opt->count() > 0) o.emplace_back(k, c.values.at(k));
  return o;
}

// Config file (or `fallback` when no --config is given), then the overrides.
cfg::RunConfig load_config(const Common& c, const fs::path& fallback = {}) {
  std::string text;
  if (!c.config_path.empty()) text = read_file(c.config_path);
  else if (!fallback.empty() && fs::exists(fallback)) text = read_file(fallback);
  try {
    return cfg::resolve(text, overrides(c));
  } catch (const cfg::ConfigError& e) {
    fail(kUsage, "config", e.what());
  } catch (const std::invalid_argument& e) {
    fail(kUsage, "config", e.what());
  }
}

bool same_generator(const sim::CorpusParams& a, const sim::CorpusParams& b) {
  return a.seed == b.seed && a.n_dialogues == b.n_dialogues && a.n_domains == b.n_domains &&
         a.slots_per_domain == b.slots_per_domain && a.min_turns == b.min_turns && a.max_turns == b.max_turns &&
         a.p_vague == b.p_vague && a.p_linked == b.p_linked && a.p_volunteer == b.p_volunteer &&
         a.max_vocab == b.max_vocab;
}

sim::Corpus get_corpus(const Common& c, const cfg::RunConfig& rc) {
  if (c.corpus_path.empty()) return sim::generate_corpus(rc.corpus);
  sim::Corpus corpus;
  try {
    corpus = sim::load_corpus(c.corpus_path);
  } catch (const std::exception& e) {
    if (!fs::exists(c.corpus_path)) fail(kMissing, "missing_file", "corpus not found: " + c.corpus_path);
    fail(kUsage, "bad_corpus", e.what());
  }
  if (!same_generator(corpus.params, rc.corpus)) {
    fail(kMismatch, "config_mismatch", "corpus " + c.corpus_path + " was generated with different corpus settings than the config");
  }
  return corpus;
}

// ---- run directories ----

fs::path make_run_dir(const fs::path& root, const std::string& stage, const cfg::RunConfig& rc) {
  fs::create_directories(root);
  const std::string base = stage + "-s" + std::to_string(rc.seed) + "-" + cfg::config_hash(rc).substr(0, 8);
  for (int n = 1;; ++n) {
    const fs::path p = root / (n == 1 ? base : base + "-" + std::to_string(n));
    if (fs::create_directory(p)) {
      write_file(p / "config.txt", cfg::dump(rc));
      return p;
    }
  }
}

// Marks the directory complete and drops write permission on its files.
void seal_run_dir(const fs::path& dir, const json& run) {
  write_file(dir / "run.json", run.dump(2) + "\n");
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file()) {
      fs::permissions(e.path(), fs::perms::owner_write | fs::perms::group_write | fs::perms::others_write, fs::perm_options::remove);
    }
  }
}

json run_header(const std::string& stage, const cfg::RunConfig& rc, const sim::Corpus& corpus) {
  return {{"stage", stage},
          {"seed", rc.seed},
          {"config_hash", cfg::config_hash(rc)},
          {"corpus_hash", sim::hex64(sim::corpus_hash(corpus))}};
}

// ---- checkpoints ----

std::string meta_value(const seq::CheckpointMeta& m, const std::string& key) {
  for (const auto& [k, v] : m.extra)
    if (k == key) return v;
  return "";
}

struct LoadedModel {
  seq::ModelParams<float> params;
  seq::CheckpointMeta meta;
  std::optional<seq::ModelParams<float>> renderer;
};

LoadedModel load_model(const fs::path& path, const sim::Corpus& corpus, const cfg::RunConfig& rc) {
  if (!fs::exists(path)) fail(kMissing, "missing_checkpoint", "checkpoint not found: " + path.string());
  LoadedModel m;
  seq::ModelConfig expected = rc.model;
  const auto vocab = corpus.vocab();
  expected.vocab = vocab.size();
  try {
    m.params = seq::load_checkpoint(path.string(), &m.meta);
  } catch (const std::exception& e) {
    fail(kUsage, "bad_checkpoint", path.string() + ": " + e.what());
  }
  const auto hash = sim::hex64(sim::corpus_hash(corpus));
  if (m.meta.corpus_hash != hash) {
    fail(kMismatch, "corpus_mismatch", path.string() + " was trained on corpus " + m.meta.corpus_hash + ", not " + hash);
  }
  if (m.meta.vocab != vocab.tokens()) fail(kMismatch, "corpus_mismatch", path.string() + ": vocabulary differs from the corpus");
  expected.init_scale = m.params.cfg.init_scale;  // not stored
  if (!(m.params.cfg == expected)) fail(kMismatch, "config_mismatch", path.string() + ": model dimensions differ from the config");
  if (meta_value(m.meta, "stage") == "rl") {
    const fs::path rpath = path.parent_path() / meta_value(m.meta, "renderer");
    if (!fs::exists(rpath)) fail(kMissing, "missing_checkpoint", "renderer not found: " + rpath.string());
    if (file_hash(rpath) != meta_value(m.meta, "renderer_hash")) {
      fail(kMismatch, "renderer_mismatch", rpath.string() + " does not match the hash recorded in " + path.string());
    }
    m.renderer = seq::load_checkpoint(rpath.string(), nullptr, &expected);
  }
  return m;
}

seq::CheckpointMeta make_meta(const sim::Corpus& corpus, const cfg::RunConfig& rc, const std::string& stage) {
  seq::CheckpointMeta meta;
  meta.corpus_hash = sim::hex64(sim::corpus_hash(corpus));
  meta.vocab = corpus.vocab().tokens();
  meta.extra = {{"stage", stage}, {"seed", std::to_string(rc.seed)}, {"config_hash", cfg::config_hash(rc)}};
  return meta;
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

// ---- stages ----

struct SLOut {
  seq::ModelParams<float> params;
  double valid_bleu = 0.0;
};

SLOut run_sl(const sim::Corpus& corpus, const cfg::RunConfig& rc, const fs::path& dir, const std::string& prefix, json& run) {
  const auto vocab = corpus.vocab();
  auto mc = rc.model;
  mc.vocab = vocab.size();
  Rng rng(rc.seed);
  auto init = seq::ModelParams<float>::init(mc, rng);
  std::ofstream log(dir / (prefix + "metrics.jsonl"));
  train::SLResult res;
  try {
    res = train::train_sl(std::move(init), corpus, vocab, rc.sl, [&](const train::EpochMetrics& m) {
      log << m.to_json() << '\n';
      log.flush();
      std::cerr << "sl epoch " << m.epoch << " loss " << fmt(m.loss) << " bleu " << fmt(m.bleu) << " success " << fmt(m.success) << '\n';
    });
  } catch (const std::runtime_error& e) {
    fail(kTraining, "training_failed", e.what());
  }
  auto meta = make_meta(corpus, rc, "sl");
  meta.extra.emplace_back("valid_bleu", fmt(res.best_metrics.bleu));
  meta.extra.emplace_back("best_epoch", std::to_string(res.best_epoch));
  seq::save_checkpoint((dir / (prefix + "checkpoint.ckpt")).string(), res.best, meta);
  run["sl"] = {{"checkpoint", prefix + "checkpoint.ckpt"},
                        {"metrics", prefix + "metrics.jsonl"},
                        {"best_epoch", res.best_epoch},
                        {"valid_bleu", res.best_metrics.bleu},
                        {"valid_success", res.best_metrics.success}};
  return {res.best, res.best_metrics.bleu};
}

// `renderer_file` names the SL checkpoint inside `dir`.
seq::ModelParams<float> run_rl(const sim::Corpus& corpus, const cfg::RunConfig& rc, const seq::ModelParams<float>& sl,
                               double sl_bleu, const fs::path& dir, const std::string& renderer_file, json& run) {
  const auto vocab = corpus.vocab();
  std::ofstream log(dir / "rl_metrics.jsonl");
  const auto res = rl::rl_train(sl, corpus, vocab, rc.rl, sl_bleu, [&](const train::EpochMetrics& m) {
    log << m.to_json() << '\n';
    log.flush();
    std::cerr << "rl epoch " << m.epoch << " reward " << fmt(m.loss) << " bleu " << fmt(m.bleu) << " success " << fmt(m.success) << '\n';
  });
  if (res.aborted) fail(kTraining, "training_failed", res.abort_reason);
  auto meta = make_meta(corpus, rc, "rl");
  meta.extra.emplace_back("renderer", renderer_file);
  meta.extra.emplace_back("renderer_hash", file_hash(dir / renderer_file));
  auto final_meta = meta;
  meta.extra.emplace_back("epoch", std::to_string(res.selected_epoch));
  final_meta.extra.emplace_back("epoch", std::to_string(res.log.empty() ? 0 : res.log.back().epoch));
  seq::save_checkpoint((dir / "rl_checkpoint.ckpt").string(), res.selected, meta);
  seq::save_checkpoint((dir / "rl_final.ckpt").string(), res.final, final_meta);
  run["rl"] = {{"checkpoint", "rl_checkpoint.ckpt"},
               {"final_checkpoint", "rl_final.ckpt"},
               {"renderer", renderer_file},
               {"metrics", "rl_metrics.jsonl"},
               {"selected_epoch", res.selected_epoch},
               {"selected_success", res.selected_metrics.success},
               {"selected_bleu", res.selected_metrics.bleu},
               {"final_success", res.final_metrics.success},
               {"final_bleu", res.final_metrics.bleu}};
  return res.selected;
}

std::string format_scores(const sim::CorpusScores& s) {
  std::ostringstream o;
  o << std::setprecision(6);
  o << "bleu " << s.bleu << "\ninform " << s.inform << "\nsuccess " << s.success << "\navg_len " << s.diversity.avg_len
    << "\ncbe " << s.diversity.cbe << "\nn_unigrams " << s.diversity.unigrams << "\nn_bigrams " << s.diversity.bigrams
    << "\nn_trigrams " << s.diversity.trigrams << '\n';
  return o.str();
}

const std::vector<sim::Dialogue>& get_split(const sim::Corpus& corpus, const std::string& split) {
  try {
    return corpus.split(split);
  } catch (const std::exception&) {
    fail(kUsage, "usage", "unknown split '" + split + "' (train, valid or test)");
  }
}

fs::path config_beside(const std::string& checkpoint) { return fs::path(checkpoint).parent_path() / "config.txt"; }

void require(const std::string& value, const char* flag) {
  if (value.empty()) fail(kMissing, "missing_argument", std::string(flag) + " is required");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage latent-action dialogue training on a synthetic corpus"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  Common gen_o, sl_o, rl_o, ev_o, sw_o, lat_o, pipe_o;
  auto* gen = app.add_subcommand("gen-corpus", "generate the synthetic corpus");
  add_common(gen, gen_o, false);

  auto* sl = app.add_subcommand("train-sl", "supervised stage");
  add_common(sl, sl_o);

  std::string rl_sl;
  auto* rlc = app.add_subcommand("train-rl", "RL stage from an SL checkpoint");
  add_common(rlc, rl_o);
  rlc->add_option("--sl-checkpoint", rl_sl, "SL checkpoint");

  std::string ev_ckpt, ev_split = "test";
  bool ev_gold = false, ev_json = false;
  auto* ev = app.add_subcommand("eval", "score a checkpoint");
  add_common(ev, ev_o);
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint to evaluate");
  ev->add_option("--split", ev_split, "train, valid or test")->capture_default_str();
  ev->add_flag("--gold-passthrough", ev_gold, "score the gold responses instead of the model (debug)");
  ev->add_flag("--json", ev_json, "print one JSON object");

  std::string sw_ckpt;
  std::vector<double> betas = {0.0, 0.003, 0.01}, lambdas = {0.0, 0.1, 0.3};
  std::size_t workers = 1;
  auto* sw = app.add_subcommand("sweep", "RL runs over a (beta, lambda) grid");
  add_common(sw, sw_o);
  sw->add_option("--sl-checkpoint", sw_ckpt, "SL checkpoint");
  sw->add_option("--betas", betas, "beta values")->delimiter(',')->capture_default_str();
  sw->add_option("--lambdas", lambdas, "lambda values")->delimiter(',')->capture_default_str();
  sw->add_option("--workers", workers, "parallel cells")->capture_default_str()->check(CLI::PositiveNumber);

  std::string lat_ckpt, lat_split = "test";
  std::size_t shuffles = 0;
  auto* lat = app.add_subcommand("export-latents", "prior-head latents with domain and act labels");
  add_common(lat, lat_o);
  lat->add_option("--checkpoint", lat_ckpt, "checkpoint");
  lat->add_option("--split", lat_split, "train, valid or test")->capture_default_str();
  lat->add_option("--shuffles", shuffles, "permutation-null size for the CH report, 0 skips it")->capture_default_str();

  auto* pipe = app.add_subcommand("pipeline", "corpus, SL, RL (unless variant has sl) and test evaluation in one run directory");
  add_common(pipe, pipe_o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "error\tusage\t" << msg << '\n';
    return kUsage;
  }

  try {
    if (gen->parsed()) {
      const auto rc = load_config(gen_o);
      const auto corpus = sim::generate_corpus(rc.corpus);
      const auto dir = make_run_dir(gen_o.out, "corpus", rc);
      sim::save_corpus(corpus, (dir / "corpus.txt").string());
      json run = run_header("gen-corpus", rc, corpus);
      run["corpus"] = "corpus.txt";
      run["vocab_size"] = corpus.vocab().size();
      seal_run_dir(dir, run);
      std::cout << "run_dir " << dir.string() << "\ncorpus " << (dir / "corpus.txt").string() << "\ncorpus_hash "
                << run["corpus_hash"].get<std::string>() << '\n';
    } else if (sl->parsed()) {
      const auto rc = load_config(sl_o);
      const auto corpus = get_corpus(sl_o, rc);
      const auto dir = make_run_dir(sl_o.out, "sl", rc);
      json run = run_header("train-sl", rc, corpus);
      run_sl(corpus, rc, dir, "", run);
      seal_run_dir(dir, run);
      std::cout << "run_dir " << dir.string() << "\ncheckpoint " << (dir / "checkpoint.ckpt").string() << '\n';
    } else if (rlc->parsed()) {
      require(rl_sl, "--sl-checkpoint");
      if (!fs::exists(rl_sl)) fail(kMissing, "missing_checkpoint", "checkpoint not found: " + rl_sl);
      const auto rc = load_config(rl_o, config_beside(rl_sl));
      const auto corpus = get_corpus(rl_o, rc);
      const auto slm = load_model(rl_sl, corpus, rc);
      if (meta_value(slm.meta, "stage") != "sl") fail(kUsage, "usage", rl_sl + " is not an SL checkpoint");
      double sl_bleu = 0.0;
      try {
        sl_bleu = std::stod(meta_value(slm.meta, "valid_bleu"));
      } catch (const std::exception&) {
        sl_bleu = train::evaluate(slm.params, corpus.valid, corpus.vocab(), rc.rl.eval).scores.bleu;
      }
      const auto dir = make_run_dir(rl_o.out, "rl", rc);
      fs::copy_file(rl_sl, dir / "renderer.ckpt");
      json run = run_header("train-rl", rc, corpus);
      run["sl_checkpoint"] = fs::absolute(rl_sl).string();
      run_rl(corpus, rc, slm.params, sl_bleu, dir, "renderer.ckpt", run);
      seal_run_dir(dir, run);
      std::cout << "run_dir " << dir.string() << "\ncheckpoint " << (dir / "rl_checkpoint.ckpt").string() << '\n';
    } else if (ev->parsed()) {
      if (!ev_gold) require(ev_ckpt, "--checkpoint");
      const auto rc = load_config(ev_o, ev_ckpt.empty() ? fs::path() : config_beside(ev_ckpt));
      const auto corpus = get_corpus(ev_o, rc);
      const auto& dialogues = get_split(corpus, ev_split);
      sim::CorpusScores scores;
      if (ev_gold) {
        std::vector<std::vector<sim::Tokens>> gold;
        for (const auto& d : dialogues) {
          auto& g = gold.emplace_back();
          for (const auto& t : d.turns) g.push_back(t.response);
        }
        scores = sim::score_corpus(dialogues, gold);
      } else {
        const auto m = load_model(ev_ckpt, corpus, rc);
        scores = train::evaluate(m.params, dialogues, corpus.vocab(), rc.sl.eval, m.renderer ? &*m.renderer : nullptr).scores;
      }
      if (ev_json) {
        const json j = {{"bleu", scores.bleu}, {"inform", scores.inform}, {"success", scores.success},
                        {"avg_len", scores.diversity.avg_len}, {"cbe", scores.diversity.cbe},
                        {"n_unigrams", scores.diversity.unigrams}, {"n_bigrams", scores.diversity.bigrams},
                        {"n_trigrams", scores.diversity.trigrams}};
        std::cout << j.dump() << '\n';
      } else {
        std::cout << format_scores(scores);
      }
    } else if (sw->parsed()) {
      require(sw_ckpt, "--sl-checkpoint");
      const auto rc = load_config(sw_o, config_beside(sw_ckpt));
      const auto corpus = get_corpus(sw_o, rc);
      const auto slm = load_model(sw_ckpt, corpus, rc);
      const double sl_bleu = std::stod(meta_value(slm.meta, "valid_bleu").empty() ? "0" : meta_value(slm.meta, "valid_bleu"));
      const auto dir = make_run_dir(sw_o.out, "sweep", rc);
      const auto res = analysis::pareto_sweep(slm.params, corpus, corpus.vocab(), analysis::make_grid(betas, lambdas), rc.rl, sl_bleu, workers);
      const auto table = analysis::format_sweep(res);
      write_file(dir / "sweep.tsv", table);
      json run = run_header("sweep", rc, corpus);
      run["sl_checkpoint"] = fs::absolute(sw_ckpt).string();
      run["betas"] = betas;
      run["lambdas"] = lambdas;
      run["table"] = "sweep.tsv";
      seal_run_dir(dir, run);
      std::cout << table;
    } else if (lat->parsed()) {
      require(lat_ckpt, "--checkpoint");
      const auto rc = load_config(lat_o, config_beside(lat_ckpt));
      const auto corpus = get_corpus(lat_o, rc);
      const auto m = load_model(lat_ckpt, corpus, rc);
      const auto e = analysis::export_latents(m.params, get_split(corpus, lat_split), corpus.vocab());
      json run = run_header("export-latents", rc, corpus);
      run["checkpoint"] = fs::absolute(lat_ckpt).string();
      run["split"] = lat_split;
      run["latents"] = "latents.txt";
      std::string report;
      if (shuffles > 0) {
        // Labels absent from the split are dropped before scoring.
        Rng rng(rc.seed);
        for (const auto& [name, data] : {std::pair{"domain", e.by_domain()}, {"act", e.by_act()}}) {
          const auto t = analysis::permutation_test(analysis::compact_labels(data), shuffles, rng);
          run[std::string("ch_") + name] = {{"observed", t.observed}, {"null_q99", t.quantile(0.99)}, {"p_value", t.p_value()}};
          report += "ch_" + std::string(name) + " " + fmt(t.observed) + " null_q99 " + fmt(t.quantile(0.99)) + " p " + fmt(t.p_value()) + "\n";
        }
      }
      const auto dir = make_run_dir(lat_o.out, "latents", rc);
      write_file(dir / "latents.txt", analysis::format_latents(e));
      std::cout << "run_dir " << dir.string() << "\nlatents " << (dir / "latents.txt").string() << '\n' << report;
      seal_run_dir(dir, run);
    } else if (pipe->parsed()) {
      const auto rc = load_config(pipe_o);
      const auto corpus = get_corpus(pipe_o, rc);
      const auto dir = make_run_dir(pipe_o.out, "pipeline", rc);
      json run = run_header("pipeline", rc, corpus);
      const auto slr = run_sl(corpus, rc, dir, "sl_", run);
      seq::ModelParams<float> policy = slr.params;
      std::optional<seq::ModelParams<float>> renderer;
      if (rc.run_rl) {
        policy = run_rl(corpus, rc, slr.params, slr.valid_bleu, dir, "sl_checkpoint.ckpt", run);
        renderer = slr.params;
      }
      const auto ev_res = train::evaluate(policy, corpus.test, corpus.vocab(), rc.sl.eval, renderer ? &*renderer : nullptr);
      write_file(dir / "test_scores.txt", format_scores(ev_res.scores));
      run["test_scores"] = "test_scores.txt";
      seal_run_dir(dir, run);
      std::cout << "run_dir " << dir.string() << '\n' << format_scores(ev_res.scores);
    }
  } catch (const CliError& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "error\t" << e.name << '\t' << msg << '\n';
    return e.code;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "error\tinternal\t" << msg << '\n';
    return kInternal;
  }
  return kOk;
}
