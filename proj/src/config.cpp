#include "tucp/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <sstream>
#include <type_traits>

namespace tucp::cfg {

ConfigError::ConfigError(const std::string& k, const std::string& msg)
    : std::runtime_error(k + ": " + msg), key(k) {}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::string fmt_double(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

template <typename T>
T parse_uint(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end || v.empty()) throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size() || !std::isfinite(out)) throw ConfigError(key, "expected a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key, "expected true or false, got '" + v + "'");
}

struct Entry {
  KeyInfo info;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Entry make(const char* key, const char* help, std::function<T&(RunConfig&)> ref) {
  return {{key, help},
          [key, ref](RunConfig& c, const std::string& v) {
            if constexpr (std::is_same_v<T, bool>) ref(c) = parse_bool(key, v);
            else if constexpr (std::is_same_v<T, double>) ref(c) = parse_double(key, v);
            else ref(c) = parse_uint<T>(key, v);
          },
          [ref](const RunConfig& c) {
            const T v = ref(const_cast<RunConfig&>(c));
            if constexpr (std::is_same_v<T, bool>) return std::string(v ? "true" : "false");
            else if constexpr (std::is_same_v<T, double>) return fmt_double(v);
            else return std::to_string(v);
          }};
}

template <typename E>
Entry make_enum(const char* key, const char* help, std::function<E&(RunConfig&)> ref,
                std::initializer_list<std::pair<const char*, E>> names) {
  const std::vector<std::pair<const char*, E>> table(names);
  return {{key, help},
          [key, ref, table](RunConfig& c, const std::string& v) {
            std::string all;
            for (const auto& [n, e] : table) {
              if (v == n) {
                ref(c) = e;
                return;
              }
              all += all.empty() ? n : std::string("|") + n;
            }
            throw ConfigError(key, "expected one of " + all + ", got '" + v + "'");
          },
          [ref, table](const RunConfig& c) {
            const E e = ref(const_cast<RunConfig&>(c));
            for (const auto& [n, x] : table)
              if (x == e) return std::string(n);
            return std::string("?");
          }};
}

#define REF(T, expr) std::function<T&(RunConfig&)>([](RunConfig& c) -> T& { return expr; })

const std::vector<Entry>& table() {
  using optim::Method;
  static const std::vector<Entry> t = [] {
    std::vector<Entry> e;
    const std::initializer_list<std::pair<const char*, Method>> methods = {{"adam", Method::adam}, {"sgd", Method::sgd}};
    e.push_back(make<std::uint64_t>("seed", "seed for the corpus, initialization and both stages", REF(std::uint64_t, c.seed)));
    e.push_back({{"variant", "comma-separated ablation flags: sl, sl+rl, larl, ctxp, kl, shuff, pp, rep"},
                 [](RunConfig& c, const std::string& v) { c.variant = v; },
                 [](const RunConfig& c) { return c.variant; }});
    e.push_back(make<bool>("run_rl", "run the RL stage after the SL stage", REF(bool, c.run_rl)));

    e.push_back(make<std::size_t>("n_dialogues", "corpus size", REF(std::size_t, c.corpus.n_dialogues)));
    e.push_back(make<std::size_t>("n_domains", "number of domains (at most 3)", REF(std::size_t, c.corpus.n_domains)));
    e.push_back(make<std::size_t>("slots_per_domain", "requestable slots per domain", REF(std::size_t, c.corpus.slots_per_domain)));
    e.push_back(make<std::size_t>("min_turns", "minimum turns per dialogue", REF(std::size_t, c.corpus.min_turns)));
    e.push_back(make<std::size_t>("max_turns", "maximum turns per dialogue", REF(std::size_t, c.corpus.max_turns)));
    e.push_back(make<double>("p_vague", "probability a request leaves its slots unsaid", REF(double, c.corpus.p_vague)));
    e.push_back(make<double>("p_linked", "probability system phrasing follows user phrasing", REF(double, c.corpus.p_linked)));
    e.push_back(make<double>("p_volunteer", "probability an offer lists every requestable", REF(double, c.corpus.p_volunteer)));
    e.push_back(make<std::size_t>("max_vocab", "vocabulary budget", REF(std::size_t, c.corpus.max_vocab)));

    e.push_back(make<std::size_t>("embed", "embedding width", REF(std::size_t, c.model.embed)));
    e.push_back(make<std::size_t>("hidden", "encoder and decoder state width", REF(std::size_t, c.model.hidden)));
    e.push_back(make<std::size_t>("latent", "Gaussian latent dimension", REF(std::size_t, c.model.latent)));
    e.push_back(make_enum<seq::LatentFamily>("family", "latent family", REF(seq::LatentFamily, c.model.family),
                                             {{"gaussian", seq::LatentFamily::gaussian}, {"categorical", seq::LatentFamily::categorical}}));
    e.push_back(make<std::size_t>("groups", "categorical latent groups", REF(std::size_t, c.model.groups)));
    e.push_back(make<std::size_t>("categories", "categories per group", REF(std::size_t, c.model.categories)));
    e.push_back(make<double>("init_scale", "uniform initialization half-width", REF(double, c.model.init_scale)));

    e.push_back(make_enum<obj::Objective>("objective", "supervised objective", REF(obj::Objective, c.sl.objective.objective),
                                          {{"tucp", obj::Objective::tucp}, {"lite", obj::Objective::lite}}));
    e.push_back(make<bool>("shuffle", "prior/posterior shuffling", REF(bool, c.sl.objective.shuffle)));
    e.push_back(make<double>("omega_pp", "prior-on-prior weight", REF(double, c.sl.objective.omega_pp)));
    e.push_back(make<double>("omega_kl", "variational KL weight", REF(double, c.sl.objective.omega_kl)));
    e.push_back(make<double>("slot_weight", "cross-entropy weight of slot tokens", REF(double, c.sl.objective.slot_weight)));
    e.push_back(make<bool>("ctxp", "conditional prior without the prior-on-prior term", REF(bool, c.sl.objective.ctxp)));
    e.push_back(make<bool>("sl_sym_kl", "symmetric KL in the variational term", REF(bool, c.sl.objective.sym_kl)));
    e.push_back(make_enum<obj::PosteriorInput>("lite_input", "input of the lite variational head",
                                               REF(obj::PosteriorInput, c.sl.objective.lite_input),
                                               {{"context", obj::PosteriorInput::context},
                                                {"context_and_response", obj::PosteriorInput::context_and_response}}));
    e.push_back(make<bool>("standard_prior", "replace the conditional prior by N(0, I)", REF(bool, c.sl.objective.standard_prior)));
    e.push_back(make<std::size_t>("sl_epochs", "SL epochs", REF(std::size_t, c.sl.epochs)));
    e.push_back(make<std::size_t>("sl_batch", "SL batch size in turns", REF(std::size_t, c.sl.batch_size)));
    e.push_back(make_enum<Method>("sl_optimizer", "SL optimizer", REF(Method, c.sl.optim.method), methods));
    e.push_back(make<double>("sl_lr", "SL learning rate", REF(double, c.sl.optim.lr)));
    e.push_back(make<double>("sl_clip", "SL gradient-norm clip, <= 0 disables", REF(double, c.sl.optim.clip_norm)));
    e.push_back(make<std::size_t>("sl_eval_every", "SL validation interval in epochs", REF(std::size_t, c.sl.eval_every)));

    e.push_back(make<double>("beta", "KL-penalty weight in the reward", REF(double, c.rl.beta)));
    e.push_back(make<double>("lambda", "replay substitution probability", REF(double, c.rl.lambda)));
    e.push_back(make<std::size_t>("rl_batch", "dialogues per RL step", REF(std::size_t, c.rl.batch_dialogues)));
    e.push_back(make<std::size_t>("buffer_capacity", "replay buffer capacity", REF(std::size_t, c.rl.buffer_capacity)));
    e.push_back(make_enum<Method>("rl_optimizer", "RL optimizer", REF(Method, c.rl.optim.method), methods));
    e.push_back(make<double>("rl_lr", "RL learning rate", REF(double, c.rl.optim.lr)));
    e.push_back(make<double>("rl_momentum", "SGD momentum", REF(double, c.rl.optim.momentum)));
    e.push_back(make<double>("rl_clip", "RL gradient-norm clip, <= 0 disables", REF(double, c.rl.optim.clip_norm)));
    e.push_back(make<std::size_t>("rl_epochs", "RL epochs", REF(std::size_t, c.rl.epochs)));
    e.push_back(make<std::size_t>("steps_per_epoch", "RL steps per epoch", REF(std::size_t, c.rl.steps_per_epoch)));
    e.push_back(make_enum<rl::Baseline>("baseline", "reward baseline", REF(rl::Baseline, c.rl.baseline),
                                        {{"none", rl::Baseline::none}, {"moving_average", rl::Baseline::moving_average}}));
    e.push_back(make<double>("baseline_decay", "moving-average decay", REF(double, c.rl.baseline_decay)));
    e.push_back(make<bool>("rl_sym_kl", "symmetric KL in the reward", REF(bool, c.rl.sym_kl)));
    e.push_back(make<bool>("train_encoder", "RL updates the encoder as well as the prior head", REF(bool, c.rl.train_encoder)));
    e.push_back(make<bool>("pathwise_kl", "add the exact derivative of the reward KL term", REF(bool, c.rl.pathwise_kl)));
    e.push_back(make<std::size_t>("max_len", "rollout response length cap", REF(std::size_t, c.rl.max_len)));
    e.push_back(make<std::size_t>("rl_eval_every", "RL validation interval in epochs", REF(std::size_t, c.rl.eval_every)));
    e.push_back(make<double>("bleu_floor", "RL selection keeps BLEU >= floor * SL BLEU", REF(double, c.rl.bleu_floor)));

    e.push_back(make_enum<train::LatentChoice>("eval_latent", "latent used when rendering", REF(train::LatentChoice, c.sl.eval.latent),
                                               {{"mean", train::LatentChoice::mean}, {"sample", train::LatentChoice::sample}}));
    e.push_back(make_enum<seq::DecodeMode>("eval_decode", "decoding used when rendering", REF(seq::DecodeMode, c.sl.eval.decode),
                                           {{"greedy", seq::DecodeMode::greedy}, {"sample", seq::DecodeMode::sample}}));
    e.push_back(make<std::size_t>("eval_max_len", "evaluation response length cap", REF(std::size_t, c.sl.eval.max_len)));
    return e;
  }();
  return t;
}

#undef REF

const Entry& find(const std::string& key) {
  for (const auto& e : table())
    if (e.info.key == key) return e;
  throw ConfigError(key, "unknown key");
}

// Values that follow from others: the single seed and the shared eval options.
void sync(RunConfig& c) {
  c.corpus.seed = c.seed;
  c.sl.seed = c.seed;
  c.rl.seed = c.seed;
  c.sl.eval.seed = c.seed;
  c.rl.eval = c.sl.eval;
}

}  // namespace

RunConfig::RunConfig() {
  // Toy-scale defaults, see the README.
  sl.epochs = 20;
  sl.objective.omega_kl = 0.01;
  sync(*this);
}

void RunConfig::validate() const {
  auto check = [](bool ok, const char* key, const char* msg) {
    if (!ok) throw ConfigError(key, msg);
  };
  check(rl.lambda >= 0.0 && rl.lambda <= 1.0, "lambda", "must be in [0, 1]");
  check(rl.beta >= 0.0, "beta", "must be >= 0");
  for (const auto& [v, key] : {std::pair{corpus.p_vague, "p_vague"}, {corpus.p_linked, "p_linked"}, {corpus.p_volunteer, "p_volunteer"}}) {
    check(v >= 0.0 && v <= 1.0, key, "must be in [0, 1]");
  }
  check(corpus.n_dialogues >= 10, "n_dialogues", "must be at least 10");
  check(corpus.n_domains >= 1 && corpus.n_domains <= sim::domain_names().size(), "n_domains", "out of range");
  check(corpus.min_turns >= 1 && corpus.min_turns <= corpus.max_turns, "min_turns", "must be in [1, max_turns]");
  check(model.embed > 0, "embed", "must be positive");
  check(model.hidden > 0, "hidden", "must be positive");
  check(model.latent > 0, "latent", "must be positive");
  check(model.groups > 0, "groups", "must be positive");
  check(model.categories > 1, "categories", "must be at least 2");
  check(model.init_scale > 0.0, "init_scale", "must be positive");
  check(sl.objective.omega_pp >= 0.0, "omega_pp", "must be >= 0");
  check(sl.objective.omega_kl >= 0.0, "omega_kl", "must be >= 0");
  check(sl.objective.slot_weight >= 1.0, "slot_weight", "must be >= 1");
  check(sl.batch_size > 0, "sl_batch", "must be positive");
  check(sl.optim.lr > 0.0, "sl_lr", "must be positive");
  check(sl.eval_every > 0, "sl_eval_every", "must be positive");
  check(rl.batch_dialogues > 0, "rl_batch", "must be positive");
  check(rl.buffer_capacity > 0, "buffer_capacity", "must be positive");
  check(rl.optim.lr > 0.0, "rl_lr", "must be positive");
  check(rl.optim.momentum >= 0.0 && rl.optim.momentum < 1.0, "rl_momentum", "must be in [0, 1)");
  check(rl.steps_per_epoch > 0, "steps_per_epoch", "must be positive");
  check(rl.baseline_decay >= 0.0 && rl.baseline_decay < 1.0, "baseline_decay", "must be in [0, 1)");
  check(rl.max_len > 0, "max_len", "must be positive");
  check(rl.eval_every > 0, "rl_eval_every", "must be positive");
  check(rl.bleu_floor >= 0.0, "bleu_floor", "must be >= 0");
  check(sl.eval.max_len > 0, "eval_max_len", "must be positive");
  rl.validate();
  sl.objective.validate();
}

const std::vector<KeyInfo>& keys() {
  static const std::vector<KeyInfo> k = [] {
    std::vector<KeyInfo> out;
    for (const auto& e : table()) out.push_back(e.info);
    return out;
  }();
  return k;
}

void set_value(RunConfig& c, const std::string& key, const std::string& value) {
  find(key).set(c, trim(value));
  sync(c);
}

std::string get_value(const RunConfig& c, const std::string& key) { return find(key).get(c); }

void apply_text(RunConfig& c, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno), "expected 'key = value'");
    set_value(c, trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

void apply_variant(RunConfig& c) {
  std::vector<std::string> flags;
  std::istringstream in(c.variant);
  for (std::string f; std::getline(in, f, ',');) {
    f = trim(f);
    if (!f.empty()) flags.push_back(f);
  }
  if (flags.empty()) return;
  static const std::vector<std::string> known = {"sl", "sl+rl", "larl", "ctxp", "kl", "shuff", "pp", "rep"};
  for (const auto& f : flags) {
    if (std::find(known.begin(), known.end(), f) == known.end()) throw ConfigError("variant", "unknown flag '" + f + "'");
  }
  auto has = [&](const char* f) { return std::find(flags.begin(), flags.end(), f) != flags.end(); };
  if (has("sl") && has("sl+rl")) throw ConfigError("variant", "sl and sl+rl are exclusive");
  if (has("sl")) c.run_rl = false;
  if (has("sl+rl")) c.run_rl = true;
  if (has("larl") && (has("shuff") || has("pp") || has("ctxp"))) {
    throw ConfigError("variant", "larl cannot be combined with shuff, pp or ctxp");
  }
  auto& o = c.sl.objective;
  if (has("larl")) {
    o.objective = obj::Objective::lite;
  } else {
    o.objective = obj::Objective::tucp;
    o.ctxp = has("ctxp");
    o.shuffle = has("shuff");
    if (!has("pp")) o.omega_pp = 0.0;
    else if (o.omega_pp == 0.0) o.omega_pp = RunConfig().sl.objective.omega_pp;
    if (has("pp") && has("ctxp")) throw ConfigError("variant", "ctxp implies omega_pp = 0 and cannot be combined with pp");
  }
  if (!has("kl")) c.rl.beta = 0.0;
  else if (c.rl.beta == 0.0) c.rl.beta = kDefaultBeta;
  if (!has("rep")) c.rl.lambda = 0.0;
  else if (c.rl.lambda == 0.0) c.rl.lambda = kDefaultLambda;
}

RunConfig resolve(const std::string& file_text, const std::vector<std::pair<std::string, std::string>>& overrides) {
  RunConfig c;
  apply_text(c, file_text);
  for (const auto& [k, v] : overrides) set_value(c, k, v);
  apply_variant(c);
  // An explicit override the variant would silently replace is an error.
  for (const auto& [k, v] : overrides) {
    RunConfig probe;
    set_value(probe, k, v);
    if (get_value(c, k) != get_value(probe, k)) {
      throw ConfigError(k, "override conflicts with variant '" + c.variant + "'");
    }
  }
  sync(c);
  c.validate();
  return c;
}

std::string dump(const RunConfig& c) {
  std::string out;
  for (const auto& e : table()) out += e.info.key + " = " + e.get(c) + "\n";
  return out;
}

std::string config_hash(const RunConfig& c) { return sim::hex64(sim::fnv1a64(dump(c))); }

}  // namespace tucp::cfg
