#pragma once

#include "tucp/dialoguesim.hpp"
#include "tucp/rl.hpp"
#include "tucp/seqmodels.hpp"
#include "tucp/training.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

// Run configuration: one flat "key = value" namespace over the corpus, model,
// supervised and RL settings.

namespace tucp::cfg {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& key, const std::string& msg);
  std::string key;
};

struct RunConfig {
  std::uint64_t seed = 1;
  sim::CorpusParams corpus;
  seq::ModelConfig model;
  train::SLTrainConfig sl;
  rl::RLConfig rl;
  // Comma-separated ablation flags, empty for none: sl, sl+rl, larl, ctxp,
  // kl, shuff, pp, rep. See apply_variant.
  std::string variant;
  bool run_rl = true;

  RunConfig();
  void validate() const;
};

struct KeyInfo {
  std::string key;
  std::string help;
};
// Every accepted key in output order.
const std::vector<KeyInfo>& keys();

// Sets one key from its text value. Throws ConfigError naming the key on an
// unknown key or a value of the wrong type.
void set_value(RunConfig& c, const std::string& key, const std::string& value);
std::string get_value(const RunConfig& c, const std::string& key);

// Lines "key = value"; '#' starts a comment; blank lines are skipped.
void apply_text(RunConfig& c, const std::string& text);

// Maps the variant flags onto the underlying settings:
//   larl   lite objective (context-only head)
//   ctxp   conditional prior without the prior-on-prior term (omega_pp = 0)
//   shuff  prior/posterior shuffling on; off when the flag is absent
//   pp     omega_pp > 0; 0 when absent
//   kl     beta > 0 (kDefaultBeta if beta is 0); beta = 0 when absent
//   rep    lambda > 0 (kDefaultLambda if lambda is 0); lambda = 0 when absent
//   sl     supervised stage only; sl+rl runs both stages
// An empty variant leaves every setting as given.
void apply_variant(RunConfig& c);
inline constexpr double kDefaultBeta = 0.01;
inline constexpr double kDefaultLambda = 0.1;

// File text, then overrides in order, then the variant, then validation.
RunConfig resolve(const std::string& file_text, const std::vector<std::pair<std::string, std::string>>& overrides);

// Fully resolved config, one "key = value" line per key.
std::string dump(const RunConfig& c);
std::string config_hash(const RunConfig& c);

}  // namespace tucp::cfg
