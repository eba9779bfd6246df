#include "doctest.h"

#include "tucp/config.hpp"

using namespace tucp;
using namespace tucp::cfg;

namespace {

std::string error_key(const std::string& text, std::vector<std::pair<std::string, std::string>> o = {}) {
  try {
    resolve(text, o);
  } catch (const ConfigError& e) {
    return e.key;
  }
  return "";
}

}  // namespace

TEST_CASE("empty config gives the defaults") {
  const auto c = resolve("", {});
  const RunConfig d;
  CHECK(dump(c) == dump(d));
  CHECK(c.rl.lambda == 0.0);
  CHECK(c.rl.beta == 0.0);
  CHECK(c.sl.epochs == 20);
  CHECK(c.corpus.n_dialogues == 1000);
  CHECK(resolve("# only a comment\n\n   \n", {}).seed == 1);
}

TEST_CASE("overrides win over the file") {
  CHECK(resolve("beta = 0.1\n", {}).rl.beta == 0.1);
  CHECK(resolve("beta = 0.1\n", {{"beta", "0.2"}}).rl.beta == 0.2);
  CHECK(resolve("beta = 0.1  # trailing comment\n", {}).rl.beta == 0.1);
}

TEST_CASE("invalid values are rejected with the key name") {
  CHECK(error_key("lambda = 1.5\n") == "lambda");
  CHECK(error_key("", {{"lambda", "-0.1"}}) == "lambda");
  CHECK(error_key("lambda = abc\n") == "lambda");
  CHECK(error_key("sl_epochs = 2.5\n") == "sl_epochs");
  CHECK(error_key("sl_epochs = -3\n") == "sl_epochs");
  CHECK(error_key("shuffle = maybe\n") == "shuffle");
  CHECK(error_key("family = poisson\n") == "family");
  CHECK(error_key("no_such_key = 1\n") == "no_such_key");
  CHECK(error_key("", {{"no_such_key", "1"}}) == "no_such_key");
  CHECK(error_key("p_vague = 2\n") == "p_vague");
  CHECK(error_key("beta\n") == "line 1");
}

TEST_CASE("seed reaches every stage") {
  const auto c = resolve("seed = 7\n", {});
  CHECK(c.corpus.seed == 7);
  CHECK(c.sl.seed == 7);
  CHECK(c.rl.seed == 7);
  CHECK(c.sl.eval.seed == 7);
  CHECK(c.rl.eval.seed == 7);
}

TEST_CASE("dump round-trips and the hash tracks content") {
  const auto c = resolve("beta = 0.003\nlambda = 0.3\nfamily = categorical\nvariant = sl+rl,kl,rep,shuff,pp\n", {});
  const auto again = resolve(dump(c), {});
  CHECK(dump(again) == dump(c));
  CHECK(config_hash(again) == config_hash(c));
  CHECK(config_hash(resolve("beta = 0.004\n", {})) != config_hash(resolve("beta = 0.003\n", {})));
  for (const auto& k : keys()) CHECK_NOTHROW(get_value(c, k.key));
}

TEST_CASE("ablation variants map onto the underlying settings") {
  SUBCASE("larl") {
    const auto c = resolve("variant = sl+rl,larl\n", {});
    CHECK(c.sl.objective.objective == obj::Objective::lite);
    CHECK(c.run_rl);
    CHECK(c.rl.beta == 0.0);
    CHECK(c.rl.lambda == 0.0);
  }
  SUBCASE("ctxp") {
    const auto c = resolve("variant = sl,ctxp\n", {});
    CHECK(c.sl.objective.objective == obj::Objective::tucp);
    CHECK(c.sl.objective.ctxp);
    CHECK(c.sl.objective.effective_omega_pp() == 0.0);
    CHECK_FALSE(c.run_rl);
  }
  SUBCASE("shuff and pp") {
    const auto a = resolve("variant = sl,shuff,pp\n", {});
    CHECK(a.sl.objective.shuffle);
    CHECK(a.sl.objective.omega_pp > 0.0);
    const auto b = resolve("variant = sl\nshuffle = true\nomega_pp = 0.5\n", {});
    CHECK_FALSE(b.sl.objective.shuffle);
    CHECK(b.sl.objective.omega_pp == 0.0);
  }
  SUBCASE("kl and rep") {
    const auto a = resolve("variant = sl+rl,kl,rep\n", {});
    CHECK(a.rl.beta == kDefaultBeta);
    CHECK(a.rl.lambda == kDefaultLambda);
    const auto b = resolve("variant = sl+rl,kl,rep\nbeta = 0.05\nlambda = 0.4\n", {});
    CHECK(b.rl.beta == 0.05);
    CHECK(b.rl.lambda == 0.4);
  }
  SUBCASE("invalid combinations") {
    CHECK(error_key("variant = sl,sl+rl\n") == "variant");
    CHECK(error_key("variant = larl,shuff\n") == "variant");
    CHECK(error_key("variant = ctxp,pp\n") == "variant");
    CHECK(error_key("variant = sl,dropout\n") == "variant");
    CHECK(error_key("variant = sl\n", {{"beta", "0.1"}}) == "beta");
  }
  SUBCASE("empty variant leaves settings alone") {
    const auto c = resolve("shuffle = false\nbeta = 0.2\n", {});
    CHECK_FALSE(c.sl.objective.shuffle);
    CHECK(c.rl.beta == 0.2);
  }
}
