#pragma once

#include "tucp/dialoguesim.hpp"
#include "tucp/seqmodels.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace tucp::obj {

// One (context, response) pair. The context is user tokens followed by the
// serialized dialogue state.
struct Example {
  std::vector<int> context;
  std::vector<int> response;
  int domain = 0;
  int act = 0;
};

std::vector<int> context_ids(const sim::DialogueTurn& turn, const sim::Vocab& vocab);
std::vector<Example> make_examples(const std::vector<sim::Dialogue>& dialogues, const sim::Vocab& vocab);

struct Batch {
  seq::TokenBatch context;  // c
  seq::TokenBatch tail;     // sep, x  (the encoder continues from c)
  seq::TokenBatch dec_in;   // bos, x
  seq::TokenBatch dec_out;  // x, eos
  std::vector<bool> slot;   // rows x dec_out.steps, true on placeholder targets
  std::size_t rows() const { return context.rows; }
};

Batch make_batch(std::span<const Example* const> examples, const sim::Vocab& vocab);
Batch make_batch(const std::vector<Example>& examples, const sim::Vocab& vocab);

enum class Objective { lite, tucp };
// Input of the variational head in the lite objective: the context alone (the
// context-conditioned head q(z|c)) or c, sep, x through the posterior head.
enum class PosteriorInput { context, context_and_response };

struct SLConfig {
  Objective objective = Objective::tucp;
  bool shuffle = true;
  double omega_pp = 0.1;
  double omega_kl = 1.0;
  double slot_weight = 3.0;
  bool ctxp = false;     // conditional prior without the prior-on-prior term
  bool sym_kl = false;   // symmetric KL in the variational KL term
  PosteriorInput lite_input = PosteriorInput::context;
  bool standard_prior = false;  // replace q^p(z|c) by N(0, I) / uniform

  double effective_omega_pp() const { return ctxp ? 0.0 : omega_pp; }
  void validate() const;
};

struct ObjectiveNoise {
  std::vector<double> latent;  // one reparameterized draw per row
  std::vector<int> coins;      // 1 = posterior sample, 0 = prior sample; empty without shuffle
};

// Draws coins first (when cfg needs them), then the latent noise.
ObjectiveNoise draw_objective_noise(Rng& rng, const seq::ModelConfig& model, std::size_t rows, const SLConfig& cfg);

template <typename T>
struct LossTerms {
  ad::Var<T> loss;     // scalar
  double recon = 0.0;  // batch means of the three parts
  double kl = 0.0;
  double kl_pp = 0.0;
};

// Per-row sum_t c_t * CE_t where c_t = w_t / sum(w) scaled by the row's
// target length, i.e. the weighted mean cross-entropy times the length. With
// slot_weight 1 this is exactly -log p(x|z). Returns [B,1].
template <typename T>
ad::Var<T> weighted_nll_rows(const std::vector<ad::Var<T>>& logits, const seq::TokenBatch& targets,
                             const std::vector<bool>& slot, double slot_weight);

// Single-sequence weighted cross-entropy: logits [T,V], sum w_t CE_t / sum w_t.
template <typename T>
ad::Var<T> weighted_ce(const ad::Var<T>& logits, std::span<const std::size_t> target, const std::vector<bool>& slot_mask,
                       double slot_weight);

template <typename T>
LossTerms<T> lite_elbo(const seq::Bound<T>& p, const Batch& batch, const SLConfig& cfg, const ObjectiveNoise& noise);
template <typename T>
LossTerms<T> tucp_objective(const seq::Bound<T>& p, const Batch& batch, const SLConfig& cfg,
                            const ObjectiveNoise& noise);
// Dispatches on cfg.objective.
template <typename T>
LossTerms<T> sl_loss(const seq::Bound<T>& p, const Batch& batch, const SLConfig& cfg, const ObjectiveNoise& noise);

// ---- exact discrete oracles for the chain c -> z -> x ----

struct DiscreteModel {
  std::vector<double> pc;                 // p(c)
  std::vector<std::vector<double>> pz_c;  // p(z|c), rows indexed by c
  std::vector<std::vector<double>> px_z;  // p(x|z), rows indexed by z

  std::size_t nc() const { return pc.size(); }
  std::size_t nz() const { return px_z.size(); }
  std::size_t nx() const { return px_z.empty() ? 0 : px_z[0].size(); }
  void validate() const;
  double joint(std::size_t c, std::size_t z, std::size_t x) const { return pc[c] * pz_c[c][z] * px_z[z][x]; }
  double p_xc(std::size_t x, std::size_t c) const;
  double p_x(std::size_t x) const;
  double p_z(std::size_t z) const;
};

// q[c][x] is a distribution over z for the pair (x, c).
using PairDistributions = std::vector<std::vector<std::vector<double>>>;

struct BoundCheck {
  std::size_t c = 0, x = 0;
  double lhs = 0.0;  // KL(q || p(z|x,c))
  double rhs = 0.0;  // E_q[log q] - E_q[log p(x|z)] - E_q[log p(z|c)]
};

// Both sides for every pair with p(x,c) > 0.
std::vector<BoundCheck> lemma_bound_oracle(const DiscreteModel& m, const PairDistributions& q);
// The exact posterior p(z|x,c) for every pair (zeros where p(x,c) = 0).
PairDistributions exact_posterior(const DiscreteModel& m);

struct ApproxGap {
  double max_gap = 0.0;   // max |p(c|z) - p(c)/p(x) p(x|z)|
  std::size_t evaluated = 0;
  std::size_t skipped = 0;  // triples with p(z) = 0 or p(x) = 0
};

// Evaluated over triples (c, z, x) in the support of the joint.
ApproxGap lemma_approx_oracle(const DiscreteModel& m);

DiscreteModel random_discrete_model(Rng& rng, std::size_t nc, std::size_t nz, std::size_t nx);
// c, z and x in one-to-one correspondence: z = f(c), x = g(z) for random
// permutations f, g. Then p(z|x) = p(z|c) on every co-occurring pair.
DiscreteModel bijective_chain_model(Rng& rng, std::size_t n);

}  // namespace tucp::obj
