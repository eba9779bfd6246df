#pragma once

#include "tucp/dialoguesim.hpp"
#include "tucp/distributions.hpp"
#include "tucp/optim.hpp"
#include "tucp/seqmodels.hpp"
#include "tucp/training.hpp"

#include <cstdint>
#include <deque>
#include <vector>

// Policy-gradient fine-tuning in latent space. The policy pi(z|c) is the
// encoder plus conditional-prior head, warm-started from the supervised
// model. The supervised model itself stays frozen as the renderer: its
// encoder provides the attention memory and its decoder turns z into text, so
// the policy acts on responses through z only.

namespace tucp::rl {

enum class Baseline { none, moving_average };

struct RLConfig {
  double beta = 0.0;    // KL-penalty weight
  double lambda = 0.0;  // replay substitution probability
  std::size_t batch_dialogues = 16;
  std::size_t buffer_capacity = 4096;
  optim::OptimConfig optim{optim::Method::sgd, 0.05};
  std::size_t epochs = 400;
  std::size_t steps_per_epoch = 1;
  Baseline baseline = Baseline::moving_average;
  double baseline_decay = 0.9;
  bool sym_kl = false;  // symmetric KL inside the reward
  bool train_encoder = true;  // false restricts the policy update to the prior head
  // The reward's KL term depends on the policy parameters. When set, the loss
  // also carries its exact derivative (+beta * mean KL); when clear, only the
  // score-function term sees it.
  bool pathwise_kl = true;
  std::size_t max_len = 40;
  std::size_t eval_every = 20;
  double bleu_floor = 0.7;  // selection keeps BLEU >= bleu_floor * SL BLEU
  std::uint64_t seed = 1;
  train::EvalOptions eval;

  void validate() const;
};

// succ - beta * KL(pi || N(0, I)) (or the symmetric KL when cfg.sym_kl).
double regularized_reward(int success, const dist::DiagGaussianParams& policy, const RLConfig& cfg);
// Same with the divergence already computed; used for either latent family.
double regularized_reward(int success, double kl, const RLConfig& cfg);

struct TurnTuple {
  std::vector<int> context;  // s: user tokens + state tokens
  std::vector<double> z;     // a
  double logp = 0.0;         // log pi(a|s) at rollout time
  double reward = 0.0;       // r
  bool replayed = false;     // reward is recomputed from the current policy
};

struct Trajectory {
  std::vector<TurnTuple> turns;
  int success = 0;
  std::vector<sim::Tokens> responses;
};

struct ReplayEntry {
  std::vector<int> context;
  std::vector<double> z;
  double reward = 0.0;
};

// FIFO ring buffer of latent actions from successful dialogues.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);
  // Returns false (and stores nothing) unless dialogue_success == 1.
  bool push(ReplayEntry entry, int dialogue_success);
  const ReplayEntry& sample(Rng& rng) const;
  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  std::uint64_t inserted() const { return inserted_; }
  bool empty() const { return entries_.empty(); }
  const std::deque<ReplayEntry>& entries() const { return entries_; }

 private:
  std::size_t capacity_;
  std::deque<ReplayEntry> entries_;
  std::uint64_t inserted_ = 0;
};

// Samples z ~ pi(z|c) per turn, decodes with sampling and scores each
// dialogue. Rewards use the dialogue-level success for every turn.
std::vector<Trajectory> rollout(const seq::ModelParams<float>& policy, const seq::ModelParams<float>& renderer,
                                std::span<const sim::Dialogue* const> dialogues, const sim::Vocab& vocab,
                                const RLConfig& cfg, Rng& rng);

struct StepReport {
  double mean_reward = 0.0;
  double kl_mean = 0.0;  // mean KL(pi || p) over the step's tuples
  double loss = 0.0;
  std::size_t tuples = 0;
  std::size_t replay_hits = 0;      // slots served from the buffer
  std::size_t fresh_rollouts = 0;   // slots rolled out
  std::size_t empty_fallbacks = 0;  // replay slots that found the buffer empty
  std::size_t successes = 0;        // successful fresh rollouts
  double grad_norm = 0.0;
};

// Running state of the optional baseline.
struct BaselineState {
  bool initialized = false;
  double value = 0.0;
};

// One update from explicit tuples: loss = -mean(logp * (r - b)), plus
// beta * mean(KL) when cfg.pathwise_kl is set. Replayed
// tuples get r = regularized_reward(1, pi(.|c)) from this forward pass.
// Throws std::runtime_error before touching params if the loss is not finite.
StepReport reinforce_update(seq::ModelParams<float>& params, optim::Optimizer& opt, const std::vector<TurnTuple>& tuples,
                            const RLConfig& cfg, BaselineState& baseline);

// Plain REINFORCE: roll out every dialogue and update.
StepReport reinforce_step(seq::ModelParams<float>& params, const seq::ModelParams<float>& renderer,
                          optim::Optimizer& opt, std::span<const sim::Dialogue* const> dialogues, const sim::Vocab& vocab,
                          const RLConfig& cfg, Rng& rng, BaselineState& baseline);

// REINFORCE with optimal replay: each dialogue slot is replaced with
// probability lambda by replayed (context, z) entries, one per turn of that
// dialogue. Coins are drawn for all slots first, then replay draws, then the
// fresh rollouts. Successful fresh
// rollouts are pushed to the buffer after the update. With lambda = 0 no coin
// is drawn, so the step equals reinforce_step under the same rng state.
StepReport policy_gradient_step(seq::ModelParams<float>& params, const seq::ModelParams<float>& renderer,
                                optim::Optimizer& opt, std::span<const sim::Dialogue* const> dialogues, const sim::Vocab& vocab,
                                ReplayBuffer& buffer, const RLConfig& cfg, Rng& rng, BaselineState& baseline);

struct RLResult {
  seq::ModelParams<float> selected;
  seq::ModelParams<float> final;
  std::size_t selected_epoch = 0;
  train::EpochMetrics selected_metrics;
  train::EpochMetrics final_metrics;
  std::vector<train::EpochMetrics> log;  // epoch 0 is the starting point
  bool aborted = false;
  std::string abort_reason;
};

// Runs cfg.epochs epochs of cfg.steps_per_epoch steps over shuffled training
// dialogues. `params` is the supervised model: it is the renderer throughout
// and the starting point of the policy. Selection: best validation success among evaluated checkpoints
// with BLEU >= cfg.bleu_floor * sl_bleu (ties broken by BLEU).
RLResult rl_train(seq::ModelParams<float> params, const sim::Corpus& corpus, const sim::Vocab& vocab,
                  const RLConfig& cfg, double sl_bleu, const train::EpochCallback& on_epoch = {});

}  // namespace tucp::rl
