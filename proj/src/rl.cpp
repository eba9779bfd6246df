#include "tucp/rl.hpp"

#include "tucp/objectives.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace tucp::rl {

using ad::Tape;
using ad::Var;

namespace {

constexpr seq::Trainable kFrozen{false, false, false, false};

std::vector<std::vector<int>> contexts_of(const std::vector<TurnTuple>& tuples) {
  std::vector<std::vector<int>> out;
  out.reserve(tuples.size());
  for (const auto& t : tuples) out.push_back(t.context);
  return out;
}

}  // namespace

void RLConfig::validate() const {
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw std::invalid_argument("rl: beta must be >= 0");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("rl: lambda must be in [0, 1]");
  if (batch_dialogues == 0) throw std::invalid_argument("rl: batch_dialogues must be positive");
  if (buffer_capacity == 0) throw std::invalid_argument("rl: buffer_capacity must be positive");
  if (!(optim.lr > 0.0)) throw std::invalid_argument("rl: learning rate must be positive");
  if (steps_per_epoch == 0) throw std::invalid_argument("rl: steps_per_epoch must be positive");
  if (eval_every == 0) throw std::invalid_argument("rl: eval_every must be positive");
  if (!(baseline_decay >= 0.0 && baseline_decay < 1.0)) throw std::invalid_argument("rl: baseline_decay in [0, 1)");
  if (max_len == 0) throw std::invalid_argument("rl: max_len must be positive");
  if (!(bleu_floor >= 0.0)) throw std::invalid_argument("rl: bleu_floor must be >= 0");
}

double regularized_reward(int success, double kl, const RLConfig& cfg) {
  return static_cast<double>(success) - cfg.beta * kl;
}

double regularized_reward(int success, const dist::DiagGaussianParams& policy, const RLConfig& cfg) {
  const auto prior = dist::DiagGaussianParams::standard(policy.dim());
  const double kl = cfg.sym_kl ? dist::sym_kl(policy, prior) : dist::kl_gauss(policy, prior);
  return regularized_reward(success, kl, cfg);
}

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw std::invalid_argument("replay: capacity must be positive");
}

bool ReplayBuffer::push(ReplayEntry entry, int dialogue_success) {
  if (dialogue_success != 1) return false;
  if (entries_.size() == capacity_) entries_.pop_front();
  entries_.push_back(std::move(entry));
  ++inserted_;
  return true;
}

const ReplayEntry& ReplayBuffer::sample(Rng& rng) const {
  if (entries_.empty()) throw std::logic_error("replay: sample from empty buffer");
  return entries_[rng.below(entries_.size())];
}

std::vector<Trajectory> rollout(const seq::ModelParams<float>& params, const seq::ModelParams<float>& renderer,
                                std::span<const sim::Dialogue* const> dialogues, const sim::Vocab& vocab,
                                const RLConfig& cfg, Rng& rng) {
  std::vector<std::vector<int>> contexts;
  for (const auto* d : dialogues)
    for (const auto& t : d->turns) contexts.push_back(obj::context_ids(t, vocab));
  std::vector<Trajectory> out(dialogues.size());
  if (contexts.empty()) return out;

  const std::size_t n = contexts.size();
  const std::size_t w = params.cfg.z_width();
  Tape<float> tape;
  const auto p = seq::bind(tape, params, kFrozen);
  const auto r = seq::bind(tape, renderer, kFrozen);
  const auto tokens = seq::TokenBatch::make(contexts, vocab.size());
  const auto pi = seq::prior_head(p, seq::encode(p, tokens).final);
  const auto noise = seq::draw_latent_noise(rng, params.cfg, n);
  const auto z = ad::detach(seq::sample_latent(pi, noise));
  const auto logp = seq::latent_log_prob(pi, z).value();
  const auto kl = seq::latent_kl(pi, seq::standard_prior(p, n), cfg.sym_kl).value();
  const auto ids = seq::decode_sample(r, z, seq::encode(r, tokens), cfg.max_len, seq::DecodeMode::sample, &rng);

  std::size_t k = 0;
  for (std::size_t i = 0; i < dialogues.size(); ++i) {
    auto& traj = out[i];
    const std::size_t first = k;
    for (std::size_t t = 0; t < dialogues[i]->turns.size(); ++t, ++k) {
      traj.responses.push_back(vocab.decode(ids[k]));
      TurnTuple tu;
      tu.context = contexts[k];
      tu.z.assign(z.value().begin() + static_cast<long>(k * w), z.value().begin() + static_cast<long>((k + 1) * w));
      tu.logp = logp[k];
      traj.turns.push_back(std::move(tu));
    }
    traj.success = sim::evaluate_success(*dialogues[i], traj.responses);
    for (std::size_t j = first; j < k; ++j) traj.turns[j - first].reward = regularized_reward(traj.success, kl[j], cfg);
  }
  return out;
}

StepReport reinforce_update(seq::ModelParams<float>& params, optim::Optimizer& opt, const std::vector<TurnTuple>& tuples,
                            const RLConfig& cfg, BaselineState& baseline) {
  StepReport rep;
  rep.tuples = tuples.size();
  if (tuples.empty()) return rep;
  const std::size_t n = tuples.size();
  const std::size_t w = params.cfg.z_width();

  Tape<float> tape;
  auto trainable = seq::Trainable::policy_only();
  trainable.encoder = cfg.train_encoder;
  auto p = seq::bind(tape, params, trainable);
  const auto enc = seq::encode(p, seq::TokenBatch::make(contexts_of(tuples), params.cfg.vocab));
  const auto pi = seq::prior_head(p, enc.final);
  std::vector<float> zv(n * w);
  for (std::size_t i = 0; i < n; ++i) {
    if (tuples[i].z.size() != w) throw std::invalid_argument("rl: latent width mismatch");
    std::copy(tuples[i].z.begin(), tuples[i].z.end(), zv.begin() + static_cast<long>(i * w));
  }
  const auto z = tape.constant({n, w}, std::move(zv));
  const auto logp = seq::latent_log_prob(pi, z);
  const auto kl_var = seq::latent_kl(pi, seq::standard_prior(p, n), cfg.sym_kl);
  const auto& kl = kl_var.value();

  std::vector<double> reward(n);
  double kl_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    reward[i] = tuples[i].replayed ? regularized_reward(1, kl[i], cfg) : tuples[i].reward;
    kl_sum += kl[i];
  }
  const double mean_reward = std::accumulate(reward.begin(), reward.end(), 0.0) / static_cast<double>(n);

  double b = 0.0;
  if (cfg.baseline == Baseline::moving_average) {
    b = baseline.initialized ? baseline.value : 0.0;
    baseline.value = baseline.initialized ? cfg.baseline_decay * baseline.value + (1.0 - cfg.baseline_decay) * mean_reward
                                          : mean_reward;
    baseline.initialized = true;
  }
  std::vector<float> adv(n);
  for (std::size_t i = 0; i < n; ++i) adv[i] = static_cast<float>(reward[i] - b);

  auto loss = ad::scale(ad::sum(ad::mul(logp, tape.constant({n, 1}, std::move(adv)))), -1.0f / static_cast<float>(n));
  if (cfg.pathwise_kl && cfg.beta > 0.0) {
    loss = ad::add(loss, ad::scale(ad::sum(kl_var), static_cast<float>(cfg.beta / static_cast<double>(n))));
  }
  rep.loss = loss.item();
  if (!std::isfinite(rep.loss)) throw std::runtime_error("rl: non-finite loss");
  rep.grad_norm = opt.step(params, p, tape.backward(loss));
  rep.mean_reward = mean_reward;
  rep.kl_mean = kl_sum / static_cast<double>(n);
  return rep;
}

StepReport reinforce_step(seq::ModelParams<float>& params, const seq::ModelParams<float>& renderer,
                          optim::Optimizer& opt, std::span<const sim::Dialogue* const> dialogues,
                          const sim::Vocab& vocab, const RLConfig& cfg, Rng& rng, BaselineState& baseline) {
  const auto trajs = rollout(params, renderer, dialogues, vocab, cfg, rng);
  std::vector<TurnTuple> tuples;
  std::size_t successes = 0;
  for (const auto& tr : trajs) {
    successes += static_cast<std::size_t>(tr.success);
    tuples.insert(tuples.end(), tr.turns.begin(), tr.turns.end());
  }
  auto rep = reinforce_update(params, opt, tuples, cfg, baseline);
  rep.fresh_rollouts = dialogues.size();
  rep.successes = successes;
  return rep;
}

StepReport policy_gradient_step(seq::ModelParams<float>& params, const seq::ModelParams<float>& renderer,
                                optim::Optimizer& opt, std::span<const sim::Dialogue* const> dialogues,
                                const sim::Vocab& vocab,
                                ReplayBuffer& buffer, const RLConfig& cfg, Rng& rng, BaselineState& baseline) {
  const std::size_t slots = dialogues.size();
  std::vector<char> replay(slots, 0);
  std::size_t fallbacks = 0;
  if (cfg.lambda > 0.0) {
    for (std::size_t i = 0; i < slots; ++i) {
      if (!rng.bernoulli(cfg.lambda)) continue;
      if (buffer.empty()) {
        ++fallbacks;
      } else {
        replay[i] = 1;
      }
    }
  }

  std::vector<std::vector<TurnTuple>> per_slot(slots);
  std::vector<const sim::Dialogue*> fresh;
  for (std::size_t i = 0; i < slots; ++i) {
    if (!replay[i]) {
      fresh.push_back(dialogues[i]);
      continue;
    }
    for (std::size_t t = 0; t < dialogues[i]->turns.size(); ++t) {
      const auto& e = buffer.sample(rng);
      TurnTuple tu;
      tu.context = e.context;
      tu.z = e.z;
      tu.replayed = true;
      per_slot[i].push_back(std::move(tu));
    }
  }

  const auto trajs = rollout(params, renderer, std::span<const sim::Dialogue* const>(fresh), vocab, cfg, rng);
  std::vector<TurnTuple> tuples;
  std::size_t f = 0;
  for (std::size_t i = 0; i < slots; ++i) {
    const auto& src = replay[i] ? per_slot[i] : trajs[f++].turns;
    tuples.insert(tuples.end(), src.begin(), src.end());
  }

  auto rep = reinforce_update(params, opt, tuples, cfg, baseline);
  rep.fresh_rollouts = fresh.size();
  rep.replay_hits = slots - fresh.size();
  rep.empty_fallbacks = fallbacks;
  for (const auto& tr : trajs) {
    rep.successes += static_cast<std::size_t>(tr.success);
    if (tr.success != 1) continue;
    for (const auto& tu : tr.turns) buffer.push(ReplayEntry{tu.context, tu.z, tu.reward}, tr.success);
  }
  return rep;
}

RLResult rl_train(seq::ModelParams<float> params, const sim::Corpus& corpus, const sim::Vocab& vocab,
                  const RLConfig& cfg, double sl_bleu, const train::EpochCallback& on_epoch) {
  cfg.validate();
  if (corpus.train.empty()) throw std::invalid_argument("rl: empty training split");

  const seq::ModelParams<float> renderer = params;
  RLResult result;
  const double floor = cfg.bleu_floor * sl_bleu;
  auto consider = [&](const train::EpochMetrics& m) {
    result.log.push_back(m);
    if (on_epoch) on_epoch(m);
    const bool eligible = m.bleu >= floor;
    const bool better = m.success > result.selected_metrics.success ||
                        (m.success == result.selected_metrics.success && m.bleu > result.selected_metrics.bleu);
    if (eligible && (result.log.size() == 1 || better)) {
      result.selected = params;
      result.selected_epoch = m.epoch;
      result.selected_metrics = m;
    }
  };

  const auto start = train::EpochMetrics::from(0, train::evaluate(params, corpus.valid, vocab, cfg.eval, &renderer));
  result.selected = params;
  result.selected_metrics = start;
  consider(start);

  Rng rng(cfg.seed);
  optim::Optimizer opt(params, cfg.optim);
  ReplayBuffer buffer(cfg.buffer_capacity);
  BaselineState baseline;
  std::vector<std::size_t> order(corpus.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  double reward_sum = 0.0;
  std::size_t steps = 0, hits = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs && !result.aborted; ++epoch) {
    for (std::size_t s = 0; s < cfg.steps_per_epoch; ++s) {
      std::vector<const sim::Dialogue*> batch;
      while (batch.size() < cfg.batch_dialogues) {
        if (cursor == order.size()) {
          rng.shuffle(order.begin(), order.end());
          cursor = 0;
        }
        batch.push_back(&corpus.train[order[cursor++]]);
      }
      try {
        const auto rep = policy_gradient_step(params, renderer, opt, std::span<const sim::Dialogue* const>(batch), vocab,
                                              buffer, cfg, rng, baseline);
        reward_sum += rep.mean_reward;
        hits += rep.replay_hits;
        ++steps;
      } catch (const std::runtime_error& e) {
        result.aborted = true;
        result.abort_reason = "epoch " + std::to_string(epoch) + ": " + e.what();
        break;
      }
    }
    if (result.aborted) break;
    if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
      auto m = train::EpochMetrics::from(epoch, train::evaluate(params, corpus.valid, vocab, cfg.eval, &renderer));
      m.loss = steps ? reward_sum / static_cast<double>(steps) : 0.0;
      m.replay_hits = hits;
      reward_sum = 0.0;
      steps = hits = 0;
      consider(m);
    }
  }
  result.final = params;
  result.final_metrics = result.log.back();
  if (result.aborted) {
    result.final_metrics = train::EpochMetrics::from(result.log.back().epoch,
                                                     train::evaluate(params, corpus.valid, vocab, cfg.eval, &renderer));
  }
  return result;
}

}  // namespace tucp::rl
