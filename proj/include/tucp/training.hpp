#pragma once

#include "tucp/dialoguesim.hpp"
#include "tucp/objectives.hpp"
#include "tucp/optim.hpp"
#include "tucp/seqmodels.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

// Supervised stage and policy evaluation.

namespace tucp::train {

// How the latent is chosen when rendering a policy response.
enum class LatentChoice { mean, sample };

struct EvalOptions {
  LatentChoice latent = LatentChoice::mean;
  seq::DecodeMode decode = seq::DecodeMode::greedy;
  std::size_t max_len = 40;
  std::size_t batch = 256;
  std::uint64_t seed = 0;  // used by the sampling modes
};

struct EvalResult {
  sim::CorpusScores scores;
  double kl_mean = 0.0;  // mean KL(pi(z|c) || p(z)) over turns
  std::vector<std::vector<sim::Tokens>> responses;
};

// Renders one response per turn from the policy (prior head on the context)
// and scores the dialogues. With `renderer` set, z comes from `params` while
// the attention memory and the decoder come from `renderer` (the frozen
// supervised model behind an RL policy).
EvalResult evaluate(const seq::ModelParams<float>& params, const std::vector<sim::Dialogue>& dialogues,
                    const sim::Vocab& vocab, const EvalOptions& opts,
                    const seq::ModelParams<float>* renderer = nullptr);

// Row of the per-epoch metrics log.
struct EpochMetrics {
  std::size_t epoch = 0;
  double success = 0, inform = 0, bleu = 0, cbe = 0, kl_mean = 0;
  std::size_t replay_hits = 0;
  std::size_t unigrams = 0, bigrams = 0, trigrams = 0;
  double avg_len = 0;
  double loss = 0;  // mean training loss (SL) or mean reward (RL) over the epoch

  static EpochMetrics from(std::size_t epoch, const EvalResult& r);
  std::string to_json() const;
};

struct SLTrainConfig {
  obj::SLConfig objective;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  optim::OptimConfig optim{optim::Method::adam, 2e-3};
  std::uint64_t seed = 1;
  std::size_t eval_every = 1;
  EvalOptions eval;
};

struct SLResult {
  seq::ModelParams<float> best;
  std::size_t best_epoch = 0;
  EpochMetrics best_metrics;
  std::vector<EpochMetrics> log;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

// Trains on corpus.train and keeps the checkpoint with the best validation
// BLEU. Throws std::runtime_error on a non-finite loss.
SLResult train_sl(seq::ModelParams<float> params, const sim::Corpus& corpus, const sim::Vocab& vocab,
                  const SLTrainConfig& cfg, const EpochCallback& on_epoch = {});

}  // namespace tucp::train
