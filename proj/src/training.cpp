#include "tucp/training.hpp"

#include "json.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace tucp::train {

using ad::Tape;
using ad::Var;

namespace {

constexpr seq::Trainable kFrozen{false, false, false, false};

}  // namespace

EvalResult evaluate(const seq::ModelParams<float>& params, const std::vector<sim::Dialogue>& dialogues,
                    const sim::Vocab& vocab, const EvalOptions& opts, const seq::ModelParams<float>* renderer) {
  std::vector<std::vector<int>> contexts;
  for (const auto& d : dialogues)
    for (const auto& t : d.turns) contexts.push_back(obj::context_ids(t, vocab));

  Rng rng(opts.seed);
  std::vector<sim::Tokens> flat;
  flat.reserve(contexts.size());
  double kl_total = 0.0;
  for (std::size_t start = 0; start < contexts.size(); start += opts.batch) {
    const std::size_t end = std::min(contexts.size(), start + opts.batch);
    const std::vector<std::vector<int>> chunk(contexts.begin() + static_cast<long>(start),
                                              contexts.begin() + static_cast<long>(end));
    Tape<float> tape;
    const auto p = seq::bind(tape, params, kFrozen);
    const auto tokens = seq::TokenBatch::make(chunk, vocab.size());
    const auto enc = seq::encode(p, tokens);
    const auto pi = seq::prior_head(p, enc.final);
    for (float v : seq::latent_kl(pi, seq::standard_prior(p, chunk.size())).value()) kl_total += v;

    Var<float> z;
    if (opts.latent == LatentChoice::mean) {
      z = tape.constant({chunk.size(), params.cfg.z_width()}, seq::latent_mode(pi));
    } else {
      const auto noise = seq::draw_latent_noise(rng, params.cfg, chunk.size());
      z = ad::detach(seq::sample_latent(pi, noise));
    }
    std::vector<std::vector<int>> out;
    if (renderer) {
      const auto r = seq::bind(tape, *renderer, kFrozen);
      out = seq::decode_sample(r, z, seq::encode(r, tokens), opts.max_len, opts.decode, &rng);
    } else {
      out = seq::decode_sample(p, z, enc, opts.max_len, opts.decode, &rng);
    }
    for (const auto& ids : out) flat.push_back(vocab.decode(ids));
  }

  EvalResult r;
  std::size_t k = 0;
  for (const auto& d : dialogues) {
    std::vector<sim::Tokens> resp;
    for (std::size_t t = 0; t < d.turns.size(); ++t) resp.push_back(std::move(flat[k++]));
    r.responses.push_back(std::move(resp));
  }
  if (!dialogues.empty()) r.scores = sim::score_corpus(dialogues, r.responses);
  r.kl_mean = contexts.empty() ? 0.0 : kl_total / static_cast<double>(contexts.size());
  return r;
}

EpochMetrics EpochMetrics::from(std::size_t epoch, const EvalResult& r) {
  EpochMetrics m;
  m.epoch = epoch;
  m.success = r.scores.success;
  m.inform = r.scores.inform;
  m.bleu = r.scores.bleu;
  m.cbe = r.scores.diversity.cbe;
  m.kl_mean = r.kl_mean;
  m.unigrams = r.scores.diversity.unigrams;
  m.bigrams = r.scores.diversity.bigrams;
  m.trigrams = r.scores.diversity.trigrams;
  m.avg_len = r.scores.diversity.avg_len;
  return m;
}

std::string EpochMetrics::to_json() const {
  nlohmann::ordered_json j = {{"epoch", epoch},       {"success", success},     {"inform", inform},
                              {"bleu", bleu},         {"cbe", cbe},             {"kl_mean", kl_mean},
                              {"replay_hits", replay_hits}, {"unigrams", unigrams}, {"bigrams", bigrams},
                              {"trigrams", trigrams}, {"avg_len", avg_len},     {"loss", loss}};
  return j.dump();
}

SLResult train_sl(seq::ModelParams<float> params, const sim::Corpus& corpus, const sim::Vocab& vocab,
                  const SLTrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.objective.validate();
  if (cfg.batch_size == 0) throw std::invalid_argument("sl: batch_size must be positive");
  const auto examples = obj::make_examples(corpus.train, vocab);
  if (examples.empty()) throw std::invalid_argument("sl: empty training split");

  Rng rng(cfg.seed);
  optim::Optimizer opt(params, cfg.optim);
  SLResult result;
  result.best = params;
  bool have_best = false;
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<const obj::Example*> ptrs;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) {
        ptrs.push_back(&examples[order[i]]);
      }
      const auto batch = obj::make_batch(std::span<const obj::Example* const>(ptrs), vocab);
      Tape<float> tape;
      auto bound = seq::bind(tape, params);
      const auto noise = obj::draw_objective_noise(rng, params.cfg, batch.rows(), cfg.objective);
      const auto terms = obj::sl_loss(bound, batch, cfg.objective, noise);
      const double loss = terms.loss.item();
      if (!std::isfinite(loss)) {
        throw std::runtime_error("sl: non-finite loss at epoch " + std::to_string(epoch));
      }
      opt.step(params, bound, tape.backward(terms.loss));
      loss_sum += loss;
      ++batches;
    }

    if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
      auto m = EpochMetrics::from(epoch, evaluate(params, corpus.valid, vocab, cfg.eval));
      m.loss = loss_sum / static_cast<double>(batches);
      result.log.push_back(m);
      if (!have_best || m.bleu > result.best_metrics.bleu) {
        have_best = true;
        result.best = params;
        result.best_epoch = epoch;
        result.best_metrics = m;
      }
      if (on_epoch) on_epoch(m);
    }
  }
  if (!have_best) result.best = params;
  return result;
}

}  // namespace tucp::train
