#include "doctest.h"

#include "tucp/dialoguesim.hpp"
#include "tucp/seqmodels.hpp"
#include "tucp/training.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>

using namespace tucp;
using namespace tucp::seq;
using ad::Array;
using ad::Tape;
using ad::Var;

namespace {

ModelConfig tiny(std::size_t vocab = 9, LatentFamily fam = LatentFamily::gaussian) {
  ModelConfig c;
  c.vocab = vocab;
  c.embed = 3;
  c.hidden = 4;
  c.latent = 2;
  c.family = fam;
  c.groups = 2;
  c.categories = 3;
  c.init_scale = 0.5;
  return c;
}

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Plain-loop GRU over one sequence, written against the textbook gate layout
// [r | u | n] used by the parameter arrays.
std::vector<double> gru_oracle(const ModelParams<double>& p, const std::vector<int>& seq) {
  const std::size_t h = p.cfg.hidden, e = p.cfg.embed;
  std::vector<double> state(h, 0.0);
  for (int tok : seq) {
    std::vector<double> gx(3 * h), gh(3 * h);
    for (std::size_t j = 0; j < 3 * h; ++j) {
      gx[j] = p.gru_bx.values[j];
      gh[j] = p.gru_bh.values[j];
      for (std::size_t i = 0; i < e; ++i) gx[j] += p.enc_emb.values[tok * e + i] * p.gru_wx.values[i * 3 * h + j];
      for (std::size_t i = 0; i < h; ++i) gh[j] += state[i] * p.gru_wh.values[i * 3 * h + j];
    }
    std::vector<double> next(h);
    for (std::size_t j = 0; j < h; ++j) {
      const double r = sigm(gx[j] + gh[j]);
      const double u = sigm(gx[h + j] + gh[h + j]);
      const double n = std::tanh(gx[2 * h + j] + r * gh[2 * h + j]);
      next[j] = (1.0 - u) * n + u * state[j];
    }
    state = next;
  }
  return state;
}

ModelParams<double> random_params(const ModelConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  auto p = ModelParams<double>::init(c, rng);
  // Biases are zero after init; give them values so the oracle sees them.
  p.visit([&](const char*, Array<double>& a, Group) {
    for (auto& v : a.values)
      if (v == 0.0) v = 0.3 * (rng.uniform() * 2.0 - 1.0);
  });
  return p;
}

}  // namespace

TEST_CASE("gru encoder matches a hand-written recurrence") {
  const auto c = tiny();
  const auto p = random_params(c, 3);
  const std::vector<std::vector<int>> seqs = {{4, 5, 6, 7}, {8, 4}};
  Tape<double> tape;
  const auto b = bind(tape, p);
  const auto enc = encode(b, TokenBatch::make(seqs, c.vocab));
  for (std::size_t r = 0; r < seqs.size(); ++r) {
    const auto want = gru_oracle(p, seqs[r]);
    for (std::size_t j = 0; j < c.hidden; ++j) CHECK(enc.final.value()[r * c.hidden + j] == doctest::Approx(want[j]).epsilon(1e-12));
  }
}

TEST_CASE("zero weights give a zero encoder state and uniform outputs") {
  const auto c = tiny();
  const auto p = ModelParams<double>::zeros(c);
  Tape<double> tape;
  const auto b = bind(tape, p);
  const auto enc = encode(b, TokenBatch::make({{4, 5, 6}}, c.vocab));
  for (double v : enc.final.value()) CHECK(v == 0.0);
  const auto z = tape.constant({1, c.z_width()}, {0.5, -0.5});
  const auto tr = decode_teacher_forced(b, z, enc, TokenBatch::make({{1, 4}}, c.vocab));
  for (const auto& lg : tr.logits)
    for (double v : lg.value()) CHECK(v == 0.0);
  for (const auto& att : tr.attention)
    for (double v : att.value()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("forward pass is deterministic") {
  const auto c = tiny();
  const auto p = random_params(c, 5);
  auto run = [&] {
    Tape<double> tape;
    const auto b = bind(tape, p);
    const auto enc = encode(b, TokenBatch::make({{4, 5}, {6}}, c.vocab));
    const auto pi = prior_head(b, enc.final);
    const auto tr = decode_teacher_forced(b, pi.gauss.mean, enc, TokenBatch::make({{1, 7, 8}, {1, 4, 4}}, c.vocab));
    std::vector<double> out(tr.logits.back().value().begin(), tr.logits.back().value().end());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("head shapes") {
  for (auto fam : {LatentFamily::gaussian, LatentFamily::categorical}) {
    const auto c = tiny(9, fam);
    const auto p = random_params(c, 7);
    Tape<double> tape;
    const auto b = bind(tape, p);
    const auto enc = encode(b, TokenBatch::make({{4}, {5}, {6}}, c.vocab));
    for (const auto& q : {posterior_head(b, enc.final), prior_head(b, enc.final)}) {
      CHECK(q.family == fam);
      if (fam == LatentFamily::gaussian) {
        CHECK(q.gauss.mean.shape() == ad::Shape{3, c.latent});
        CHECK(q.gauss.log_std.shape() == ad::Shape{3, c.latent});
      } else {
        CHECK(q.cat.logits.shape() == ad::Shape{3, c.groups * c.categories});
        CHECK(q.cat.groups == c.groups);
      }
      Rng rng(1);
      const auto z = sample_latent(q, draw_latent_noise(rng, c, 3));
      CHECK(z.shape() == ad::Shape{3, c.z_width()});
      CHECK(latent_kl(q, standard_prior(b, 3)).shape() == ad::Shape{3, 1});
      CHECK(latent_log_prob(q, z).shape() == ad::Shape{3, 1});
    }
  }
}

TEST_CASE("attention rows sum to one and ignore padding") {
  const auto c = tiny();
  const auto p = random_params(c, 9);
  Tape<double> tape;
  const auto b = bind(tape, p);
  const auto enc = encode(b, TokenBatch::make({{4, 5, 6, 7}, {8, 4}}, c.vocab));
  const auto z = tape.constant({2, 2}, {0.1, 0.2, -0.3, 0.4});
  const auto tr = decode_teacher_forced(b, z, enc, TokenBatch::make({{1, 5, 6}, {1, 7, 7}}, c.vocab));
  for (const auto& att : tr.attention) {
    const auto v = att.value();
    CHECK(v[0] + v[1] + v[2] + v[3] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(v[4] + v[5] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(v[6] == 0.0);
    CHECK(v[7] == 0.0);
  }
}

TEST_CASE("padding does not change a row's encoding or logits") {
  const auto c = tiny();
  const auto p = random_params(c, 11);
  const std::vector<int> ctx = {8, 4}, dec = {1, 5};
  std::vector<double> alone_final, alone_logits;
  {
    Tape<double> tape;
    const auto b = bind(tape, p);
    const auto enc = encode(b, TokenBatch::make({ctx}, c.vocab));
    const auto z = tape.constant({1, 2}, {0.3, -0.1});
    const auto tr = decode_teacher_forced(b, z, enc, TokenBatch::make({dec}, c.vocab));
    alone_final.assign(enc.final.value().begin(), enc.final.value().end());
    alone_logits.assign(tr.logits[1].value().begin(), tr.logits[1].value().end());
  }
  Tape<double> tape;
  const auto b = bind(tape, p);
  const auto enc = encode(b, TokenBatch::make({{4, 5, 6, 7, 8}, ctx}, c.vocab));
  const auto z = tape.constant({2, 2}, {0.9, 0.9, 0.3, -0.1});
  const auto tr = decode_teacher_forced(b, z, enc, TokenBatch::make({{1, 6, 6, 6}, dec}, c.vocab));
  for (std::size_t j = 0; j < c.hidden; ++j) CHECK(enc.final.value()[c.hidden + j] == doctest::Approx(alone_final[j]).epsilon(1e-12));
  for (std::size_t v = 0; v < c.vocab; ++v) CHECK(tr.logits[1].value()[c.vocab + v] == doctest::Approx(alone_logits[v]).epsilon(1e-12));
}

TEST_CASE("end-to-end gradient check of a teacher-forced loss") {
  for (auto fam : {LatentFamily::gaussian, LatentFamily::categorical}) {
    const auto c = tiny(7, fam);
    const auto p = random_params(c, 13);
    std::vector<Array<double>> point;
    p.visit([&](const char*, const Array<double>& a, Group) { point.emplace_back(a.shape, a.values, true); });
    const auto ctx = TokenBatch::make({{4, 5, 6}, {5}}, c.vocab);
    const auto din = TokenBatch::make({{1, 4, 6}, {1, 5}}, c.vocab);
    const std::vector<std::size_t> target = {4, 6, 2, 5, 2, 0};
    Rng nrng(2);
    const auto noise = draw_latent_noise(nrng, c, 2);
    ad::ScalarFn f = [&](Tape<double>& tape, std::span<const Var<double>> in) {
      Bound<double> b;
      b.cfg = c;
      b.tape = &tape;
      auto slots = b.all();
      for (std::size_t k = 0; k < slots.size(); ++k) *slots[k] = in[k];
      const auto enc = encode(b, ctx);
      const auto q = prior_head(b, enc.final);
      // The straight-through estimator is biased by construction, so the
      // categorical case checks the relaxed sample.
      const auto z = fam == LatentFamily::gaussian
                         ? sample_latent(q, noise)
                         : dist::gumbel_softmax_relaxed(q.cat, std::span<const double>(noise));
      const auto tr = decode_teacher_forced(b, z, enc, din);
      Var<double> total = ad::sum(latent_kl(q, standard_prior(b, 2)));
      for (std::size_t t = 0; t < tr.logits.size(); ++t) {
        const std::vector<std::size_t> col = {target[t], target[3 + t]};
        total = total - ad::sum(ad::pick(ad::log_softmax(tr.logits[t]), std::span<const std::size_t>(col)));
      }
      return total;
    };
    const auto rep = ad::grad_check(f, point);
    INFO(family_name(fam), " array ", rep.worst_array, " coord ", rep.worst_coord);
    CHECK(rep.max_rel_error < 1e-3);
  }
}

TEST_CASE("greedy decoding is deterministic and respects max_len") {
  const auto c = tiny();
  const auto p = random_params(c, 17);
  auto run = [&](std::size_t max_len) {
    Tape<double> tape;
    const auto b = bind(tape, p);
    const auto enc = encode(b, TokenBatch::make({{4, 5}, {6, 7, 8}}, c.vocab));
    return decode_sample(b, prior_head(b, enc.final).gauss.mean, enc, max_len, DecodeMode::greedy);
  };
  CHECK(run(6) == run(6));
  for (const auto& row : run(3)) CHECK(row.size() <= 3);
  Tape<double> tape;
  const auto b = bind(tape, p);
  const auto enc = encode(b, TokenBatch::make({{4}}, c.vocab));
  CHECK_THROWS(decode_sample(b, prior_head(b, enc.final).gauss.mean, enc, 4, DecodeMode::sample));
  CHECK_THROWS(decode_sample(b, prior_head(b, enc.final).gauss.mean, enc, 0, DecodeMode::greedy));
}

TEST_CASE("checkpoint round trip and shape checks") {
  const auto c = tiny();
  Rng rng(19);
  const auto p = ModelParams<float>::init(c, rng);
  const auto path = (std::filesystem::temp_directory_path() / "tucp_test_ckpt.bin").string();
  CheckpointMeta meta;
  meta.corpus_hash = "abc";
  meta.vocab = {"<pad>", "x"};
  meta.extra = {{"stage", "sl"}};
  save_checkpoint(path, p, meta);
  CheckpointMeta back;
  const auto q = load_checkpoint(path, &back, &c);
  auto stored = c;
  stored.init_scale = q.cfg.init_scale;  // init-only, not stored
  CHECK(q.cfg == stored);
  CHECK(back.corpus_hash == "abc");
  CHECK(back.vocab == meta.vocab);
  CHECK(back.extra == meta.extra);
  std::vector<std::vector<float>> a, bvals;
  p.visit([&](const char*, const Array<float>& x, Group) { a.push_back(x.values); });
  q.visit([&](const char*, const Array<float>& x, Group) { bvals.push_back(x.values); });
  CHECK(a == bvals);

  auto other = c;
  other.hidden = 5;
  CHECK_THROWS(load_checkpoint(path, nullptr, &other));
  CHECK_THROWS(load_checkpoint(path + ".missing"));
  std::remove(path.c_str());
}

TEST_CASE("a small model overfits five dialogues") {
  sim::CorpusParams cp;
  cp.n_dialogues = 5;
  cp.seed = 4;
  auto corpus = sim::generate_corpus(cp);
  corpus.train.insert(corpus.train.end(), corpus.valid.begin(), corpus.valid.end());
  corpus.train.insert(corpus.train.end(), corpus.test.begin(), corpus.test.end());
  corpus.valid = corpus.train;
  const auto vocab = corpus.vocab();
  ModelConfig mc;
  mc.vocab = vocab.size();
  mc.embed = 16;
  mc.hidden = 32;
  mc.latent = 4;
  Rng rng(1);
  const auto init = ModelParams<float>::init(mc, rng);
  train::SLTrainConfig cfg;
  cfg.epochs = 60;
  cfg.batch_size = 8;
  cfg.eval_every = 1;
  cfg.optim.lr = 1e-2;
  cfg.objective.omega_kl = 0.01;
  const auto res = train::train_sl(init, corpus, vocab, cfg);
  REQUIRE(res.log.size() >= 2);
  CHECK(res.log.back().loss < 0.2 * res.log.front().loss);
  CHECK(res.best_metrics.bleu > 80.0);
}
