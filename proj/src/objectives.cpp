#include "tucp/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace tucp::obj {

using ad::Var;
using seq::Bound;

std::vector<int> context_ids(const sim::DialogueTurn& turn, const sim::Vocab& vocab) {
  auto ids = vocab.encode(turn.user);
  const auto st = vocab.encode(turn.state);
  ids.insert(ids.end(), st.begin(), st.end());
  return ids;
}

std::vector<Example> make_examples(const std::vector<sim::Dialogue>& dialogues, const sim::Vocab& vocab) {
  std::vector<Example> out;
  const auto& domains = sim::domain_names();
  for (const auto& d : dialogues) {
    const int dom = static_cast<int>(std::find(domains.begin(), domains.end(), d.goal.domain) - domains.begin());
    for (const auto& t : d.turns) {
      out.push_back({context_ids(t, vocab), vocab.encode(t.response), dom, sim::act_index(t.act)});
    }
  }
  return out;
}

Batch make_batch(std::span<const Example* const> examples, const sim::Vocab& vocab) {
  if (examples.empty()) throw std::invalid_argument("batch: no examples");
  std::vector<std::vector<int>> ctx, tail, din, dout;
  for (const auto* e : examples) {
    ctx.push_back(e->context);
    std::vector<int> t = {sim::Vocab::kSep}, i = {sim::Vocab::kBos}, o = e->response;
    t.insert(t.end(), e->response.begin(), e->response.end());
    i.insert(i.end(), e->response.begin(), e->response.end());
    o.push_back(sim::Vocab::kEos);
    tail.push_back(std::move(t));
    din.push_back(std::move(i));
    dout.push_back(std::move(o));
  }
  Batch b;
  b.context = seq::TokenBatch::make(ctx, vocab.size());
  b.tail = seq::TokenBatch::make(tail, vocab.size());
  b.dec_in = seq::TokenBatch::make(din, vocab.size());
  b.dec_out = seq::TokenBatch::make(dout, vocab.size());
  b.slot.assign(b.dec_out.rows * b.dec_out.steps, false);
  for (std::size_t r = 0; r < b.dec_out.rows; ++r) {
    for (std::size_t t = 0; t < b.dec_out.lengths[r]; ++t) {
      b.slot[r * b.dec_out.steps + t] = vocab.is_slot(static_cast<int>(b.dec_out.ids[r * b.dec_out.steps + t]));
    }
  }
  return b;
}

Batch make_batch(const std::vector<Example>& examples, const sim::Vocab& vocab) {
  std::vector<const Example*> ptrs;
  for (const auto& e : examples) ptrs.push_back(&e);
  return make_batch(std::span<const Example* const>(ptrs), vocab);
}

void SLConfig::validate() const {
  if (!(omega_kl >= 0.0) || !(omega_pp >= 0.0)) throw std::invalid_argument("sl: KL weights must be >= 0");
  if (!(slot_weight >= 1.0)) throw std::invalid_argument("sl: slot_weight must be >= 1");
}

ObjectiveNoise draw_objective_noise(Rng& rng, const seq::ModelConfig& model, std::size_t rows, const SLConfig& cfg) {
  ObjectiveNoise n;
  if (cfg.objective == Objective::tucp && cfg.shuffle) {
    n.coins.resize(rows);
    for (auto& c : n.coins) c = rng.bernoulli(0.5) ? 1 : 0;
  }
  n.latent = seq::draw_latent_noise(rng, model, rows);
  return n;
}

template <typename T>
Var<T> weighted_nll_rows(const std::vector<Var<T>>& logits, const seq::TokenBatch& targets,
                         const std::vector<bool>& slot, double slot_weight) {
  const std::size_t B = targets.rows, S = targets.steps;
  if (logits.size() != S) throw ad::ShapeError("weighted_nll: " + std::to_string(logits.size()) + " logit steps for " +
                                               std::to_string(S) + " targets");
  if (slot.size() != B * S) throw ad::ShapeError("weighted_nll: slot mask size mismatch");
  std::vector<double> norm(B, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    double w = 0.0;
    for (std::size_t t = 0; t < targets.lengths[b]; ++t) w += slot[b * S + t] ? slot_weight : 1.0;
    norm[b] = static_cast<double>(targets.lengths[b]) / w;
  }
  auto& tape = logits.front().tape();
  Var<T> acc;
  for (std::size_t t = 0; t < S; ++t) {
    const auto col = targets.column(t);
    std::vector<T> coef(B, T(0));
    for (std::size_t b = 0; b < B; ++b) {
      if (t < targets.lengths[b]) coef[b] = static_cast<T>((slot[b * S + t] ? slot_weight : 1.0) * norm[b]);
    }
    const Var<T> term = ad::pick(ad::log_softmax(logits[t]), std::span<const std::size_t>(col)) * tape.constant({B, 1}, coef);
    acc = t == 0 ? term : acc + term;
  }
  return ad::neg(acc);
}

template <typename T>
Var<T> weighted_ce(const Var<T>& logits, std::span<const std::size_t> target, const std::vector<bool>& slot_mask,
                   double slot_weight) {
  const auto& s = logits.shape();
  if (s.size() != 2 || s[0] != target.size()) {
    throw ad::ShapeError("weighted_ce: logits " + ad::to_string(s) + " for " + std::to_string(target.size()) +
                         " targets");
  }
  if (slot_mask.size() != target.size()) {
    throw ad::ShapeError("weighted_ce: slot mask of length " + std::to_string(slot_mask.size()) + " for " +
                         std::to_string(target.size()) + " targets");
  }
  double total = 0.0;
  for (bool b : slot_mask) total += b ? slot_weight : 1.0;
  std::vector<T> w(target.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>((slot_mask[i] ? slot_weight : 1.0) / total);
  const Var<T> picked = ad::pick(ad::log_softmax(logits), target);
  return ad::neg(ad::sum(picked * logits.tape().constant({target.size(), 1}, w)));
}

namespace {

template <typename T>
double mean_of(const Var<T>& v) {
  double s = 0.0;
  for (T x : v.value()) s += static_cast<double>(x);
  return s / static_cast<double>(v.size());
}

template <typename T>
Var<T> reconstruction(const Bound<T>& p, const Batch& batch, const Var<T>& z, const seq::Encoded<T>& memory,
                      const SLConfig& cfg) {
  const auto trace = seq::decode_teacher_forced(p, z, memory, batch.dec_in);
  return weighted_nll_rows(trace.logits, batch.dec_out, batch.slot, cfg.slot_weight);
}

template <typename T>
void check_noise(const Bound<T>& p, const Batch& batch, const ObjectiveNoise& noise) {
  if (noise.latent.size() != batch.rows() * p.cfg.z_width()) {
    throw std::invalid_argument("objective: latent noise holds " + std::to_string(noise.latent.size()) +
                                " values, expected " + std::to_string(batch.rows() * p.cfg.z_width()));
  }
}

// Shared tail of both objectives: mean over rows of (kl terms + reconstruction).
template <typename T>
LossTerms<T> assemble(const Var<T>& kl, double omega_kl, const Var<T>* kl_pp, double omega_pp, const Var<T>& recon) {
  LossTerms<T> out;
  Var<T> total = ad::scale(kl, static_cast<T>(omega_kl));
  if (kl_pp) total = total + ad::scale(*kl_pp, static_cast<T>(omega_pp));
  total = total + recon;
  out.loss = ad::mean(total);
  out.recon = mean_of(recon);
  out.kl = mean_of(kl);
  out.kl_pp = kl_pp ? mean_of(*kl_pp) : 0.0;
  return out;
}

}  // namespace

template <typename T>
LossTerms<T> lite_elbo(const Bound<T>& p, const Batch& batch, const SLConfig& cfg, const ObjectiveNoise& noise) {
  cfg.validate();
  check_noise(p, batch, noise);
  const auto enc = seq::encode(p, batch.context);
  seq::LatentVar<T> q;
  if (cfg.lite_input == PosteriorInput::context) {
    q = seq::prior_head(p, enc.final);
  } else {
    const auto full = seq::encode(p, batch.tail, &enc.final);
    q = seq::posterior_head(p, full.final);
  }
  const auto prior = seq::standard_prior(p, batch.rows());
  const Var<T> kl = seq::latent_kl(q, prior, cfg.sym_kl);
  const Var<T> z = seq::sample_latent(q, noise.latent);
  return assemble<T>(kl, cfg.omega_kl, nullptr, 0.0, reconstruction(p, batch, z, enc, cfg));
}

template <typename T>
LossTerms<T> tucp_objective(const Bound<T>& p, const Batch& batch, const SLConfig& cfg, const ObjectiveNoise& noise) {
  cfg.validate();
  check_noise(p, batch, noise);
  if (cfg.shuffle && noise.coins.size() != batch.rows()) {
    throw std::invalid_argument("tucp: shuffle needs one coin per row, got " + std::to_string(noise.coins.size()) +
                                " for " + std::to_string(batch.rows()));
  }
  const auto enc = seq::encode(p, batch.context);
  const auto full = seq::encode(p, batch.tail, &enc.final);
  const auto post = seq::posterior_head(p, full.final);
  const auto cond = cfg.standard_prior ? seq::standard_prior(p, batch.rows()) : seq::prior_head(p, enc.final);
  const Var<T> kl = seq::latent_kl(post, cond, cfg.sym_kl);

  const double omega_pp = cfg.standard_prior ? 0.0 : cfg.effective_omega_pp();
  Var<T> kl_pp;
  if (omega_pp > 0.0) kl_pp = seq::latent_kl(cond, seq::standard_prior(p, batch.rows()));

  Var<T> z = seq::sample_latent(post, noise.latent);
  if (cfg.shuffle) {
    const Var<T> zq = seq::sample_latent(cond, noise.latent);
    std::vector<T> m(batch.rows()), inv(batch.rows());
    for (std::size_t b = 0; b < m.size(); ++b) {
      m[b] = noise.coins[b] ? T(1) : T(0);
      inv[b] = T(1) - m[b];
    }
    z = z * p.tape->constant({batch.rows(), 1}, m) + zq * p.tape->constant({batch.rows(), 1}, inv);
  }
  return assemble<T>(kl, cfg.omega_kl, omega_pp > 0.0 ? &kl_pp : nullptr, omega_pp,
                     reconstruction(p, batch, z, enc, cfg));
}

template <typename T>
LossTerms<T> sl_loss(const Bound<T>& p, const Batch& batch, const SLConfig& cfg, const ObjectiveNoise& noise) {
  return cfg.objective == Objective::lite ? lite_elbo(p, batch, cfg, noise) : tucp_objective(p, batch, cfg, noise);
}

#define TUCP_OBJ_INSTANTIATE(T)                                                                                   \
  template Var<T> weighted_nll_rows(const std::vector<Var<T>>&, const seq::TokenBatch&, const std::vector<bool>&, \
                                    double);                                                                      \
  template Var<T> weighted_ce(const Var<T>&, std::span<const std::size_t>, const std::vector<bool>&, double);    \
  template LossTerms<T> lite_elbo(const Bound<T>&, const Batch&, const SLConfig&, const ObjectiveNoise&);        \
  template LossTerms<T> tucp_objective(const Bound<T>&, const Batch&, const SLConfig&, const ObjectiveNoise&);   \
  template LossTerms<T> sl_loss(const Bound<T>&, const Batch&, const SLConfig&, const ObjectiveNoise&);

TUCP_OBJ_INSTANTIATE(float)
TUCP_OBJ_INSTANTIATE(double)

// ---- discrete oracles ----

namespace {

void check_distribution(const std::vector<double>& p, const std::string& what) {
  double s = 0.0;
  for (double v : p) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument(what + ": negative or non-finite probability");
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument(what + ": sums to " + std::to_string(s));
}

std::vector<double> random_simplex(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  double s = 0.0;
  for (auto& x : v) s += x = -std::log(rng.uniform_open());
  for (auto& x : v) x /= s;
  return v;
}

}  // namespace

void DiscreteModel::validate() const {
  if (pc.empty() || px_z.empty()) throw std::invalid_argument("discrete model: empty support");
  if (pz_c.size() != nc()) throw std::invalid_argument("discrete model: p(z|c) needs one row per c");
  check_distribution(pc, "p(c)");
  for (const auto& row : pz_c) {
    if (row.size() != nz()) throw std::invalid_argument("discrete model: p(z|c) row width differs from |z|");
    check_distribution(row, "p(z|c)");
  }
  for (const auto& row : px_z) {
    if (row.size() != nx()) throw std::invalid_argument("discrete model: ragged p(x|z)");
    check_distribution(row, "p(x|z)");
  }
}

double DiscreteModel::p_xc(std::size_t x, std::size_t c) const {
  double s = 0.0;
  for (std::size_t z = 0; z < nz(); ++z) s += joint(c, z, x);
  return s;
}

double DiscreteModel::p_x(std::size_t x) const {
  double s = 0.0;
  for (std::size_t c = 0; c < nc(); ++c) s += p_xc(x, c);
  return s;
}

double DiscreteModel::p_z(std::size_t z) const {
  double s = 0.0;
  for (std::size_t c = 0; c < nc(); ++c) s += pc[c] * pz_c[c][z];
  return s;
}

PairDistributions exact_posterior(const DiscreteModel& m) {
  m.validate();
  PairDistributions q(m.nc(), std::vector<std::vector<double>>(m.nx(), std::vector<double>(m.nz(), 0.0)));
  for (std::size_t c = 0; c < m.nc(); ++c) {
    for (std::size_t x = 0; x < m.nx(); ++x) {
      const double pxc = m.p_xc(x, c);
      if (pxc <= 0.0) continue;
      for (std::size_t z = 0; z < m.nz(); ++z) q[c][x][z] = m.joint(c, z, x) / pxc;
    }
  }
  return q;
}

std::vector<BoundCheck> lemma_bound_oracle(const DiscreteModel& m, const PairDistributions& q) {
  m.validate();
  if (q.size() != m.nc()) throw std::invalid_argument("bound oracle: q needs one entry per c");
  const double inf = std::numeric_limits<double>::infinity();
  const auto post = exact_posterior(m);
  std::vector<BoundCheck> out;
  for (std::size_t c = 0; c < m.nc(); ++c) {
    if (q[c].size() != m.nx()) throw std::invalid_argument("bound oracle: q[c] needs one entry per x");
    for (std::size_t x = 0; x < m.nx(); ++x) {
      if (m.p_xc(x, c) <= 0.0) continue;
      const auto& qd = q[c][x];
      if (qd.size() != m.nz()) throw std::invalid_argument("bound oracle: q over z has the wrong width");
      check_distribution(qd, "q(z|x,c)");
      BoundCheck b{c, x, 0.0, 0.0};
      for (std::size_t z = 0; z < m.nz(); ++z) {
        if (qd[z] == 0.0) continue;
        const double lq = std::log(qd[z]);
        b.lhs += post[c][x][z] > 0.0 ? qd[z] * (lq - std::log(post[c][x][z])) : inf;
        const double lx = m.px_z[z][x] > 0.0 ? std::log(m.px_z[z][x]) : -inf;
        const double lz = m.pz_c[c][z] > 0.0 ? std::log(m.pz_c[c][z]) : -inf;
        b.rhs += qd[z] * (lq - lx - lz);
      }
      out.push_back(b);
    }
  }
  return out;
}

ApproxGap lemma_approx_oracle(const DiscreteModel& m) {
  m.validate();
  ApproxGap g;
  std::vector<double> pz(m.nz()), px(m.nx());
  for (std::size_t z = 0; z < m.nz(); ++z) pz[z] = m.p_z(z);
  for (std::size_t x = 0; x < m.nx(); ++x) px[x] = m.p_x(x);
  for (std::size_t c = 0; c < m.nc(); ++c) {
    for (std::size_t z = 0; z < m.nz(); ++z) {
      for (std::size_t x = 0; x < m.nx(); ++x) {
        if (m.joint(c, z, x) <= 0.0) continue;
        if (pz[z] <= 0.0 || px[x] <= 0.0) {
          ++g.skipped;
          continue;
        }
        const double pc_z = m.pc[c] * m.pz_c[c][z] / pz[z];
        const double approx = m.pc[c] / px[x] * m.px_z[z][x];
        g.max_gap = std::max(g.max_gap, std::abs(pc_z - approx));
        ++g.evaluated;
      }
    }
  }
  return g;
}

DiscreteModel random_discrete_model(Rng& rng, std::size_t nc, std::size_t nz, std::size_t nx) {
  DiscreteModel m;
  m.pc = random_simplex(rng, nc);
  for (std::size_t c = 0; c < nc; ++c) m.pz_c.push_back(random_simplex(rng, nz));
  for (std::size_t z = 0; z < nz; ++z) m.px_z.push_back(random_simplex(rng, nx));
  return m;
}

DiscreteModel bijective_chain_model(Rng& rng, std::size_t n) {
  std::vector<std::size_t> f(n), g(n);
  for (std::size_t i = 0; i < n; ++i) f[i] = g[i] = i;
  rng.shuffle(f.begin(), f.end());
  rng.shuffle(g.begin(), g.end());
  DiscreteModel m;
  m.pc = random_simplex(rng, n);
  m.pz_c.assign(n, std::vector<double>(n, 0.0));
  m.px_z.assign(n, std::vector<double>(n, 0.0));
  for (std::size_t c = 0; c < n; ++c) m.pz_c[c][f[c]] = 1.0;
  for (std::size_t z = 0; z < n; ++z) m.px_z[z][g[z]] = 1.0;
  return m;
}

}  // namespace tucp::obj
