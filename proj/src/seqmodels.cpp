#include "tucp/seqmodels.hpp"
#include "tucp/dialoguesim.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace tucp::seq {

using ad::Array;
using ad::Shape;
using ad::Tape;
using ad::Var;

namespace {

constexpr double kMaskBias = -1e9;

template <typename T>
Var<T> affine(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return ad::matmul(x, w) + b;
}

template <typename T>
std::vector<T> to_t(std::span<const double> v) {
  return std::vector<T>(v.begin(), v.end());
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab < 5) throw std::invalid_argument("model: vocab must hold the reserved tokens and at least one word");
  if (embed == 0 || hidden == 0 || latent == 0) throw std::invalid_argument("model: dimensions must be positive");
  if (family == LatentFamily::categorical && (groups == 0 || categories < 2)) {
    throw std::invalid_argument("model: categorical latents need groups >= 1 and categories >= 2");
  }
}

const char* group_name(Group g) {
  switch (g) {
    case Group::encoder: return "encoder";
    case Group::posterior: return "posterior";
    case Group::prior: return "prior";
    case Group::decoder: return "decoder";
  }
  return "?";
}

std::string family_name(LatentFamily f) { return f == LatentFamily::gaussian ? "gaussian" : "categorical"; }

LatentFamily parse_family(const std::string& s) {
  if (s == "gaussian") return LatentFamily::gaussian;
  if (s == "categorical") return LatentFamily::categorical;
  throw std::invalid_argument("unknown latent family '" + s + "'");
}

bool Trainable::has(Group g) const {
  switch (g) {
    case Group::encoder: return encoder;
    case Group::posterior: return posterior;
    case Group::prior: return prior;
    case Group::decoder: return decoder;
  }
  return false;
}

template <typename T>
ModelParams<T> ModelParams<T>::zeros(const ModelConfig& c) {
  c.validate();
  ModelParams p;
  p.cfg = c;
  const std::size_t V = c.vocab, e = c.embed, h = c.hidden, d = c.latent, zw = c.z_width();
  auto z = [](Shape s) { return Array<T>::zeros(std::move(s)); };
  p.enc_emb = z({V, e});
  p.gru_wx = z({e, 3 * h});
  p.gru_wh = z({h, 3 * h});
  p.gru_bx = z({1, 3 * h});
  p.gru_bh = z({1, 3 * h});
  p.post_w = z({h, zw});
  p.post_b = z({1, zw});
  p.prior_w = z({h, zw});
  p.prior_b = z({1, zw});
  if (c.family == LatentFamily::gaussian) {
    p.post_ls_w = z({h, d});
    p.post_ls_b = z({1, d});
    p.prior_ls_w = z({h, d});
    p.prior_ls_b = z({1, d});
  } else {
    p.zproj_w = z({zw, d});
    p.zproj_b = z({1, d});
  }
  p.dec_emb = z({V, e});
  p.init_w = z({d, h});
  p.init_b = z({1, h});
  p.lstm_wx = z({e + d, 4 * h});
  p.lstm_wh = z({h, 4 * h});
  p.lstm_b = z({1, 4 * h});
  p.out_w = z({2 * h, V});
  p.out_b = z({1, V});
  return p;
}

template <typename T>
ModelParams<T> ModelParams<T>::init(const ModelConfig& c, Rng& rng) {
  auto p = zeros(c);
  p.visit([&](const char* name, Array<T>& a, Group) {
    const std::string n = name;
    const bool bias = n.ends_with("_b") || n == "gru_bx" || n == "gru_bh";
    if (bias) return;
    const double s = n.ends_with("emb") ? 1.0 : c.init_scale;
    for (auto& v : a.values) v = static_cast<T>((rng.uniform() * 2.0 - 1.0) * s);
  });
  // Forget-gate bias of 1 keeps early gradients flowing through the cell.
  for (std::size_t i = c.hidden; i < 2 * c.hidden; ++i) p.lstm_b.values[i] = T(1);
  return p;
}

template <typename T>
std::size_t ModelParams<T>::count() const {
  std::size_t n = 0;
  visit([&](const char*, const Array<T>& a, Group) { n += a.size(); });
  return n;
}

template <typename T>
bool ModelParams<T>::all_finite() const {
  bool ok = true;
  visit([&](const char*, const Array<T>& a, Group) {
    for (T v : a.values) ok = ok && std::isfinite(static_cast<double>(v));
  });
  return ok;
}

template <typename T>
std::vector<Var<T>*> Bound<T>::all() {
  const bool gauss = cfg.family == LatentFamily::gaussian;
  std::vector<Var<T>*> out = {&enc_emb, &gru_wx, &gru_wh, &gru_bx, &gru_bh, &post_w, &post_b};
  if (gauss) out.insert(out.end(), {&post_ls_w, &post_ls_b});
  out.insert(out.end(), {&prior_w, &prior_b});
  if (gauss) out.insert(out.end(), {&prior_ls_w, &prior_ls_b});
  out.push_back(&dec_emb);
  if (!gauss) out.insert(out.end(), {&zproj_w, &zproj_b});
  out.insert(out.end(), {&init_w, &init_b, &lstm_wx, &lstm_wh, &lstm_b, &out_w, &out_b});
  return out;
}

template <typename T>
Bound<T> bind(Tape<T>& tape, const ModelParams<T>& params, Trainable trainable) {
  Bound<T> b;
  b.cfg = params.cfg;
  b.tape = &tape;
  auto slots = b.all();
  std::size_t k = 0;
  params.visit([&](const char*, const Array<T>& a, Group g) {
    *slots[k++] = tape.leaf(a.shape, a.values, trainable.has(g));
  });
  return b;
}

TokenBatch TokenBatch::make(const std::vector<std::vector<int>>& seqs, std::size_t vocab) {
  if (seqs.empty()) throw std::invalid_argument("token batch: no sequences");
  TokenBatch tb;
  tb.rows = seqs.size();
  for (const auto& s : seqs) {
    if (s.empty()) throw std::invalid_argument("token batch: empty sequence");
    tb.steps = std::max(tb.steps, s.size());
  }
  tb.ids.assign(tb.rows * tb.steps, static_cast<std::size_t>(sim::Vocab::kPad));
  for (std::size_t r = 0; r < tb.rows; ++r) {
    for (std::size_t t = 0; t < seqs[r].size(); ++t) {
      const int id = seqs[r][t];
      if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
        throw std::out_of_range("token batch: id " + std::to_string(id) + " outside vocabulary of " +
                                std::to_string(vocab));
      }
      tb.ids[r * tb.steps + t] = static_cast<std::size_t>(id);
    }
    tb.lengths.push_back(seqs[r].size());
  }
  return tb;
}

std::vector<std::size_t> TokenBatch::column(std::size_t t) const {
  std::vector<std::size_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) out[r] = ids[r * steps + t];
  return out;
}

template <typename T>
Encoded<T> encode(const Bound<T>& p, const TokenBatch& tokens, const Var<T>* initial) {
  auto& tape = *p.tape;
  const std::size_t B = tokens.rows, h = p.cfg.hidden;
  Var<T> state = initial ? *initial : tape.filled({B, h}, T(0));
  if (state.shape() != Shape{B, h}) throw ad::ShapeError("encode: initial state " + ad::to_string(state.shape()));

  std::vector<Var<T>> steps;
  steps.reserve(tokens.steps);
  for (std::size_t t = 0; t < tokens.steps; ++t) {
    const auto col = tokens.column(t);
    const Var<T> x = ad::gather_rows(p.enc_emb, std::span<const std::size_t>(col));
    const Var<T> gx = affine(x, p.gru_wx, p.gru_bx);
    const Var<T> gh = affine(state, p.gru_wh, p.gru_bh);
    const Var<T> r = ad::sigmoid(ad::slice(gx, 1, 0, h) + ad::slice(gh, 1, 0, h));
    const Var<T> u = ad::sigmoid(ad::slice(gx, 1, h, 2 * h) + ad::slice(gh, 1, h, 2 * h));
    const Var<T> n = ad::tanh(ad::slice(gx, 1, 2 * h, 3 * h) + r * ad::slice(gh, 1, 2 * h, 3 * h));
    const Var<T> next = n + u * (state - n);

    std::vector<T> mask(B);
    bool full = true;
    for (std::size_t b = 0; b < B; ++b) {
      mask[b] = t < tokens.lengths[b] ? T(1) : T(0);
      full = full && mask[b] == T(1);
    }
    state = full ? next : state + tape.constant({B, 1}, mask) * (next - state);
    steps.push_back(ad::reshape(state, {B, 1, h}));
  }

  Encoded<T> e;
  e.final = state;
  e.memory = ad::concat(std::span<const Var<T>>(steps), 1);
  e.steps = tokens.steps;
  e.mask_bias.assign(B * tokens.steps, T(0));
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = tokens.lengths[b]; t < tokens.steps; ++t) e.mask_bias[b * tokens.steps + t] = T(kMaskBias);
  }
  return e;
}

namespace {

template <typename T>
LatentVar<T> head(const Bound<T>& p, const Var<T>& hidden, const Var<T>& w, const Var<T>& b, const Var<T>& ls_w,
                  const Var<T>& ls_b) {
  LatentVar<T> out;
  out.family = p.cfg.family;
  if (p.cfg.family == LatentFamily::gaussian) {
    out.gauss.mean = affine(hidden, w, b);
    out.gauss.log_std = ad::clamp(affine(hidden, ls_w, ls_b), T(dist::kLogStdMin), T(dist::kLogStdMax));
  } else {
    out.cat = {affine(hidden, w, b), p.cfg.groups, p.cfg.categories, T(1)};
  }
  return out;
}

}  // namespace

template <typename T>
LatentVar<T> posterior_head(const Bound<T>& p, const Var<T>& hidden) {
  return head(p, hidden, p.post_w, p.post_b, p.post_ls_w, p.post_ls_b);
}

template <typename T>
LatentVar<T> prior_head(const Bound<T>& p, const Var<T>& hidden) {
  return head(p, hidden, p.prior_w, p.prior_b, p.prior_ls_w, p.prior_ls_b);
}

template <typename T>
LatentVar<T> standard_prior(const Bound<T>& p, std::size_t rows) {
  LatentVar<T> out;
  out.family = p.cfg.family;
  if (p.cfg.family == LatentFamily::gaussian) {
    out.gauss = dist::standard_gaussian(*p.tape, rows, p.cfg.latent);
  } else {
    out.cat = dist::uniform_categorical(*p.tape, rows, p.cfg.groups, p.cfg.categories);
  }
  return out;
}

template <typename T>
Var<T> latent_kl(const LatentVar<T>& q, const LatentVar<T>& p, bool symmetric) {
  if (q.family != p.family) throw std::invalid_argument("latent_kl: mixed latent families");
  if (q.family == LatentFamily::gaussian) return symmetric ? dist::sym_kl(q.gauss, p.gauss) : dist::kl_gauss(q.gauss, p.gauss);
  return symmetric ? dist::sym_kl(q.cat, p.cat) : dist::kl_cat(q.cat, p.cat);
}

template <typename T>
Var<T> latent_log_prob(const LatentVar<T>& q, const Var<T>& z) {
  return q.family == LatentFamily::gaussian ? dist::log_prob(q.gauss, z) : dist::log_prob(q.cat, z);
}

std::vector<double> draw_latent_noise(Rng& rng, const ModelConfig& cfg, std::size_t rows) {
  std::vector<double> out(rows * cfg.z_width());
  if (cfg.family == LatentFamily::gaussian) {
    for (auto& v : out) v = rng.normal();
  } else {
    for (auto& v : out) v = rng.gumbel();
  }
  return out;
}

template <typename T>
Var<T> sample_latent(const LatentVar<T>& q, std::span<const double> noise) {
  const auto n = to_t<T>(noise);
  if (q.family == LatentFamily::gaussian) return dist::sample_reparam(q.gauss, std::span<const T>(n));
  return dist::gumbel_softmax_sample(q.cat, std::span<const T>(n));
}

template <typename T>
std::vector<T> latent_mode(const LatentVar<T>& q) {
  if (q.family == LatentFamily::gaussian) {
    const auto m = q.gauss.mean.value();
    return std::vector<T>(m.begin(), m.end());
  }
  const auto l = q.cat.logits.value();
  std::vector<T> out(l.size(), T(0));
  const std::size_t M = q.cat.categories;
  for (std::size_t g = 0; g < l.size() / M; ++g) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < M; ++j)
      if (l[g * M + j] > l[g * M + best]) best = j;
    out[g * M + best] = T(1);
  }
  return out;
}

namespace {

// Per-call decoder state shared by teacher forcing and free-running decoding.
template <typename T>
struct DecoderRun {
  const Bound<T>& p;
  const Encoded<T>& mem;
  std::size_t B, h, e;
  Var<T> zin_gates;  // z-part of the LSTM input transform, constant over steps
  Var<T> w_emb;      // embedding rows of lstm_wx
  Var<T> mask;       // [B, Tc]
  Var<T> hs, cs;

  DecoderRun(const Bound<T>& bound, const Var<T>& z, const Encoded<T>& memory)
      : p(bound), mem(memory), B(z.shape()[0]), h(bound.cfg.hidden), e(bound.cfg.embed) {
    const auto& cfg = p.cfg;
    if (z.shape() != Shape{B, cfg.z_width()}) {
      throw ad::ShapeError("decoder: z of shape " + ad::to_string(z.shape()) + ", expected [" + std::to_string(B) +
                           "," + std::to_string(cfg.z_width()) + "]");
    }
    if (memory.memory.shape()[0] != B) throw ad::ShapeError("decoder: memory batch differs from z batch");
    const Var<T> zin = cfg.family == LatentFamily::gaussian ? z : affine(z, p.zproj_w, p.zproj_b);
    w_emb = ad::slice(p.lstm_wx, 0, 0, e);
    zin_gates = ad::matmul(zin, ad::slice(p.lstm_wx, 0, e, e + cfg.latent)) + p.lstm_b;
    hs = ad::tanh(affine(zin, p.init_w, p.init_b));
    cs = p.tape->filled({B, h}, T(0));
    mask = p.tape->constant({B, memory.steps}, memory.mask_bias);
  }

  // One step on input tokens; returns (logits [B,V], attention [B,Tc]).
  std::pair<Var<T>, Var<T>> step(std::span<const std::size_t> tokens) {
    const Var<T> x = ad::gather_rows(p.dec_emb, tokens);
    const Var<T> gates = ad::matmul(x, w_emb) + ad::matmul(hs, p.lstm_wh) + zin_gates;
    const Var<T> i = ad::sigmoid(ad::slice(gates, 1, 0, h));
    const Var<T> f = ad::sigmoid(ad::slice(gates, 1, h, 2 * h));
    const Var<T> g = ad::tanh(ad::slice(gates, 1, 2 * h, 3 * h));
    const Var<T> o = ad::sigmoid(ad::slice(gates, 1, 3 * h, 4 * h));
    cs = f * cs + i * g;
    hs = o * ad::tanh(cs);

    const std::size_t Tc = mem.steps;
    const Var<T> scores = ad::reshape(ad::batch_matmul(mem.memory, ad::reshape(hs, {B, h, 1})), {B, Tc});
    const Var<T> att = ad::softmax(scores + mask);
    const Var<T> ctx = ad::reshape(ad::batch_matmul(ad::reshape(att, {B, 1, Tc}), mem.memory), {B, h});
    const Var<T> logits = affine(ad::concat({hs, ctx}, 1), p.out_w, p.out_b);
    return {logits, att};
  }
};

}  // namespace

template <typename T>
DecodeTrace<T> decode_teacher_forced(const Bound<T>& p, const Var<T>& z, const Encoded<T>& memory,
                                     const TokenBatch& inputs) {
  if (inputs.steps == 0) throw std::invalid_argument("decode: empty target");
  if (inputs.rows != z.shape()[0]) throw ad::ShapeError("decode: input batch differs from z batch");
  DecoderRun<T> run(p, z, memory);
  DecodeTrace<T> trace;
  for (std::size_t t = 0; t < inputs.steps; ++t) {
    const auto col = inputs.column(t);
    auto [logits, att] = run.step(col);
    trace.logits.push_back(logits);
    trace.attention.push_back(att);
  }
  return trace;
}

template <typename T>
std::vector<std::vector<int>> decode_sample(const Bound<T>& p, const Var<T>& z, const Encoded<T>& memory,
                                            std::size_t max_len, DecodeMode mode, Rng* rng) {
  if (max_len == 0) throw std::invalid_argument("decode_sample: max_len must be >= 1");
  if (mode == DecodeMode::sample && !rng) throw std::invalid_argument("decode_sample: sample mode needs an rng");
  DecoderRun<T> run(p, z, memory);
  const std::size_t B = run.B, V = p.cfg.vocab;
  std::vector<std::vector<int>> out(B);
  std::vector<bool> done(B, false);
  std::vector<std::size_t> tokens(B, static_cast<std::size_t>(sim::Vocab::kBos));
  std::vector<double> probs(V);
  for (std::size_t t = 0; t < max_len; ++t) {
    auto [logits, att] = run.step(tokens);
    const auto lv = logits.value();
    bool all_done = true;
    for (std::size_t b = 0; b < B; ++b) {
      if (done[b]) {
        tokens[b] = sim::Vocab::kPad;
        continue;
      }
      const T* row = lv.data() + b * V;
      std::size_t pick = 0;
      if (mode == DecodeMode::greedy) {
        for (std::size_t v = 1; v < V; ++v)
          if (row[v] > row[pick]) pick = v;
      } else {
        double mx = row[0];
        for (std::size_t v = 1; v < V; ++v) mx = std::max(mx, static_cast<double>(row[v]));
        double total = 0;
        for (std::size_t v = 0; v < V; ++v) total += probs[v] = std::exp(static_cast<double>(row[v]) - mx);
        double u = rng->uniform() * total;
        pick = V - 1;
        for (std::size_t v = 0; v < V; ++v) {
          u -= probs[v];
          if (u < 0) {
            pick = v;
            break;
          }
        }
      }
      if (pick == static_cast<std::size_t>(sim::Vocab::kEos)) {
        done[b] = true;
        tokens[b] = sim::Vocab::kPad;
        continue;
      }
      out[b].push_back(static_cast<int>(pick));
      tokens[b] = pick;
      all_done = false;
    }
    if (all_done) break;
  }
  return out;
}

// ---- checkpoint ----

namespace {

constexpr const char* kCheckpointFormat = "tucp-checkpoint-1";

std::string config_line(const ModelConfig& c) {
  std::ostringstream s;
  s << "config vocab=" << c.vocab << " embed=" << c.embed << " hidden=" << c.hidden << " latent=" << c.latent
    << " family=" << family_name(c.family) << " groups=" << c.groups << " categories=" << c.categories;
  return s.str();
}

ModelConfig parse_config_line(std::istringstream& in) {
  ModelConfig c;
  std::string kv;
  while (in >> kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::runtime_error("checkpoint: malformed config entry '" + kv + "'");
    const std::string k = kv.substr(0, eq), v = kv.substr(eq + 1);
    if (k == "family") {
      c.family = parse_family(v);
      continue;
    }
    const std::size_t n = std::stoul(v);
    if (k == "vocab") c.vocab = n;
    else if (k == "embed") c.embed = n;
    else if (k == "hidden") c.hidden = n;
    else if (k == "latent") c.latent = n;
    else if (k == "groups") c.groups = n;
    else if (k == "categories") c.categories = n;
    else throw std::runtime_error("checkpoint: unknown config key '" + k + "'");
  }
  return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams<float>& params, const CheckpointMeta& meta) {
  std::ostringstream m;
  m << "format " << kCheckpointFormat << "\n";
  m << "corpus_hash " << (meta.corpus_hash.empty() ? "-" : meta.corpus_hash) << "\n";
  m << config_line(params.cfg) << "\n";
  for (const auto& [k, v] : meta.extra) m << "extra " << k << " " << v << "\n";
  m << "vocab " << meta.vocab.size() << "\n";
  for (const auto& t : meta.vocab) m << t << "\n";
  std::size_t offset = 0;
  params.visit([&](const char* name, const Array<float>& a, Group) {
    m << "array " << name << " " << ad::to_string(a.shape) << " " << offset << "\n";
    offset += a.size() * 4;
  });
  const std::string text = m.str();

  std::string blob;
  blob.reserve(8 + text.size() + offset);
  const std::uint64_t len = text.size();
  for (int i = 0; i < 8; ++i) blob.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
  blob += text;
  params.visit([&](const char*, const Array<float>& a, Group) {
    for (float v : a.values) {
      const auto bits = std::bit_cast<std::uint32_t>(v);
      for (int i = 0; i < 4; ++i) blob.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
    }
  });
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

ModelParams<float> load_checkpoint(const std::string& path, CheckpointMeta* meta_out, const ModelConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot read " + path);
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (blob.size() < 8) throw std::runtime_error("checkpoint: truncated header in " + path);
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(blob[i])) << (8 * i);
  if (len > blob.size() - 8) throw std::runtime_error("checkpoint: metadata length exceeds file size");
  std::istringstream meta(blob.substr(8, len));
  const std::size_t payload = 8 + len;

  CheckpointMeta info;
  ModelConfig cfg;
  bool have_cfg = false;
  std::vector<std::tuple<std::string, std::string, std::size_t>> arrays;
  std::string line;
  while (std::getline(meta, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "format") {
      std::string f;
      ls >> f;
      if (f != kCheckpointFormat) throw std::runtime_error("checkpoint: unsupported format '" + f + "'");
    } else if (key == "corpus_hash") {
      ls >> info.corpus_hash;
      if (info.corpus_hash == "-") info.corpus_hash.clear();
    } else if (key == "config") {
      cfg = parse_config_line(ls);
      have_cfg = true;
    } else if (key == "extra") {
      std::string k, v;
      ls >> k;
      std::getline(ls >> std::ws, v);
      info.extra.emplace_back(k, v);
    } else if (key == "vocab") {
      std::size_t n = 0;
      ls >> n;
      for (std::size_t i = 0; i < n; ++i) {
        if (!std::getline(meta, line)) throw std::runtime_error("checkpoint: truncated vocabulary");
        info.vocab.push_back(line);
      }
    } else if (key == "array") {
      std::string name, shape;
      std::size_t off = 0;
      ls >> name >> shape >> off;
      arrays.emplace_back(name, shape, off);
    } else if (!key.empty()) {
      throw std::runtime_error("checkpoint: unknown metadata key '" + key + "'");
    }
  }
  if (!have_cfg) throw std::runtime_error("checkpoint: missing model config");
  if (expected && !(cfg.vocab == expected->vocab && cfg.embed == expected->embed && cfg.hidden == expected->hidden &&
                    cfg.latent == expected->latent && cfg.family == expected->family &&
                    (cfg.family == LatentFamily::gaussian ||
                     (cfg.groups == expected->groups && cfg.categories == expected->categories)))) {
    throw std::runtime_error("checkpoint: model config " + config_line(cfg) + " differs from expected " +
                             config_line(*expected));
  }

  auto params = ModelParams<float>::zeros(cfg);
  std::size_t k = 0;
  params.visit([&](const char* name, Array<float>& a, Group) {
    if (k >= arrays.size()) throw std::runtime_error(std::string("checkpoint: missing array ") + name);
    const auto& [n, shape, off] = arrays[k++];
    if (n != name || shape != ad::to_string(a.shape)) {
      throw std::runtime_error("checkpoint: array " + n + " " + shape + " does not match " + name + " " +
                               ad::to_string(a.shape));
    }
    if (payload + off + a.size() * 4 > blob.size()) throw std::runtime_error("checkpoint: truncated payload");
    for (std::size_t i = 0; i < a.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) {
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(blob[payload + off + 4 * i + b])) << (8 * b);
      }
      a.values[i] = std::bit_cast<float>(bits);
    }
  });
  if (k != arrays.size()) throw std::runtime_error("checkpoint: unexpected extra arrays");
  if (meta_out) *meta_out = std::move(info);
  return params;
}

#define TUCP_SEQ_INSTANTIATE(T)                                                                                    \
  template struct ModelParams<T>;                                                                                  \
  template struct Bound<T>;                                                                                        \
  template Bound<T> bind(Tape<T>&, const ModelParams<T>&, Trainable);                                             \
  template Encoded<T> encode(const Bound<T>&, const TokenBatch&, const Var<T>*);                                  \
  template LatentVar<T> posterior_head(const Bound<T>&, const Var<T>&);                                           \
  template LatentVar<T> prior_head(const Bound<T>&, const Var<T>&);                                               \
  template LatentVar<T> standard_prior(const Bound<T>&, std::size_t);                                             \
  template Var<T> latent_kl(const LatentVar<T>&, const LatentVar<T>&, bool);                                      \
  template Var<T> latent_log_prob(const LatentVar<T>&, const Var<T>&);                                            \
  template Var<T> sample_latent(const LatentVar<T>&, std::span<const double>);                                    \
  template std::vector<T> latent_mode(const LatentVar<T>&);                                                       \
  template DecodeTrace<T> decode_teacher_forced(const Bound<T>&, const Var<T>&, const Encoded<T>&,                \
                                                const TokenBatch&);                                               \
  template std::vector<std::vector<int>> decode_sample(const Bound<T>&, const Var<T>&, const Encoded<T>&,         \
                                                       std::size_t, DecodeMode, Rng*);

TUCP_SEQ_INSTANTIATE(float)
TUCP_SEQ_INSTANTIATE(double)

}  // namespace tucp::seq
