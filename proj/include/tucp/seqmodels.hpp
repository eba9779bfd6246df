#pragma once

#include "tucp/autodiff.hpp"
#include "tucp/distributions.hpp"
#include "tucp/rng.hpp"

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

// GRU encoder, posterior / conditional-prior heads and an attention LSTM
// decoder. Sequences are processed in padded batches: row b of a TokenBatch
// holds lengths[b] real tokens followed by padding.

namespace tucp::seq {

enum class LatentFamily { gaussian, categorical };

struct ModelConfig {
  std::size_t vocab = 0;
  std::size_t embed = 32;
  std::size_t hidden = 64;
  std::size_t latent = 16;
  LatentFamily family = LatentFamily::gaussian;
  std::size_t groups = 10;
  std::size_t categories = 30;
  double init_scale = 0.1;

  // Width of a sampled z as produced by the heads (d, or K*M).
  std::size_t z_width() const { return family == LatentFamily::gaussian ? latent : groups * categories; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Parameter groups; the decoder group is what the RL stage freezes.
enum class Group { encoder, posterior, prior, decoder };
const char* group_name(Group g);

template <typename T>
struct ModelParams {
  ModelConfig cfg;
  ad::Array<T> enc_emb, gru_wx, gru_wh, gru_bx, gru_bh;
  // Gaussian: (w, b) map hidden -> mean and (ls_w, ls_b) hidden -> log_std.
  // Categorical: (w, b) map hidden -> logits; ls_* are unused.
  ad::Array<T> post_w, post_b, post_ls_w, post_ls_b;
  ad::Array<T> prior_w, prior_b, prior_ls_w, prior_ls_b;
  // zproj_* exist only for categorical latents (K*M -> d input projection).
  ad::Array<T> dec_emb, zproj_w, zproj_b, init_w, init_b, lstm_wx, lstm_wh, lstm_b, out_w, out_b;

  static ModelParams init(const ModelConfig& cfg, Rng& rng);
  static ModelParams zeros(const ModelConfig& cfg);

  // Calls f(name, array, group) for every array in use, in a fixed order.
  template <typename F> void visit(F&& f) { visit_impl(*this, f); }
  template <typename F> void visit(F&& f) const { visit_impl(*this, f); }

  template <typename U> ModelParams<U> cast() const;
  std::size_t count() const;
  bool all_finite() const;

 private:
  template <typename Self, typename F> static void visit_impl(Self& self, F& f);
};

// Parameters bound to a tape. Arrays of groups outside `trainable` enter as
// constants and receive no gradient.
template <typename T>
struct Bound {
  ModelConfig cfg;
  ad::Tape<T>* tape = nullptr;
  ad::Var<T> enc_emb, gru_wx, gru_wh, gru_bx, gru_bh;
  ad::Var<T> post_w, post_b, post_ls_w, post_ls_b;
  ad::Var<T> prior_w, prior_b, prior_ls_w, prior_ls_b;
  ad::Var<T> dec_emb, zproj_w, zproj_b, init_w, init_b, lstm_wx, lstm_wh, lstm_b, out_w, out_b;

  // Same order as ModelParams::visit.
  std::vector<ad::Var<T>*> all();
};

struct Trainable {
  bool encoder = true, posterior = true, prior = true, decoder = true;
  bool has(Group g) const;
  static Trainable everything() { return {}; }
  static Trainable policy_only() { return {true, false, true, false}; }
};

template <typename T>
Bound<T> bind(ad::Tape<T>& tape, const ModelParams<T>& params, Trainable trainable = Trainable::everything());

struct TokenBatch {
  std::size_t rows = 0;
  std::size_t steps = 0;
  std::vector<std::size_t> ids;  // rows x steps, row-major, padded with Vocab::kPad
  std::vector<std::size_t> lengths;

  static TokenBatch make(const std::vector<std::vector<int>>& seqs, std::size_t vocab);
  std::vector<std::size_t> column(std::size_t t) const;
};

template <typename T>
struct Encoded {
  ad::Var<T> final;   // [B, h]
  ad::Var<T> memory;  // [B, T, h] per-step hidden states
  std::vector<T> mask_bias;  // [B*T]: 0 on real positions, -1e9 on padding
  std::size_t steps = 0;
};

// GRU over the batch. With `initial` set the recurrence continues from it.
template <typename T>
Encoded<T> encode(const Bound<T>& p, const TokenBatch& tokens, const ad::Var<T>* initial = nullptr);

// Latent distribution produced by a head; exactly one member is meaningful.
template <typename T>
struct LatentVar {
  LatentFamily family = LatentFamily::gaussian;
  dist::GaussianVar<T> gauss;
  dist::CategoricalVar<T> cat;
};

template <typename T> LatentVar<T> posterior_head(const Bound<T>& p, const ad::Var<T>& hidden);
template <typename T> LatentVar<T> prior_head(const Bound<T>& p, const ad::Var<T>& hidden);
// N(0, I) or the uniform categorical set, rows x width.
template <typename T> LatentVar<T> standard_prior(const Bound<T>& p, std::size_t rows);

// Per-row KL(q || p) or its symmetric version, [B,1].
template <typename T> ad::Var<T> latent_kl(const LatentVar<T>& q, const LatentVar<T>& p, bool symmetric = false);
template <typename T> ad::Var<T> latent_log_prob(const LatentVar<T>& q, const ad::Var<T>& z);

// Noise for one reparameterized draw per row: standard normals [B*d] for the
// Gaussian family, Gumbel(0,1) [B*K*M] for the categorical one.
std::vector<double> draw_latent_noise(Rng& rng, const ModelConfig& cfg, std::size_t rows);
template <typename T> ad::Var<T> sample_latent(const LatentVar<T>& q, std::span<const double> noise);
// Mean (Gaussian) or per-group argmax one-hot (categorical); no gradient.
template <typename T> std::vector<T> latent_mode(const LatentVar<T>& q);

// Teacher-forced decoder. z is [B, z_width]; inputs are [bos, x...] and the
// returned list holds one [B, V] logit block per input step.
template <typename T>
struct DecodeTrace {
  std::vector<ad::Var<T>> logits;
  std::vector<ad::Var<T>> attention;  // [B, Tc] per step
};
template <typename T>
DecodeTrace<T> decode_teacher_forced(const Bound<T>& p, const ad::Var<T>& z, const Encoded<T>& memory,
                                     const TokenBatch& inputs);

enum class DecodeMode { greedy, sample };

// Autoregressive decoding of B rows; tokens exclude bos and the final eos.
// `rng` is required in sample mode.
template <typename T>
std::vector<std::vector<int>> decode_sample(const Bound<T>& p, const ad::Var<T>& z, const Encoded<T>& memory,
                                            std::size_t max_len, DecodeMode mode, Rng* rng = nullptr);

// Checkpoint: 8-byte little-endian length, text metadata, float32 payload.
struct CheckpointMeta {
  std::string corpus_hash;
  std::vector<std::string> vocab;
  std::vector<std::pair<std::string, std::string>> extra;  // free-form key/value pairs
};
void save_checkpoint(const std::string& path, const ModelParams<float>& params, const CheckpointMeta& meta);
// Verifies shapes against `expected` when it is non-null.
ModelParams<float> load_checkpoint(const std::string& path, CheckpointMeta* meta = nullptr,
                                   const ModelConfig* expected = nullptr);

std::string family_name(LatentFamily f);
LatentFamily parse_family(const std::string& s);

template <typename T>
template <typename Self, typename F>
void ModelParams<T>::visit_impl(Self& s, F& f) {
  const bool gauss = s.cfg.family == LatentFamily::gaussian;
  f("enc_emb", s.enc_emb, Group::encoder);
  f("gru_wx", s.gru_wx, Group::encoder);
  f("gru_wh", s.gru_wh, Group::encoder);
  f("gru_bx", s.gru_bx, Group::encoder);
  f("gru_bh", s.gru_bh, Group::encoder);
  f("post_w", s.post_w, Group::posterior);
  f("post_b", s.post_b, Group::posterior);
  if (gauss) {
    f("post_ls_w", s.post_ls_w, Group::posterior);
    f("post_ls_b", s.post_ls_b, Group::posterior);
  }
  f("prior_w", s.prior_w, Group::prior);
  f("prior_b", s.prior_b, Group::prior);
  if (gauss) {
    f("prior_ls_w", s.prior_ls_w, Group::prior);
    f("prior_ls_b", s.prior_ls_b, Group::prior);
  }
  f("dec_emb", s.dec_emb, Group::decoder);
  if (!gauss) {
    f("zproj_w", s.zproj_w, Group::decoder);
    f("zproj_b", s.zproj_b, Group::decoder);
  }
  f("init_w", s.init_w, Group::decoder);
  f("init_b", s.init_b, Group::decoder);
  f("lstm_wx", s.lstm_wx, Group::decoder);
  f("lstm_wh", s.lstm_wh, Group::decoder);
  f("lstm_b", s.lstm_b, Group::decoder);
  f("out_w", s.out_w, Group::decoder);
  f("out_b", s.out_b, Group::decoder);
}

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast() const {
  auto out = ModelParams<U>::zeros(cfg);
  std::vector<const ad::Array<T>*> src;
  visit([&](const char*, const ad::Array<T>& a, Group) { src.push_back(&a); });
  std::size_t k = 0;
  out.visit([&](const char*, ad::Array<U>& a, Group) {
    const auto& from = *src[k++];
    for (std::size_t i = 0; i < a.values.size(); ++i) a.values[i] = static_cast<U>(from.values[i]);
  });
  return out;
}

}  // namespace tucp::seq
