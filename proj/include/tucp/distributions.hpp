#pragma once

#include "tucp/autodiff.hpp"

#include <cstddef>
#include <vector>

// Latent distribution families over z: diagonal Gaussians and sets of
// independent categoricals. Tape-level functions operate on batches (one row
// per example) and return per-row values of shape [B,1]; the value-level
// overloads wrap them for single distributions.

namespace tucp::dist {

inline constexpr double kLogStdMin = -8.0;
inline constexpr double kLogStdMax = 4.0;

enum class LatentSource { posterior, conditional_prior, policy, replay };

struct DiagGaussianParams {
  std::vector<double> mean;
  std::vector<double> log_std;

  // Validates finiteness and clamps log_std into [kLogStdMin, kLogStdMax].
  static DiagGaussianParams make(std::vector<double> mean, std::vector<double> log_std);
  static DiagGaussianParams standard(std::size_t dim);
  std::size_t dim() const { return mean.size(); }
};

struct CategoricalSetParams {
  std::size_t groups = 10;
  std::size_t categories = 30;
  std::vector<double> logits;  // groups x categories, row-major
  double temperature = 1.0;

  static CategoricalSetParams make(std::size_t groups, std::size_t categories, std::vector<double> logits,
                                   double temperature = 1.0);
  static CategoricalSetParams uniform(std::size_t groups, std::size_t categories);
};

struct LatentSample {
  std::vector<double> z;
  LatentSource source = LatentSource::posterior;
};

// Batched distributions on a tape. mean/log_std are [B,d]; logits are [B,K*M].
template <typename T>
struct GaussianVar {
  ad::Var<T> mean;
  ad::Var<T> log_std;
  std::size_t rows() const { return mean.shape()[0]; }
  std::size_t dim() const { return mean.shape()[1]; }
};

template <typename T>
struct CategoricalVar {
  ad::Var<T> logits;
  std::size_t groups = 0;
  std::size_t categories = 0;
  T temperature = T(1);
  std::size_t rows() const { return logits.shape()[0]; }
};

template <typename T> GaussianVar<T> standard_gaussian(ad::Tape<T>& tape, std::size_t rows, std::size_t dim);
template <typename T> CategoricalVar<T> uniform_categorical(ad::Tape<T>& tape, std::size_t rows, std::size_t groups,
                                                            std::size_t categories);

template <typename T> ad::Var<T> kl_gauss(const GaussianVar<T>& q, const GaussianVar<T>& p);
template <typename T> ad::Var<T> sym_kl(const GaussianVar<T>& a, const GaussianVar<T>& b);
template <typename T> ad::Var<T> kl_cat(const CategoricalVar<T>& q, const CategoricalVar<T>& p);
template <typename T> ad::Var<T> sym_kl(const CategoricalVar<T>& a, const CategoricalVar<T>& b);

// z = mean + exp(log_std) * noise, noise [B,d] of standard normals.
template <typename T> ad::Var<T> sample_reparam(const GaussianVar<T>& q, std::span<const T> noise);
// Straight-through Gumbel-softmax: the forward value is one-hot per group, the
// gradient is that of softmax((logits + gumbel) / temperature).
template <typename T> ad::Var<T> gumbel_softmax_sample(const CategoricalVar<T>& c, std::span<const T> gumbel);
// Relaxed sample without the straight-through substitution.
template <typename T> ad::Var<T> gumbel_softmax_relaxed(const CategoricalVar<T>& c, std::span<const T> gumbel);

template <typename T> ad::Var<T> log_prob(const GaussianVar<T>& dist, const ad::Var<T>& z);
// z must be hard one-hot per group.
template <typename T> ad::Var<T> log_prob(const CategoricalVar<T>& dist, const ad::Var<T>& z);

// Value-level wrappers.
double kl_gauss(const DiagGaussianParams& q, const DiagGaussianParams& p);
double sym_kl(const DiagGaussianParams& a, const DiagGaussianParams& b);
double kl_cat(const CategoricalSetParams& q, const CategoricalSetParams& p);
double sym_kl(const CategoricalSetParams& a, const CategoricalSetParams& b);
LatentSample sample_reparam(const DiagGaussianParams& q, std::span<const double> noise);
LatentSample gumbel_softmax_sample(const CategoricalSetParams& c, std::span<const double> gumbel);
double log_prob(const DiagGaussianParams& dist, std::span<const double> z);
double log_prob(const CategoricalSetParams& dist, std::span<const double> z);

// Hard one-hot check: every group has exactly one 1 and zeros elsewhere.
bool is_one_hot(std::span<const double> z, std::size_t groups, std::size_t categories);

}  // namespace tucp::dist
