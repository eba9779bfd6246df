#include "tucp/distributions.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace tucp::dist {

using ad::Tape;
using ad::Var;

namespace {

template <typename T>
void require_same_shape(const char* op, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw ad::ShapeError(std::string(op) + ": dimension mismatch " + ad::to_string(a.shape()) + " vs " +
                         ad::to_string(b.shape()));
  }
}

template <typename T>
void check_categorical(const CategoricalVar<T>& c) {
  const auto& s = c.logits.shape();
  if (s.size() != 2 || s[1] != c.groups * c.categories) {
    throw ad::ShapeError("categorical: logits " + ad::to_string(s) + " do not hold " + std::to_string(c.groups) +
                         "x" + std::to_string(c.categories) + " categories per row");
  }
}

// [B, K*M] -> [B*K, M]
template <typename T>
Var<T> grouped(const CategoricalVar<T>& c, const Var<T>& v) {
  return ad::reshape(v, {c.rows() * c.groups, c.categories});
}

template <typename T>
Var<T> per_row(const CategoricalVar<T>& c, const Var<T>& grouped_col) {
  return ad::sum_axis(ad::reshape(grouped_col, {c.rows(), c.groups}), 1);
}

void check_finite(const std::vector<double>& v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw std::invalid_argument(std::string(what) + " must be finite");
}

template <typename T>
GaussianVar<T> to_var(Tape<T>& tape, const DiagGaussianParams& p) {
  return {tape.constant({1, p.dim()}, std::vector<T>(p.mean.begin(), p.mean.end())),
          tape.constant({1, p.dim()}, std::vector<T>(p.log_std.begin(), p.log_std.end()))};
}

CategoricalVar<double> to_var(Tape<double>& tape, const CategoricalSetParams& p) {
  return {tape.constant({1, p.logits.size()}, p.logits), p.groups, p.categories, p.temperature};
}

}  // namespace

DiagGaussianParams DiagGaussianParams::make(std::vector<double> mean, std::vector<double> log_std) {
  if (mean.size() != log_std.size()) throw std::invalid_argument("gaussian: mean and log_std lengths differ");
  check_finite(mean, "gaussian mean");
  check_finite(log_std, "gaussian log_std");
  for (auto& v : log_std) v = std::clamp(v, kLogStdMin, kLogStdMax);
  return {std::move(mean), std::move(log_std)};
}

DiagGaussianParams DiagGaussianParams::standard(std::size_t dim) {
  return {std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0)};
}

CategoricalSetParams CategoricalSetParams::make(std::size_t groups, std::size_t categories,
                                                std::vector<double> logits, double temperature) {
  if (logits.size() != groups * categories) throw std::invalid_argument("categorical: logits size != groups*categories");
  check_finite(logits, "categorical logits");
  if (!(temperature > 0.0)) throw std::invalid_argument("categorical: temperature must be positive");
  return {groups, categories, std::move(logits), temperature};
}

CategoricalSetParams CategoricalSetParams::uniform(std::size_t groups, std::size_t categories) {
  return make(groups, categories, std::vector<double>(groups * categories, 0.0));
}

template <typename T>
GaussianVar<T> standard_gaussian(Tape<T>& tape, std::size_t rows, std::size_t dim) {
  return {tape.filled({rows, dim}, T(0)), tape.filled({rows, dim}, T(0))};
}

template <typename T>
CategoricalVar<T> uniform_categorical(Tape<T>& tape, std::size_t rows, std::size_t groups, std::size_t categories) {
  return {tape.filled({rows, groups * categories}, T(0)), groups, categories, T(1)};
}

template <typename T>
Var<T> kl_gauss(const GaussianVar<T>& q, const GaussianVar<T>& p) {
  require_same_shape("kl_gauss", q.mean, p.mean);
  require_same_shape("kl_gauss", q.log_std, p.log_std);
  const Var<T> log_ratio = p.log_std - q.log_std;
  const Var<T> var_ratio = ad::exp(ad::scale(q.log_std - p.log_std, T(2)));
  const Var<T> diff = q.mean - p.mean;
  const Var<T> mahal = diff * diff * ad::exp(ad::scale(p.log_std, T(-2)));
  const Var<T> terms = ad::shift(log_ratio + ad::scale(var_ratio + mahal, T(0.5)), T(-0.5));
  return ad::sum_axis(terms, 1);
}

template <typename T>
Var<T> sym_kl(const GaussianVar<T>& a, const GaussianVar<T>& b) {
  return ad::scale(kl_gauss(a, b) + kl_gauss(b, a), T(0.5));
}

template <typename T>
Var<T> kl_cat(const CategoricalVar<T>& q, const CategoricalVar<T>& p) {
  check_categorical(q);
  check_categorical(p);
  if (q.groups != p.groups || q.categories != p.categories) {
    throw ad::ShapeError("kl_cat: (K,M) mismatch " + std::to_string(q.groups) + "x" + std::to_string(q.categories) +
                         " vs " + std::to_string(p.groups) + "x" + std::to_string(p.categories));
  }
  require_same_shape("kl_cat", q.logits, p.logits);
  const Var<T> lq = ad::log_softmax(grouped(q, q.logits));
  const Var<T> lp = ad::log_softmax(grouped(p, p.logits));
  const Var<T> terms = ad::sum_axis(ad::exp(lq) * (lq - lp), 1);
  return per_row(q, terms);
}

template <typename T>
Var<T> sym_kl(const CategoricalVar<T>& a, const CategoricalVar<T>& b) {
  return ad::scale(kl_cat(a, b) + kl_cat(b, a), T(0.5));
}

template <typename T>
Var<T> sample_reparam(const GaussianVar<T>& q, std::span<const T> noise) {
  if (noise.size() != q.mean.size()) {
    throw ad::ShapeError("sample_reparam: noise of length " + std::to_string(noise.size()) + " for " +
                         ad::to_string(q.mean.shape()));
  }
  Tape<T>& tape = q.mean.tape();
  const Var<T> eps = tape.constant(q.mean.shape(), std::vector<T>(noise.begin(), noise.end()));
  return q.mean + ad::exp(q.log_std) * eps;
}

template <typename T>
Var<T> gumbel_softmax_relaxed(const CategoricalVar<T>& c, std::span<const T> gumbel) {
  check_categorical(c);
  if (!(c.temperature > T(0))) throw std::invalid_argument("gumbel_softmax: temperature must be positive");
  if (gumbel.size() != c.logits.size()) throw ad::ShapeError("gumbel_softmax: noise length mismatch");
  Tape<T>& tape = c.logits.tape();
  const Var<T> g = tape.constant(c.logits.shape(), std::vector<T>(gumbel.begin(), gumbel.end()));
  const Var<T> y = ad::softmax(grouped(c, ad::scale(c.logits + g, T(1) / c.temperature)));
  return ad::reshape(y, c.logits.shape());
}

template <typename T>
Var<T> gumbel_softmax_sample(const CategoricalVar<T>& c, std::span<const T> gumbel) {
  const Var<T> soft = gumbel_softmax_relaxed(c, gumbel);
  const auto y = soft.value();
  std::vector<T> hard(y.size(), T(0));
  for (std::size_t r0 = 0; r0 < y.size(); r0 += c.categories) {
    const auto best = std::max_element(y.begin() + r0, y.begin() + r0 + c.categories) - (y.begin() + r0);
    hard[r0 + best] = T(1);
  }
  return ad::straight_through(soft, std::move(hard));
}

template <typename T>
Var<T> log_prob(const GaussianVar<T>& dist, const Var<T>& z) {
  require_same_shape("log_prob", dist.mean, z);
  const T half_log_2pi = T(0.5 * std::log(2.0 * std::numbers::pi));
  const Var<T> diff = z - dist.mean;
  const Var<T> quad = ad::scale(diff * diff * ad::exp(ad::scale(dist.log_std, T(-2))), T(0.5));
  const Var<T> terms = ad::shift(ad::neg(dist.log_std + quad), -half_log_2pi);
  return ad::sum_axis(terms, 1);
}

template <typename T>
Var<T> log_prob(const CategoricalVar<T>& dist, const Var<T>& z) {
  check_categorical(dist);
  require_same_shape("log_prob", dist.logits, z);
  const auto zv = z.value();
  for (std::size_t r0 = 0; r0 < zv.size(); r0 += dist.categories) {
    std::size_t ones = 0;
    for (std::size_t j = 0; j < dist.categories; ++j) {
      if (zv[r0 + j] == T(1)) {
        ++ones;
      } else if (zv[r0 + j] != T(0)) {
        ones = 2;
        break;
      }
    }
    if (ones != 1) throw std::invalid_argument("log_prob: categorical sample must be hard one-hot per group");
  }
  const Var<T> lp = ad::log_softmax(grouped(dist, dist.logits));
  return per_row(dist, ad::sum_axis(lp * grouped(dist, z), 1));
}

double kl_gauss(const DiagGaussianParams& q, const DiagGaussianParams& p) {
  if (q.dim() != p.dim()) throw ad::ShapeError("kl_gauss: dimension mismatch");
  Tape<double> tape;
  return kl_gauss(to_var(tape, q), to_var(tape, p)).item();
}

double sym_kl(const DiagGaussianParams& a, const DiagGaussianParams& b) {
  if (a.dim() != b.dim()) throw ad::ShapeError("sym_kl: dimension mismatch");
  Tape<double> tape;
  return sym_kl(to_var(tape, a), to_var(tape, b)).item();
}

double kl_cat(const CategoricalSetParams& q, const CategoricalSetParams& p) {
  Tape<double> tape;
  return kl_cat(to_var(tape, q), to_var(tape, p)).item();
}

double sym_kl(const CategoricalSetParams& a, const CategoricalSetParams& b) {
  Tape<double> tape;
  return sym_kl(to_var(tape, a), to_var(tape, b)).item();
}

LatentSample sample_reparam(const DiagGaussianParams& q, std::span<const double> noise) {
  Tape<double> tape;
  const auto z = sample_reparam(to_var(tape, q), noise).value();
  return {std::vector<double>(z.begin(), z.end()), LatentSource::posterior};
}

LatentSample gumbel_softmax_sample(const CategoricalSetParams& c, std::span<const double> gumbel) {
  Tape<double> tape;
  const auto z = gumbel_softmax_sample(to_var(tape, c), gumbel).value();
  return {std::vector<double>(z.begin(), z.end()), LatentSource::posterior};
}

double log_prob(const DiagGaussianParams& dist, std::span<const double> z) {
  if (z.size() != dist.dim()) throw ad::ShapeError("log_prob: dimension mismatch");
  Tape<double> tape;
  return log_prob(to_var(tape, dist), tape.constant({1, z.size()}, std::vector<double>(z.begin(), z.end()))).item();
}

double log_prob(const CategoricalSetParams& dist, std::span<const double> z) {
  Tape<double> tape;
  return log_prob(to_var(tape, dist), tape.constant({1, z.size()}, std::vector<double>(z.begin(), z.end()))).item();
}

bool is_one_hot(std::span<const double> z, std::size_t groups, std::size_t categories) {
  if (z.size() != groups * categories) return false;
  for (std::size_t g = 0; g < groups; ++g) {
    std::size_t ones = 0;
    for (std::size_t j = 0; j < categories; ++j) {
      const double v = z[g * categories + j];
      if (v == 1.0) ++ones;
      else if (v != 0.0) return false;
    }
    if (ones != 1) return false;
  }
  return true;
}

#define TUCP_DIST_INSTANTIATE(T)                                                                     \
  template GaussianVar<T> standard_gaussian(Tape<T>&, std::size_t, std::size_t);                    \
  template CategoricalVar<T> uniform_categorical(Tape<T>&, std::size_t, std::size_t, std::size_t);  \
  template Var<T> kl_gauss(const GaussianVar<T>&, const GaussianVar<T>&);                           \
  template Var<T> sym_kl(const GaussianVar<T>&, const GaussianVar<T>&);                             \
  template Var<T> kl_cat(const CategoricalVar<T>&, const CategoricalVar<T>&);                       \
  template Var<T> sym_kl(const CategoricalVar<T>&, const CategoricalVar<T>&);                       \
  template Var<T> sample_reparam(const GaussianVar<T>&, std::span<const T>);                        \
  template Var<T> gumbel_softmax_sample(const CategoricalVar<T>&, std::span<const T>);              \
  template Var<T> gumbel_softmax_relaxed(const CategoricalVar<T>&, std::span<const T>);             \
  template Var<T> log_prob(const GaussianVar<T>&, const Var<T>&);                                   \
  template Var<T> log_prob(const CategoricalVar<T>&, const Var<T>&);

TUCP_DIST_INSTANTIATE(float)
TUCP_DIST_INSTANTIATE(double)

}  // namespace tucp::dist
