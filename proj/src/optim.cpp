#include "tucp/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace tucp::optim {

void OptimConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("optim: lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("optim: betas must be in [0, 1)");
  }
  if (!(eps > 0.0)) throw std::invalid_argument("optim: eps must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("optim: momentum must be in [0, 1)");
}

std::string method_name(Method m) { return m == Method::adam ? "adam" : "sgd"; }

Method parse_method(const std::string& s) {
  if (s == "adam") return Method::adam;
  if (s == "sgd") return Method::sgd;
  throw std::invalid_argument("optim: unknown method '" + s + "'");
}

Optimizer::Optimizer(const seq::ModelParams<float>& params, OptimConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  params.visit([&](const char*, const ad::Array<float>& a, seq::Group) {
    m_.emplace_back(a.size(), 0.0);
    v_.emplace_back(cfg_.method == Method::adam ? a.size() : 0, 0.0);
  });
}

double Optimizer::step(seq::ModelParams<float>& params, seq::Bound<float>& bound, const ad::Gradients<float>& grads) {
  const auto vars = bound.all();
  std::vector<std::span<const float>> g;
  for (const auto* v : vars) g.push_back(v->requires_grad() ? grads[*v] : std::span<const float>());

  double sq = 0.0;
  for (const auto& s : g)
    for (float x : s) sq += static_cast<double>(x) * x;
  const double norm = std::sqrt(sq);
  const double scale = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;

  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  std::size_t k = 0;
  params.visit([&](const char*, ad::Array<float>& a, seq::Group) {
    const auto& gk = g[k];
    auto& m = m_[k];
    auto& v = v_[k];
    ++k;
    if (gk.empty()) return;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double gi = static_cast<double>(gk[i]) * scale;
      if (cfg_.method == Method::sgd) {
        m[i] = cfg_.momentum * m[i] + gi;
        a.values[i] -= static_cast<float>(cfg_.lr * m[i]);
        continue;
      }
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      a.values[i] -= static_cast<float>(cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps));
    }
  });
  return norm;
}

}  // namespace tucp::optim
