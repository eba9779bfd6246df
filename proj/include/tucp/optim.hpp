#pragma once

#include "tucp/seqmodels.hpp"

#include <string>
#include <vector>

namespace tucp::optim {

enum class Method { adam, sgd };

struct OptimConfig {
  Method method = Method::adam;
  double lr = 1e-3;
  double beta1 = 0.9;   // adam
  double beta2 = 0.999; // adam
  double eps = 1e-8;    // adam
  double momentum = 0.0;  // sgd
  double clip_norm = 5.0;  // global gradient-norm clip; <= 0 disables

  void validate() const;
};

std::string method_name(Method m);
Method parse_method(const std::string& s);

// Adam or SGD (with optional heavy-ball momentum) over the arrays of a
// ModelParams<float>. Arrays whose gradient span is empty (constants on the
// tape) are left untouched.
class Optimizer {
 public:
  Optimizer(const seq::ModelParams<float>& params, OptimConfig cfg);

  // Returns the pre-clip global gradient norm.
  double step(seq::ModelParams<float>& params, seq::Bound<float>& bound, const ad::Gradients<float>& grads);
  const OptimConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  OptimConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace tucp::optim
