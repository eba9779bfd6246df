#include "doctest.h"

#include "tucp/autodiff.hpp"
#include "tucp/rng.hpp"

#include <cmath>
#include <functional>
#include <map>
#include <string>

using namespace tucp::ad;
using tucp::Rng;

namespace {

Array<double> random_array(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
  return Array<double>(std::move(shape), std::move(v));
}

// Scalarizes an op as sum(w * op(inputs)) with a fixed random weighting so
// every output coordinate contributes a distinct gradient.
ScalarFn weighted(std::function<Var<double>(std::span<const Var<double>>)> op, std::vector<double> w) {
  return [op, w](Tape<double>& tape, std::span<const Var<double>> in) {
    Var<double> y = op(in);
    REQUIRE(y.size() == w.size());
    return sum(y * tape.constant(y.shape(), w));
  };
}

struct OpCase {
  std::function<Var<double>(std::span<const Var<double>>)> fn;
  std::vector<Shape> inputs;
  Shape output;
  double lo = -1.0;
  double hi = 1.0;
};

const std::size_t kRows[] = {0, 2, 1};

std::map<std::string, OpCase> op_cases() {
  std::map<std::string, OpCase> cases;
  cases["add"] = {[](auto in) { return add(in[0], in[1]); }, {{2, 3}, {2, 3}}, {2, 3}};
  cases["add_broadcast"] = {[](auto in) { return add(in[0], in[1]); }, {{2, 3}, {1, 3}}, {2, 3}};
  cases["sub"] = {[](auto in) { return sub(in[0], in[1]); }, {{3}, {2, 3}}, {2, 3}};
  cases["mul"] = {[](auto in) { return mul(in[0], in[1]); }, {{2, 3}, {2, 1}}, {2, 3}};
  cases["scale"] = {[](auto in) { return scale(in[0], 0.7); }, {{4}}, {4}};
  cases["shift"] = {[](auto in) { return shift(in[0], -1.3); }, {{4}}, {4}};
  cases["matmul"] = {[](auto in) { return matmul(in[0], in[1]); }, {{2, 3}, {3, 4}}, {2, 4}};
  cases["batch_matmul"] = {[](auto in) { return batch_matmul(in[0], in[1]); }, {{2, 2, 3}, {2, 3, 2}}, {2, 2, 2}};
  cases["concat"] = {[](auto in) { return concat<double>({in[0], in[1]}, 1); }, {{2, 2}, {2, 3}}, {2, 5}};
  cases["slice"] = {[](auto in) { return slice(in[0], 1, 1, 3); }, {{2, 4}}, {2, 2}};
  cases["reshape"] = {[](auto in) { return reshape(in[0], {3, 2}); }, {{2, 3}}, {3, 2}};
  cases["broadcast"] = {[](auto in) { return broadcast_to(in[0], {3, 2, 2}); }, {{2, 1}}, {3, 2, 2}};
  cases["sigmoid"] = {[](auto in) { return sigmoid(in[0]); }, {{5}}, {5}, -4.0, 4.0};
  cases["tanh"] = {[](auto in) { return tanh(in[0]); }, {{5}}, {5}, -3.0, 3.0};
  cases["exp"] = {[](auto in) { return exp(in[0]); }, {{5}}, {5}, -2.0, 2.0};
  cases["log"] = {[](auto in) { return log(in[0]); }, {{5}}, {5}, 0.2, 3.0};
  cases["softmax"] = {[](auto in) { return softmax(in[0]); }, {{2, 4}}, {2, 4}, -3.0, 3.0};
  cases["log_softmax"] = {[](auto in) { return log_softmax(in[0]); }, {{2, 4}}, {2, 4}, -3.0, 3.0};
  cases["sum"] = {[](auto in) { return sum(in[0]); }, {{2, 3}}, {1}};
  cases["sum_axis"] = {[](auto in) { return sum_axis(in[0], 1); }, {{2, 3, 2}}, {2, 1, 2}};
  cases["mean"] = {[](auto in) { return mean(in[0]); }, {{2, 3}}, {1}};
  cases["gather_rows"] = {[](auto in) { return gather_rows(in[0], std::span<const std::size_t>(kRows)); },
                          {{3, 2}},
                          {3, 2}};
  cases["pick"] = {[](auto in) { return pick(in[0], std::span<const std::size_t>(kRows)); }, {{3, 4}}, {3, 1}};
  cases["clamp"] = {[](auto in) { return clamp(in[0], -0.5, 0.5); }, {{6}}, {6}};
  return cases;
}

}  // namespace

TEST_CASE("forward values match definitions") {
  Tape<double> tape;
  auto eye = tape.constant({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto a = tape.constant({3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto p = matmul(eye, a);
  for (std::size_t i = 0; i < 9; ++i) CHECK(p.value()[i] == a.value()[i]);

  auto s = softmax(tape.constant({3}, {0, 0, 0}));
  for (double v : s.value()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  CHECK(log(exp(tape.constant({1}, {2.0}))).item() == doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("shape mismatch reports both shapes") {
  Tape<double> tape;
  auto a = tape.filled({2, 3}, 1.0);
  auto b = tape.filled({4, 2}, 1.0);
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,2]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, tape.filled({2, 2}, 1.0)), ShapeError);
  CHECK_THROWS_AS(slice(a, 1, 2, 5), ShapeError);
  CHECK_THROWS_AS(gather_rows(a, std::vector<std::size_t>{0, 2}), std::out_of_range);
}

TEST_CASE("backward on analytic cases") {
  Tape<double> tape;
  auto x = tape.leaf({1}, {3.0}, true);
  CHECK(tape.backward(sum(x * x))[x][0] == doctest::Approx(6.0));

  auto y = tape.leaf({4}, {0, 0, 0, 0}, true);
  auto g = tape.backward(sum(sigmoid(y)));
  for (double v : g[y]) CHECK(v == doctest::Approx(0.25));
}

TEST_CASE("backward rejects non-scalar roots") {
  Tape<double> tape;
  auto x = tape.leaf({2}, {1.0, 2.0}, true);
  CHECK_THROWS_AS(tape.backward(x * x), ShapeError);
}

TEST_CASE("constants are not recorded and receive no gradient") {
  Tape<double> tape;
  auto c = tape.constant({2}, {1.0, 2.0});
  auto x = tape.leaf({2}, {3.0, 4.0}, true);
  auto y = exp(c);
  CHECK_FALSE(y.requires_grad());
  CHECK(tape.node(y.id()).inputs.empty());
  auto g = tape.backward(sum(x * y));
  CHECK(g[c].empty());
  CHECK(g[x][1] == doctest::Approx(std::exp(2.0)));
}

TEST_CASE("two-layer network matches central differences") {
  Rng rng(7);
  std::vector<Array<double>> point = {random_array(rng, {3, 5}), random_array(rng, {5, 4}), random_array(rng, {1, 4}),
                                      random_array(rng, {4, 2})};
  const auto x = random_array(rng, {2, 3});
  auto f = [&](Tape<double>& tape, std::span<const Var<double>> p) {
    auto in = tape.leaf(x.shape, x.values);
    auto hidden = tanh(add(matmul(matmul(in, p[0]), p[1]), p[2]));
    return mean(log_softmax(matmul(hidden, p[3])));
  };
  CHECK(grad_check(f, point).max_rel_error < 1e-4);
}

TEST_CASE("grad_check on constant and quadratic functions") {
  Rng rng(11);
  std::vector<Array<double>> point = {random_array(rng, {3})};
  CHECK(grad_check([](Tape<double>& t, auto) { return t.scalar(4.2); }, point).max_rel_error == 0.0);

  // x^T A x with symmetric A; gradient 2Ax.
  const std::vector<double> a = {2.0, 0.5, -0.3, 0.5, 1.0, 0.2, -0.3, 0.2, 3.0};
  auto quad = [&](Tape<double>& t, std::span<const Var<double>> p) {
    auto x = reshape(p[0], {1, 3});
    auto ax = matmul(x, t.constant({3, 3}, a));
    return sum(ax * x);
  };
  CHECK(grad_check(quad, point).max_rel_error < 1e-8);
}

TEST_CASE("grad_check reports the coordinate that went non-finite") {
  std::vector<Array<double>> point = {Array<double>({2}, {1.0, 5e-6})};
  try {
    grad_check([](Tape<double>&, std::span<const Var<double>> p) { return sum(log(p[0])); }, point);
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(e.array == 0);
    CHECK(e.coord == 1);
  }
}

TEST_CASE("every op passes grad_check on 100 random points") {
  Rng rng(2024);
  for (const auto& [name, c] : op_cases()) {
    CAPTURE(name);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<Array<double>> point;
      for (const auto& s : c.inputs) point.push_back(random_array(rng, s, c.lo, c.hi));
      std::vector<double> w(numel(c.output));
      for (auto& v : w) v = rng.uniform() * 2.0 - 1.0;
      worst = std::max(worst, grad_check(weighted(c.fn, w), point).max_rel_error);
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("straight_through keeps its forward value and passes gradient through") {
  Tape<double> tape;
  auto x = tape.leaf({3}, {0.2, 0.5, 0.3}, true);
  auto y = straight_through(x, {0.0, 1.0, 0.0});
  CHECK(y.value()[1] == 1.0);
  auto g = tape.backward(sum(y * tape.constant({3}, {1.0, 2.0, 3.0})));
  CHECK(g[x][0] == 1.0);
  CHECK(g[x][2] == 3.0);
}

TEST_CASE("backward is deterministic") {
  Rng rng(3);
  Tape<double> tape;
  auto w = tape.leaf(random_array(rng, {4, 4}));
  auto w2 = tape.leaf({4, 4}, std::vector<double>(w.value().begin(), w.value().end()), true);
  auto root = mean(softmax(matmul(tanh(w2), w2)));
  auto g1 = tape.backward(root);
  auto g2 = tape.backward(root);
  const auto a = g1[w2];
  const auto b = g2[w2];
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("softmax rows are positive and normalized") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    Tape<float> tape;
    std::vector<float> logits(3 * 7);
    for (auto& v : logits) v = static_cast<float>(rng.normal() * 30.0);
    auto s = softmax(tape.constant({3, 7}, logits));
    for (std::size_t r = 0; r < 3; ++r) {
      double total = 0.0;
      for (std::size_t j = 0; j < 7; ++j) {
        const float v = s.value()[r * 7 + j];
        CHECK(v >= 0.0f);
        total += v;
      }
      CHECK(std::abs(total - 1.0) < 1e-6);
    }
  }
  // Strict positivity for moderate logits.
  Tape<double> tape;
  auto s = softmax(tape.constant({4}, {-20.0, 0.0, 15.0, 3.0}));
  for (double v : s.value()) CHECK(v > 0.0);
}
