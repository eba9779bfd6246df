#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

// Reverse-mode automatic differentiation over dense row-major arrays.
//
// A Tape owns every value produced during a forward pass. Ops are free
// functions over Var handles; an op whose inputs require gradients is recorded
// with its backward rule and replayed in reverse by Tape::backward. Values on a
// tape are immutable once recorded.

namespace tucp::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Flat row-major storage with a shape. Used for parameters and leaf inputs.
template <typename T>
struct Array {
  Shape shape;
  std::vector<T> values;
  bool requires_grad = false;

  Array() = default;
  Array(Shape s, std::vector<T> v, bool grad = false);
  static Array zeros(Shape s, bool grad = false);

  std::size_t size() const { return values.size(); }
};

enum class Op : std::uint8_t {
  leaf,
  add,
  sub,
  mul,
  scale,
  shift,
  matmul,
  batch_matmul,
  concat,
  slice,
  reshape,
  broadcast,
  sigmoid,
  tanh,
  exp,
  log,
  softmax,
  log_softmax,
  sum,
  sum_axis,
  mean,
  gather_rows,
  pick,
  clamp,
  straight_through,
};

const char* op_name(Op op);

template <typename T>
struct Node {
  Op op = Op::leaf;
  Shape shape;
  std::vector<T> value;
  std::vector<std::size_t> inputs;
  bool requires_grad = false;
  // Op-specific attributes. axis/begin/end for concat, slice and sum_axis;
  // index for gather_rows and pick; lo/hi for clamp; factor for scale/shift.
  std::size_t axis = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::vector<std::size_t> index;
  T lo{};
  T hi{};
  T factor{};
};

template <typename T>
class Tape;

template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const;
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Shape& shape() const;
  std::span<const T> value() const;
  bool requires_grad() const;
  std::size_t size() const { return value().size(); }
  // Value of a single-element array.
  T item() const;

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<std::vector<T>> grads) : grads_(std::move(grads)) {}

  // Gradient of the root with respect to a leaf. Empty for nodes that do not
  // require gradients.
  std::span<const T> operator[](const Var<T>& v) const { return grads_.at(v.id()); }

 private:
  std::vector<std::vector<T>> grads_;
};

template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Shape shape, std::vector<T> values, bool requires_grad = false);
  Var<T> leaf(const Array<T>& array) { return leaf(array.shape, array.values, array.requires_grad); }
  Var<T> constant(Shape shape, std::vector<T> values) { return leaf(std::move(shape), std::move(values), false); }
  Var<T> scalar(T v) { return constant({1}, {v}); }
  Var<T> filled(Shape shape, T v);

  Var<T> record(Node<T> node);

  const Node<T>& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  // Gradients of a scalar root with respect to every leaf that requires them.
  // Does not mutate the tape; repeated calls return identical results.
  Gradients<T> backward(const Var<T>& root) const;

 private:
  std::vector<Node<T>> nodes_;
};

// Binary elementwise ops broadcast with numpy rules (shapes right-aligned,
// size-1 dimensions stretch).
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T factor);
template <typename T> Var<T> shift(const Var<T>& a, T offset);
template <typename T> Var<T> neg(const Var<T>& a) { return scale(a, T(-1)); }

// [n,k] x [k,m] -> [n,m]
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
// [B,n,k] x [B,k,m] -> [B,n,m]
template <typename T> Var<T> batch_matmul(const Var<T>& a, const Var<T>& b);

template <typename T> Var<T> concat(std::span<const Var<T>> parts, std::size_t axis);
template <typename T> Var<T> concat(std::initializer_list<Var<T>> parts, std::size_t axis) {
  return concat(std::span<const Var<T>>(parts.begin(), parts.size()), axis);
}
template <typename T> Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t begin, std::size_t end);
template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);
template <typename T> Var<T> broadcast_to(const Var<T>& a, const Shape& shape);

template <typename T> Var<T> sigmoid(const Var<T>& a);
template <typename T> Var<T> tanh(const Var<T>& a);
template <typename T> Var<T> exp(const Var<T>& a);
template <typename T> Var<T> log(const Var<T>& a);

// Over the last axis, stabilized by subtracting the row maximum.
template <typename T> Var<T> softmax(const Var<T>& a);
template <typename T> Var<T> log_softmax(const Var<T>& a);

template <typename T> Var<T> sum(const Var<T>& a);
// Keeps the reduced axis with extent 1.
template <typename T> Var<T> sum_axis(const Var<T>& a, std::size_t axis);
template <typename T> Var<T> mean(const Var<T>& a);

// table [V,e], ids -> [ids.size(), e]
template <typename T> Var<T> gather_rows(const Var<T>& table, std::span<const std::size_t> ids);
// a [B,V], one column per row -> [B,1]
template <typename T> Var<T> pick(const Var<T>& a, std::span<const std::size_t> columns);
// Gradient passes where lo <= x <= hi.
template <typename T> Var<T> clamp(const Var<T>& a, T lo, T hi);
// Forward value is `forward_value`; backward is the identity onto `a`.
template <typename T> Var<T> straight_through(const Var<T>& a, std::vector<T> forward_value);

// Constant copy of the current value; cuts the gradient path.
template <typename T> Var<T> detach(const Var<T>& a);

template <typename T> Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <typename T> Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <typename T> Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }
template <typename T> Var<T> operator-(const Var<T>& a) { return neg(a); }

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_array = 0;
  std::size_t worst_coord = 0;
};

class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(std::size_t array, std::size_t coord);
  std::size_t array;
  std::size_t coord;
};

using ScalarFn = std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;

// Compares reverse-mode gradients of `f` against central differences at
// `point`. Relative error per coordinate is |ad - fd| / (|fd| + 1e-8).
GradCheckReport grad_check(const ScalarFn& f, std::span<const Array<double>> point, double step = 1e-5);

}  // namespace tucp::ad
