#include "tucp/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace tucp::ad {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::scale: return "scale";
    case Op::shift: return "shift";
    case Op::matmul: return "matmul";
    case Op::batch_matmul: return "batch_matmul";
    case Op::concat: return "concat";
    case Op::slice: return "slice";
    case Op::reshape: return "reshape";
    case Op::broadcast: return "broadcast";
    case Op::sigmoid: return "sigmoid";
    case Op::tanh: return "tanh";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::softmax: return "softmax";
    case Op::log_softmax: return "log_softmax";
    case Op::sum: return "sum";
    case Op::sum_axis: return "sum_axis";
    case Op::mean: return "mean";
    case Op::gather_rows: return "gather_rows";
    case Op::pick: return "pick";
    case Op::clamp: return "clamp";
    case Op::straight_through: return "straight_through";
  }
  return "?";
}

namespace {

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

// outer x extent x inner decomposition of a shape around `axis`.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) shape_fail(op, a, b);
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides into a source of shape `src` (right-aligned) for iterating `dst`,
// with zero stride on broadcast dimensions.
std::vector<std::size_t> broadcast_strides(const Shape& src, const Shape& dst) {
  const std::size_t r = dst.size();
  std::vector<std::size_t> strides(r, 0);
  std::size_t stride = 1;
  for (std::size_t k = src.size(); k-- > 0;) {
    const std::size_t d = k + (r - src.size());
    strides[d] = src[k] == 1 ? 0 : stride;
    stride *= src[k];
  }
  return strides;
}

// Calls fn(dst_flat, src_flat) for every element of dst.
template <typename F>
void for_each_broadcast(const Shape& src, const Shape& dst, F&& fn) {
  const auto strides = broadcast_strides(src, dst);
  const std::size_t r = dst.size();
  const std::size_t total = numel(dst);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t n = 0; n < total; ++n) {
    fn(n, off);
    for (std::size_t k = r; k-- > 0;) {
      ++idx[k];
      off += strides[k];
      if (idx[k] < dst[k]) break;
      off -= strides[k] * dst[k];
      idx[k] = 0;
    }
  }
}

template <typename T>
Node<T> make_node(Op op, std::initializer_list<Var<T>> inputs, Shape shape, std::vector<T> value) {
  Node<T> n;
  n.op = op;
  n.shape = std::move(shape);
  n.value = std::move(value);
  for (const auto& v : inputs) {
    n.inputs.push_back(v.id());
    n.requires_grad = n.requires_grad || v.requires_grad();
  }
  return n;
}

template <typename T>
Tape<T>& same_tape(const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument("operands live on different tapes");
  return a.tape();
}

template <typename T>
std::pair<Var<T>, Var<T>> broadcast_pair(const char* op, const Var<T>& a, const Var<T>& b) {
  if (a.shape() == b.shape()) return {a, b};
  const Shape s = broadcast_shape(op, a.shape(), b.shape());
  return {broadcast_to(a, s), broadcast_to(b, s)};
}

template <typename T, typename F>
Var<T> unary(Op op, const Var<T>& a, F&& fn) {
  const auto x = a.value();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fn(x[i]);
  return a.tape().record(make_node<T>(op, {a}, a.shape(), std::move(out)));
}

template <typename T>
void accumulate(std::vector<T>& dst, std::size_t n, std::span<const T> src) {
  if (dst.empty()) dst.assign(n, T(0));
  for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
}

}  // namespace

template <typename T>
Array<T>::Array(Shape s, std::vector<T> v, bool grad) : shape(std::move(s)), values(std::move(v)), requires_grad(grad) {
  if (numel(shape) != values.size()) {
    throw ShapeError("array: shape " + to_string(shape) + " does not hold " + std::to_string(values.size()) +
                     " values");
  }
}

template <typename T>
Array<T> Array<T>::zeros(Shape s, bool grad) {
  const std::size_t n = numel(s);
  return Array(std::move(s), std::vector<T>(n, T(0)), grad);
}

template <typename T>
Tape<T>& Var<T>::tape() const {
  if (!tape_) throw std::logic_error("use of an unbound Var");
  return *tape_;
}

template <typename T>
const Shape& Var<T>::shape() const {
  return tape().node(id_).shape;
}

template <typename T>
std::span<const T> Var<T>::value() const {
  return tape().node(id_).value;
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape().node(id_).requires_grad;
}

template <typename T>
T Var<T>::item() const {
  const auto v = value();
  if (v.size() != 1) throw ShapeError("item: array of shape " + to_string(shape()) + " is not a scalar");
  return v[0];
}

template <typename T>
Var<T> Tape<T>::leaf(Shape shape, std::vector<T> values, bool requires_grad) {
  if (numel(shape) != values.size()) {
    throw ShapeError("leaf: shape " + to_string(shape) + " does not hold " + std::to_string(values.size()) +
                     " values");
  }
  Node<T> n;
  n.op = Op::leaf;
  n.shape = std::move(shape);
  n.value = std::move(values);
  n.requires_grad = requires_grad;
  return record(std::move(n));
}

template <typename T>
Var<T> Tape<T>::filled(Shape shape, T v) {
  const std::size_t n = numel(shape);
  return constant(std::move(shape), std::vector<T>(n, v));
}

template <typename T>
Var<T> Tape<T>::record(Node<T> node) {
  if (!node.requires_grad) node.inputs.clear();
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Gradients<T> Tape<T>::backward(const Var<T>& root) const {
  if (&root.tape() != this) throw std::invalid_argument("backward: root belongs to another tape");
  const Node<T>& r = nodes_.at(root.id());
  if (r.value.size() != 1) throw ShapeError("backward: root must be scalar, got shape " + to_string(r.shape));

  std::vector<std::vector<T>> g(root.id() + 1);
  if (r.requires_grad) g[root.id()].assign(1, T(1));

  for (std::size_t u = root.id() + 1; u-- > 0;) {
    const Node<T>& n = nodes_[u];
    if (!n.requires_grad || g[u].empty() || n.op == Op::leaf) continue;
    const std::span<const T> dy = g[u];
    const std::size_t count = n.value.size();

    auto grad_of = [&](std::size_t k) -> std::vector<T>* {
      const std::size_t in = n.inputs[k];
      if (!nodes_[in].requires_grad) return nullptr;
      auto& dst = g[in];
      if (dst.empty()) dst.assign(nodes_[in].value.size(), T(0));
      return &dst;
    };
    auto input = [&](std::size_t k) -> const Node<T>& { return nodes_[n.inputs[k]]; };

    switch (n.op) {
      case Op::leaf:
        break;
      case Op::add:
        for (std::size_t k = 0; k < 2; ++k)
          if (auto* d = grad_of(k)) accumulate(*d, count, dy);
        break;
      case Op::sub:
        if (auto* d = grad_of(0)) accumulate(*d, count, dy);
        if (auto* d = grad_of(1))
          for (std::size_t i = 0; i < count; ++i) (*d)[i] -= dy[i];
        break;
      case Op::mul: {
        const auto& a = input(0).value;
        const auto& b = input(1).value;
        if (auto* d = grad_of(0))
          for (std::size_t i = 0; i < count; ++i) (*d)[i] += dy[i] * b[i];
        if (auto* d = grad_of(1))
          for (std::size_t i = 0; i < count; ++i) (*d)[i] += dy[i] * a[i];
        break;
      }
      case Op::scale:
        if (auto* d = grad_of(0))
          for (std::size_t i = 0; i < count; ++i) (*d)[i] += dy[i] * n.factor;
        break;
      case Op::shift:
      case Op::reshape:
      case Op::straight_through:
        if (auto* d = grad_of(0)) accumulate(*d, count, dy);
        break;
      case Op::matmul: {
        const auto& A = input(0);
        const auto& B = input(1);
        const auto rows = static_cast<Eigen::Index>(A.shape[0]);
        const auto inner = static_cast<Eigen::Index>(A.shape[1]);
        const auto cols = static_cast<Eigen::Index>(B.shape[1]);
        ConstMap<T> dY(dy.data(), rows, cols);
        if (auto* d = grad_of(0)) {
          MutMap<T> dA(d->data(), rows, inner);
          dA.noalias() += dY * ConstMap<T>(B.value.data(), inner, cols).transpose();
        }
        if (auto* d = grad_of(1)) {
          MutMap<T> dB(d->data(), inner, cols);
          dB.noalias() += ConstMap<T>(A.value.data(), rows, inner).transpose() * dY;
        }
        break;
      }
      case Op::batch_matmul: {
        const auto& A = input(0);
        const auto& B = input(1);
        const std::size_t batch = A.shape[0];
        const auto rows = static_cast<Eigen::Index>(A.shape[1]);
        const auto inner = static_cast<Eigen::Index>(A.shape[2]);
        const auto cols = static_cast<Eigen::Index>(B.shape[2]);
        auto* dAv = grad_of(0);
        auto* dBv = grad_of(1);
        for (std::size_t b = 0; b < batch; ++b) {
          ConstMap<T> dY(dy.data() + b * rows * cols, rows, cols);
          if (dAv) {
            MutMap<T> dA(dAv->data() + b * rows * inner, rows, inner);
            dA.noalias() += dY * ConstMap<T>(B.value.data() + b * inner * cols, inner, cols).transpose();
          }
          if (dBv) {
            MutMap<T> dB(dBv->data() + b * inner * cols, inner, cols);
            dB.noalias() += ConstMap<T>(A.value.data() + b * rows * inner, rows, inner).transpose() * dY;
          }
        }
        break;
      }
      case Op::concat: {
        const AxisSplit out = split_at(n.shape, n.axis);
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const std::size_t ext = input(k).shape[n.axis];
          if (auto* d = grad_of(k)) {
            for (std::size_t o = 0; o < out.outer; ++o) {
              const T* src = dy.data() + (o * out.extent + offset) * out.inner;
              T* dst = d->data() + o * ext * out.inner;
              for (std::size_t i = 0; i < ext * out.inner; ++i) dst[i] += src[i];
            }
          }
          offset += ext;
        }
        break;
      }
      case Op::slice: {
        if (auto* d = grad_of(0)) {
          const AxisSplit in = split_at(input(0).shape, n.axis);
          const std::size_t ext = n.end - n.begin;
          for (std::size_t o = 0; o < in.outer; ++o) {
            const T* src = dy.data() + o * ext * in.inner;
            T* dst = d->data() + (o * in.extent + n.begin) * in.inner;
            for (std::size_t i = 0; i < ext * in.inner; ++i) dst[i] += src[i];
          }
        }
        break;
      }
      case Op::broadcast:
        if (auto* d = grad_of(0)) {
          for_each_broadcast(input(0).shape, n.shape, [&](std::size_t o, std::size_t s) { (*d)[s] += dy[o]; });
        }
        break;
      case Op::sigmoid:
        if (auto* d = grad_of(0))
          for (std::size_t i = 0; i < count; ++i) (*d)[i] += dy[i] * n.value[i] * (T(1) - n.value[i]);
        break;
      case Op::tanh:
        if (auto* d = grad_of(0))
          for (std::size_t i = 0; i < count; ++i) (*d)[i] += dy[i] * (T(1) - n.value[i] * n.value[i]);
        break;
      case Op::exp:
        if (auto* d = grad_of(0))
          for (std::size_t i = 0; i < count; ++i) (*d)[i] += dy[i] * n.value[i];
        break;
      case Op::log: {
        const auto& x = input(0).value;
        if (auto* d = grad_of(0))
          for (std::size_t i = 0; i < count; ++i) (*d)[i] += dy[i] / x[i];
        break;
      }
      case Op::softmax:
        if (auto* d = grad_of(0)) {
          const std::size_t cols = n.shape.back();
          for (std::size_t r0 = 0; r0 < count; r0 += cols) {
            T dot = 0;
            for (std::size_t j = 0; j < cols; ++j) dot += dy[r0 + j] * n.value[r0 + j];
            for (std::size_t j = 0; j < cols; ++j) (*d)[r0 + j] += n.value[r0 + j] * (dy[r0 + j] - dot);
          }
        }
        break;
      case Op::log_softmax:
        if (auto* d = grad_of(0)) {
          const std::size_t cols = n.shape.back();
          for (std::size_t r0 = 0; r0 < count; r0 += cols) {
            T total = 0;
            for (std::size_t j = 0; j < cols; ++j) total += dy[r0 + j];
            for (std::size_t j = 0; j < cols; ++j) (*d)[r0 + j] += dy[r0 + j] - std::exp(n.value[r0 + j]) * total;
          }
        }
        break;
      case Op::sum:
        if (auto* d = grad_of(0))
          for (auto& v : *d) v += dy[0];
        break;
      case Op::mean:
        if (auto* d = grad_of(0)) {
          const T w = dy[0] / static_cast<T>(d->size());
          for (auto& v : *d) v += w;
        }
        break;
      case Op::sum_axis:
        if (auto* d = grad_of(0)) {
          const AxisSplit in = split_at(input(0).shape, n.axis);
          for (std::size_t o = 0; o < in.outer; ++o)
            for (std::size_t e = 0; e < in.extent; ++e)
              for (std::size_t i = 0; i < in.inner; ++i)
                (*d)[(o * in.extent + e) * in.inner + i] += dy[o * in.inner + i];
        }
        break;
      case Op::gather_rows:
        if (auto* d = grad_of(0)) {
          const std::size_t width = n.shape[1];
          for (std::size_t r0 = 0; r0 < n.index.size(); ++r0) {
            T* dst = d->data() + n.index[r0] * width;
            const T* src = dy.data() + r0 * width;
            for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
          }
        }
        break;
      case Op::pick:
        if (auto* d = grad_of(0)) {
          const std::size_t cols = input(0).shape[1];
          for (std::size_t r0 = 0; r0 < n.index.size(); ++r0) (*d)[r0 * cols + n.index[r0]] += dy[r0];
        }
        break;
      case Op::clamp: {
        const auto& x = input(0).value;
        if (auto* d = grad_of(0))
          for (std::size_t i = 0; i < count; ++i)
            if (x[i] >= n.lo && x[i] <= n.hi) (*d)[i] += dy[i];
        break;
      }
    }
    // Intermediate gradients are consumed; only leaves are reported.
    if (n.op != Op::leaf) std::vector<T>().swap(g[u]);
  }

  for (std::size_t u = 0; u <= root.id(); ++u) {
    if (nodes_[u].op == Op::leaf && nodes_[u].requires_grad && g[u].empty()) g[u].assign(nodes_[u].value.size(), T(0));
  }
  g.resize(nodes_.size());
  return Gradients<T>(std::move(g));
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  auto& tape = same_tape(a, b);
  auto [x, y] = broadcast_pair("add", a, b);
  const auto xv = x.value(), yv = y.value();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + yv[i];
  return tape.record(make_node<T>(Op::add, {x, y}, x.shape(), std::move(out)));
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  auto& tape = same_tape(a, b);
  auto [x, y] = broadcast_pair("sub", a, b);
  const auto xv = x.value(), yv = y.value();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] - yv[i];
  return tape.record(make_node<T>(Op::sub, {x, y}, x.shape(), std::move(out)));
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  auto& tape = same_tape(a, b);
  auto [x, y] = broadcast_pair("mul", a, b);
  const auto xv = x.value(), yv = y.value();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * yv[i];
  return tape.record(make_node<T>(Op::mul, {x, y}, x.shape(), std::move(out)));
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  const auto x = a.value();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * factor;
  auto n = make_node<T>(Op::scale, {a}, a.shape(), std::move(out));
  n.factor = factor;
  return a.tape().record(std::move(n));
}

template <typename T>
Var<T> shift(const Var<T>& a, T offset) {
  const auto x = a.value();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + offset;
  auto n = make_node<T>(Op::shift, {a}, a.shape(), std::move(out));
  n.factor = offset;
  return a.tape().record(std::move(n));
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  auto& tape = same_tape(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) shape_fail("matmul", sa, sb);
  const auto rows = static_cast<Eigen::Index>(sa[0]);
  const auto inner = static_cast<Eigen::Index>(sa[1]);
  const auto cols = static_cast<Eigen::Index>(sb[1]);
  std::vector<T> out(sa[0] * sb[1]);
  MutMap<T>(out.data(), rows, cols).noalias() =
      ConstMap<T>(a.value().data(), rows, inner) * ConstMap<T>(b.value().data(), inner, cols);
  return tape.record(make_node<T>(Op::matmul, {a, b}, {sa[0], sb[1]}, std::move(out)));
}

template <typename T>
Var<T> batch_matmul(const Var<T>& a, const Var<T>& b) {
  auto& tape = same_tape(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[1]) shape_fail("batch_matmul", sa, sb);
  const std::size_t batch = sa[0];
  const auto rows = static_cast<Eigen::Index>(sa[1]);
  const auto inner = static_cast<Eigen::Index>(sa[2]);
  const auto cols = static_cast<Eigen::Index>(sb[2]);
  std::vector<T> out(batch * sa[1] * sb[2]);
  const T* av = a.value().data();
  const T* bv = b.value().data();
  for (std::size_t i = 0; i < batch; ++i) {
    MutMap<T>(out.data() + i * rows * cols, rows, cols).noalias() =
        ConstMap<T>(av + i * rows * inner, rows, inner) * ConstMap<T>(bv + i * inner * cols, inner, cols);
  }
  return tape.record(make_node<T>(Op::batch_matmul, {a, b}, {batch, sa[1], sb[2]}, std::move(out)));
}

template <typename T>
Var<T> concat(std::span<const Var<T>> parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Tape<T>& tape = parts[0].tape();
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) throw ShapeError("concat: axis out of range for " + to_string(out_shape));
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (&p.tape() != &tape) throw std::invalid_argument("concat: operands live on different tapes");
    const Shape& s = p.shape();
    if (s.size() != out_shape.size()) shape_fail("concat", parts[0].shape(), s);
    for (std::size_t k = 0; k < s.size(); ++k)
      if (k != axis && s[k] != out_shape[k]) shape_fail("concat", parts[0].shape(), s);
    out_shape[axis] += s[axis];
  }
  const AxisSplit out = split_at(out_shape, axis);
  std::vector<T> value(numel(out_shape));
  std::size_t offset = 0;
  Node<T> n;
  n.op = Op::concat;
  n.axis = axis;
  for (const auto& p : parts) {
    const std::size_t ext = p.shape()[axis];
    const auto src = p.value();
    for (std::size_t o = 0; o < out.outer; ++o) {
      std::copy_n(src.data() + o * ext * out.inner, ext * out.inner,
                  value.data() + (o * out.extent + offset) * out.inner);
    }
    offset += ext;
    n.inputs.push_back(p.id());
    n.requires_grad = n.requires_grad || p.requires_grad();
  }
  n.shape = std::move(out_shape);
  n.value = std::move(value);
  return tape.record(std::move(n));
}

template <typename T>
Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  if (axis >= s.size() || begin >= end || end > s[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " invalid for " + to_string(s));
  }
  const AxisSplit in = split_at(s, axis);
  const std::size_t ext = end - begin;
  Shape out_shape = s;
  out_shape[axis] = ext;
  std::vector<T> value(in.outer * ext * in.inner);
  const auto src = a.value();
  for (std::size_t o = 0; o < in.outer; ++o) {
    std::copy_n(src.data() + (o * in.extent + begin) * in.inner, ext * in.inner, value.data() + o * ext * in.inner);
  }
  auto n = make_node<T>(Op::slice, {a}, std::move(out_shape), std::move(value));
  n.axis = axis;
  n.begin = begin;
  n.end = end;
  return a.tape().record(std::move(n));
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  if (numel(shape) != a.size()) shape_fail("reshape", a.shape(), shape);
  const auto v = a.value();
  return a.tape().record(make_node<T>(Op::reshape, {a}, std::move(shape), std::vector<T>(v.begin(), v.end())));
}

template <typename T>
Var<T> broadcast_to(const Var<T>& a, const Shape& shape) {
  const Shape& s = a.shape();
  if (s == shape) return a;
  if (s.size() > shape.size()) shape_fail("broadcast", s, shape);
  for (std::size_t k = 0; k < s.size(); ++k) {
    const std::size_t d = shape[k + shape.size() - s.size()];
    if (s[k] != d && s[k] != 1) shape_fail("broadcast", s, shape);
  }
  const auto src = a.value();
  std::vector<T> out(numel(shape));
  for_each_broadcast(s, shape, [&](std::size_t o, std::size_t i) { out[o] = src[i]; });
  return a.tape().record(make_node<T>(Op::broadcast, {a}, shape, std::move(out)));
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return unary(Op::sigmoid, a, [](T x) {
    if (x >= 0) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
  });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  return unary(Op::tanh, a, [](T x) { return std::tanh(x); });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  return unary(Op::exp, a, [](T x) { return std::exp(x); });
}

template <typename T>
Var<T> log(const Var<T>& a) {
  return unary(Op::log, a, [](T x) { return std::log(x); });
}

template <typename T>
Var<T> softmax(const Var<T>& a) {
  if (a.shape().empty()) throw ShapeError("softmax: scalar input");
  const std::size_t cols = a.shape().back();
  const auto x = a.value();
  std::vector<T> out(x.size());
  for (std::size_t r0 = 0; r0 < x.size(); r0 += cols) {
    const T m = *std::max_element(x.begin() + r0, x.begin() + r0 + cols);
    T total = 0;
    for (std::size_t j = 0; j < cols; ++j) total += (out[r0 + j] = std::exp(x[r0 + j] - m));
    for (std::size_t j = 0; j < cols; ++j) out[r0 + j] /= total;
  }
  return a.tape().record(make_node<T>(Op::softmax, {a}, a.shape(), std::move(out)));
}

template <typename T>
Var<T> log_softmax(const Var<T>& a) {
  if (a.shape().empty()) throw ShapeError("log_softmax: scalar input");
  const std::size_t cols = a.shape().back();
  const auto x = a.value();
  std::vector<T> out(x.size());
  for (std::size_t r0 = 0; r0 < x.size(); r0 += cols) {
    const T m = *std::max_element(x.begin() + r0, x.begin() + r0 + cols);
    T total = 0;
    for (std::size_t j = 0; j < cols; ++j) total += std::exp(x[r0 + j] - m);
    const T lse = m + std::log(total);
    for (std::size_t j = 0; j < cols; ++j) out[r0 + j] = x[r0 + j] - lse;
  }
  return a.tape().record(make_node<T>(Op::log_softmax, {a}, a.shape(), std::move(out)));
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  const auto x = a.value();
  T total = 0;
  for (T v : x) total += v;
  return a.tape().record(make_node<T>(Op::sum, {a}, {1}, {total}));
}

template <typename T>
Var<T> sum_axis(const Var<T>& a, std::size_t axis) {
  const Shape& s = a.shape();
  if (axis >= s.size()) throw ShapeError("sum_axis: axis out of range for " + to_string(s));
  const AxisSplit in = split_at(s, axis);
  Shape out_shape = s;
  out_shape[axis] = 1;
  const auto x = a.value();
  std::vector<T> out(in.outer * in.inner, T(0));
  for (std::size_t o = 0; o < in.outer; ++o)
    for (std::size_t e = 0; e < in.extent; ++e)
      for (std::size_t i = 0; i < in.inner; ++i) out[o * in.inner + i] += x[(o * in.extent + e) * in.inner + i];
  auto n = make_node<T>(Op::sum_axis, {a}, std::move(out_shape), std::move(out));
  n.axis = axis;
  return a.tape().record(std::move(n));
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const auto x = a.value();
  T total = 0;
  for (T v : x) total += v;
  return a.tape().record(make_node<T>(Op::mean, {a}, {1}, {total / static_cast<T>(x.size())}));
}

template <typename T>
Var<T> gather_rows(const Var<T>& table, std::span<const std::size_t> ids) {
  const Shape& s = table.shape();
  if (s.size() != 2) throw ShapeError("gather_rows: table must be 2-D, got " + to_string(s));
  const std::size_t width = s[1];
  const auto src = table.value();
  std::vector<T> out(ids.size() * width);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= s[0]) {
      throw std::out_of_range("gather_rows: id " + std::to_string(ids[r]) + " outside table of " +
                              std::to_string(s[0]) + " rows");
    }
    std::copy_n(src.data() + ids[r] * width, width, out.data() + r * width);
  }
  auto n = make_node<T>(Op::gather_rows, {table}, {ids.size(), width}, std::move(out));
  n.index.assign(ids.begin(), ids.end());
  return table.tape().record(std::move(n));
}

template <typename T>
Var<T> pick(const Var<T>& a, std::span<const std::size_t> columns) {
  const Shape& s = a.shape();
  if (s.size() != 2 || columns.size() != s[0]) shape_fail("pick", s, Shape{columns.size()});
  const auto x = a.value();
  std::vector<T> out(s[0]);
  for (std::size_t r = 0; r < s[0]; ++r) {
    if (columns[r] >= s[1]) throw std::out_of_range("pick: column " + std::to_string(columns[r]) + " out of range");
    out[r] = x[r * s[1] + columns[r]];
  }
  auto n = make_node<T>(Op::pick, {a}, {s[0], 1}, std::move(out));
  n.index.assign(columns.begin(), columns.end());
  return a.tape().record(std::move(n));
}

template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  auto n = make_node<T>(Op::clamp, {a}, a.shape(), {});
  const auto x = a.value();
  n.value.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = std::clamp(x[i], lo, hi);
  n.lo = lo;
  n.hi = hi;
  return a.tape().record(std::move(n));
}

template <typename T>
Var<T> straight_through(const Var<T>& a, std::vector<T> forward_value) {
  if (forward_value.size() != a.size()) shape_fail("straight_through", a.shape(), Shape{forward_value.size()});
  return a.tape().record(make_node<T>(Op::straight_through, {a}, a.shape(), std::move(forward_value)));
}

template <typename T>
Var<T> detach(const Var<T>& a) {
  const auto v = a.value();
  return a.tape().constant(a.shape(), std::vector<T>(v.begin(), v.end()));
}

NonFiniteError::NonFiniteError(std::size_t array_index, std::size_t coordinate)
    : std::runtime_error("grad_check: non-finite objective when perturbing array " + std::to_string(array_index) +
                         " coordinate " + std::to_string(coordinate)),
      array(array_index),
      coord(coordinate) {}

GradCheckReport grad_check(const ScalarFn& f, std::span<const Array<double>> point, double step) {
  auto evaluate = [&](std::span<const Array<double>> at) {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    leaves.reserve(at.size());
    for (const auto& a : at) leaves.push_back(tape.leaf(a.shape, a.values, false));
    return f(tape, leaves).item();
  };

  Tape<double> tape;
  std::vector<Var<double>> leaves;
  for (const auto& a : point) leaves.push_back(tape.leaf(a.shape, a.values, true));
  const Var<double> root = f(tape, leaves);
  const Gradients<double> grads = tape.backward(root);

  GradCheckReport report;
  std::vector<Array<double>> probe(point.begin(), point.end());
  for (std::size_t k = 0; k < probe.size(); ++k) {
    const auto ad = grads[leaves[k]];
    for (std::size_t i = 0; i < probe[k].values.size(); ++i) {
      const double x0 = probe[k].values[i];
      probe[k].values[i] = x0 + step;
      const double up = evaluate(probe);
      probe[k].values[i] = x0 - step;
      const double down = evaluate(probe);
      probe[k].values[i] = x0;
      if (!std::isfinite(up) || !std::isfinite(down)) throw NonFiniteError(k, i);
      const double fd = (up - down) / (2 * step);
      const double rel = std::abs(ad[i] - fd) / (std::abs(fd) + 1e-8);
      if (rel > report.max_rel_error) report = {rel, k, i};
    }
  }
  return report;
}

#define TUCP_AD_INSTANTIATE(T)                                                                    \
  template struct Array<T>;                                                                       \
  template class Var<T>;                                                                          \
  template class Tape<T>;                                                                         \
  template Var<T> add(const Var<T>&, const Var<T>&);                                              \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                              \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                              \
  template Var<T> scale(const Var<T>&, T);                                                        \
  template Var<T> shift(const Var<T>&, T);                                                        \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                           \
  template Var<T> batch_matmul(const Var<T>&, const Var<T>&);                                     \
  template Var<T> concat(std::span<const Var<T>>, std::size_t);                                   \
  template Var<T> slice(const Var<T>&, std::size_t, std::size_t, std::size_t);                    \
  template Var<T> reshape(const Var<T>&, Shape);                                                  \
  template Var<T> broadcast_to(const Var<T>&, const Shape&);                                      \
  template Var<T> sigmoid(const Var<T>&);                                                         \
  template Var<T> tanh(const Var<T>&);                                                            \
  template Var<T> exp(const Var<T>&);                                                             \
  template Var<T> log(const Var<T>&);                                                             \
  template Var<T> softmax(const Var<T>&);                                                         \
  template Var<T> log_softmax(const Var<T>&);                                                     \
  template Var<T> sum(const Var<T>&);                                                             \
  template Var<T> sum_axis(const Var<T>&, std::size_t);                                           \
  template Var<T> mean(const Var<T>&);                                                            \
  template Var<T> gather_rows(const Var<T>&, std::span<const std::size_t>);                       \
  template Var<T> pick(const Var<T>&, std::span<const std::size_t>);                              \
  template Var<T> clamp(const Var<T>&, T, T);                                                     \
  template Var<T> straight_through(const Var<T>&, std::vector<T>);                                \
  template Var<T> detach(const Var<T>&);

TUCP_AD_INSTANTIATE(float)
TUCP_AD_INSTANTIATE(double)

}  // namespace tucp::ad
