#pragma once

// Minimal reverse-mode automatic differentiation.
//
// A Tensor is a shared handle to a Node holding values and (lazily) gradients.
// Operations executed while a Tape is active on the current thread, and that
// have at least one input requiring gradients, append a backward closure to
// the tape. Tape::backward replays those closures in reverse order. Without an
// active tape nothing is recorded, so inference over shared parameters is
// read-only.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace nvs::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b, const std::string& detail = {})
      : std::invalid_argument(op + ": shape mismatch " + to_string(a) + " vs " + to_string(b) +
                              (detail.empty() ? "" : " (" + detail + ")")) {}
};

class Tape;

namespace detail {
inline thread_local Tape* active_tape = nullptr;
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  const Tape* tape = nullptr;  // tape that produced this node, if recorded

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T{});
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape) : Tensor(shape, std::vector<T>(numel(shape), T{})) {}

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<Node<T>>()) {
    if (numel(shape) != values.size()) {
      throw std::invalid_argument("tensor: shape " + to_string(shape) + " does not hold " +
                                  std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, {v}); }

  static Tensor full(Shape shape, T v) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, v));
  }

  /// Leaf tensor that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<T> values) {
    Tensor t(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  /// Direct write access; intended for leaves (parameters, inputs).
  std::span<T> data_mut() { return node_->value; }
  T item() const {
    if (size() != 1) throw std::invalid_argument("item: tensor with shape " + to_string(shape()) + " is not scalar");
    return node_->value[0];
  }
  T operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient values; zeros when nothing has been accumulated.
  std::vector<T> grad() const {
    return node_->grad.empty() ? std::vector<T>(node_->value.size(), T{}) : node_->grad;
  }
  void clear_grad() { node_->grad.clear(); }

  Tensor detach() const { return Tensor(shape(), node_->value); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

class Tape {
 public:
  Tape() : previous_(detail::active_tape) { detail::active_tape = this; }
  ~Tape() { detail::active_tape = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return detail::active_tape; }

  void record(std::function<void()> fn) { backward_.push_back(std::move(fn)); }
  std::size_t size() const { return backward_.size(); }
  bool consumed() const { return consumed_; }

  /// Backpropagates from a scalar loss. May be called once per tape.
  template <typename T>
  void backward(const Tensor<T>& loss) {
    if (consumed_) throw std::logic_error("backward: tape already consumed; record a new forward pass");
    if (!loss.defined() || loss.size() != 1) {
      throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                  (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
    }
    if (loss.node()->tape != this) throw std::invalid_argument("backward: loss was not recorded on this tape");
    consumed_ = true;
    loss.node()->grad_buffer()[0] += T{1};
    for (auto it = backward_.rbegin(); it != backward_.rend(); ++it) (*it)();
    backward_.clear();
  }

 private:
  Tape* previous_;
  std::vector<std::function<void()>> backward_;
  bool consumed_ = false;
};

/// True when an op over `inputs` must be recorded on the active tape.
template <typename T>
bool needs_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (!Tape::active()) return false;
  for (const auto* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

/// Marks `out` as recorded and appends `fn(grad_out)` to the active tape.
/// `fn` is skipped when no gradient reached `out`.
template <typename T, typename Fn>
void record(Tensor<T>& out, Fn&& fn) {
  Tape* tape = Tape::active();
  auto node = out.node();
  node->requires_grad = true;
  node->tape = tape;
  tape->record([node, fn = std::forward<Fn>(fn)]() {
    if (node->grad.empty()) return;
    fn(static_cast<const std::vector<T>&>(node->grad));
  });
}

// ---------------------------------------------------------------------------
// Elementwise ops. The second operand may broadcast when its shape is a
// suffix of the first operand's shape (e.g. a bias vector over a batch).

namespace detail {
inline bool is_suffix(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}
}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (!detail::is_suffix(a.shape(), b.shape())) throw ShapeError("add", a.shape(), b.shape());
  const std::size_t n = a.size(), m = b.size();
  std::vector<T> v(n);
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < n; ++i) v[i] = av[i] + bv[i % m];
  Tensor<T> out(a.shape(), std::move(v));
  if (needs_grad<T>({&a, &b})) {
    record(out, [an = a.node(), bn = b.node(), n, m](const std::vector<T>& g) {
      if (an->requires_grad) {
        auto& ga = an->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (bn->requires_grad) {
        auto& gb = bn->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) gb[i % m] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("sub", a.shape(), b.shape());
  const std::size_t n = a.size();
  std::vector<T> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = a[i] - b[i];
  Tensor<T> out(a.shape(), std::move(v));
  if (needs_grad<T>({&a, &b})) {
    record(out, [an = a.node(), bn = b.node(), n](const std::vector<T>& g) {
      if (an->requires_grad) {
        auto& ga = an->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (bn->requires_grad) {
        auto& gb = bn->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (!detail::is_suffix(a.shape(), b.shape())) throw ShapeError("mul", a.shape(), b.shape());
  const std::size_t n = a.size(), m = b.size();
  std::vector<T> v(n);
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < n; ++i) v[i] = av[i] * bv[i % m];
  Tensor<T> out(a.shape(), std::move(v));
  if (needs_grad<T>({&a, &b})) {
    record(out, [an = a.node(), bn = b.node(), n, m](const std::vector<T>& g) {
      if (an->requires_grad) {
        auto& ga = an->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bn->value[i % m];
      }
      if (bn->requires_grad) {
        auto& gb = bn->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) gb[i % m] += g[i] * an->value[i];
      }
    });
  }
  return out;
}

/// scale * x + shift
template <typename T>
Tensor<T> affine(const Tensor<T>& x, T scale, T shift) {
  std::vector<T> v(x.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = scale * x[i] + shift;
  Tensor<T> out(x.shape(), std::move(v));
  if (needs_grad<T>({&x})) {
    record(out, [xn = x.node(), scale](const std::vector<T>& g) {
      auto& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += scale * g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  std::vector<T> v(x.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x[i] > T{0} ? x[i] : slope * x[i];
  Tensor<T> out(x.shape(), std::move(v));
  if (needs_grad<T>({&x})) {
    record(out, [xn = x.node(), slope](const std::vector<T>& g) {
      auto& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += xn->value[i] > T{0} ? g[i] : slope * g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> v(x.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = T{1} / (T{1} + std::exp(-x[i]));
  Tensor<T> out(x.shape(), std::move(v));
  if (needs_grad<T>({&x})) {
    record(out, [xn = x.node(), on = out.node()](const std::vector<T>& g) {
      auto& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T y = on->value[i];
        gx[i] += g[i] * y * (T{1} - y);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) throw ShapeError("reshape", x.shape(), shape, "element count differs");
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (needs_grad<T>({&x})) {
    record(out, [xn = x.node()](const std::vector<T>& g) {
      auto& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

/// Concatenates along `axis`; all other dimensions must agree.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw std::invalid_argument("concat: axis " + std::to_string(axis) + " out of range");
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == s0[d];
    if (!ok) throw ShapeError("concat", s0, s, "axis " + std::to_string(axis));
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
  const std::size_t out_row = out_shape[axis] * inner;

  std::vector<T> v(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t row = p.shape()[axis] * inner;
    auto pv = p.data();
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(pv.begin() + o * row, row, v.begin() + o * out_row + offset);
    offset += row;
  }
  Tensor<T> out(out_shape, std::move(v));

  bool any = false;
  if (Tape::active()) {
    for (const auto& p : parts) any = any || p.requires_grad();
  }
  if (any) {
    std::vector<std::shared_ptr<Node<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    record(out, [nodes, offsets, outer, inner, out_row, axis](const std::vector<T>& g) {
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        if (!nodes[k]->requires_grad) continue;
        const std::size_t row = nodes[k]->shape[axis] * inner;
        auto& gp = nodes[k]->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < row; ++i) gp[o * row + i] += g[o * out_row + offsets[k] + i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.size() == 0) throw std::invalid_argument("mean: empty tensor");
  double acc = 0.0;
  for (T v : x.data()) acc += double(v);
  const std::size_t n = x.size();
  Tensor<T> out = Tensor<T>::scalar(T(acc / double(n)));
  if (needs_grad<T>({&x})) {
    record(out, [xn = x.node(), n](const std::vector<T>& g) {
      auto& gx = xn->grad_buffer();
      const T s = g[0] / T(n);
      for (auto& v : gx) v += s;
    });
  }
  return out;
}

/// Mean absolute difference. Subgradient 0 where a == b.
template <typename T>
Tensor<T> l1_loss(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("l1_loss", a.shape(), b.shape());
  if (a.size() == 0) throw std::invalid_argument("l1_loss: empty tensor");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(double(a[i]) - double(b[i]));
  const std::size_t n = a.size();
  Tensor<T> out = Tensor<T>::scalar(T(acc / double(n)));
  if (needs_grad<T>({&a, &b})) {
    record(out, [an = a.node(), bn = b.node(), n](const std::vector<T>& g) {
      const T s = g[0] / T(n);
      for (std::size_t i = 0; i < n; ++i) {
        const T d = an->value[i] - bn->value[i];
        const T sg = d > T{0} ? s : (d < T{0} ? -s : T{0});
        if (an->requires_grad) an->grad_buffer()[i] += sg;
        if (bn->requires_grad) bn->grad_buffer()[i] -= sg;
      }
    });
  }
  return out;
}

/// [M, K] x [K, N] -> [M, N]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) throw ShapeError("matmul", a.shape(), b.shape());
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<T> v(M * N, T{});
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < M; ++i) {
    T* row = v.data() + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T aik = av[i * K + k];
      const T* brow = bv.data() + k * N;
      for (std::size_t j = 0; j < N; ++j) row[j] += aik * brow[j];
    }
  }
  Tensor<T> out(Shape{M, N}, std::move(v));
  if (needs_grad<T>({&a, &b})) {
    record(out, [an = a.node(), bn = b.node(), M, K, N](const std::vector<T>& g) {
      if (an->requires_grad) {
        auto& ga = an->grad_buffer();
        for (std::size_t i = 0; i < M; ++i)
          for (std::size_t k = 0; k < K; ++k) {
            T acc{};
            for (std::size_t j = 0; j < N; ++j) acc += g[i * N + j] * bn->value[k * N + j];
            ga[i * K + k] += acc;
          }
      }
      if (bn->requires_grad) {
        auto& gb = bn->grad_buffer();
        for (std::size_t i = 0; i < M; ++i)
          for (std::size_t k = 0; k < K; ++k) {
            const T aik = an->value[i * K + k];
            for (std::size_t j = 0; j < N; ++j) gb[k * N + j] += aik * g[i * N + j];
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolutions, NCHW layout.

struct ConvOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

namespace detail {
/// Output indices o in [lo, hi) such that o * stride - pad + k lies in [0, n).
inline std::pair<long, long> valid_range(long n, long out_n, long stride, long pad, long k) {
  long lo = pad - k > 0 ? (pad - k + stride - 1) / stride : 0;
  long hi_incl = (n - 1 + pad - k);
  long hi = hi_incl < 0 ? 0 : hi_incl / stride + 1;
  hi = std::min(hi, out_n);
  lo = std::min(lo, hi);
  return {lo, hi};
}
}  // namespace detail

/// x: [N, C, H, W], w: [O, C, k, k], bias: [O] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, ConvOptions opt = {}) {
  if (x.rank() != 4 || w.rank() != 4 || w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3)) {
    throw ShapeError("conv2d", x.shape(), w.shape());
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != w.dim(0))) throw ShapeError("conv2d", w.shape(), bias.shape(), "bias");
  if (opt.stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  const long N = long(x.dim(0)), C = long(x.dim(1)), H = long(x.dim(2)), W = long(x.dim(3));
  const long O = long(w.dim(0)), K = long(w.dim(2));
  const long s = long(opt.stride), p = long(opt.padding);
  if (H + 2 * p < K || W + 2 * p < K) throw ShapeError("conv2d", x.shape(), w.shape(), "kernel larger than padded input");
  const long OH = (H + 2 * p - K) / s + 1, OW = (W + 2 * p - K) / s + 1;

  std::vector<T> v(std::size_t(N * O * OH * OW), T{});
  auto xv = x.data();
  auto wv = w.data();
  for (long n = 0; n < N; ++n)
    for (long o = 0; o < O; ++o) {
      T* out = v.data() + (n * O + o) * OH * OW;
      if (bias.defined()) std::fill_n(out, OH * OW, bias[std::size_t(o)]);
      for (long c = 0; c < C; ++c) {
        const T* in = xv.data() + (n * C + c) * H * W;
        for (long ky = 0; ky < K; ++ky) {
          const auto [oy0, oy1] = detail::valid_range(H, OH, s, p, ky);
          for (long kx = 0; kx < K; ++kx) {
            const T wk = wv[std::size_t(((o * C + c) * K + ky) * K + kx)];
            const auto [ox0, ox1] = detail::valid_range(W, OW, s, p, kx);
            for (long oy = oy0; oy < oy1; ++oy) {
              const T* irow = in + (oy * s - p + ky) * W;
              T* orow = out + oy * OW;
              for (long ox = ox0; ox < ox1; ++ox) orow[ox] += wk * irow[ox * s - p + kx];
            }
          }
        }
      }
    }
  Tensor<T> out(Shape{std::size_t(N), std::size_t(O), std::size_t(OH), std::size_t(OW)}, std::move(v));
  if (needs_grad<T>({&x, &w, &bias})) {
    std::shared_ptr<Node<T>> bn = bias.defined() ? bias.node() : nullptr;
    record(out, [xn = x.node(), wn = w.node(), bn, N, C, H, W, O, K, s, p, OH, OW](const std::vector<T>& g) {
      T* gx = xn->requires_grad ? xn->grad_buffer().data() : nullptr;
      T* gw = wn->requires_grad ? wn->grad_buffer().data() : nullptr;
      if (bn && bn->requires_grad) {
        auto& gb = bn->grad_buffer();
        for (long n = 0; n < N; ++n)
          for (long o = 0; o < O; ++o) {
            const T* go = g.data() + (n * O + o) * OH * OW;
            T acc{};
            for (long i = 0; i < OH * OW; ++i) acc += go[i];
            gb[std::size_t(o)] += acc;
          }
      }
      for (long n = 0; n < N; ++n)
        for (long o = 0; o < O; ++o) {
          const T* go = g.data() + (n * O + o) * OH * OW;
          for (long c = 0; c < C; ++c) {
            const T* in = xn->value.data() + (n * C + c) * H * W;
            T* gin = gx ? gx + (n * C + c) * H * W : nullptr;
            for (long ky = 0; ky < K; ++ky) {
              const auto [oy0, oy1] = detail::valid_range(H, OH, s, p, ky);
              for (long kx = 0; kx < K; ++kx) {
                const std::size_t widx = std::size_t(((o * C + c) * K + ky) * K + kx);
                const T wk = wn->value[widx];
                const auto [ox0, ox1] = detail::valid_range(W, OW, s, p, kx);
                T wacc{};
                for (long oy = oy0; oy < oy1; ++oy) {
                  const long iy = oy * s - p + ky;
                  const T* gorow = go + oy * OW;
                  const T* irow = in + iy * W;
                  T* girow = gin ? gin + iy * W : nullptr;
                  for (long ox = ox0; ox < ox1; ++ox) {
                    const long ix = ox * s - p + kx;
                    wacc += gorow[ox] * irow[ix];
                    if (girow) girow[ix] += gorow[ox] * wk;
                  }
                }
                if (gw) gw[widx] += wacc;
              }
            }
          }
        }
    });
  }
  return out;
}

/// x: [N, C, H, W], w: [C, O, k, k], bias: [O] or undefined.
/// Output spatial size (H - 1) * stride - 2 * padding + k.
template <typename T>
Tensor<T> transposed_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, ConvOptions opt = {}) {
  if (x.rank() != 4 || w.rank() != 4 || w.dim(0) != x.dim(1) || w.dim(2) != w.dim(3)) {
    throw ShapeError("transposed_conv2d", x.shape(), w.shape());
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != w.dim(1))) {
    throw ShapeError("transposed_conv2d", w.shape(), bias.shape(), "bias");
  }
  if (opt.stride == 0) throw std::invalid_argument("transposed_conv2d: stride must be positive");
  const long N = long(x.dim(0)), C = long(x.dim(1)), H = long(x.dim(2)), W = long(x.dim(3));
  const long O = long(w.dim(1)), K = long(w.dim(2));
  const long s = long(opt.stride), p = long(opt.padding);
  const long OH = (H - 1) * s - 2 * p + K, OW = (W - 1) * s - 2 * p + K;
  if (OH <= 0 || OW <= 0) throw ShapeError("transposed_conv2d", x.shape(), w.shape(), "empty output");

  std::vector<T> v(std::size_t(N * O * OH * OW), T{});
  auto xv = x.data();
  auto wv = w.data();
  for (long n = 0; n < N; ++n)
    for (long o = 0; o < O; ++o) {
      T* out = v.data() + (n * O + o) * OH * OW;
      if (bias.defined()) std::fill_n(out, OH * OW, bias[std::size_t(o)]);
      for (long c = 0; c < C; ++c) {
        const T* in = xv.data() + (n * C + c) * H * W;
        for (long ky = 0; ky < K; ++ky) {
          // input rows iy with iy * s - p + ky in [0, OH)
          const auto [iy0, iy1] = detail::valid_range(OH, H, s, p, ky);
          for (long kx = 0; kx < K; ++kx) {
            const T wk = wv[std::size_t(((c * O + o) * K + ky) * K + kx)];
            const auto [ix0, ix1] = detail::valid_range(OW, W, s, p, kx);
            for (long iy = iy0; iy < iy1; ++iy) {
              const T* irow = in + iy * W;
              T* orow = out + (iy * s - p + ky) * OW;
              for (long ix = ix0; ix < ix1; ++ix) orow[ix * s - p + kx] += wk * irow[ix];
            }
          }
        }
      }
    }
  Tensor<T> out(Shape{std::size_t(N), std::size_t(O), std::size_t(OH), std::size_t(OW)}, std::move(v));
  if (needs_grad<T>({&x, &w, &bias})) {
    std::shared_ptr<Node<T>> bn = bias.defined() ? bias.node() : nullptr;
    record(out, [xn = x.node(), wn = w.node(), bn, N, C, H, W, O, K, s, p, OH, OW](const std::vector<T>& g) {
      T* gx = xn->requires_grad ? xn->grad_buffer().data() : nullptr;
      T* gw = wn->requires_grad ? wn->grad_buffer().data() : nullptr;
      if (bn && bn->requires_grad) {
        auto& gb = bn->grad_buffer();
        for (long n = 0; n < N; ++n)
          for (long o = 0; o < O; ++o) {
            const T* go = g.data() + (n * O + o) * OH * OW;
            T acc{};
            for (long i = 0; i < OH * OW; ++i) acc += go[i];
            gb[std::size_t(o)] += acc;
          }
      }
      for (long n = 0; n < N; ++n)
        for (long c = 0; c < C; ++c) {
          const T* in = xn->value.data() + (n * C + c) * H * W;
          T* gin = gx ? gx + (n * C + c) * H * W : nullptr;
          for (long o = 0; o < O; ++o) {
            const T* go = g.data() + (n * O + o) * OH * OW;
            for (long ky = 0; ky < K; ++ky) {
              const auto [iy0, iy1] = detail::valid_range(OH, H, s, p, ky);
              for (long kx = 0; kx < K; ++kx) {
                const std::size_t widx = std::size_t(((c * O + o) * K + ky) * K + kx);
                const T wk = wn->value[widx];
                const auto [ix0, ix1] = detail::valid_range(OW, W, s, p, kx);
                T wacc{};
                for (long iy = iy0; iy < iy1; ++iy) {
                  const T* gorow = go + (iy * s - p + ky) * OW;
                  const T* irow = in + iy * W;
                  T* girow = gin ? gin + iy * W : nullptr;
                  for (long ix = ix0; ix < ix1; ++ix) {
                    const T gv = gorow[ix * s - p + kx];
                    wacc += gv * irow[ix];
                    if (girow) girow[ix] += gv * wk;
                  }
                }
                if (gw) gw[widx] += wacc;
              }
            }
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference verification. Runs in double precision.

/// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
template <typename F>
double gradcheck(F&& f, const Tensor<double>& x, double eps) {
  if (!(eps >= 1e-4 && eps <= 1e-2)) throw std::invalid_argument("gradcheck: eps must lie in [1e-4, 1e-2]");
  std::vector<double> analytic;
  {
    Tape tape;
    auto xp = Tensor<double>::parameter(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
    Tensor<double> y = f(xp);
    if (y.size() != 1) throw std::invalid_argument("gradcheck: function must be scalar-valued");
    if (y.requires_grad()) tape.backward(y);
    analytic = xp.grad();
  }
  std::vector<double> base(x.data().begin(), x.data().end());
  double worst = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto eval = [&](double delta) {
      std::vector<double> v = base;
      v[i] += delta;
      return f(Tensor<double>(x.shape(), std::move(v))).item();
    };
    const double numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

/// Gradient check over selected scalar entries of existing leaf tensors
/// (e.g. model parameters). `loss` recomputes the scalar from scratch.
struct ParamCoordinate {
  Tensor<double> tensor;
  std::size_t index = 0;
};

template <typename F>
double gradcheck_coordinates(F&& loss, std::vector<ParamCoordinate> coords, double eps) {
  if (!(eps >= 1e-4 && eps <= 1e-2)) throw std::invalid_argument("gradcheck: eps must lie in [1e-4, 1e-2]");
  std::vector<double> analytic(coords.size());
  for (auto& c : coords) c.tensor.clear_grad();
  {
    Tape tape;
    Tensor<double> y = loss();
    tape.backward(y);
    for (std::size_t k = 0; k < coords.size(); ++k) analytic[k] = coords[k].tensor.grad()[coords[k].index];
  }
  for (auto& c : coords) c.tensor.clear_grad();
  double worst = 0.0;
  for (std::size_t k = 0; k < coords.size(); ++k) {
    double& slot = coords[k].tensor.data_mut()[coords[k].index];
    const double saved = slot;
    slot = saved + eps;
    const double fp = loss().item();
    slot = saved - eps;
    const double fm = loss().item();
    slot = saved;
    const double numeric = (fp - fm) / (2.0 * eps);
    worst = std::max(worst, std::abs(analytic[k] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

}  // namespace nvs::ad
