#pragma once

// Dense row-major tensors of doubles with a reverse-mode differentiation tape.
//
// Every op returns a new Tensor whose node remembers its parents and a
// backward closure. backward(loss) walks the graph once in reverse
// topological order. Leaves created with requires_grad accumulate gradients
// across backward calls until zero_grad().

#include <cblas.h>

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <mutex>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "qds/errors.hpp"

namespace qds {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

enum class OpKind {
  leaf, conv2d, linear, silu, groupnorm, add, mul, scale, sum, concat, split,
  upsample2x, avgpool2x, broadcast_add, mse, custom
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  OpKind op = OpKind::leaf;
  bool requires_grad = false;

  std::vector<double>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline bool& grad_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled()) { detail::grad_enabled() = false; }
  ~NoGradGuard() { detail::grad_enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape), 0.0);
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape), value);
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from({}, {value}, requires_grad);
  }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw ConfigError("tensor shape " + shape_str(shape) + " does not match " +
                        std::to_string(values.size()) + " values");
    }
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::span<const double> data() const { return node_->value; }
  /// Direct write access; only meaningful on leaves (parameters, inputs).
  std::span<double> mutable_data() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad_buffer(); }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->op == OpKind::leaf; }
  OpKind op() const { return node_->op; }
  const void* id() const { return node_.get(); }

  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

  /// Fresh leaf sharing no graph history; values copied.
  Tensor detach() const { return from(shape(), node_->value, false); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

/// Builds an op result. The backward closure is only kept when some parent
/// needs gradients and recording is enabled.
inline Tensor make_result(OpKind op, Shape shape, std::vector<double> value,
                          std::vector<Tensor> parents, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool need = false;
  for (const auto& p : parents) need = need || p.requires_grad();
  if (need && grad_enabled()) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(backward);
  }
  return Tensor(std::move(n));
}

inline void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (t.rank() != r) {
    throw ConfigError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                      shape_str(t.shape()));
  }
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Intermediate gradients are reset on
/// every call; leaf gradients accumulate.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  using detail::Node;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    if (n->op != OpKind::leaf) n->grad.assign(n->value.size(), 0.0);
  }
  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ConfigError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<double> out(a.numel());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return detail::make_result(OpKind::add, a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ConfigError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<double> out(a.numel());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return detail::make_result(OpKind::mul, a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= s;
  return detail::make_result(OpKind::scale, a.shape(), std::move(out), {a}, [s](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_result(OpKind::sum, {}, {s}, {a}, [](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (double& v : g) v += self.grad[0];
  });
}

inline Tensor silu(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / (1.0 + std::exp(-av[i]));
  return detail::make_result(OpKind::silu, a.shape(), std::move(out), {a}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = p.value[i];
      const double sg = 1.0 / (1.0 + std::exp(-x));
      g[i] += self.grad[i] * sg * (1.0 + x * (1.0 - sg));
    }
  });
}

/// Mean squared error over all elements; either side may carry gradients.
inline Tensor mse(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw ConfigError("mse: shape mismatch " + shape_str(pred.shape()) + " vs " +
                      shape_str(target.shape()));
  }
  const std::size_t n = pred.numel();
  double s = 0.0;
  auto pv = pred.data();
  auto tv = target.data();
  for (std::size_t i = 0; i < n; ++i) s += (pv[i] - tv[i]) * (pv[i] - tv[i]);
  return detail::make_result(OpKind::mse, {}, {s / static_cast<double>(n)}, {pred, target},
                             [n](detail::Node& self) {
    auto& p = *self.parents[0];
    auto& t = *self.parents[1];
    const double c = 2.0 * self.grad[0] / static_cast<double>(n);
    if (p.requires_grad) {
      auto& g = p.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += c * (p.value[i] - t.value[i]);
    }
    if (t.requires_grad) {
      auto& g = t.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] -= c * (p.value[i] - t.value[i]);
    }
  });
}

// ---------------------------------------------------------------------------
// Layers

/// x[B,In] * W[Out,In]^T + b[Out].
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  detail::require_rank(x, 2, "linear");
  detail::require_rank(weight, 2, "linear");
  const std::size_t batch = x.dim(0), in = x.dim(1), out = weight.dim(0);
  if (weight.dim(1) != in || bias.numel() != out) {
    throw ConfigError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                      shape_str(weight.shape()) + " / bias " + shape_str(bias.shape()));
  }
  std::vector<double> y(batch * out);
  auto xv = x.data();
  auto wv = weight.data();
  auto bv = bias.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < out; ++o) {
      double s = bv[o];
      for (std::size_t i = 0; i < in; ++i) s += wv[o * in + i] * xv[b * in + i];
      y[b * out + o] = s;
    }
  return detail::make_result(OpKind::linear, {batch, out}, std::move(y), {x, weight, bias},
                             [batch, in, out](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    auto& pb = *self.parents[2];
    const auto& gy = self.grad;
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < out; ++o)
          for (std::size_t i = 0; i < in; ++i) g[b * in + i] += gy[b * out + o] * pw.value[o * in + i];
    }
    if (pw.requires_grad) {
      auto& g = pw.grad_buffer();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < out; ++o)
          for (std::size_t i = 0; i < in; ++i) g[o * in + i] += gy[b * out + o] * px.value[b * in + i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < out; ++o) g[o] += gy[b * out + o];
    }
  });
}

namespace detail {

struct ConvGeom {
  std::size_t batch, cin, h, w, cout, k, stride, pad, ho, wo;
};

// Calls fn(oy, iy, ox_begin, ox_end, ix_of_ox_begin) for every output row that
// overlaps the input for kernel tap (ky, kx).
template <class Fn>
inline void conv_tap_rows(const ConvGeom& g, std::size_t ky, std::size_t kx, Fn&& fn) {
  for (std::size_t oy = 0; oy < g.ho; ++oy) {
    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                              static_cast<std::ptrdiff_t>(g.pad);
    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
    // ix = ox*stride + kx - pad must lie in [0, w)
    std::ptrdiff_t lo = static_cast<std::ptrdiff_t>(g.pad) - static_cast<std::ptrdiff_t>(kx);
    std::size_t ox0 = lo <= 0 ? 0 : static_cast<std::size_t>((lo + static_cast<std::ptrdiff_t>(g.stride) - 1) /
                                                             static_cast<std::ptrdiff_t>(g.stride));
    std::ptrdiff_t hi = static_cast<std::ptrdiff_t>(g.w + g.pad) - static_cast<std::ptrdiff_t>(kx);  // ix < w
    std::size_t ox1 = hi <= 0 ? 0
                              : std::min<std::size_t>(g.wo, static_cast<std::size_t>(
                                                                (hi + static_cast<std::ptrdiff_t>(g.stride) - 1) /
                                                                static_cast<std::ptrdiff_t>(g.stride)));
    if (ox0 >= ox1) continue;
    fn(oy, static_cast<std::size_t>(iy), ox0, ox1, ox0 * g.stride + kx - g.pad);
  }
}

// col[(ci*k + ky)*k + kx][oy*wo + ox] = padded input at the tap; zero outside.
// Writes every element, so col may be uninitialized.
inline void im2col(const ConvGeom& g, const double* x, double* col) {
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t ci = 0; ci < g.cin; ++ci)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = col + ((ci * g.k + ky) * g.k + kx) * plane;
        const double* xc = x + ci * g.h * g.w;
        std::size_t done = 0;  // rows of the output already written
        conv_tap_rows(g, ky, kx, [&](std::size_t oy, std::size_t iy, std::size_t ox0, std::size_t ox1, std::size_t ix0) {
          double* r = row + oy * g.wo;
          std::fill(row + done * g.wo, r, 0.0);
          std::fill(r, r + ox0, 0.0);
          const double* xr = xc + iy * g.w + ix0;
          if (g.stride == 1) {
            std::copy(xr, xr + (ox1 - ox0), r + ox0);
          } else {
            for (std::size_t ox = ox0; ox < ox1; ++ox) r[ox] = xr[(ox - ox0) * g.stride];
          }
          std::fill(r + ox1, r + g.wo, 0.0);
          done = oy + 1;
        });
        std::fill(row + done * g.wo, row + plane, 0.0);
      }
}

inline void col2im_add(const ConvGeom& g, const double* col, double* gx) {
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t ci = 0; ci < g.cin; ++ci)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = col + ((ci * g.k + ky) * g.k + kx) * plane;
        double* gc = gx + ci * g.h * g.w;
        conv_tap_rows(g, ky, kx, [&](std::size_t oy, std::size_t iy, std::size_t ox0, std::size_t ox1, std::size_t ix0) {
          for (std::size_t ox = ox0; ox < ox1; ++ox) gc[iy * g.w + ix0 + (ox - ox0) * g.stride] += row[oy * g.wo + ox];
        });
      }
}

/// C[m,n] = op(A) op(B) + beta C, row-major. BLAS runs single-threaded so
/// results do not depend on the host's core count.
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a,
                 const double* b, double beta, double* c) {
  static std::once_flag once;
  std::call_once(once, [] { openblas_set_num_threads(1); });
  const int M = static_cast<int>(m), N = static_cast<int>(n), K = static_cast<int>(k);
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans, M, N, K, 1.0,
              a, trans_a ? M : K, b, trans_b ? K : N, beta, c, N);
}

}  // namespace detail

/// 2-D cross-correlation with zero padding. bias may be undefined.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias = {},
                     std::size_t stride = 1, std::size_t pad = std::size_t(-1)) {
  detail::require_rank(input, 4, "conv2d input");
  detail::require_rank(kernel, 4, "conv2d kernel");
  const std::size_t k = kernel.dim(2);
  if (kernel.dim(3) != k || k % 2 == 0) {
    throw ConfigError("conv2d: kernel must be square with odd size, got " + shape_str(kernel.shape()));
  }
  if (kernel.dim(1) != input.dim(1)) {
    throw ConfigError("conv2d: kernel " + shape_str(kernel.shape()) + " expects " +
                      std::to_string(kernel.dim(1)) + " input channels, input " +
                      shape_str(input.shape()) + " has " + std::to_string(input.dim(1)));
  }
  if (stride == 0) throw ConfigError("conv2d: stride must be >= 1");
  if (pad == std::size_t(-1)) pad = k / 2;
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != kernel.dim(0)) {
    throw ConfigError("conv2d: bias " + shape_str(bias.shape()) + " does not match " +
                      std::to_string(kernel.dim(0)) + " output channels");
  }
  if (input.dim(2) + 2 * pad < k || input.dim(3) + 2 * pad < k) {
    throw ConfigError("conv2d: input " + shape_str(input.shape()) + " smaller than kernel");
  }
  detail::ConvGeom g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernel.dim(0), k, stride, pad,
                     (input.dim(2) + 2 * pad - k) / stride + 1, (input.dim(3) + 2 * pad - k) / stride + 1};
  const std::size_t rows = g.cin * g.k * g.k, plane = g.ho * g.wo;
  std::vector<double> out(g.batch * g.cout * plane, 0.0);
  std::unique_ptr<double[]> col(new double[rows * plane]);
  auto xv = input.data();
  for (std::size_t b = 0; b < g.batch; ++b) {
    double* o = out.data() + b * g.cout * plane;
    if (has_bias)
      for (std::size_t co = 0; co < g.cout; ++co) std::fill(o + co * plane, o + (co + 1) * plane, bias.data()[co]);
    detail::im2col(g, xv.data() + b * g.cin * g.h * g.w, col.get());
    detail::gemm(false, false, g.cout, plane, rows, kernel.data().data(), col.get(), 1.0, o);
  }
  std::vector<Tensor> parents{input, kernel};
  if (has_bias) parents.push_back(bias);
  return detail::make_result(OpKind::conv2d, {g.batch, g.cout, g.ho, g.wo}, std::move(out), std::move(parents),
                             [g, has_bias](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pk = *self.parents[1];
    const std::size_t rows = g.cin * g.k * g.k, plane = g.ho * g.wo, xsize = g.cin * g.h * g.w;
    const auto& gy = self.grad;
    std::vector<double>* gx = px.requires_grad ? &px.grad_buffer() : nullptr;
    std::vector<double>* gk = pk.requires_grad ? &pk.grad_buffer() : nullptr;
    std::unique_ptr<double[]> col(new double[rows * plane]);
    for (std::size_t b = 0; b < g.batch; ++b) {
      const double* go = gy.data() + b * g.cout * plane;
      if (gk) {
        detail::im2col(g, px.value.data() + b * xsize, col.get());
        detail::gemm(false, true, g.cout, rows, plane, go, col.get(), 1.0, gk->data());
      }
      if (gx) {
        detail::gemm(true, false, rows, plane, g.cout, pk.value.data(), go, 0.0, col.get());
        detail::col2im_add(g, col.get(), gx->data() + b * xsize);
      }
    }
    if (has_bias && self.parents[2]->requires_grad) {
      auto& gb = self.parents[2]->grad_buffer();
      for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t co = 0; co < g.cout; ++co) {
          const double* go = gy.data() + (b * g.cout + co) * g.ho * g.wo;
          double s = 0.0;
          for (std::size_t i = 0; i < g.ho * g.wo; ++i) s += go[i];
          gb[co] += s;
        }
    }
  });
}

/// Group normalization over [B,C,H,W] followed by per-channel affine.
inline Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::size_t groups = 4,
                         double eps = 1e-5) {
  detail::require_rank(x, 4, "group_norm");
  const std::size_t batch = x.dim(0), ch = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (groups == 0 || ch % groups != 0) {
    throw ConfigError("group_norm: " + std::to_string(ch) + " channels not divisible into " +
                      std::to_string(groups) + " groups");
  }
  if (gamma.numel() != ch || beta.numel() != ch) throw ConfigError("group_norm: affine size mismatch");
  const std::size_t cpg = ch / groups, gsize = cpg * hw;
  std::vector<double> xhat(x.numel()), out(x.numel()), inv_std(batch * groups);
  auto xv = x.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t off = (b * ch + gi * cpg) * hw;
      double mean = 0.0;
      for (std::size_t i = 0; i < gsize; ++i) mean += xv[off + i];
      mean /= static_cast<double>(gsize);
      double var = 0.0;
      for (std::size_t i = 0; i < gsize; ++i) var += (xv[off + i] - mean) * (xv[off + i] - mean);
      var /= static_cast<double>(gsize);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[b * groups + gi] = is;
      for (std::size_t i = 0; i < gsize; ++i) {
        const std::size_t c = gi * cpg + i / hw;
        xhat[off + i] = (xv[off + i] - mean) * is;
        out[off + i] = xhat[off + i] * gamma.data()[c] + beta.data()[c];
      }
    }
  return detail::make_result(
      OpKind::groupnorm, x.shape(), std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), batch, ch, hw, groups, cpg, gsize](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto& gy = self.grad;
        if (pg.requires_grad || pb.requires_grad) {
          auto& gg = pg.grad_buffer();
          auto& gb = pb.grad_buffer();
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < ch; ++c)
              for (std::size_t i = 0; i < hw; ++i) {
                const std::size_t idx = (b * ch + c) * hw + i;
                gg[c] += gy[idx] * xhat[idx];
                gb[c] += gy[idx];
              }
        }
        if (!px.requires_grad) return;
        auto& gx = px.grad_buffer();
        std::vector<double> dxhat(gsize);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t gi = 0; gi < groups; ++gi) {
            const std::size_t off = (b * ch + gi * cpg) * hw;
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t i = 0; i < gsize; ++i) {
              dxhat[i] = gy[off + i] * pg.value[gi * cpg + i / hw];
              m1 += dxhat[i];
              m2 += dxhat[i] * xhat[off + i];
            }
            m1 /= static_cast<double>(gsize);
            m2 /= static_cast<double>(gsize);
            const double is = inv_std[b * groups + gi];
            for (std::size_t i = 0; i < gsize; ++i) gx[off + i] += is * (dxhat[i] - m1 - xhat[off + i] * m2);
          }
      });
}

/// Adds e[B,C] to every spatial position of x[B,C,H,W].
inline Tensor broadcast_add(const Tensor& x, const Tensor& e) {
  detail::require_rank(x, 4, "broadcast_add");
  detail::require_rank(e, 2, "broadcast_add embedding");
  const std::size_t batch = x.dim(0), ch = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (e.dim(0) != batch || e.dim(1) != ch) {
    throw ConfigError("broadcast_add: embedding " + shape_str(e.shape()) + " does not match " +
                      shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t bc = 0; bc < batch * ch; ++bc)
    for (std::size_t i = 0; i < hw; ++i) out[bc * hw + i] += e.data()[bc];
  return detail::make_result(OpKind::broadcast_add, x.shape(), std::move(out), {x, e},
                             [batch, ch, hw](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pe = *self.parents[1];
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pe.requires_grad) {
      auto& g = pe.grad_buffer();
      for (std::size_t bc = 0; bc < batch * ch; ++bc)
        for (std::size_t i = 0; i < hw; ++i) g[bc] += self.grad[bc * hw + i];
    }
  });
}

/// Concatenates [B,Ci,H,W] tensors along the channel axis.
inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ConfigError("concat: no inputs");
  for (const auto& p : parts) detail::require_rank(p, 4, "concat");
  const std::size_t batch = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  std::vector<std::size_t> chans;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.dim(0) != batch || p.dim(2) != h || p.dim(3) != w) {
      throw ConfigError("concat: incompatible shapes " + shape_str(parts[0].shape()) + " and " +
                        shape_str(p.shape()));
    }
    chans.push_back(p.dim(1));
    total += p.dim(1);
  }
  const std::size_t hw = h * w;
  std::vector<double> out(batch * total * hw);
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t c0 = 0;
    for (std::size_t j = 0; j < parts.size(); ++j) {
      auto src = parts[j].data().subspan(b * chans[j] * hw, chans[j] * hw);
      std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>((b * total + c0) * hw));
      c0 += chans[j];
    }
  }
  return detail::make_result(OpKind::concat, {batch, total, h, w}, std::move(out), parts,
                             [chans, batch, total, hw](detail::Node& self) {
    std::size_t c0 = 0;
    for (std::size_t j = 0; j < chans.size(); ++j) {
      auto& p = *self.parents[j];
      if (p.requires_grad) {
        auto& g = p.grad_buffer();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t i = 0; i < chans[j] * hw; ++i) g[b * chans[j] * hw + i] += self.grad[(b * total + c0) * hw + i];
      }
      c0 += chans[j];
    }
  });
}

/// Channels [begin, end) of x[B,C,H,W].
inline Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_rank(x, 4, "split");
  const std::size_t batch = x.dim(0), ch = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (begin > end || end > ch) {
    throw ConfigError("split: channel range [" + std::to_string(begin) + "," + std::to_string(end) +
                      ") outside " + std::to_string(ch) + " channels");
  }
  const std::size_t n = end - begin;
  std::vector<double> out(batch * n * hw);
  for (std::size_t b = 0; b < batch; ++b) {
    auto src = x.data().subspan((b * ch + begin) * hw, n * hw);
    std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>(b * n * hw));
  }
  return detail::make_result(OpKind::split, {batch, n, x.dim(2), x.dim(3)}, std::move(out), {x},
                             [batch, ch, hw, begin, n](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < n * hw; ++i) g[(b * ch + begin) * hw + i] += self.grad[b * n * hw + i];
  });
}

/// Nearest-neighbour 2x upsampling.
inline Tensor upsample2x(const Tensor& x) {
  detail::require_rank(x, 4, "upsample2x");
  const std::size_t bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<double> out(bc * 4 * h * w);
  for (std::size_t p = 0; p < bc; ++p)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx)
        out[(p * 2 * h + y) * 2 * w + xx] = x.data()[(p * h + y / 2) * w + xx / 2];
  return detail::make_result(OpKind::upsample2x, {x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out), {x},
                             [bc, h, w](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t p = 0; p < bc; ++p)
      for (std::size_t y = 0; y < 2 * h; ++y)
        for (std::size_t xx = 0; xx < 2 * w; ++xx) g[(p * h + y / 2) * w + xx / 2] += self.grad[(p * 2 * h + y) * 2 * w + xx];
  });
}

/// 2x2 average pooling with stride 2.
inline Tensor avgpool2x(const Tensor& x) {
  detail::require_rank(x, 4, "avgpool2x");
  const std::size_t bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) throw ConfigError("avgpool2x: odd spatial size " + shape_str(x.shape()));
  const std::size_t ho = h / 2, wo = w / 2;
  std::vector<double> out(bc * ho * wo, 0.0);
  for (std::size_t p = 0; p < bc; ++p)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) out[(p * ho + y / 2) * wo + xx / 2] += 0.25 * x.data()[(p * h + y) * w + xx];
  return detail::make_result(OpKind::avgpool2x, {x.dim(0), x.dim(1), ho, wo}, std::move(out), {x},
                             [bc, h, w, ho, wo](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t p = 0; p < bc; ++p)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) g[(p * h + y) * w + xx] += 0.25 * self.grad[(p * ho + y / 2) * wo + xx / 2];
  });
}

/// Escape hatch for ops defined outside this header (the quantum branch).
/// backward receives the upstream gradient and must accumulate into parents.
inline Tensor custom_op(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
                        std::function<void(detail::Node&)> backward) {
  return detail::make_result(OpKind::custom, std::move(shape), std::move(value), std::move(parents),
                             std::move(backward));
}

}  // namespace qds
