#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ssta/tensor.hpp"

/**
 * @file autodiff.hpp
 * @brief Tape-based reverse-mode differentiation over the small set of
 * primitives the frame predictor needs.
 *
 * Every primitive appends one node to a Tape. A node stores its forward value,
 * the ids of its inputs and a closure that scatters the node's adjoint into the
 * adjoints of its inputs. Nodes are appended in evaluation order, so walking
 * the node list backwards is a valid reverse topological order.
 */
namespace ssta::ad {

template <Real T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <Real T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

template <Real T>
struct BackwardCtx {
  const Tensor<T>& out_value;
  const Tensor<T>& out_adjoint;
  std::span<const Tensor<T>* const> inputs;
  /// One slot per input; nullptr where the input does not need a gradient.
  std::span<Tensor<T>* const> grads;
};

template <Real T>
class Tape {
 public:
  using BackwardFn = std::function<void(const BackwardCtx<T>&)>;
  using Gradients = std::map<std::string, Tensor<T>>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Non-differentiable value (frames, received-message constants, targets).
  Var<T> constant(Tensor<T> v) { return push(std::move(v), {}, nullptr, false, "constant", {}); }

  /// Named differentiable leaf; its adjoint is reported by backward()/vjp().
  Var<T> input(const std::string& name, Tensor<T> v) {
    if (inputs_.contains(name)) throw std::invalid_argument("duplicate tape input '" + name + "'");
    Var<T> var = push(std::move(v), {}, nullptr, true, "input", name);
    inputs_.emplace(name, var.id);
    return var;
  }

  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn, const char* op) {
    std::vector<std::size_t> ids;
    bool grad = false;
    for (const Var<T>& v : inputs) {
      if (v.tape != this) throw std::invalid_argument(std::string(op) + ": operand from another tape");
      ids.push_back(v.id);
      grad = grad || nodes_[v.id].requires_grad;
    }
    if (!value.all_finite())
      throw NumericError(std::string(op) + ": non-finite forward value, shape " + shape_str(value.shape()));
    return push(std::move(value), std::move(ids), std::move(fn), grad, op, {});
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

  std::vector<std::string> input_names() const {
    std::vector<std::string> out;
    for (const auto& [name, id] : inputs_) out.push_back(name);
    return out;
  }

  Var<T> input_var(const std::string& name) {
    auto it = inputs_.find(name);
    if (it == inputs_.end()) throw std::out_of_range("no tape input '" + name + "'");
    return Var<T>{this, it->second};
  }

  /**
   * Adjoint of a scalar loss with respect to every named input.
   * Unused inputs get an all-zero gradient. A tape can be backpropagated once.
   */
  Gradients backward(Var<T> loss) {
    if (loss.tape != this) throw std::invalid_argument("backward: loss recorded on another tape");
    if (consumed_) throw std::logic_error("backward: tape already differentiated");
    if (value(loss).size() != 1 || value(loss).rank() != 0)
      throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(value(loss).shape()));
    consumed_ = true;
    std::pair<Var<T>, Tensor<T>> seed{loss, Tensor<T>::scalar(T{1})};
    return vjp(std::span(&seed, 1));
  }

  /// Vector-Jacobian product seeded at arbitrary recorded values. Repeatable.
  Gradients vjp(std::span<const std::pair<Var<T>, Tensor<T>>> seeds) const {
    std::vector<Tensor<T>> adj(nodes_.size());
    std::size_t last = 0;
    for (const auto& [var, seed] : seeds) {
      nodes_.at(var.id).value.require_same_shape(seed, "vjp seed");
      if (adj[var.id].empty() && seed.size() > 0)
        adj[var.id] = seed;
      else
        adj[var.id] += seed;
      last = std::max(last, var.id + 1);
    }
    std::vector<const Tensor<T>*> in_vals;
    std::vector<Tensor<T>*> in_grads;
    for (std::size_t i = last; i-- > 0;) {
      const Node& n = nodes_[i];
      if (!n.backward || !n.requires_grad || adj[i].empty()) continue;
      in_vals.clear();
      in_grads.clear();
      for (std::size_t in : n.inputs) {
        in_vals.push_back(&nodes_[in].value);
        if (nodes_[in].requires_grad) {
          if (adj[in].empty()) adj[in] = Tensor<T>(nodes_[in].value.shape());
          in_grads.push_back(&adj[in]);
        } else {
          in_grads.push_back(nullptr);
        }
      }
      n.backward(BackwardCtx<T>{n.value, adj[i], in_vals, in_grads});
      // Intermediate adjoints are no longer needed once scattered.
      if (n.name.empty()) adj[i] = Tensor<T>();
    }
    Gradients out;
    for (const auto& [name, id] : inputs_) {
      Tensor<T> g = adj[id].empty() ? Tensor<T>(nodes_[id].value.shape()) : std::move(adj[id]);
      if (!g.all_finite()) throw NumericError("non-finite gradient for '" + name + "'");
      out.emplace(name, std::move(g));
    }
    return out;
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    const char* op = "";
    std::string name;
  };

  Var<T> push(Tensor<T> v, std::vector<std::size_t> ids, BackwardFn fn, bool grad, const char* op,
              std::string name) {
    nodes_.push_back(Node{std::move(v), std::move(ids), std::move(fn), grad, op, std::move(name)});
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> inputs_;
  bool consumed_ = false;
};

namespace detail {

template <Real T>
void require_same_tape(Var<T> a, Var<T> b, const char* op) {
  if (a.tape != b.tape) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
}

template <Real T>
void require_rank(const Tensor<T>& t, std::size_t r, const char* op, const char* what) {
  if (t.rank() != r)
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(r) + ", got " +
                     shape_str(t.shape()));
}

}  // namespace detail

template <Real T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b, "add");
  const Tensor<T>& x = a.value();
  const Tensor<T>& y = b.value();
  x.require_same_shape(y, "add");
  Tensor<T> out = x;
  out += y;
  return a.tape->record(
      std::move(out), {a, b},
      [](const BackwardCtx<T>& c) {
        for (Tensor<T>* g : c.grads)
          if (g) *g += c.out_adjoint;
      },
      "add");
}

template <Real T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  out *= s;
  return a.tape->record(
      std::move(out), {a},
      [s](const BackwardCtx<T>& c) {
        if (Tensor<T>* g = c.grads[0]) {
          const auto go = c.out_adjoint.data();
          auto gd = g->data();
          for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += s * go[i];
        }
      },
      "scale");
}

template <Real T>
Var<T> tanh(Var<T> a) {
  Tensor<T> out = a.value();
  for (T& v : out.data()) v = std::tanh(v);
  return a.tape->record(
      std::move(out), {a},
      [](const BackwardCtx<T>& c) {
        if (Tensor<T>* g = c.grads[0]) {
          const auto y = c.out_value.data();
          const auto go = c.out_adjoint.data();
          auto gd = g->data();
          for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += go[i] * (T{1} - y[i] * y[i]);
        }
      },
      "tanh");
}

template <Real T>
Var<T> sigmoid(Var<T> a) {
  Tensor<T> out = a.value();
  for (T& v : out.data()) v = T{1} / (T{1} + std::exp(-v));
  return a.tape->record(
      std::move(out), {a},
      [](const BackwardCtx<T>& c) {
        if (Tensor<T>* g = c.grads[0]) {
          const auto y = c.out_value.data();
          const auto go = c.out_adjoint.data();
          auto gd = g->data();
          for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += go[i] * y[i] * (T{1} - y[i]);
        }
      },
      "sigmoid");
}

namespace detail {

/// out[p] = init + sum_r w[r*wstride] * src[r*sstride + p] for p < n, accumulated in registers.
template <Real T>
void weighted_rows(const T* w, std::size_t wstride, const T* src, std::size_t sstride, std::size_t nrows,
                   std::size_t n, T* out, T init) {
  constexpr std::size_t B = 16;
  std::size_t p0 = 0;
  for (; p0 + B <= n; p0 += B) {
    T acc[B];
    for (std::size_t j = 0; j < B; ++j) acc[j] = init;
    for (std::size_t r = 0; r < nrows; ++r) {
      const T wv = w[r * wstride];
      const T* s = src + r * sstride + p0;
      for (std::size_t j = 0; j < B; ++j) acc[j] += wv * s[j];
    }
    for (std::size_t j = 0; j < B; ++j) out[p0 + j] = acc[j];
  }
  for (std::size_t p = p0; p < n; ++p) {
    T acc = init;
    for (std::size_t r = 0; r < nrows; ++r) acc += w[r * wstride] * src[r * sstride + p];
    out[p] = acc;
  }
}

template <Real T>
T dot(const T* a, const T* b, std::size_t n) {
  constexpr std::size_t B = 8;
  T acc[B] = {};
  std::size_t p = 0;
  for (; p + B <= n; p += B)
    for (std::size_t j = 0; j < B; ++j) acc[j] += a[p + j] * b[p + j];
  T s{0};
  for (std::size_t j = 0; j < B; ++j) s += acc[j];
  for (; p < n; ++p) s += a[p] * b[p];
  return s;
}

}  // namespace detail

/**
 * Same-size 2-D convolution (cross-correlation) with zero padding (k-1)/2.
 * input [C_in,H,W], kernel [C_out,C_in,k,k] with k odd, bias [C_out] -> [C_out,H,W].
 */
template <Real T>
Var<T> conv2d(Var<T> input, Var<T> kernel, Var<T> bias) {
  detail::require_same_tape(input, kernel, "conv2d");
  detail::require_same_tape(input, bias, "conv2d");
  const Tensor<T>& in = input.value();
  const Tensor<T>& k = kernel.value();
  const Tensor<T>& b = bias.value();
  detail::require_rank(in, 3, "conv2d", "input");
  detail::require_rank(k, 4, "conv2d", "kernel");
  detail::require_rank(b, 1, "conv2d", "bias");
  const std::size_t cin = in.dim(0), h = in.dim(1), w = in.dim(2);
  const std::size_t cout = k.dim(0), ks = k.dim(2);
  if (k.dim(1) != cin || k.dim(3) != ks || ks % 2 == 0 || b.dim(0) != cout)
    throw ShapeError("conv2d: incompatible shapes input " + shape_str(in.shape()) + ", kernel " +
                     shape_str(k.shape()) + ", bias " + shape_str(b.shape()));
  const long pad = static_cast<long>(ks / 2);
  const std::size_t rows = cin * ks * ks, hw = h * w;

  // Unfolds the zero-padded input into [cin*k*k, h*w] patch columns.
  // Large per-call buffers would go through mmap, so each thread reuses one.
  auto im2col = [=](const T* x) -> const std::vector<T>& {
    thread_local std::vector<T> col;
    col.assign(rows * hw, T{0});
    for (std::size_t ci = 0; ci < cin; ++ci)
      for (std::size_t dy = 0; dy < ks; ++dy)
        for (std::size_t dx = 0; dx < ks; ++dx) {
          const long oy = long(dy) - pad, ox = long(dx) - pad;
          T* c = col.data() + ((ci * ks + dy) * ks + dx) * hw;
          const std::size_t y0 = std::size_t(std::max<long>(0, -oy)), y1 = std::size_t(std::min<long>(long(h), long(h) - oy));
          const std::size_t x0 = std::size_t(std::max<long>(0, -ox)), x1 = std::size_t(std::min<long>(long(w), long(w) - ox));
          for (std::size_t y = y0; y < y1; ++y) {
            const T* irow = x + (ci * h + std::size_t(long(y) + oy)) * w + ox;
            for (std::size_t xx = x0; xx < x1; ++xx) c[y * w + xx] = irow[xx];
          }
        }
    return col;
  };

  Tensor<T> out(Shape{cout, h, w});
  {
    const auto& col = im2col(in.data().data());
    T* o = out.data().data();
    const T* kd = k.data().data();
    for (std::size_t co = 0; co < cout; ++co)
      detail::weighted_rows(kd + co * rows, 1, col.data(), hw, rows, hw, o + co * hw, b[co]);
  }

  return input.tape->record(
      std::move(out), {input, kernel, bias},
      [im2col, h, w, ks, pad, cin, cout, rows, hw](const BackwardCtx<T>& c) {
        const T* go = c.out_adjoint.data().data();
        const T* kd = c.inputs[1]->data().data();
        Tensor<T>* gin = c.grads[0];
        Tensor<T>* gk = c.grads[1];
        Tensor<T>* gb = c.grads[2];
        if (gb)
          for (std::size_t co = 0; co < cout; ++co) {
            T s{0};
            for (std::size_t i = 0; i < hw; ++i) s += go[co * hw + i];
            (*gb)[co] += s;
          }
        if (gk) {
          const auto& col = im2col(c.inputs[0]->data().data());
          for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t r = 0; r < rows; ++r)
              (*gk)[co * rows + r] += detail::dot(go + co * hw, col.data() + r * hw, hw);
        }
        if (gin) {
          thread_local std::vector<T> gcol;
          gcol.resize(rows * hw);
          for (std::size_t r = 0; r < rows; ++r)
            detail::weighted_rows(kd + r, rows, go, hw, cout, hw, gcol.data() + r * hw, T{0});
          T* gi = gin->data().data();
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t dy = 0; dy < ks; ++dy)
              for (std::size_t dx = 0; dx < ks; ++dx) {
                const long oy = long(dy) - pad, ox = long(dx) - pad;
                const T* gc = gcol.data() + ((ci * ks + dy) * ks + dx) * hw;
                const std::size_t y0 = std::size_t(std::max<long>(0, -oy)), y1 = std::size_t(std::min<long>(long(h), long(h) - oy));
                const std::size_t x0 = std::size_t(std::max<long>(0, -ox)), x1 = std::size_t(std::min<long>(long(w), long(w) - ox));
                for (std::size_t y = y0; y < y1; ++y) {
                  T* girow = gi + (ci * h + std::size_t(long(y) + oy)) * w + ox;
                  for (std::size_t xx = x0; xx < x1; ++xx) girow[xx] += gc[y * w + xx];
                }
              }
        }
      },
      "conv2d");
}

/// Stack [Ca,H,W] and [Cb,H,W] into [Ca+Cb,H,W].
template <Real T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b, "concat_channels");
  const Tensor<T>& x = a.value();
  const Tensor<T>& y = b.value();
  detail::require_rank(x, 3, "concat_channels", "first operand");
  detail::require_rank(y, 3, "concat_channels", "second operand");
  if (x.dim(1) != y.dim(1) || x.dim(2) != y.dim(2))
    throw ShapeError("concat_channels: spatial mismatch " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  Tensor<T> out(Shape{x.dim(0) + y.dim(0), x.dim(1), x.dim(2)});
  std::copy(x.data().begin(), x.data().end(), out.data().begin());
  std::copy(y.data().begin(), y.data().end(), out.data().begin() + static_cast<long>(x.size()));
  const std::size_t split = x.size();
  return a.tape->record(
      std::move(out), {a, b},
      [split](const BackwardCtx<T>& c) {
        const auto go = c.out_adjoint.data();
        if (Tensor<T>* g = c.grads[0])
          for (std::size_t i = 0; i < split; ++i) (*g)[i] += go[i];
        if (Tensor<T>* g = c.grads[1])
          for (std::size_t i = split; i < go.size(); ++i) (*g)[i - split] += go[i];
      },
      "concat_channels");
}

/// [C,H,W] -> [C], spatial mean per channel.
template <Real T>
Var<T> global_avg_pool(Var<T> a) {
  const Tensor<T>& x = a.value();
  detail::require_rank(x, 3, "global_avg_pool", "input");
  const std::size_t ch = x.dim(0), hw = x.dim(1) * x.dim(2);
  Tensor<T> out(Shape{ch});
  for (std::size_t c = 0; c < ch; ++c) {
    T s{0};
    for (std::size_t i = 0; i < hw; ++i) s += x[c * hw + i];
    out[c] = s / static_cast<T>(hw);
  }
  return a.tape->record(
      std::move(out), {a},
      [ch, hw](const BackwardCtx<T>& c) {
        if (Tensor<T>* g = c.grads[0])
          for (std::size_t k = 0; k < ch; ++k) {
            const T v = c.out_adjoint[k] / static_cast<T>(hw);
            for (std::size_t i = 0; i < hw; ++i) (*g)[k * hw + i] += v;
          }
      },
      "global_avg_pool");
}

/// [C] -> [C,H,W], each channel value repeated over the grid.
template <Real T>
Var<T> broadcast_spatial(Var<T> a, std::size_t h, std::size_t w) {
  const Tensor<T>& x = a.value();
  detail::require_rank(x, 1, "broadcast_spatial", "input");
  const std::size_t ch = x.dim(0), hw = h * w;
  Tensor<T> out(Shape{ch, h, w});
  for (std::size_t c = 0; c < ch; ++c) std::fill_n(out.data().begin() + static_cast<long>(c * hw), hw, x[c]);
  return a.tape->record(
      std::move(out), {a},
      [ch, hw](const BackwardCtx<T>& c) {
        if (Tensor<T>* g = c.grads[0])
          for (std::size_t k = 0; k < ch; ++k) {
            T s{0};
            for (std::size_t i = 0; i < hw; ++i) s += c.out_adjoint[k * hw + i];
            (*g)[k] += s;
          }
      },
      "broadcast_spatial");
}

/// y = W x + b with x [in], W [out,in], b [out].
template <Real T>
Var<T> dense(Var<T> x, Var<T> weight, Var<T> bias) {
  detail::require_same_tape(x, weight, "dense");
  detail::require_same_tape(x, bias, "dense");
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = weight.value();
  const Tensor<T>& bv = bias.value();
  detail::require_rank(xv, 1, "dense", "input");
  detail::require_rank(wv, 2, "dense", "weight");
  detail::require_rank(bv, 1, "dense", "bias");
  const std::size_t n_out = wv.dim(0), n_in = wv.dim(1);
  if (xv.dim(0) != n_in || bv.dim(0) != n_out)
    throw ShapeError("dense: incompatible shapes input " + shape_str(xv.shape()) + ", weight " +
                     shape_str(wv.shape()) + ", bias " + shape_str(bv.shape()));
  Tensor<T> out = bv;
  for (std::size_t o = 0; o < n_out; ++o) {
    T s{0};
    for (std::size_t i = 0; i < n_in; ++i) s += wv[o * n_in + i] * xv[i];
    out[o] += s;
  }
  return x.tape->record(
      std::move(out), {x, weight, bias},
      [n_in, n_out](const BackwardCtx<T>& c) {
        const Tensor<T>& xv = *c.inputs[0];
        const Tensor<T>& wv = *c.inputs[1];
        const Tensor<T>& go = c.out_adjoint;
        if (Tensor<T>* g = c.grads[0])
          for (std::size_t o = 0; o < n_out; ++o)
            for (std::size_t i = 0; i < n_in; ++i) (*g)[i] += wv[o * n_in + i] * go[o];
        if (Tensor<T>* g = c.grads[1])
          for (std::size_t o = 0; o < n_out; ++o)
            for (std::size_t i = 0; i < n_in; ++i) (*g)[o * n_in + i] += go[o] * xv[i];
        if (Tensor<T>* g = c.grads[2]) *g += go;
      },
      "dense");
}

template <Real T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return a.tape->record(
      std::move(out), {a},
      [](const BackwardCtx<T>& c) {
        if (Tensor<T>* g = c.grads[0]) {
          auto gd = g->data();
          for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += c.out_adjoint[i];
        }
      },
      "reshape");
}

/// Sum of all entries, as a scalar.
template <Real T>
Var<T> sum(Var<T> a) {
  return a.tape->record(
      Tensor<T>::scalar(sum_of(a.value())), {a},
      [](const BackwardCtx<T>& c) {
        if (Tensor<T>* g = c.grads[0]) {
          const T go = c.out_adjoint[0];
          for (T& v : g->data()) v += go;
        }
      },
      "sum");
}

namespace detail {

template <Real T>
Var<T> squared_error(Var<T> pred, Var<T> target, bool mean, const char* op) {
  require_same_tape(pred, target, op);
  const Tensor<T>& p = pred.value();
  const Tensor<T>& t = target.value();
  p.require_same_shape(t, op);
  T s{0};
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T d = p[i] - t[i];
    s += d * d;
  }
  const T norm = mean ? T{1} / static_cast<T>(p.size()) : T{1};
  return pred.tape->record(
      Tensor<T>::scalar(s * norm), {pred, target},
      [norm](const BackwardCtx<T>& c) {
        const Tensor<T>& p = *c.inputs[0];
        const Tensor<T>& t = *c.inputs[1];
        const T k = T{2} * norm * c.out_adjoint[0];
        if (Tensor<T>* g = c.grads[0])
          for (std::size_t i = 0; i < p.size(); ++i) (*g)[i] += k * (p[i] - t[i]);
        if (Tensor<T>* g = c.grads[1])
          for (std::size_t i = 0; i < p.size(); ++i) (*g)[i] -= k * (p[i] - t[i]);
      },
      op);
}

}  // namespace detail

/// Mean squared error, scalar.
template <Real T>
Var<T> mse_loss(Var<T> pred, Var<T> target) {
  return detail::squared_error(pred, target, true, "mse_loss");
}

/// Squared Frobenius norm of the difference, scalar.
template <Real T>
Var<T> sse_loss(Var<T> pred, Var<T> target) {
  return detail::squared_error(pred, target, false, "sse_loss");
}

}  // namespace ssta::ad
