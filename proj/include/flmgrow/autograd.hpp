#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "flmgrow/kernels.hpp"
#include "flmgrow/tensor.hpp"

namespace flmgrow {

struct Var {
  std::size_t id = 0;
};

// Tape-based reverse mode. Leaves are registered explicitly; every op appends one node
// whose backward closure accumulates into its inputs' gradients. Backward walks the
// tape in reverse insertion order, so gradient accumulation order is fixed.
template <Real T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const noexcept { return grad_enabled_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Borrowed leaf: the tensor must outlive the tape and stay unmodified until backward finishes.
  Var leaf(const Tensor<T>& value) {
    Node n;
    n.ref = &value;
    n.requires_grad = grad_enabled_;
    return push(std::move(n));
  }

  Var constant(Tensor<T> value) {
    Node n;
    n.owned = std::move(value);
    return push(std::move(n));
  }

  Var record(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn) {
    Node n;
    n.owned = std::move(value);
    if (grad_enabled_) {
      for (Var v : inputs) n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
      if (n.requires_grad) n.backward = std::move(fn);
    }
    return push(std::move(n));
  }

  const Tensor<T>& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.ref ? *n.ref : n.owned;
  }

  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  // Gradient buffer, zero-initialized on first access.
  Tensor<T>& grad(Var v) { return grad(v.id); }
  Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.size() != value_of(n).size() || n.grad.shape() != value_of(n).shape()) {
      n.grad = Tensor<T>(value_of(n).shape());
    }
    return n.grad;
  }

  bool has_grad(Var v) const { return !nodes_.at(v.id).grad.empty(); }

  void backward(Var loss) {
    if (!grad_enabled_) throw ContractError("backward on a tape recorded without gradients");
    if (value(loss).size() != 1) {
      throw ContractError("backward needs a scalar loss, got shape " + shape_string(value(loss).shape()));
    }
    grad(loss).fill(T{1});
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, i);
    }
  }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* ref = nullptr;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  static const Tensor<T>& value_of(const Node& n) { return n.ref ? *n.ref : n.owned; }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
};

namespace ag {

namespace detail {

template <Real T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
  }
}

template <Real T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

template <Real T>
Var add(Tape<T>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  detail::require_same_shape(av, bv, "add");
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    if (tp.requires_grad(a)) detail::accumulate(tp.grad(a), g);
    if (tp.requires_grad(b)) detail::accumulate(tp.grad(b), g);
  });
}

template <Real T>
Var mul(Tape<T>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  detail::require_same_shape(av, bv, "mul");
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& av = tp.value(a);
    const auto& bv = tp.value(b);
    if (tp.requires_grad(a)) {
      auto& ga = tp.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.requires_grad(b)) {
      auto& gb = tp.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <Real T>
Var scale(Tape<T>& t, Var a, T c) {
  Tensor<T> out = t.value(a);
  for (auto& v : out.values()) v *= c;
  return t.record(std::move(out), {a}, [a, c](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
  });
}

// Multiplies column j of every row by weights[j] (weights are constants).
template <Real T>
Var scale_columns(Tape<T>& t, Var a, std::vector<T> weights) {
  const auto& av = t.value(a);
  if (weights.size() != av.cols()) throw DimensionError("scale_columns: weight count differs from row length");
  Tensor<T> out = av;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] *= weights[j];
  }
  return t.record(std::move(out), {a}, [a, w = std::move(weights)](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& ga = tp.grad(a);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      auto grow = g.row(r);
      auto arow = ga.row(r);
      for (std::size_t j = 0; j < grow.size(); ++j) arow[j] += grow[j] * w[j];
    }
  });
}

template <Real T>
Var matmul(Tape<T>& t, Var a, Var b) {
  Tensor<T> out = flmgrow::matmul(t.value(a), t.value(b));
  return t.record(std::move(out), {a, b}, [a, b](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    if (tp.requires_grad(a)) detail::accumulate(tp.grad(a), flmgrow::matmul_nt(g, tp.value(b)));
    if (tp.requires_grad(b)) detail::accumulate(tp.grad(b), flmgrow::matmul_tn(tp.value(a), g));
  });
}

template <Real T>
Var silu(Tape<T>& t, Var a) {
  Tensor<T> out = t.value(a);
  for (auto& v : out.values()) v = kernels::silu(v);
  return t.record(std::move(out), {a}, [a](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& x = tp.value(a);
    auto& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = T{1} / (T{1} + std::exp(-x[i]));
      ga[i] += g[i] * (s + x[i] * s * (T{1} - s));
    }
  });
}

template <Real T>
Var sum(Tape<T>& t, Var a) {
  T s{0};
  for (T v : t.value(a).values()) s += v;
  return t.record(Tensor<T>({1}, s), {a}, [a](Tape<T>& tp, std::size_t self) {
    const T g = tp.grad(self)[0];
    for (auto& v : tp.grad(a).values()) v += g;
  });
}

template <Real T>
Var softmax_rows(Tape<T>& t, Var a) {
  Tensor<T> out = flmgrow::softmax_rows(t.value(a));
  return t.record(std::move(out), {a}, [a](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& y = tp.value(Var{self});
    auto& ga = tp.grad(a);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto yr = y.row(r);
      auto gr = g.row(r);
      T dot{0};
      for (std::size_t j = 0; j < yr.size(); ++j) dot += yr[j] * gr[j];
      auto out = ga.row(r);
      for (std::size_t j = 0; j < yr.size(); ++j) out[j] += yr[j] * (gr[j] - dot);
    }
  });
}

// Gathers rows of `table` (vocab × d) for each id.
template <Real T>
Var embedding(Tape<T>& t, Var table, std::vector<std::size_t> ids) {
  const auto& tv = t.value(table);
  const std::size_t d = tv.cols();
  Tensor<T> out({ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= tv.rows()) throw InputError("token id " + std::to_string(ids[r]) + " out of range");
    std::copy_n(tv.row(ids[r]).begin(), d, out.row(r).begin());
  }
  return t.record(std::move(out), {table}, [table, ids = std::move(ids)](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& gt = tp.grad(table);
    for (std::size_t r = 0; r < ids.size(); ++r) {
      auto src = g.row(r);
      auto dst = gt.row(ids[r]);
      for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
    }
  });
}

// Row-wise RMSNorm with optional per-coordinate weights and effective dimension.
template <Real T>
Var rmsnorm_rows(Tape<T>& t, Var x, Var gain, std::vector<T> weights, T d_eff) {
  const auto& xv = t.value(x);
  const auto& gv = t.value(gain);
  if (gv.size() != xv.cols()) throw DimensionError("rmsnorm gain length differs from row length");
  if (!weights.empty() && weights.size() != xv.cols()) throw DimensionError("rmsnorm weight length");
  Tensor<T> out(xv.shape());
  auto denoms = std::make_shared<std::vector<T>>(xv.rows());
  const T* w = weights.empty() ? nullptr : weights.data();
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    (*denoms)[r] = kernels::rmsnorm_row<T>(xv.row(r), gv.values(), w, d_eff, T(kernels::kRmsNormEps), out.row(r));
  }
  return t.record(std::move(out), {x, gain},
                  [x, gain, weights = std::move(weights), d_eff, denoms](Tape<T>& tp, std::size_t self) {
                    const auto& g = tp.grad(self);
                    const auto& xv = tp.value(x);
                    const auto& gv = tp.value(gain);
                    const T* w = weights.empty() ? nullptr : weights.data();
                    std::span<T> gx_all, gg;
                    if (tp.requires_grad(x)) gx_all = tp.grad(x).values();
                    if (tp.requires_grad(gain)) gg = tp.grad(gain).values();
                    for (std::size_t r = 0; r < xv.rows(); ++r) {
                      std::span<T> gx = gx_all.empty() ? std::span<T>{} : gx_all.subspan(r * xv.cols(), xv.cols());
                      kernels::rmsnorm_row_backward<T>(xv.row(r), gv.values(), w, d_eff, (*denoms)[r], g.row(r), gx,
                                                       gg);
                    }
                  });
}

template <Real T>
Var layernorm_rows(Tape<T>& t, Var x, Var gain, Var bias, std::vector<T> weights, T d_eff) {
  const auto& xv = t.value(x);
  const auto& gv = t.value(gain);
  const auto& bv = t.value(bias);
  if (gv.size() != xv.cols() || bv.size() != xv.cols()) throw DimensionError("layernorm parameter length");
  if (!weights.empty() && weights.size() != xv.cols()) throw DimensionError("layernorm weight length");
  Tensor<T> out(xv.shape());
  auto denoms = std::make_shared<std::vector<T>>(xv.rows());
  const T* w = weights.empty() ? nullptr : weights.data();
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    (*denoms)[r] = kernels::layernorm_row<T>(xv.row(r), gv.values(), bv.values(), w, d_eff,
                                             T(kernels::kLayerNormEps), out.row(r));
  }
  return t.record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, weights = std::move(weights), d_eff, denoms](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        const auto& xv = tp.value(x);
        const auto& gv = tp.value(gain);
        const T* w = weights.empty() ? nullptr : weights.data();
        std::span<T> gx_all, gg, gb;
        if (tp.requires_grad(x)) gx_all = tp.grad(x).values();
        if (tp.requires_grad(gain)) gg = tp.grad(gain).values();
        if (tp.requires_grad(bias)) gb = tp.grad(bias).values();
        for (std::size_t r = 0; r < xv.rows(); ++r) {
          std::span<T> gx = gx_all.empty() ? std::span<T>{} : gx_all.subspan(r * xv.cols(), xv.cols());
          kernels::layernorm_row_backward<T>(xv.row(r), gv.values(), w, d_eff, (*denoms)[r], g.row(r), gx, gg, gb);
        }
      });
}

// Causal multi-head attention over one sequence. q, k, v are (seq × heads·head_dim);
// RoPE is applied to q and k per head, scores are scaled by 1/sqrt(head_dim), and
// head h's output is multiplied by head_weights[h] (empty = all ones).
template <Real T>
Var causal_attention(Tape<T>& t, Var q, Var k, Var v, std::size_t heads, std::size_t head_dim, double rope_base,
                     std::vector<T> head_weights) {
  const auto& qv = t.value(q);
  const auto& kv = t.value(k);
  const auto& vv = t.value(v);
  const std::size_t seq = qv.rows();
  const std::size_t width = heads * head_dim;
  if (qv.cols() != width || kv.shape() != qv.shape() || vv.shape() != qv.shape()) {
    throw DimensionError("attention operands must be seq x heads*head_dim");
  }
  if (head_dim % 2 != 0) throw ConfigError("rotary embedding needs an even head dimension");
  if (!head_weights.empty() && head_weights.size() != heads) throw DimensionError("head weight count");

  struct Saved {
    std::shared_ptr<kernels::RopeTable<T>> rope;
    Tensor<T> qr, kr;   // rotated q, k (seq × width)
    Tensor<T> probs;    // heads × seq × seq, lower triangle used
  };
  auto saved = std::make_shared<Saved>();
  saved->rope = std::make_shared<kernels::RopeTable<T>>(seq, head_dim, rope_base);
  saved->qr = qv;
  saved->kr = kv;
  for (std::size_t s = 0; s < seq; ++s) {
    for (std::size_t h = 0; h < heads; ++h) {
      saved->rope->rotate(saved->qr.row(s).subspan(h * head_dim, head_dim), s);
      saved->rope->rotate(saved->kr.row(s).subspan(h * head_dim, head_dim), s);
    }
  }
  saved->probs = Tensor<T>({heads, seq, seq});
  const T inv_scale = T{1} / std::sqrt(static_cast<T>(head_dim));
  Tensor<T> out({seq, width});
  std::vector<T> scores(seq);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * head_dim;
    const T hw = head_weights.empty() ? T{1} : head_weights[h];
    for (std::size_t i = 0; i < seq; ++i) {
      const T* qi = saved->qr.data() + i * width + off;
      for (std::size_t j = 0; j <= i; ++j) {
        const T* kj = saved->kr.data() + j * width + off;
        T dot{0};
        for (std::size_t c = 0; c < head_dim; ++c) dot += qi[c] * kj[c];
        scores[j] = dot * inv_scale;
      }
      T* p = saved->probs.data() + (h * seq + i) * seq;
      softmax_row<T>(std::span<const T>(scores.data(), i + 1), std::span<T>(p, i + 1));
      T* o = out.data() + i * width + off;
      for (std::size_t j = 0; j <= i; ++j) {
        const T* vj = vv.data() + j * width + off;
        for (std::size_t c = 0; c < head_dim; ++c) o[c] += p[j] * vj[c];
      }
      for (std::size_t c = 0; c < head_dim; ++c) o[c] *= hw;
    }
  }

  return t.record(
      std::move(out), {q, k, v},
      [q, k, v, heads, head_dim, hws = std::move(head_weights), saved, inv_scale](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        const auto& vv = tp.value(v);
        const std::size_t seq = g.rows();
        const std::size_t width = heads * head_dim;
        Tensor<T> dqr({seq, width}), dkr({seq, width}), dv({seq, width});
        std::vector<T> dp(seq), ds(seq);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * head_dim;
          const T hw = hws.empty() ? T{1} : hws[h];
          for (std::size_t i = 0; i < seq; ++i) {
            const T* gi = g.data() + i * width + off;
            const T* p = saved->probs.data() + (h * seq + i) * seq;
            T pdp{0};
            for (std::size_t j = 0; j <= i; ++j) {
              const T* vj = vv.data() + j * width + off;
              T dot{0};
              for (std::size_t c = 0; c < head_dim; ++c) dot += gi[c] * vj[c];
              dp[j] = dot * hw;
              pdp += p[j] * dp[j];
              T* dvj = dv.data() + j * width + off;
              for (std::size_t c = 0; c < head_dim; ++c) dvj[c] += p[j] * hw * gi[c];
            }
            const T* qi = saved->qr.data() + i * width + off;
            T* dqi = dqr.data() + i * width + off;
            for (std::size_t j = 0; j <= i; ++j) {
              ds[j] = p[j] * (dp[j] - pdp) * inv_scale;
              const T* kj = saved->kr.data() + j * width + off;
              T* dkj = dkr.data() + j * width + off;
              for (std::size_t c = 0; c < head_dim; ++c) {
                dqi[c] += ds[j] * kj[c];
                dkj[c] += ds[j] * qi[c];
              }
            }
          }
        }
        for (std::size_t s = 0; s < seq; ++s) {
          for (std::size_t h = 0; h < heads; ++h) {
            saved->rope->rotate(dqr.row(s).subspan(h * head_dim, head_dim), s, true);
            saved->rope->rotate(dkr.row(s).subspan(h * head_dim, head_dim), s, true);
          }
        }
        if (tp.requires_grad(q)) detail::accumulate(tp.grad(q), dqr);
        if (tp.requires_grad(k)) detail::accumulate(tp.grad(k), dkr);
        if (tp.requires_grad(v)) detail::accumulate(tp.grad(v), dv);
      });
}

// Sum over rows of row_weights[r] * -log softmax(logits[r])[targets[r]]. Returns a scalar.
template <Real T>
Var cross_entropy_sum(Tape<T>& t, Var logits, std::vector<std::size_t> targets, std::vector<T> row_weights) {
  const auto& lv = t.value(logits);
  if (targets.size() != lv.rows() || row_weights.size() != lv.rows()) {
    throw DimensionError("cross_entropy_sum: one target and weight per logits row required");
  }
  T total{0};
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    if (row_weights[r] == T{0}) continue;
    auto row = lv.row(r);
    if (targets[r] >= row.size()) throw InputError("target id out of range");
    const T mx = *std::max_element(row.begin(), row.end());
    T s{0};
    for (T x : row) s += std::exp(x - mx);
    const T nll = mx + std::log(s) - row[targets[r]];
    total += row_weights[r] * nll;
  }
  return t.record(Tensor<T>({1}, total), {logits},
                  [logits, targets = std::move(targets), row_weights = std::move(row_weights)](Tape<T>& tp,
                                                                                              std::size_t self) {
                    const T g = tp.grad(self)[0];
                    const auto& lv = tp.value(logits);
                    auto& gl = tp.grad(logits);
                    std::vector<T> p(lv.cols());
                    for (std::size_t r = 0; r < lv.rows(); ++r) {
                      if (row_weights[r] == T{0}) continue;
                      softmax_row<T>(lv.row(r), p);
                      auto dst = gl.row(r);
                      const T scale = g * row_weights[r];
                      for (std::size_t j = 0; j < p.size(); ++j) dst[j] += scale * p[j];
                      dst[targets[r]] -= scale;
                    }
                  });
}

}  // namespace ag
}  // namespace flmgrow
