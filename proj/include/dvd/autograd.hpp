#pragma once

#define EIGEN_DONT_PARALLELIZE 1
#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "dvd/tensor.hpp"

namespace dvd {

// Reverse-mode autodiff over Tensor<T>. Graphs are built per forward call and
// freed when the last Var handle drops. Leaf gradients are written to a
// GradSink instead of the node itself, so concurrent backward passes over
// shared parameters never race; batch reductions sum sinks in a fixed order.

template <typename T>
struct VarNode;

template <typename T>
using Var = std::shared_ptr<VarNode<T>>;

template <typename T>
class GradSink {
public:
    void accumulate(const Var<T>& node, const Tensor<T>& delta);
    Tensor<T>* find(const VarNode<T>* leaf) {
        auto it = leaf_grads_.find(leaf);
        return it == leaf_grads_.end() ? nullptr : &it->second;
    }
    const std::unordered_map<const VarNode<T>*, Tensor<T>>& leaf_grads() const {
        return leaf_grads_;
    }
    void add_scaled_from(const GradSink& other, T scale) {
        for (const auto& [leaf, g] : other.leaf_grads_) {
            auto it = leaf_grads_.find(leaf);
            if (it == leaf_grads_.end()) {
                Tensor<T> scaled(g.shape());
                for (int64_t i = 0; i < g.numel(); ++i)
                    scaled[i] = g[i] * scale;
                leaf_grads_.emplace(leaf, std::move(scaled));
            } else {
                for (int64_t i = 0; i < g.numel(); ++i)
                    it->second[i] += g[i] * scale;
            }
        }
    }

private:
    std::unordered_map<const VarNode<T>*, Tensor<T>> leaf_grads_;
};

template <typename T>
struct VarNode {
    Tensor<T> value;
    Tensor<T> grad;  // interior accumulation buffer, allocated on demand
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<Var<T>> parents;
    std::function<void(VarNode<T>&, GradSink<T>&)> backward_fn;

    const Tensor<T>& ensure_grad() {
        if (grad.numel() != value.numel())
            grad = Tensor<T>::zeros(value.shape());
        return grad;
    }
};

template <typename T>
void GradSink<T>::accumulate(const Var<T>& node, const Tensor<T>& delta) {
    if (!node->requires_grad)
        return;
    if (node->is_leaf) {
        auto it = leaf_grads_.find(node.get());
        if (it == leaf_grads_.end()) {
            leaf_grads_.emplace(node.get(), delta);
        } else {
            Tensor<T>& g = it->second;
            for (int64_t i = 0; i < delta.numel(); ++i)
                g[i] += delta[i];
        }
        return;
    }
    node->ensure_grad();
    for (int64_t i = 0; i < delta.numel(); ++i)
        node->grad[i] += delta[i];
}

template <typename T>
Var<T> make_leaf(Tensor<T> value, bool requires_grad) {
    auto n = std::make_shared<VarNode<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->is_leaf = true;
    return n;
}

template <typename T>
Var<T> constant(Tensor<T> value) {
    return make_leaf(std::move(value), false);
}

template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents,
               std::function<void(VarNode<T>&, GradSink<T>&)> backward_fn) {
    auto n = std::make_shared<VarNode<T>>();
    n->value = std::move(value);
    n->is_leaf = false;
    bool rg = false;
    for (const auto& p : parents)
        rg = rg || p->requires_grad;
    n->requires_grad = rg;
    if (rg) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
    }
    return n;
}

/// Backpropagates from a scalar (or any) root. Seeds the root gradient with
/// ones and writes leaf gradients into `sink`.
template <typename T>
void backward(const Var<T>& root, GradSink<T>& sink) {
    if (!root->requires_grad)
        return;
    // Iterative topological order over the requires_grad subgraph.
    std::vector<VarNode<T>*> order;
    std::unordered_set<VarNode<T>*> visited;
    std::vector<std::pair<VarNode<T>*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            VarNode<T>* p = node->parents[idx].get();
            ++idx;
            if (p->requires_grad && !p->is_leaf && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad.fill(T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        VarNode<T>* node = *it;
        if (node->backward_fn && node->grad.numel() == node->value.numel())
            node->backward_fn(*node, sink);
        if (node != root.get())
            node->grad = Tensor<T>();  // release as soon as consumed
    }
}

// ---------------------------------------------------------------------------
// Eigen-backed matrix helpers on raw tensors
// ---------------------------------------------------------------------------

template <typename T>
using EigenRowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<const EigenRowMat<T>> as_mat(const Tensor<T>& t, int rows, int cols) {
    return Eigen::Map<const EigenRowMat<T>>(t.data(), rows, cols);
}

template <typename T>
Eigen::Map<EigenRowMat<T>> as_mat(Tensor<T>& t, int rows, int cols) {
    return Eigen::Map<EigenRowMat<T>>(t.data(), rows, cols);
}

/// (n,k) x (k,m) -> (n,m) on raw tensors.
template <typename T>
Tensor<T> matmul_raw(const Tensor<T>& a, const Tensor<T>& b, int n, int k, int m,
                     bool transpose_a = false, bool transpose_b = false) {
    Tensor<T> out({n, m});
    auto o = as_mat(out, n, m);
    if (!transpose_a && !transpose_b)
        o.noalias() = as_mat(a, n, k) * as_mat(b, k, m);
    else if (transpose_a && !transpose_b)
        o.noalias() = as_mat(a, k, n).transpose() * as_mat(b, k, m);
    else if (!transpose_a && transpose_b)
        o.noalias() = as_mat(a, n, k) * as_mat(b, m, k).transpose();
    else
        o.noalias() = as_mat(a, k, n).transpose() * as_mat(b, m, k).transpose();
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require(a->value.same_shape(b->value), "autograd add: shape mismatch");
    Tensor<T> out = a->value + b->value;
    return make_op<T>(std::move(out), {a, b}, [a, b](VarNode<T>& self, GradSink<T>& sink) {
        sink.accumulate(a, self.grad);
        sink.accumulate(b, self.grad);
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require(a->value.same_shape(b->value), "autograd sub: shape mismatch");
    Tensor<T> out = a->value - b->value;
    return make_op<T>(std::move(out), {a, b}, [a, b](VarNode<T>& self, GradSink<T>& sink) {
        sink.accumulate(a, self.grad);
        Tensor<T> neg(self.grad.shape());
        for (int64_t i = 0; i < neg.numel(); ++i)
            neg[i] = -self.grad[i];
        sink.accumulate(b, neg);
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
    Tensor<T> out = a->value * s;
    return make_op<T>(std::move(out), {a}, [a, s](VarNode<T>& self, GradSink<T>& sink) {
        Tensor<T> g(self.grad.shape());
        for (int64_t i = 0; i < g.numel(); ++i)
            g[i] = self.grad[i] * s;
        sink.accumulate(a, g);
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require(a->value.same_shape(b->value), "autograd mul: shape mismatch");
    Tensor<T> out(a->value.shape());
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = a->value[i] * b->value[i];
    return make_op<T>(std::move(out), {a, b}, [a, b](VarNode<T>& self, GradSink<T>& sink) {
        Tensor<T> ga(self.grad.shape()), gb(self.grad.shape());
        for (int64_t i = 0; i < ga.numel(); ++i) {
            ga[i] = self.grad[i] * b->value[i];
            gb[i] = self.grad[i] * a->value[i];
        }
        sink.accumulate(a, ga);
        sink.accumulate(b, gb);
    });
}

template <typename T>
Var<T> reshape(const Var<T>& a, std::vector<int> shape) {
    Tensor<T> out = a->value.reshaped(shape);
    return make_op<T>(std::move(out), {a}, [a](VarNode<T>& self, GradSink<T>& sink) {
        sink.accumulate(a, self.grad.reshaped(a->value.shape()));
    });
}

namespace detail {

inline std::vector<int64_t> row_strides(const std::vector<int>& shape) {
    std::vector<int64_t> s(shape.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
        s[static_cast<size_t>(i)] = acc;
        acc *= shape[static_cast<size_t>(i)];
    }
    return s;
}

template <typename T>
Tensor<T> permute_raw(const Tensor<T>& x, const std::vector<int>& axes) {
    const auto& shape = x.shape();
    const int r = x.rank();
    require(static_cast<int>(axes.size()) == r, "permute: axes rank mismatch");
    std::vector<int> out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i)
        out_shape[static_cast<size_t>(i)] = shape[static_cast<size_t>(axes[static_cast<size_t>(i)])];
    Tensor<T> out(out_shape);
    const auto in_strides = row_strides(shape);
    const auto out_strides = row_strides(out_shape);
    const int64_t n = x.numel();
    std::vector<int64_t> perm_stride(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i)
        perm_stride[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(axes[static_cast<size_t>(i)])];
    for (int64_t o = 0; o < n; ++o) {
        int64_t rem = o, src = 0;
        for (int i = 0; i < r; ++i) {
            const int64_t c = rem / out_strides[static_cast<size_t>(i)];
            rem -= c * out_strides[static_cast<size_t>(i)];
            src += c * perm_stride[static_cast<size_t>(i)];
        }
        out[o] = x[src];
    }
    return out;
}

inline std::vector<int> inverse_axes(const std::vector<int>& axes) {
    std::vector<int> inv(axes.size());
    for (size_t i = 0; i < axes.size(); ++i)
        inv[static_cast<size_t>(axes[i])] = static_cast<int>(i);
    return inv;
}

}  // namespace detail

template <typename T>
Var<T> permute(const Var<T>& a, std::vector<int> axes) {
    Tensor<T> out = detail::permute_raw(a->value, axes);
    return make_op<T>(std::move(out), {a},
                      [a, axes](VarNode<T>& self, GradSink<T>& sink) {
                          sink.accumulate(a, detail::permute_raw(self.grad,
                                                                 detail::inverse_axes(axes)));
                      });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
    Tensor<T> out(a->value.shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
        const T x = a->value[i];
        out[i] = x / (T(1) + std::exp(-x));
    }
    return make_op<T>(std::move(out), {a}, [a](VarNode<T>& self, GradSink<T>& sink) {
        Tensor<T> g(self.grad.shape());
        for (int64_t i = 0; i < g.numel(); ++i) {
            const T x = a->value[i];
            const T s = T(1) / (T(1) + std::exp(-x));
            g[i] = self.grad[i] * s * (T(1) + x * (T(1) - s));
        }
        sink.accumulate(a, g);
    });
}

/// Softmax over the last axis of an arbitrary-rank tensor.
template <typename T>
Var<T> softmax_lastdim(const Var<T>& a) {
    const int d = a->value.dim(a->value.rank() - 1);
    const int64_t rows = a->value.numel() / d;
    Tensor<T> out(a->value.shape());
    for (int64_t r = 0; r < rows; ++r) {
        const T* x = a->value.data() + r * d;
        T* y = out.data() + r * d;
        T mx = x[0];
        for (int i = 1; i < d; ++i)
            mx = std::max(mx, x[i]);
        T sum = T(0);
        for (int i = 0; i < d; ++i) {
            y[i] = std::exp(x[i] - mx);
            sum += y[i];
        }
        const T inv = T(1) / sum;
        for (int i = 0; i < d; ++i)
            y[i] *= inv;
    }
    return make_op<T>(std::move(out), {a}, [a, d, rows](VarNode<T>& self, GradSink<T>& sink) {
        Tensor<T> g(self.grad.shape());
        for (int64_t r = 0; r < rows; ++r) {
            const T* y = self.value.data() + r * d;
            const T* dy = self.grad.data() + r * d;
            T dot = T(0);
            for (int i = 0; i < d; ++i)
                dot += dy[i] * y[i];
            T* dx = g.data() + r * d;
            for (int i = 0; i < d; ++i)
                dx[i] = y[i] * (dy[i] - dot);
        }
        sink.accumulate(a, g);
    });
}

/// LayerNorm over the last axis with learned scale/shift.
template <typename T>
Var<T> layer_norm_lastdim(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                          T eps = T(1e-5)) {
    const int d = x->value.dim(x->value.rank() - 1);
    require(gamma->value.numel() == d && beta->value.numel() == d,
            "layer_norm: scale/shift size mismatch");
    const int64_t rows = x->value.numel() / d;
    Tensor<T> out(x->value.shape());
    Tensor<T> xhat(x->value.shape());
    Tensor<T> inv_sigma({static_cast<int>(rows)});
    for (int64_t r = 0; r < rows; ++r) {
        const T* px = x->value.data() + r * d;
        T mean = T(0);
        for (int i = 0; i < d; ++i)
            mean += px[i];
        mean /= T(d);
        T var = T(0);
        for (int i = 0; i < d; ++i) {
            const T c = px[i] - mean;
            var += c * c;
        }
        var /= T(d);
        const T is = T(1) / std::sqrt(var + eps);
        inv_sigma[r] = is;
        T* ph = xhat.data() + r * d;
        T* po = out.data() + r * d;
        for (int i = 0; i < d; ++i) {
            ph[i] = (px[i] - mean) * is;
            po[i] = ph[i] * gamma->value[i] + beta->value[i];
        }
    }
    return make_op<T>(
        std::move(out), {x, gamma, beta},
        [x, gamma, beta, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma), d,
         rows](VarNode<T>& self, GradSink<T>& sink) {
            Tensor<T> dx(x->value.shape());
            Tensor<T> dgamma(gamma->value.shape());
            Tensor<T> dbeta(beta->value.shape());
            for (int64_t r = 0; r < rows; ++r) {
                const T* dy = self.grad.data() + r * d;
                const T* xh = xhat.data() + r * d;
                T* pdx = dx.data() + r * d;
                T m1 = T(0), m2 = T(0);
                for (int i = 0; i < d; ++i) {
                    const T t = dy[i] * gamma->value[i];
                    m1 += t;
                    m2 += t * xh[i];
                    dgamma[i] += dy[i] * xh[i];
                    dbeta[i] += dy[i];
                }
                m1 /= T(d);
                m2 /= T(d);
                const T is = inv_sigma[r];
                for (int i = 0; i < d; ++i)
                    pdx[i] = is * (dy[i] * gamma->value[i] - m1 - xh[i] * m2);
            }
            sink.accumulate(x, dx);
            sink.accumulate(gamma, dgamma);
            sink.accumulate(beta, dbeta);
        });
}

// ---------------------------------------------------------------------------
// Linear algebra ops
// ---------------------------------------------------------------------------

/// (n,k) x (k,m) -> (n,m).
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    require(a->value.rank() == 2 && b->value.rank() == 2, "matmul: expects rank-2");
    const int n = a->value.dim(0), k = a->value.dim(1), m = b->value.dim(1);
    require(b->value.dim(0) == k, "matmul: inner dimension mismatch");
    Tensor<T> out = matmul_raw(a->value, b->value, n, k, m);
    return make_op<T>(std::move(out), {a, b},
                      [a, b, n, k, m](VarNode<T>& self, GradSink<T>& sink) {
                          // dA = dOut * B^T ; dB = A^T * dOut
                          Tensor<T> da = matmul_raw(self.grad, b->value, n, m, k, false, true);
                          Tensor<T> db = matmul_raw(a->value, self.grad, k, n, m, true, false);
                          sink.accumulate(a, da.reshaped(a->value.shape()));
                          sink.accumulate(b, db.reshaped(b->value.shape()));
                      });
}

/// Batched matmul: (B,n,k) x (B,k,m) -> (B,n,m).
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b) {
    require(a->value.rank() == 3 && b->value.rank() == 3, "bmm: expects rank-3");
    const int B = a->value.dim(0), n = a->value.dim(1), k = a->value.dim(2);
    const int m = b->value.dim(2);
    require(b->value.dim(0) == B && b->value.dim(1) == k, "bmm: shape mismatch");
    Tensor<T> out({B, n, m});
    for (int i = 0; i < B; ++i) {
        Eigen::Map<EigenRowMat<T>>(out.data() + static_cast<int64_t>(i) * n * m, n, m)
            .noalias() =
            Eigen::Map<const EigenRowMat<T>>(a->value.data() + static_cast<int64_t>(i) * n * k, n, k) *
            Eigen::Map<const EigenRowMat<T>>(b->value.data() + static_cast<int64_t>(i) * k * m, k, m);
    }
    return make_op<T>(std::move(out), {a, b},
                      [a, b, B, n, k, m](VarNode<T>& self, GradSink<T>& sink) {
                          Tensor<T> da(a->value.shape()), db(b->value.shape());
                          for (int i = 0; i < B; ++i) {
                              auto dOut = Eigen::Map<const EigenRowMat<T>>(
                                  self.grad.data() + static_cast<int64_t>(i) * n * m, n, m);
                              auto A = Eigen::Map<const EigenRowMat<T>>(
                                  a->value.data() + static_cast<int64_t>(i) * n * k, n, k);
                              auto Bm = Eigen::Map<const EigenRowMat<T>>(
                                  b->value.data() + static_cast<int64_t>(i) * k * m, k, m);
                              Eigen::Map<EigenRowMat<T>>(da.data() + static_cast<int64_t>(i) * n * k, n, k)
                                  .noalias() = dOut * Bm.transpose();
                              Eigen::Map<EigenRowMat<T>>(db.data() + static_cast<int64_t>(i) * k * m, k, m)
                                  .noalias() = A.transpose() * dOut;
                          }
                          sink.accumulate(a, da);
                          sink.accumulate(b, db);
                      });
}

/// x (n,d) + row vector (d), broadcast over rows.
template <typename T>
Var<T> add_rowvec(const Var<T>& x, const Var<T>& v) {
    const int d = x->value.dim(x->value.rank() - 1);
    require(v->value.numel() == d, "add_rowvec: width mismatch");
    const int64_t rows = x->value.numel() / d;
    Tensor<T> out(x->value.shape());
    for (int64_t r = 0; r < rows; ++r)
        for (int i = 0; i < d; ++i)
            out[r * d + i] = x->value[r * d + i] + v->value[i];
    return make_op<T>(std::move(out), {x, v},
                      [x, v, rows, d](VarNode<T>& self, GradSink<T>& sink) {
                          sink.accumulate(x, self.grad);
                          Tensor<T> dv(v->value.shape());
                          for (int64_t r = 0; r < rows; ++r)
                              for (int i = 0; i < d; ++i)
                                  dv[i] += self.grad[r * d + i];
                          sink.accumulate(v, dv);
                      });
}

/// x (C,H,W) + per-channel vector (C).
template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& v) {
    require(x->value.rank() == 3, "add_channel_bias: expects (C,H,W)");
    const int C = x->value.dim(0);
    const int64_t hw = static_cast<int64_t>(x->value.dim(1)) * x->value.dim(2);
    require(v->value.numel() == C, "add_channel_bias: channel mismatch");
    Tensor<T> out(x->value.shape());
    for (int c = 0; c < C; ++c)
        for (int64_t i = 0; i < hw; ++i)
            out[c * hw + i] = x->value[c * hw + i] + v->value[c];
    return make_op<T>(std::move(out), {x, v},
                      [x, v, C, hw](VarNode<T>& self, GradSink<T>& sink) {
                          sink.accumulate(x, self.grad);
                          Tensor<T> dv(v->value.shape());
                          for (int c = 0; c < C; ++c)
                              for (int64_t i = 0; i < hw; ++i)
                                  dv[c] += self.grad[c * hw + i];
                          sink.accumulate(v, dv);
                      });
}

/// Row lookup: table (V,d), ids -> (n,d).
template <typename T>
Var<T> embedding(const Var<T>& table, const std::vector<int>& ids) {
    require(table->value.rank() == 2, "embedding: table must be (V,d)");
    const int V = table->value.dim(0), d = table->value.dim(1);
    const int n = static_cast<int>(ids.size());
    Tensor<T> out({n, d});
    for (int i = 0; i < n; ++i) {
        require(ids[static_cast<size_t>(i)] >= 0 && ids[static_cast<size_t>(i)] < V,
                "embedding: token id " + std::to_string(ids[static_cast<size_t>(i)]) +
                    " outside vocabulary of size " + std::to_string(V));
        std::copy_n(table->value.data() + static_cast<int64_t>(ids[static_cast<size_t>(i)]) * d,
                    d, out.data() + static_cast<int64_t>(i) * d);
    }
    return make_op<T>(std::move(out), {table},
                      [table, ids, d](VarNode<T>& self, GradSink<T>& sink) {
                          Tensor<T> dt(table->value.shape());
                          for (size_t i = 0; i < ids.size(); ++i) {
                              T* dst = dt.data() + static_cast<int64_t>(ids[i]) * d;
                              const T* src = self.grad.data() + static_cast<int64_t>(i) * d;
                              for (int j = 0; j < d; ++j)
                                  dst[j] += src[j];
                          }
                          sink.accumulate(table, dt);
                      });
}

// ---------------------------------------------------------------------------
// Convolution and resampling
// ---------------------------------------------------------------------------

namespace detail {

/// im2col for 3x3 kernels, padding 1: x (C,H,W) -> cols (C*9, OH*OW).
template <typename T>
Tensor<T> im2col_3x3(const Tensor<T>& x, int stride) {
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int OH = (H + 2 - 3) / stride + 1;
    const int OW = (W + 2 - 3) / stride + 1;
    Tensor<T> cols({C * 9, OH * OW});
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                T* dst = cols.data() + static_cast<int64_t>((c * 9 + ky * 3 + kx)) * OH * OW;
                for (int oy = 0; oy < OH; ++oy) {
                    const int iy = oy * stride + ky - 1;
                    for (int ox = 0; ox < OW; ++ox) {
                        const int ix = ox * stride + kx - 1;
                        dst[oy * OW + ox] =
                            (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                ? x[(static_cast<int64_t>(c) * H + iy) * W + ix]
                                : T(0);
                    }
                }
            }
        }
    }
    return cols;
}

template <typename T>
void col2im_3x3_add(const Tensor<T>& cols, int C, int H, int W, int stride, Tensor<T>& dx) {
    const int OH = (H + 2 - 3) / stride + 1;
    const int OW = (W + 2 - 3) / stride + 1;
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const T* src = cols.data() + static_cast<int64_t>((c * 9 + ky * 3 + kx)) * OH * OW;
                for (int oy = 0; oy < OH; ++oy) {
                    const int iy = oy * stride + ky - 1;
                    if (iy < 0 || iy >= H)
                        continue;
                    for (int ox = 0; ox < OW; ++ox) {
                        const int ix = ox * stride + kx - 1;
                        if (ix < 0 || ix >= W)
                            continue;
                        dx[(static_cast<int64_t>(c) * H + iy) * W + ix] += src[oy * OW + ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// 3x3 convolution, padding 1, stride 1 or 2. x (Cin,H,W), w (Cout,Cin,3,3),
/// b (Cout) -> (Cout,OH,OW). im2col columns are recomputed in the backward
/// pass instead of saved.
template <typename T>
Var<T> conv3x3(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride = 1) {
    require(x->value.rank() == 3, "conv3x3: input must be (C,H,W)");
    require(w->value.rank() == 4 && w->value.dim(2) == 3 && w->value.dim(3) == 3,
            "conv3x3: weight must be (Cout,Cin,3,3)");
    const int Cin = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
    require(w->value.dim(1) == Cin, "conv3x3: channel mismatch: input " +
                                        std::to_string(Cin) + ", weight expects " +
                                        std::to_string(w->value.dim(1)));
    require(stride == 1 || stride == 2, "conv3x3: stride must be 1 or 2");
    const int Cout = w->value.dim(0);
    require(b->value.numel() == Cout, "conv3x3: bias size mismatch");
    const int OH = (H + 2 - 3) / stride + 1;
    const int OW = (W + 2 - 3) / stride + 1;

    Tensor<T> cols = detail::im2col_3x3(x->value, stride);
    Tensor<T> out({Cout, OH, OW});
    as_mat(out, Cout, OH * OW).noalias() =
        as_mat(w->value, Cout, Cin * 9) * as_mat(cols, Cin * 9, OH * OW);
    for (int c = 0; c < Cout; ++c) {
        T* p = out.data() + static_cast<int64_t>(c) * OH * OW;
        for (int i = 0; i < OH * OW; ++i)
            p[i] += b->value[c];
    }
    return make_op<T>(
        std::move(out), {x, w, b},
        [x, w, b, Cin, H, W, Cout, OH, OW, stride](VarNode<T>& self, GradSink<T>& sink) {
            Tensor<T> cols = detail::im2col_3x3(x->value, stride);
            Tensor<T> dw({Cout, Cin, 3, 3});
            as_mat(dw, Cout, Cin * 9).noalias() =
                as_mat(self.grad, Cout, OH * OW) * as_mat(cols, Cin * 9, OH * OW).transpose();
            Tensor<T> db({Cout});
            for (int c = 0; c < Cout; ++c) {
                const T* p = self.grad.data() + static_cast<int64_t>(c) * OH * OW;
                T s = T(0);
                for (int i = 0; i < OH * OW; ++i)
                    s += p[i];
                db[c] = s;
            }
            Tensor<T> dcols({Cin * 9, OH * OW});
            as_mat(dcols, Cin * 9, OH * OW).noalias() =
                as_mat(w->value, Cout, Cin * 9).transpose() * as_mat(self.grad, Cout, OH * OW);
            Tensor<T> dx(x->value.shape());
            detail::col2im_3x3_add(dcols, Cin, H, W, stride, dx);
            sink.accumulate(x, dx);
            sink.accumulate(w, dw);
            sink.accumulate(b, db);
        });
}

/// 1x1 convolution: channel-mixing linear map over (C,H,W).
template <typename T>
Var<T> conv1x1(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    require(x->value.rank() == 3, "conv1x1: input must be (C,H,W)");
    const int Cin = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
    require(w->value.rank() == 2 && w->value.dim(1) == Cin, "conv1x1: weight must be (Cout,Cin)");
    const int Cout = w->value.dim(0);
    require(b->value.numel() == Cout, "conv1x1: bias size mismatch");
    Tensor<T> out({Cout, H, W});
    as_mat(out, Cout, H * W).noalias() =
        as_mat(w->value, Cout, Cin) * as_mat(x->value, Cin, H * W);
    for (int c = 0; c < Cout; ++c) {
        T* p = out.data() + static_cast<int64_t>(c) * H * W;
        for (int i = 0; i < H * W; ++i)
            p[i] += b->value[c];
    }
    return make_op<T>(
        std::move(out), {x, w, b},
        [x, w, b, Cin, H, W, Cout](VarNode<T>& self, GradSink<T>& sink) {
            Tensor<T> dw({Cout, Cin});
            as_mat(dw, Cout, Cin).noalias() =
                as_mat(self.grad, Cout, H * W) * as_mat(x->value, Cin, H * W).transpose();
            Tensor<T> db({Cout});
            for (int c = 0; c < Cout; ++c) {
                const T* p = self.grad.data() + static_cast<int64_t>(c) * H * W;
                T s = T(0);
                for (int i = 0; i < H * W; ++i)
                    s += p[i];
                db[c] = s;
            }
            Tensor<T> dx(x->value.shape());
            as_mat(dx, Cin, H * W).noalias() =
                as_mat(w->value, Cout, Cin).transpose() * as_mat(self.grad, Cout, H * W);
            sink.accumulate(x, dx);
            sink.accumulate(w, dw);
            sink.accumulate(b, db);
        });
}

/// Nearest-neighbour 2x spatial upsample of (C,H,W).
template <typename T>
Var<T> upsample2x(const Var<T>& x) {
    require(x->value.rank() == 3, "upsample2x: input must be (C,H,W)");
    const int C = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
    Tensor<T> out({C, H * 2, W * 2});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < 2 * H; ++y)
            for (int xw = 0; xw < 2 * W; ++xw)
                out[(static_cast<int64_t>(c) * 2 * H + y) * 2 * W + xw] =
                    x->value[(static_cast<int64_t>(c) * H + y / 2) * W + xw / 2];
    return make_op<T>(std::move(out), {x}, [x, C, H, W](VarNode<T>& self, GradSink<T>& sink) {
        Tensor<T> dx(x->value.shape());
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < 2 * H; ++y)
                for (int xw = 0; xw < 2 * W; ++xw)
                    dx[(static_cast<int64_t>(c) * H + y / 2) * W + xw / 2] +=
                        self.grad[(static_cast<int64_t>(c) * 2 * H + y) * 2 * W + xw];
        sink.accumulate(x, dx);
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

/// Mean squared error against a fixed target; returns a scalar Var of shape {1}.
template <typename T>
Var<T> mse_to_target(const Var<T>& pred, const Tensor<T>& target) {
    require(pred->value.same_shape(target), "mse_to_target: shape mismatch");
    const int64_t n = pred->value.numel();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(pred->value[i]) - static_cast<double>(target[i]);
        acc += d * d;
    }
    Tensor<T> out({1});
    out[0] = static_cast<T>(acc / static_cast<double>(n));
    return make_op<T>(std::move(out), {pred},
                      [pred, target, n](VarNode<T>& self, GradSink<T>& sink) {
                          Tensor<T> g(pred->value.shape());
                          const T c = self.grad[0] * T(2) / static_cast<T>(n);
                          for (int64_t i = 0; i < n; ++i)
                              g[i] = c * (pred->value[i] - target[i]);
                          sink.accumulate(pred, g);
                      });
}

}  // namespace dvd
