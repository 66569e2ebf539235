#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "dvd/autograd.hpp"
#include "dvd/sha256.hpp"

namespace dvd {

/// Named trainable leaf. Parameters register themselves with their owning
/// network in construction order; that order is the canonical one for
/// hashing and checkpoint payloads.
template <typename T>
struct Parameter {
    std::string name;
    Var<T> var;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> value)
        : name(std::move(n)), var(make_leaf(std::move(value), false)) {}

    Tensor<T>& value() { return var->value; }
    const Tensor<T>& value() const { return var->value; }
    const std::vector<int>& shape() const { return var->value.shape(); }
    void set_trainable(bool on) { var->requires_grad = on; }
    bool trainable() const { return var->requires_grad; }
};

template <typename T>
using ParamList = std::vector<Parameter<T>*>;

template <typename T>
void set_trainable(const ParamList<T>& params, bool on) {
    for (auto* p : params)
        p->set_trainable(on);
}

/// Identity hash of a parameter set: SHA-256 over (name, shape, float32 LE
/// payload) of every parameter in registration order.
template <typename T>
std::string params_hash(const ParamList<T>& params) {
    Sha256 h;
    for (const auto* p : params) {
        h.update(p->name);
        for (int d : p->shape()) {
            const uint32_t v = static_cast<uint32_t>(d);
            uint8_t b[4] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8),
                            static_cast<uint8_t>(v >> 16), static_cast<uint8_t>(v >> 24)};
            h.update(b, 4);
        }
        for (int64_t i = 0; i < p->value().numel(); ++i) {
            const float f = static_cast<float>(p->value()[i]);
            uint32_t bits;
            std::memcpy(&bits, &f, 4);
            uint8_t b[4] = {static_cast<uint8_t>(bits), static_cast<uint8_t>(bits >> 8),
                            static_cast<uint8_t>(bits >> 16), static_cast<uint8_t>(bits >> 24)};
            h.update(b, 4);
        }
    }
    return Sha256::hex(h.finish());
}

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> kaiming_init(std::vector<int> shape, int fan_in, Rng& rng) {
    Tensor<T> t(std::move(shape));
    const double s = std::sqrt(2.0 / std::max(1, fan_in));
    for (int64_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<T>(rng.normal() * s);
    return t;
}

template <typename T>
Tensor<T> normal_init(std::vector<int> shape, double stddev, Rng& rng) {
    Tensor<T> t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<T>(rng.normal() * stddev);
    return t;
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// y = x @ w + b with w stored as (in, out).
template <typename T>
struct Linear {
    Parameter<T> w, b;

    Linear() = default;
    Linear(const std::string& name, int in, int out, Rng& rng, ParamList<T>& reg,
           bool zero_init = false)
        : w(name + ".weight",
            zero_init ? Tensor<T>::zeros({in, out}) : kaiming_init<T>({in, out}, in, rng)),
          b(name + ".bias", Tensor<T>::zeros({out})) {
        reg.push_back(&w);
        reg.push_back(&b);
    }

    Var<T> operator()(const Var<T>& x) const { return add_rowvec(matmul(x, w.var), b.var); }
};

template <typename T>
struct Conv3x3Layer {
    Parameter<T> w, b;
    int stride = 1;

    Conv3x3Layer() = default;
    Conv3x3Layer(const std::string& name, int cin, int cout, int stride_, Rng& rng,
                 ParamList<T>& reg, bool zero_init = false)
        : w(name + ".weight", zero_init ? Tensor<T>::zeros({cout, cin, 3, 3})
                                        : kaiming_init<T>({cout, cin, 3, 3}, cin * 9, rng)),
          b(name + ".bias", Tensor<T>::zeros({cout})),
          stride(stride_) {
        reg.push_back(&w);
        reg.push_back(&b);
    }

    Var<T> operator()(const Var<T>& x) const { return conv3x3(x, w.var, b.var, stride); }
};

template <typename T>
struct Conv1x1Layer {
    Parameter<T> w, b;

    Conv1x1Layer() = default;
    Conv1x1Layer(const std::string& name, int cin, int cout, Rng& rng, ParamList<T>& reg,
                 bool zero_init = false)
        : w(name + ".weight",
            zero_init ? Tensor<T>::zeros({cout, cin}) : kaiming_init<T>({cout, cin}, cin, rng)),
          b(name + ".bias", Tensor<T>::zeros({cout})) {
        reg.push_back(&w);
        reg.push_back(&b);
    }

    Var<T> operator()(const Var<T>& x) const { return conv1x1(x, w.var, b.var); }
};

template <typename T>
struct LayerNorm {
    Parameter<T> gamma, beta;

    LayerNorm() = default;
    LayerNorm(const std::string& name, int dim, ParamList<T>& reg)
        : gamma(name + ".scale", Tensor<T>::full({dim}, T(1))),
          beta(name + ".shift", Tensor<T>::zeros({dim})) {
        reg.push_back(&gamma);
        reg.push_back(&beta);
    }

    /// Normalizes the last axis.
    Var<T> operator()(const Var<T>& x) const {
        return layer_norm_lastdim(x, gamma.var, beta.var);
    }

    /// Normalizes the channel axis of a (C,H,W) feature map at each position.
    Var<T> channels(const Var<T>& x) const {
        const int C = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
        Var<T> rows = reshape(permute(x, {1, 2, 0}), {H * W, C});
        Var<T> normed = layer_norm_lastdim(rows, gamma.var, beta.var);
        return permute(reshape(normed, {H, W, C}), {2, 0, 1});
    }
};

/// Multi-head scaled dot-product attention. Queries come from x (B,n,dq);
/// keys/values from ctx (B,m,dkv). Output width equals dq. The output
/// projection may be zero-initialized (motion blocks rely on this).
template <typename T>
struct MultiheadAttention {
    Parameter<T> wq, wk, wv, wo, bo;
    int heads = 1;
    int dim = 0;

    MultiheadAttention() = default;
    MultiheadAttention(const std::string& name, int dq, int dkv, int heads_, Rng& rng,
                       ParamList<T>& reg, bool zero_out = false)
        : wq(name + ".wq", normal_init<T>({dq, dq}, 1.0 / std::sqrt(static_cast<double>(dq)), rng)),
          wk(name + ".wk", normal_init<T>({dkv, dq}, 1.0 / std::sqrt(static_cast<double>(dkv)), rng)),
          wv(name + ".wv", normal_init<T>({dkv, dq}, 1.0 / std::sqrt(static_cast<double>(dkv)), rng)),
          wo(name + ".wo", zero_out ? Tensor<T>::zeros({dq, dq})
                                    : normal_init<T>({dq, dq}, 1.0 / std::sqrt(static_cast<double>(dq)), rng)),
          bo(name + ".bo", Tensor<T>::zeros({dq})),
          heads(heads_),
          dim(dq) {
        require(dq % heads_ == 0, "attention: heads must divide query dim");
        reg.push_back(&wq);
        reg.push_back(&wk);
        reg.push_back(&wv);
        reg.push_back(&wo);
        reg.push_back(&bo);
    }

    Var<T> operator()(const Var<T>& x, const Var<T>& ctx) const {
        const int B = x->value.dim(0), n = x->value.dim(1);
        const int m = ctx->value.dim(1);
        const int dh = dim / heads;
        auto split = [&](const Var<T>& rows, int len) {
            // (B*len, dim) -> (B*heads, len, dh)
            Var<T> r = reshape(rows, {B, len, heads, dh});
            return reshape(permute(r, {0, 2, 1, 3}), {B * heads, len, dh});
        };
        Var<T> q = split(matmul(reshape(x, {B * n, x->value.dim(2)}), wq.var), n);
        Var<T> kv_rows = reshape(ctx, {B * m, ctx->value.dim(2)});
        Var<T> k = split(matmul(kv_rows, wk.var), m);
        Var<T> v = split(matmul(kv_rows, wv.var), m);
        Var<T> scores = scale(bmm(q, permute(k, {0, 2, 1})),
                              static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
        Var<T> att = softmax_lastdim(scores);
        Var<T> mixed = bmm(att, v);  // (B*heads, n, dh)
        Var<T> merged = reshape(
            permute(reshape(mixed, {B, heads, n, dh}), {0, 2, 1, 3}), {B * n, dim});
        Var<T> out = add_rowvec(matmul(merged, wo.var), bo.var);
        return reshape(out, {B, n, dim});
    }
};

// ---------------------------------------------------------------------------
// Sinusoidal embeddings
// ---------------------------------------------------------------------------

/// Standard sinusoidal embedding of a nonnegative integer position.
template <typename T>
Tensor<T> sinusoidal_embedding(double position, int dim) {
    require(dim % 2 == 0, "sinusoidal_embedding: dim must be even");
    Tensor<T> out({dim});
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        out[i] = static_cast<T>(std::sin(position * freq));
        out[half + i] = static_cast<T>(std::cos(position * freq));
    }
    return out;
}

/// (F, dim) table of absolute frame-position encodings.
template <typename T>
Tensor<T> frame_position_table(int frames, int dim) {
    Tensor<T> out({frames, dim});
    for (int f = 0; f < frames; ++f) {
        Tensor<T> row = sinusoidal_embedding<T>(static_cast<double>(f), dim);
        std::copy_n(row.data(), dim, out.data() + static_cast<int64_t>(f) * dim);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Frame stacking (video <-> per-frame graphs)
// ---------------------------------------------------------------------------

/// Stacks F rank-3 vars into a rank-4 (F,C,H,W) var.
template <typename T>
Var<T> stack_frames(const std::vector<Var<T>>& frames) {
    require(!frames.empty(), "stack_frames: empty input");
    const auto& s = frames.front()->value.shape();
    const int64_t per = frames.front()->value.numel();
    Tensor<T> out({static_cast<int>(frames.size()), s[0], s[1], s[2]});
    for (size_t f = 0; f < frames.size(); ++f) {
        require(frames[f]->value.shape() == s, "stack_frames: ragged frame shapes");
        std::copy_n(frames[f]->value.data(), per, out.data() + static_cast<int64_t>(f) * per);
    }
    std::vector<Var<T>> parents(frames.begin(), frames.end());
    return make_op<T>(std::move(out), parents,
                      [frames, per](VarNode<T>& self, GradSink<T>& sink) {
                          for (size_t f = 0; f < frames.size(); ++f) {
                              Tensor<T> g(frames[f]->value.shape());
                              std::copy_n(self.grad.data() + static_cast<int64_t>(f) * per, per,
                                          g.data());
                              sink.accumulate(frames[f], g);
                          }
                      });
}

/// Extracts frame f of a rank-4 (F,C,H,W) var as a rank-3 var.
template <typename T>
Var<T> frame_of(const Var<T>& video, int f) {
    const auto& s = video->value.shape();
    require(video->value.rank() == 4, "frame_of: expects (F,C,H,W)");
    require(f >= 0 && f < s[0], "frame_of: frame index out of range");
    const int64_t per = static_cast<int64_t>(s[1]) * s[2] * s[3];
    Tensor<T> out({s[1], s[2], s[3]});
    std::copy_n(video->value.data() + f * per, per, out.data());
    return make_op<T>(std::move(out), {video},
                      [video, f, per](VarNode<T>& self, GradSink<T>& sink) {
                          Tensor<T> g(video->value.shape());
                          std::copy_n(self.grad.data(), per, g.data() + f * per);
                          sink.accumulate(video, g);
                      });
}

template <typename T>
Tensor<T> slice_frame(const Tensor<T>& video, int f) {
    const auto& s = video.shape();
    require(video.rank() == 4 && f >= 0 && f < s[0], "slice_frame: bad index/rank");
    const int64_t per = static_cast<int64_t>(s[1]) * s[2] * s[3];
    Tensor<T> out({s[1], s[2], s[3]});
    std::copy_n(video.data() + f * per, per, out.data());
    return out;
}

}  // namespace dvd
