#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <vector>

#include "dvd/common.hpp"

namespace dvd {

/// Dense row-major tensor. The scalar type is a template parameter; the
/// pipelines run in float, test oracles and gradient checks in double.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(numel_of(shape_), T(0));
    }

    Tensor(std::vector<int> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        require(static_cast<int64_t>(data_.size()) == numel_of(shape_),
                "tensor: data size does not match shape " + shape_to_string(shape_));
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, T value) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    static Tensor randn(std::vector<int> shape, Rng& rng) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_)
            v = static_cast<T>(rng.normal());
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor reshaped(std::vector<int> shape) const {
        require(numel_of(shape) == numel(),
                "reshape: element count mismatch " + shape_to_string(shape_) + " -> " +
                    shape_to_string(shape));
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        return t;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> t(shape_);
        for (int64_t i = 0; i < numel(); ++i)
            t[i] = static_cast<U>(data_[static_cast<size_t>(i)]);
        return t;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(static_cast<double>(v)))
                return false;
        return true;
    }

    static int64_t numel_of(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int d : shape) {
            require(d >= 0, "tensor: negative dimension");
            n *= d;
        }
        return n;
    }

private:
    std::vector<int> shape_;
    std::vector<T> data_;
};

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.same_shape(b), "tensor add: shape mismatch " + shape_to_string(a.shape()) +
                                 " vs " + shape_to_string(b.shape()));
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i)
        out[i] = a[i] + b[i];
    return out;
}

template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.same_shape(b), "tensor sub: shape mismatch " + shape_to_string(a.shape()) +
                                 " vs " + shape_to_string(b.shape()));
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i)
        out[i] = a[i] - b[i];
    return out;
}

template <typename T>
Tensor<T> operator*(const Tensor<T>& a, T s) {
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i)
        out[i] = a[i] * s;
    return out;
}

template <typename T>
Tensor<T> operator*(T s, const Tensor<T>& a) {
    return a * s;
}

template <typename T>
double l2_norm(const Tensor<T>& a) {
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i)
        s += static_cast<double>(a[i]) * static_cast<double>(a[i]);
    return std::sqrt(s);
}

template <typename T>
double relative_l2(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.same_shape(b), "relative_l2: shape mismatch");
    double num = 0.0, den = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        num += d * d;
        den += static_cast<double>(b[i]) * static_cast<double>(b[i]);
    }
    if (den == 0.0)
        return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return std::sqrt(num / den);
}

template <typename T>
bool exactly_equal(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b))
        return false;
    for (int64_t i = 0; i < a.numel(); ++i)
        if (!(a[i] == b[i]))
            return false;
    return true;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.same_shape(b), "max_abs_diff: shape mismatch");
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

}  // namespace dvd
