#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "unigen/core/common.hpp"
#include "unigen/core/rng.hpp"

namespace unigen::core {

// Dense row-major tensor. Data is a flat vector; shape gives the extents.
template <class T>
struct Tensor {
    Shape shape;
    std::vector<T> v;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), v(static_cast<size_t>(numel(shape))) {}
    Tensor(Shape s, std::vector<T> data) : shape(std::move(s)), v(std::move(data)) {
        require(static_cast<int64_t>(v.size()) == numel(shape),
                "tensor: data length " + std::to_string(v.size()) + " does not match shape " +
                    shape_str(shape));
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

    static Tensor full(Shape s, T value) {
        Tensor t(std::move(s));
        for (auto& x : t.v) x = value;
        return t;
    }

    static Tensor scalar(T value) { return Tensor({1}, {value}); }

    static Tensor randn(Shape s, Rng& rng, T stddev = T(1)) {
        Tensor t(std::move(s));
        for (auto& x : t.v) x = static_cast<T>(rng.next_gaussian() * static_cast<double>(stddev));
        return t;
    }

    static Tensor trunc_randn(Shape s, Rng& rng, T stddev) {
        Tensor t(std::move(s));
        for (auto& x : t.v) x = static_cast<T>(rng.next_trunc_gaussian(static_cast<double>(stddev)));
        return t;
    }

    int64_t size() const { return static_cast<int64_t>(v.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    T* data() { return v.data(); }
    const T* data() const { return v.data(); }

    // Extent by axis; negative axes count from the back.
    int64_t dim(int i) const {
        int r = rank();
        if (i < 0) i += r;
        require(i >= 0 && i < r, "tensor: axis out of range for " + shape_str(shape));
        return shape[static_cast<size_t>(i)];
    }

    bool finite() const {
        for (const T& x : v)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.v.resize(v.size());
        for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
        return out;
    }
};

template <class T>
inline double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a.shape, b.shape, "max_abs_diff");
    double m = 0;
    for (int64_t i = 0; i < a.size(); ++i) {
        double d = std::fabs(static_cast<double>(a.v[i]) - static_cast<double>(b.v[i]));
        if (d > m) m = d;
    }
    return m;
}

}  // namespace unigen::core
