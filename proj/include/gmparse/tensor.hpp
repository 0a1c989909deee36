#pragma once

#include <algorithm>
#include <cmath>
#include <random>

#include "gmparse/common.hpp"

namespace gmparse {

// Plain dense value tensor, row-major. The autodiff graph stores these as
// node payloads; outside the graph it is the common currency for images,
// targets and checkpoints.
template <class T>
struct TensorND {
    Shape shape;
    std::vector<T> data;

    TensorND() = default;
    explicit TensorND(Shape s) : shape(std::move(s)), data(numel(shape), T(0)) {}
    TensorND(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != numel(shape))
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }

    std::size_t size() const { return data.size(); }
    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    static TensorND zeros(Shape s) { return TensorND(std::move(s)); }

    static TensorND full(Shape s, T v) {
        TensorND t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static TensorND uniform(Shape s, T lo, T hi, std::uint64_t seed) {
        TensorND t(std::move(s));
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> dist{double(lo), double(hi)};
        for (auto& v : t.data) v = T(dist(rng));
        return t;
    }

    static TensorND normal(Shape s, T mean, T stddev, std::uint64_t seed) {
        TensorND t(std::move(s));
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> dist{double(mean), double(stddev)};
        for (auto& v : t.data) v = T(dist(rng));
        return t;
    }

    template <class U>
    TensorND<U> cast() const {
        TensorND<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
        return out;
    }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(double(v))) return false;
        return true;
    }
};

template <class T>
T max_abs(const std::vector<T>& v) {
    T m = 0;
    for (T x : v) m = std::max(m, std::abs(x));
    return m;
}

}  // namespace gmparse
