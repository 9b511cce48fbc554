#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <vector>

#include "qa/common.hpp"
#include "qa/rng.hpp"

namespace qa {

// Contiguous row-major n-d array. Shape is fixed at construction; the data
// buffer is owned. Scalar type is float for training, double for checks.
template <typename T>
struct DenseArray {
    Shape shape;
    std::vector<T> data;

    DenseArray() = default;

    explicit DenseArray(Shape s) : shape(std::move(s)), data(static_cast<std::size_t>(numel_of(shape)), T(0)) {
        for (auto d : shape) {
            if (d <= 0) throw ShapeError("DenseArray: nonpositive extent in shape " + shape_str(shape));
        }
    }

    DenseArray(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
        if (numel_of(shape) != static_cast<std::int64_t>(data.size())) {
            throw ShapeError("DenseArray: shape " + shape_str(shape) + " does not match buffer of " +
                             std::to_string(data.size()) + " scalars");
        }
    }

    static DenseArray zeros(Shape s) { return DenseArray(std::move(s)); }

    static DenseArray full(Shape s, T v) {
        DenseArray a(std::move(s));
        std::fill(a.data.begin(), a.data.end(), v);
        return a;
    }

    static DenseArray ones(Shape s) { return full(std::move(s), T(1)); }

    static DenseArray scalar(T v) { return DenseArray({1}, {v}); }

    static DenseArray randn(Shape s, Rng& rng, T stddev = T(1)) {
        DenseArray a(std::move(s));
        for (auto& v : a.data) v = static_cast<T>(rng.normal()) * stddev;
        return a;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }

    std::int64_t extent(int axis) const {
        int r = rank();
        if (axis < 0) axis += r;
        if (axis < 0 || axis >= r) throw ShapeError("axis out of range for shape " + shape_str(shape));
        return shape[static_cast<std::size_t>(axis)];
    }

    T& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    // Row-major offset for an explicit multi-index.
    std::int64_t offset(std::initializer_list<std::int64_t> idx) const {
        std::int64_t off = 0;
        std::size_t k = 0;
        for (auto i : idx) {
            off = off * shape[k] + i;
            ++k;
        }
        return off;
    }

    T& at(std::initializer_list<std::int64_t> idx) { return data[static_cast<std::size_t>(offset(idx))]; }
    const T& at(std::initializer_list<std::int64_t> idx) const {
        return data[static_cast<std::size_t>(offset(idx))];
    }

    DenseArray reshaped(Shape s) const {
        if (numel_of(s) != numel()) {
            throw ShapeError("reshape from " + shape_str(shape) + " to " + shape_str(s) + " changes element count");
        }
        return DenseArray(std::move(s), data);
    }

    bool all_finite() const {
        for (T v : data) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }
};

template <typename T>
bool same_shape(const DenseArray<T>& a, const DenseArray<T>& b) {
    return a.shape == b.shape;
}

template <typename T>
double max_abs_diff(const DenseArray<T>& a, const DenseArray<T>& b) {
    if (!same_shape(a, b)) throw ShapeError("max_abs_diff: shapes " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    }
    return m;
}

// True if `suffix` equals the trailing extents of `full`.
inline bool is_suffix_shape(const Shape& suffix, const Shape& full) {
    if (suffix.size() > full.size()) return false;
    std::size_t off = full.size() - suffix.size();
    for (std::size_t i = 0; i < suffix.size(); ++i) {
        if (suffix[i] != full[off + i]) return false;
    }
    return true;
}

}  // namespace qa
