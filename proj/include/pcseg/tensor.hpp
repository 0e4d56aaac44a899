#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "pcseg/common.hpp"

namespace pcseg {

using Shape = std::vector<std::int64_t>;

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

// Dense row-major n-d array. The scalar type selects the numeric profile:
// double for tests and gradient checks, float for runtime.
template <class S>
struct TensorData {
    Shape shape;
    std::vector<S> v;

    TensorData() = default;
    explicit TensorData(Shape sh) : shape(std::move(sh)), v(static_cast<std::size_t>(shape_numel(shape)), S(0)) {
        for (auto d : shape) PCSEG_CHECK(d >= 0, "negative dimension in " << shape_str(shape));
    }
    TensorData(Shape sh, std::vector<S> data) : shape(std::move(sh)), v(std::move(data)) {
        PCSEG_CHECK(static_cast<std::int64_t>(v.size()) == shape_numel(shape),
                    "data length " << v.size() << " does not match shape " << shape_str(shape));
    }

    static TensorData zeros(Shape sh) { return TensorData(std::move(sh)); }
    static TensorData full(Shape sh, S value) {
        TensorData t(std::move(sh));
        std::fill(t.v.begin(), t.v.end(), value);
        return t;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(v.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    std::int64_t dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

    S& at(std::int64_t i) { return v[static_cast<std::size_t>(i)]; }
    S at(std::int64_t i) const { return v[static_cast<std::size_t>(i)]; }
    S& at(std::int64_t i, std::int64_t j) { return v[static_cast<std::size_t>(i * dim(1) + j)]; }
    S at(std::int64_t i, std::int64_t j) const { return v[static_cast<std::size_t>(i * dim(1) + j)]; }
    S& at(std::int64_t i, std::int64_t j, std::int64_t k) {
        return v[static_cast<std::size_t>((i * dim(1) + j) * dim(2) + k)];
    }
    S at(std::int64_t i, std::int64_t j, std::int64_t k) const {
        return v[static_cast<std::size_t>((i * dim(1) + j) * dim(2) + k)];
    }

    S* row(std::int64_t i) { return v.data() + i * dim(1); }
    const S* row(std::int64_t i) const { return v.data() + i * dim(1); }

    bool same_shape(const TensorData& o) const { return shape == o.shape; }

    void fill(S value) { std::fill(v.begin(), v.end(), value); }

    template <class T>
    TensorData<T> cast() const {
        TensorData<T> out(shape);
        for (std::size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<T>(v[i]);
        return out;
    }
};

template <class S>
double max_abs_diff(const TensorData<S>& a, const TensorData<S>& b) {
    PCSEG_CHECK(a.same_shape(b), "shape mismatch " << shape_str(a.shape) << " vs " << shape_str(b.shape));
    double m = 0;
    for (std::size_t i = 0; i < a.v.size(); ++i) {
        double d = std::abs(static_cast<double>(a.v[i]) - static_cast<double>(b.v[i]));
        if (d > m) m = d;
    }
    return m;
}

}  // namespace pcseg
