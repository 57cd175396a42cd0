#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "dynaguide/errors.hpp"

namespace dynaguide {

/// Dense NCHW tensor. Vectors are stored as (N, C, 1, 1).
template <class T>
struct Tensor {
    using Shape = std::array<std::size_t, 4>;

    Shape shape{0, 0, 0, 0};
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0)) : shape(s), data(s[0] * s[1] * s[2] * s[3], fill) {}
    Tensor(Shape s, std::vector<T> values) : shape(s), data(std::move(values)) {
        if (data.size() != s[0] * s[1] * s[2] * s[3]) throw ShapeError("tensor payload does not match shape");
    }

    std::size_t n() const noexcept { return shape[0]; }
    std::size_t c() const noexcept { return shape[1]; }
    std::size_t h() const noexcept { return shape[2]; }
    std::size_t w() const noexcept { return shape[3]; }
    std::size_t size() const noexcept { return data.size(); }
    std::size_t plane() const noexcept { return shape[2] * shape[3]; }
    std::size_t sample_size() const noexcept { return shape[1] * shape[2] * shape[3]; }

    T* sample(std::size_t i) noexcept { return data.data() + i * sample_size(); }
    const T* sample(std::size_t i) const noexcept { return data.data() + i * sample_size(); }

    T& operator()(std::size_t i, std::size_t ch, std::size_t y, std::size_t x) {
        return data[((i * shape[1] + ch) * shape[2] + y) * shape[3] + x];
    }
    T operator()(std::size_t i, std::size_t ch, std::size_t y, std::size_t x) const {
        return data[((i * shape[1] + ch) * shape[2] + y) * shape[3] + x];
    }

    std::string shape_string() const {
        return "(" + std::to_string(shape[0]) + "," + std::to_string(shape[1]) + "," + std::to_string(shape[2]) +
               "," + std::to_string(shape[3]) + ")";
    }
};

template <class T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape == b.shape;
}

template <class To, class From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
    Tensor<To> out;
    out.shape = t.shape;
    out.data.assign(t.data.begin(), t.data.end());
    return out;
}

}  // namespace dynaguide
