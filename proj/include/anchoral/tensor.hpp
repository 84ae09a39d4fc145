#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace anchoral {

// Dense row-major tensor of doubles. Shapes are fixed at construction; the
// model only ever needs rank 1..3.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> s)
        : shape(std::move(s)), data(count(shape), 0.0) {}

    static std::size_t count(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (auto d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }

    std::size_t size() const { return data.size(); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    double& at2(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    double at2(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

    double& at3(std::size_t i, std::size_t j, std::size_t k) {
        return data[(i * shape[1] + j) * shape[2] + k];
    }
    double at3(std::size_t i, std::size_t j, std::size_t k) const {
        return data[(i * shape[1] + j) * shape[2] + k];
    }

    void zero() { std::fill(data.begin(), data.end(), 0.0); }

    bool finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

}  // namespace anchoral
