#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "seqshort/errors.hpp"

namespace seqshort {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != 0) out << "x";
        out << shape[i];
    }
    out << ']';
    return out.str();
}

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major tensor of rank 1 or 2.
///
/// Rank-1 tensors of length n behave as 1 x n matrices wherever a matrix is
/// expected, which keeps bias vectors and logits interchangeable with rows.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
        check_shape();
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape();
        if (shape_size(shape_) != data_.size()) {
            throw DimensionError("tensor of shape " + shape_string(shape_) + " cannot hold " +
                                 std::to_string(data_.size()) + " elements");
        }
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, T fill = T{}) { return Tensor({rows, cols}, fill); }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> data) {
        return Tensor({rows, cols}, std::move(data));
    }

    static Tensor identity(std::size_t n) {
        Tensor out = matrix(n, n);
        for (std::size_t i = 0; i < n; ++i) out(i, i) = T{1};
        return out;
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::size_t rows() const noexcept { return shape_.size() == 2 ? shape_[0] : (shape_.empty() ? 0 : 1); }
    std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

    T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
    const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
    std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols(), cols()}; }

    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    bool all_finite() const {
        for (const T v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    template <class U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

private:
    void check_shape() const {
        if (shape_.empty() || shape_.size() > 2) {
            throw DimensionError("tensors must have rank 1 or 2, got " + shape_string(shape_));
        }
        for (const std::size_t dim : shape_) {
            if (dim == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape_));
        }
    }

    Shape shape_;
    std::vector<T> data_;
};

template <class T>
bool same_matrix_shape(const Tensor<T>& a, const Tensor<T>& b) {
    return a.rows() == b.rows() && a.cols() == b.cols();
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.size() != b.size()) {
        throw DimensionError("cannot compare " + shape_string(a.shape()) + " with " + shape_string(b.shape()));
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    }
    return worst;
}

}  // namespace seqshort
