#pragma once

#include "capt/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace capt {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape &shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_volume(const Shape &shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/**
 * Dense row-major array of doubles.
 *
 * Rank 1 tensors are vectors, rank 2 are matrices (rows x cols), rank 3 is used
 * for the R x C x D token grid of the depthwise convolution. Scalars are
 * represented as shape [1].
 */
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_volume(shape_), fill) {
        check_shape();
    }

    Tensor(Shape shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape();
        if (data_.size() != shape_volume(shape_)) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_string(shape_));
        }
    }

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    static Tensor vector(std::initializer_list<double> values) {
        return Tensor({values.size()}, std::vector<double>(values));
    }

    static Tensor vector(std::vector<double> values) {
        const std::size_t n = values.size();
        return Tensor({n}, std::move(values));
    }

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        std::vector<double> data;
        data.reserve(r * c);
        for (const auto &row : rows) {
            if (row.size() != c) {
                throw ShapeError("ragged matrix literal");
            }
            data.insert(data.end(), row.begin(), row.end());
        }
        return Tensor({r, c}, std::move(data));
    }

    static Tensor identity(std::size_t n) {
        Tensor t({n, n});
        for (std::size_t i = 0; i < n; ++i) {
            t.data_[i * n + i] = 1.0;
        }
        return t;
    }

    [[nodiscard]] const Shape &shape() const noexcept { return shape_; }
    [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] std::size_t dim(std::size_t i) const { return shape_.at(i); }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

    /// Rows of a matrix; a vector counts as one row.
    [[nodiscard]] std::size_t rows() const { return rank() == 1 ? 1 : shape_.at(0); }
    [[nodiscard]] std::size_t cols() const { return rank() == 1 ? shape_.at(0) : shape_.at(1); }

    [[nodiscard]] std::span<const double> data() const noexcept { return data_; }
    [[nodiscard]] std::span<double> data() noexcept { return data_; }
    [[nodiscard]] const std::vector<double> &values() const noexcept { return data_; }

    double &operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double &at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    [[nodiscard]] double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    [[nodiscard]] std::span<const double> row(std::size_t r) const {
        return std::span<const double>(data_).subspan(r * cols(), cols());
    }
    /// Row `r` of a matrix copied out as a [1 x cols] tensor.
    [[nodiscard]] Tensor row_tensor(std::size_t r) const {
        const auto v = row(r);
        return Tensor({1, v.size()}, std::vector<double>(v.begin(), v.end()));
    }
    [[nodiscard]] std::span<double> row(std::size_t r) {
        return std::span<double>(data_).subspan(r * cols(), cols());
    }

    [[nodiscard]] double item() const {
        if (data_.size() != 1) {
            throw ShapeError("item() on tensor of shape " + shape_string(shape_));
        }
        return data_[0];
    }

    [[nodiscard]] Tensor reshaped(Shape shape) const {
        if (shape_volume(shape) != data_.size()) {
            throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    [[nodiscard]] bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    /// Bitwise equality of shape and values.
    friend bool operator==(const Tensor &a, const Tensor &b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

    bool requires_grad = false;

  private:
    void check_shape() const {
        for (auto d : shape_) {
            if (d == 0) {
                throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape_));
            }
        }
    }

    Shape shape_;
    std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

inline double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline Tensor normalized(const Tensor &t) {
    const double n = l2_norm(t.data());
    if (n == 0.0) {
        throw DegenerateInputError("cannot normalize a zero vector");
    }
    Tensor out = t;
    for (auto &v : out.data()) {
        v /= n;
    }
    return out;
}

}  // namespace capt
