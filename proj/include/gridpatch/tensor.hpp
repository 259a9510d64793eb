#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace gridpatch {

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Raised when operand shapes do not satisfy an operation's shape rule.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Dense row-major tensor of doubles.
class Tensor {
public:
    Tensor() : shape_{1}, values_(1, 0.0) {}

    explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
        check_extents();
        values_.assign(element_count(shape_), fill);
    }

    Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
        check_extents();
        if (values_.size() != element_count(shape_))
            throw ShapeError("tensor: " + std::to_string(values_.size()) + " values do not fill shape " +
                             to_string(shape_));
    }

    static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }
    static Tensor vector(std::vector<double> v) {
        const auto n = v.size();
        return Tensor(Shape{n}, std::move(v));
    }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
        return Tensor(Shape{rows, cols}, std::move(v));
    }
    static Tensor identity(std::size_t n) {
        Tensor t(Shape{n, n});
        for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
        return t;
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return values_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    /// Extent of the last axis.
    std::size_t cols() const noexcept { return shape_.back(); }
    /// Product of all axes but the last.
    std::size_t rows() const noexcept { return values_.size() / shape_.back(); }

    std::span<double> values() noexcept { return values_; }
    std::span<const double> values() const noexcept { return values_; }
    double* data() noexcept { return values_.data(); }
    const double* data() const noexcept { return values_.data(); }
    std::vector<double>& storage() noexcept { return values_; }
    const std::vector<double>& storage() const noexcept { return values_; }

    double& operator[](std::size_t i) noexcept { return values_[i]; }
    double operator[](std::size_t i) const noexcept { return values_[i]; }
    double& operator()(std::size_t r, std::size_t c) noexcept { return values_[r * cols() + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return values_[r * cols() + c]; }

    double item() const {
        if (values_.size() != 1) throw ShapeError("item: tensor of shape " + to_string(shape_) + " is not scalar");
        return values_[0];
    }

    bool all_finite() const noexcept {
        for (double v : values_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.values_ == b.values_;
    }

private:
    void check_extents() const {
        if (shape_.empty()) throw ShapeError("tensor: empty shape");
        for (auto e : shape_)
            if (e == 0) throw ShapeError("tensor: zero extent in shape " + to_string(shape_));
    }

    Shape shape_;
    std::vector<double> values_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("max_abs_diff: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace gridpatch
