#include "omat/tensor.hpp"

#include <cmath>

#include "omat/error.hpp"

namespace omat {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

bool shapes_equal(const Shape& a, const Shape& b) {
    return a == b;
}

Tensor::Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one extent");
    for (std::size_t e : shape) {
        if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("shape " + shape_str(shape) + " does not match data length " +
                         std::to_string(data.size()));
    }
}

Tensor Tensor::zeros(Shape s) {
    std::vector<double> d(shape_numel(s), 0.0);
    return Tensor(std::move(s), std::move(d));
}

Tensor Tensor::full(Shape s, double value) {
    std::vector<double> d(shape_numel(s), value);
    return Tensor(std::move(s), std::move(d));
}

Tensor Tensor::scalar(double value) {
    return Tensor({1}, {value});
}

Tensor Tensor::row(std::vector<double> d) {
    const std::size_t n = d.size();
    return Tensor({1, n}, std::move(d));
}

double Tensor::item() const {
    if (data.size() != 1) {
        throw ShapeError("item() requires a scalar tensor, got shape " + shape_str(shape));
    }
    return data[0];
}

bool Tensor::all_finite() const {
    for (double x : data) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

Tensor Tensor::detached() const {
    Tensor t(shape, data);
    return t;
}

Tensor Tensor::reshaped(Shape s) const {
    if (shape_numel(s) != data.size()) {
        throw ShapeError("cannot reshape " + shape_str(shape) + " to " + shape_str(s));
    }
    Tensor t(std::move(s), data);
    return t;
}

} // namespace omat
