#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

namespace omat {

using Shape = std::vector<std::size_t>;

class Tape;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
bool shapes_equal(const Shape& a, const Shape& b);

// Row-major 64-bit float tensor. Plain value type; when produced by an op
// whose operands live on a Tape it additionally carries the tape handle of
// its recording node.
struct Tensor {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    Tape* tape = nullptr;
    int node = -1;

    Tensor() = default;
    Tensor(Shape s, std::vector<double> d);

    static Tensor zeros(Shape s);
    static Tensor full(Shape s, double value);
    static Tensor scalar(double value);
    static Tensor row(std::vector<double> d); // shape [1, n]

    std::size_t size() const { return data.size(); }
    double item() const; // scalar tensors only
    bool on_tape() const { return tape != nullptr && node >= 0; }
    bool all_finite() const;

    // Value copy with no tape linkage.
    Tensor detached() const;

    Tensor reshaped(Shape s) const; // metadata-only change, detached
};

} // namespace omat
