#pragma once

#include <span>

#include "omat/tape.hpp"
#include "omat/tensor.hpp"

namespace omat {

// Elementwise; shapes must match exactly.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scalar_mul(const Tensor& x, double c);
// scale * x + shift
Tensor affine(const Tensor& x, double scale, double shift);

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);

// Trailing-axis broadcasts over the rows of a [m,n] matrix.
Tensor add_bias(const Tensor& x, const Tensor& bias);    // x[m,n] + bias[n]
Tensor mul_rowvec(const Tensor& x, const Tensor& v);     // x[m,n] * v[n]

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);

Tensor sum(const Tensor& x);  // scalar
Tensor mean(const Tensor& x); // scalar

// Clamp to [0,1]; gradient passes through on the closed interval
// (pass-through at exactly 0 and 1), zero outside.
Tensor clamp01(const Tensor& x);

// Concatenate along the trailing axis. All parts rank 1, or all rank 2 with
// equal row counts.
Tensor concat(std::span<const Tensor> parts);

Tensor reshape(const Tensor& x, Shape s);

// Forward: round(x * levels) / levels, rounding half away from zero.
// Backward: identity (straight-through). Entries must already be in [0,1].
Tensor round_straight_through(const Tensor& x, int levels);

// Numerically stable binary cross-entropy on logits,
//   max(s,0) - s*y + ln(1 + e^{-|s|}),
// reduced by mean over elements. y must be exactly 0 or 1.
Tensor bce_with_logits(const Tensor& s, double y);

// Elementwise variant with per-element targets (each 0 or 1), no reduction.
Tensor bce_with_logits_elems(const Tensor& s, const Tensor& y);

double sigmoid_value(double x);

} // namespace omat
