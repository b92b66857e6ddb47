#include "omat/ops.hpp"

#include <cmath>
#include <cstdlib>

#include "omat/error.hpp"

namespace omat {

namespace {

Tape* tape_of(std::initializer_list<const Tensor*> operands) {
    Tape* tape = nullptr;
    for (const Tensor* t : operands) {
        if (!t->on_tape()) continue;
        if (tape && tape != t->tape) {
            throw DomainError("operands belong to different tapes");
        }
        tape = t->tape;
    }
    return tape;
}

int node_of(const Tensor& t) {
    return t.on_tape() ? t.node : -1;
}

Tensor finish(Tape* tape, Shape shape, std::vector<double> data,
              std::vector<int> inputs, Tape::BackwardFn backward) {
    Tensor out(std::move(shape), std::move(data));
    if (tape) {
        out.tape = tape;
        out.node = tape->record(out.shape, std::move(inputs), std::move(backward));
    }
    return out;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!shapes_equal(a.shape, b.shape)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                         " vs " + shape_str(b.shape));
    }
}

void check_nonempty(const Tensor& t, const char* op) {
    if (t.data.empty()) throw ShapeError(std::string(op) + ": empty tensor");
}

// Elementwise binary op with constant per-element slopes wrt each operand.
Tensor ew_binary(const Tensor& a, const Tensor& b, const char* name,
                 double (*fwd)(double, double), double da, double db) {
    check_same_shape(a, b, name);
    check_nonempty(a, name);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a.data[i], b.data[i]);
    Tape* tape = tape_of({&a, &b});
    const std::size_t n = a.size();
    return finish(tape, a.shape, std::move(out), {node_of(a), node_of(b)},
                  [n, da, db](const std::vector<double>& u, const std::vector<bool>& need) {
                      std::vector<std::vector<double>> g(2);
                      if (need[0]) {
                          g[0].resize(n);
                          for (std::size_t i = 0; i < n; ++i) g[0][i] = da * u[i];
                      }
                      if (need[1]) {
                          g[1].resize(n);
                          for (std::size_t i = 0; i < n; ++i) g[1][i] = db * u[i];
                      }
                      return g;
                  });
}

// Elementwise unary op; `deriv` is the local derivative captured per element.
Tensor ew_unary(const Tensor& x, std::vector<double> out, std::vector<double> deriv) {
    Tape* tape = tape_of({&x});
    return finish(tape, x.shape, std::move(out), {node_of(x)},
                  [d = std::move(deriv)](const std::vector<double>& u,
                                         const std::vector<bool>& need) {
                      std::vector<std::vector<double>> g(1);
                      if (need[0]) {
                          g[0].resize(u.size());
                          for (std::size_t i = 0; i < u.size(); ++i) g[0][i] = d[i] * u[i];
                      }
                      return g;
                  });
}

} // namespace

double sigmoid_value(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

Tensor add(const Tensor& a, const Tensor& b) {
    return ew_binary(a, b, "add", [](double x, double y) { return x + y; }, 1.0, 1.0);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return ew_binary(a, b, "sub", [](double x, double y) { return x - y; }, 1.0, -1.0);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    check_nonempty(a, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data[i] * b.data[i];
    Tape* tape = tape_of({&a, &b});
    return finish(tape, a.shape, std::move(out), {node_of(a), node_of(b)},
                  [av = a.data, bv = b.data](const std::vector<double>& u,
                                             const std::vector<bool>& need) {
                      std::vector<std::vector<double>> g(2);
                      if (need[0]) {
                          g[0].resize(u.size());
                          for (std::size_t i = 0; i < u.size(); ++i) g[0][i] = bv[i] * u[i];
                      }
                      if (need[1]) {
                          g[1].resize(u.size());
                          for (std::size_t i = 0; i < u.size(); ++i) g[1][i] = av[i] * u[i];
                      }
                      return g;
                  });
}

Tensor scalar_mul(const Tensor& x, double c) {
    return affine(x, c, 0.0);
}

Tensor affine(const Tensor& x, double scale, double shift) {
    check_nonempty(x, "affine");
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * x.data[i] + shift;
    Tape* tape = tape_of({&x});
    return finish(tape, x.shape, std::move(out), {node_of(x)},
                  [scale](const std::vector<double>& u, const std::vector<bool>& need) {
                      std::vector<std::vector<double>> g(1);
                      if (need[0]) {
                          g[0].resize(u.size());
                          for (std::size_t i = 0; i < u.size(); ++i) g[0][i] = scale * u[i];
                      }
                      return g;
                  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0]) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
    }
    const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a.data[i * k + p];
            const double* brow = &b.data[p * n];
            double* orow = &out[i * n];
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    Tape* tape = tape_of({&a, &b});
    return finish(tape, {m, n}, std::move(out), {node_of(a), node_of(b)},
                  [av = a.data, bv = b.data, m, k, n](const std::vector<double>& u,
                                                      const std::vector<bool>& need) {
                      std::vector<std::vector<double>> g(2);
                      if (need[0]) { // dA = U * B^T
                          g[0].assign(m * k, 0.0);
                          for (std::size_t i = 0; i < m; ++i) {
                              for (std::size_t j = 0; j < n; ++j) {
                                  const double uv = u[i * n + j];
                                  for (std::size_t p = 0; p < k; ++p) {
                                      g[0][i * k + p] += uv * bv[p * n + j];
                                  }
                              }
                          }
                      }
                      if (need[1]) { // dB = A^T * U
                          g[1].assign(k * n, 0.0);
                          for (std::size_t i = 0; i < m; ++i) {
                              for (std::size_t p = 0; p < k; ++p) {
                                  const double avv = av[i * k + p];
                                  for (std::size_t j = 0; j < n; ++j) {
                                      g[1][p * n + j] += avv * u[i * n + j];
                                  }
                              }
                          }
                      }
                      return g;
                  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    if (x.shape.size() != 2 || bias.shape.size() != 1 || bias.shape[0] != x.shape[1]) {
        throw ShapeError("add_bias: expected [m,n] and [n], got " + shape_str(x.shape) +
                         " and " + shape_str(bias.shape));
    }
    const std::size_t m = x.shape[0], n = x.shape[1];
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.data[i * n + j] + bias.data[j];
    }
    Tape* tape = tape_of({&x, &bias});
    return finish(tape, x.shape, std::move(out), {node_of(x), node_of(bias)},
                  [m, n](const std::vector<double>& u, const std::vector<bool>& need) {
                      std::vector<std::vector<double>> g(2);
                      if (need[0]) g[0] = u;
                      if (need[1]) { // column sums
                          g[1].assign(n, 0.0);
                          for (std::size_t i = 0; i < m; ++i) {
                              for (std::size_t j = 0; j < n; ++j) g[1][j] += u[i * n + j];
                          }
                      }
                      return g;
                  });
}

Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
    if (x.shape.size() != 2 || v.shape.size() != 1 || v.shape[0] != x.shape[1]) {
        throw ShapeError("mul_rowvec: expected [m,n] and [n], got " + shape_str(x.shape) +
                         " and " + shape_str(v.shape));
    }
    const std::size_t m = x.shape[0], n = x.shape[1];
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.data[i * n + j] * v.data[j];
    }
    Tape* tape = tape_of({&x, &v});
    return finish(tape, x.shape, std::move(out), {node_of(x), node_of(v)},
                  [xv = x.data, vv = v.data, m, n](const std::vector<double>& u,
                                                   const std::vector<bool>& need) {
                      std::vector<std::vector<double>> g(2);
                      if (need[0]) {
                          g[0].resize(m * n);
                          for (std::size_t i = 0; i < m; ++i) {
                              for (std::size_t j = 0; j < n; ++j) {
                                  g[0][i * n + j] = u[i * n + j] * vv[j];
                              }
                          }
                      }
                      if (need[1]) {
                          g[1].assign(n, 0.0);
                          for (std::size_t i = 0; i < m; ++i) {
                              for (std::size_t j = 0; j < n; ++j) {
                                  g[1][j] += u[i * n + j] * xv[i * n + j];
                              }
                          }
                      }
                      return g;
                  });
}

Tensor relu(const Tensor& x) {
    check_nonempty(x, "relu");
    std::vector<double> out(x.size()), d(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const bool pos = x.data[i] > 0.0;
        out[i] = pos ? x.data[i] : 0.0;
        d[i] = pos ? 1.0 : 0.0;
    }
    return ew_unary(x, std::move(out), std::move(d));
}

Tensor sigmoid(const Tensor& x) {
    check_nonempty(x, "sigmoid");
    std::vector<double> out(x.size()), d(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double s = sigmoid_value(x.data[i]);
        out[i] = s;
        d[i] = s * (1.0 - s);
    }
    return ew_unary(x, std::move(out), std::move(d));
}

Tensor tanh(const Tensor& x) {
    check_nonempty(x, "tanh");
    std::vector<double> out(x.size()), d(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double t = std::tanh(x.data[i]);
        out[i] = t;
        d[i] = 1.0 - t * t;
    }
    return ew_unary(x, std::move(out), std::move(d));
}

namespace {

Tensor reduce(const Tensor& x, const char* name, double denom) {
    check_nonempty(x, name);
    double acc = 0.0;
    for (double v : x.data) acc += v;
    acc /= denom;
    Tape* tape = tape_of({&x});
    const std::size_t n = x.size();
    return finish(tape, {1}, {acc}, {node_of(x)},
                  [n, denom](const std::vector<double>& u, const std::vector<bool>& need) {
                      std::vector<std::vector<double>> g(1);
                      if (need[0]) g[0].assign(n, u[0] / denom);
                      return g;
                  });
}

} // namespace

Tensor sum(const Tensor& x) {
    return reduce(x, "sum", 1.0);
}

Tensor mean(const Tensor& x) {
    return reduce(x, "mean", static_cast<double>(x.size()));
}

Tensor clamp01(const Tensor& x) {
    check_nonempty(x, "clamp01");
    std::vector<double> out(x.size()), d(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x.data[i];
        if (v < 0.0) {
            out[i] = 0.0;
            d[i] = 0.0;
        } else if (v > 1.0) {
            out[i] = 1.0;
            d[i] = 0.0;
        } else {
            out[i] = v;
            d[i] = 1.0;
        }
    }
    return ew_unary(x, std::move(out), std::move(d));
}

Tensor concat(std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("concat: no operands");
    const std::size_t rank = parts[0].shape.size();
    if (rank != 1 && rank != 2) {
        throw ShapeError("concat: rank must be 1 or 2, got " + shape_str(parts[0].shape));
    }
    const std::size_t rows = rank == 2 ? parts[0].shape[0] : 1;
    std::size_t total_cols = 0;
    std::vector<std::size_t> cols(parts.size());
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const Tensor& t = parts[p];
        if (t.shape.size() != rank || (rank == 2 && t.shape[0] != rows)) {
            throw ShapeError("concat: incompatible part shapes " + shape_str(parts[0].shape) +
                             " vs " + shape_str(t.shape));
        }
        cols[p] = t.shape[rank - 1];
        total_cols += cols[p];
    }

    std::vector<double> out(rows * total_cols);
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < cols[p]; ++j) {
                out[i * total_cols + offset + j] = parts[p].data[i * cols[p] + j];
            }
        }
        offset += cols[p];
    }

    Tape* tape = nullptr;
    std::vector<int> inputs(parts.size());
    for (std::size_t p = 0; p < parts.size(); ++p) {
        if (parts[p].on_tape()) {
            if (tape && tape != parts[p].tape) {
                throw DomainError("operands belong to different tapes");
            }
            tape = parts[p].tape;
        }
        inputs[p] = node_of(parts[p]);
    }

    Shape shape = rank == 2 ? Shape{rows, total_cols} : Shape{total_cols};
    return finish(tape, std::move(shape), std::move(out), std::move(inputs),
                  [rows, cols, total_cols](const std::vector<double>& u,
                                           const std::vector<bool>& need) {
                      std::vector<std::vector<double>> g(cols.size());
                      std::size_t offset = 0;
                      for (std::size_t p = 0; p < cols.size(); ++p) {
                          if (need[p]) {
                              g[p].resize(rows * cols[p]);
                              for (std::size_t i = 0; i < rows; ++i) {
                                  for (std::size_t j = 0; j < cols[p]; ++j) {
                                      g[p][i * cols[p] + j] = u[i * total_cols + offset + j];
                                  }
                              }
                          }
                          offset += cols[p];
                      }
                      return g;
                  });
}

Tensor reshape(const Tensor& x, Shape s) {
    if (shape_numel(s) != x.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape) + " as " + shape_str(s));
    }
    Tape* tape = tape_of({&x});
    return finish(tape, std::move(s), x.data, {node_of(x)},
                  [](const std::vector<double>& u, const std::vector<bool>& need) {
                      std::vector<std::vector<double>> g(1);
                      if (need[0]) g[0] = u;
                      return g;
                  });
}

Tensor round_straight_through(const Tensor& x, int levels) {
    check_nonempty(x, "round_straight_through");
    if (levels < 2) {
        throw DomainError("round_straight_through: levels must be >= 2, got " +
                          std::to_string(levels));
    }
    const double L = static_cast<double>(levels);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x.data[i];
        if (v < 0.0 || v > 1.0) {
            throw DomainError("round_straight_through: entry " + std::to_string(v) +
                              " outside [0,1]; clamp before quantizing");
        }
        out[i] = std::round(v * L) / L;
    }
    Tape* tape = tape_of({&x});
    return finish(tape, x.shape, std::move(out), {node_of(x)},
                  [](const std::vector<double>& u, const std::vector<bool>& need) {
                      std::vector<std::vector<double>> g(1);
                      if (need[0]) g[0] = u; // straight-through
                      return g;
                  });
}

namespace {

double bce_term(double s, double y) {
    return std::max(s, 0.0) - s * y + std::log1p(std::exp(-std::abs(s)));
}

void check_target(double y) {
    if (y != 0.0 && y != 1.0) {
        throw DomainError("bce_with_logits: target must be exactly 0 or 1, got " +
                          std::to_string(y));
    }
}

} // namespace

Tensor bce_with_logits(const Tensor& s, double y) {
    check_nonempty(s, "bce_with_logits");
    check_target(y);
    const std::size_t n = s.size();
    double acc = 0.0;
    for (double v : s.data) acc += bce_term(v, y);
    acc /= static_cast<double>(n);

    Tape* tape = tape_of({&s});
    return finish(tape, {1}, {acc}, {node_of(s)},
                  [sv = s.data, y, n](const std::vector<double>& u,
                                      const std::vector<bool>& need) {
                      std::vector<std::vector<double>> g(1);
                      if (need[0]) {
                          g[0].resize(n);
                          const double inv_n = 1.0 / static_cast<double>(n);
                          for (std::size_t i = 0; i < n; ++i) {
                              g[0][i] = (sigmoid_value(sv[i]) - y) * inv_n * u[0];
                          }
                      }
                      return g;
                  });
}

Tensor bce_with_logits_elems(const Tensor& s, const Tensor& y) {
    check_same_shape(s, y, "bce_with_logits_elems");
    check_nonempty(s, "bce_with_logits_elems");
    std::vector<double> out(s.size()), d(s.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        check_target(y.data[i]);
        out[i] = bce_term(s.data[i], y.data[i]);
        d[i] = sigmoid_value(s.data[i]) - y.data[i];
    }
    // Targets are labels, not a differentiable path; gradient flows to s only.
    Tape* tape = tape_of({&s});
    return finish(tape, s.shape, std::move(out), {node_of(s)},
                  [d = std::move(d)](const std::vector<double>& u,
                                     const std::vector<bool>& need) {
                      std::vector<std::vector<double>> g(1);
                      if (need[0]) {
                          g[0].resize(u.size());
                          for (std::size_t i = 0; i < u.size(); ++i) g[0][i] = d[i] * u[i];
                      }
                      return g;
                  });
}

} // namespace omat
