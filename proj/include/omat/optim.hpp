#pragma once

#include <vector>

#include "omat/tape.hpp"
#include "omat/tensor.hpp"

namespace omat {

enum class OptKind { Sgd, AdamW };

struct OptimizerConfig {
    OptKind kind = OptKind::Sgd;
    double lr = 1e-3;
    double weight_decay = 0.0; // AdamW only, decoupled
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Plain SGD (p <- p - lr*g) or AdamW with decoupled weight decay applied
// before the moment update. Moment buffers are kept per parameter position,
// so the same Optimizer must always be fed the same parameter list.
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}
    static Optimizer sgd(double lr);
    static Optimizer adamw(double lr, double weight_decay);

    // `bound[i]` is the taped leaf created from params[i] this pass; grads is
    // the map returned by Tape::backward. A param without a grad entry is an
    // error.
    void step(std::vector<Tensor>& params, const std::vector<Tensor>& bound,
              const GradMap& grads);

    // Single-parameter update with an explicit gradient (used where the
    // gradient map is trivial, e.g. optimizing one latent tensor).
    void step_one(Tensor& param, const Tensor& grad);

    long long steps() const { return t_; }
    const OptimizerConfig& config() const { return cfg_; }

private:
    void apply(std::size_t idx, Tensor& param, const std::vector<double>& grad);

    OptimizerConfig cfg_;
    long long t_ = 0;
    std::vector<std::vector<double>> m_, v_; // AdamW moments, by position
};

} // namespace omat
