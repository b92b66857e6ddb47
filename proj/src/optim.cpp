#include "omat/optim.hpp"

#include <cmath>

#include "omat/error.hpp"

namespace omat {

Optimizer Optimizer::sgd(double lr) {
    OptimizerConfig cfg;
    cfg.kind = OptKind::Sgd;
    cfg.lr = lr;
    return Optimizer(cfg);
}

Optimizer Optimizer::adamw(double lr, double weight_decay) {
    OptimizerConfig cfg;
    cfg.kind = OptKind::AdamW;
    cfg.lr = lr;
    cfg.weight_decay = weight_decay;
    return Optimizer(cfg);
}

void Optimizer::apply(std::size_t idx, Tensor& param, const std::vector<double>& grad) {
    if (grad.size() != param.size()) {
        throw ShapeError("optimizer: grad size " + std::to_string(grad.size()) +
                         " does not match param size " + std::to_string(param.size()));
    }
    if (cfg_.kind == OptKind::Sgd) {
        for (std::size_t i = 0; i < param.size(); ++i) {
            param.data[i] -= cfg_.lr * grad[i];
        }
        return;
    }

    if (m_.size() <= idx) {
        m_.resize(idx + 1);
        v_.resize(idx + 1);
    }
    if (m_[idx].empty()) {
        m_[idx].assign(param.size(), 0.0);
        v_[idx].assign(param.size(), 0.0);
    } else if (m_[idx].size() != param.size()) {
        throw ShapeError("optimizer: param " + std::to_string(idx) +
                         " changed size between steps");
    }

    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < param.size(); ++i) {
        param.data[i] -= cfg_.lr * cfg_.weight_decay * param.data[i];
        m_[idx][i] = b1 * m_[idx][i] + (1.0 - b1) * grad[i];
        v_[idx][i] = b2 * v_[idx][i] + (1.0 - b2) * grad[i] * grad[i];
        const double mhat = m_[idx][i] / c1;
        const double vhat = v_[idx][i] / c2;
        param.data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
}

void Optimizer::step(std::vector<Tensor>& params, const std::vector<Tensor>& bound,
                     const GradMap& grads) {
    if (params.size() != bound.size()) {
        throw DomainError("optimizer: " + std::to_string(params.size()) + " params but " +
                          std::to_string(bound.size()) + " bound leaves");
    }
    ++t_;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto it = bound[i].on_tape() ? grads.find(bound[i].node) : grads.end();
        if (it == grads.end()) {
            throw DomainError("optimizer: missing gradient for param " + std::to_string(i));
        }
        apply(i, params[i], it->second.data);
    }
}

void Optimizer::step_one(Tensor& param, const Tensor& grad) {
    ++t_;
    apply(0, param, grad.data);
}

} // namespace omat
