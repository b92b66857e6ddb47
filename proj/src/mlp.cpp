#include "omat/mlp.hpp"

#include <cmath>

#include "omat/error.hpp"
#include "omat/ops.hpp"

namespace omat {

Mlp Mlp::init(std::vector<std::size_t> dims, Rng& rng, Act hidden_act) {
    if (dims.size() < 2) throw DomainError("Mlp: need at least input and output dims");
    Mlp m;
    m.dims = std::move(dims);
    m.hidden_act = hidden_act;
    for (std::size_t l = 0; l + 1 < m.dims.size(); ++l) {
        const std::size_t fan_in = m.dims[l], fan_out = m.dims[l + 1];
        const bool last = l + 2 == m.dims.size();
        const double gain = (!last && hidden_act == Act::Relu) ? 2.0 : 1.0;
        const double sd = std::sqrt(gain / static_cast<double>(fan_in));
        std::vector<double> w(fan_in * fan_out);
        for (double& v : w) v = sd * rng.normal();
        m.params.emplace_back(Shape{fan_in, fan_out}, std::move(w));
        m.params.push_back(Tensor::zeros({fan_out}));
    }
    return m;
}

Tensor Mlp::forward(const Tensor& x, std::span<const Tensor> p) const {
    if (p.size() != 2 * n_layers()) {
        throw ShapeError("Mlp: expected " + std::to_string(2 * n_layers()) +
                         " params, got " + std::to_string(p.size()));
    }
    if (x.shape.size() != 2 || x.shape[1] != dims[0]) {
        throw ShapeError("Mlp: input " + shape_str(x.shape) + " does not match [m," +
                         std::to_string(dims[0]) + "]");
    }
    Tensor h = x;
    for (std::size_t l = 0; l < n_layers(); ++l) {
        h = add_bias(matmul(h, p[2 * l]), p[2 * l + 1]);
        if (l + 1 < n_layers()) {
            h = hidden_act == Act::Relu ? relu(h) : omat::tanh(h);
        }
    }
    return h;
}

std::vector<std::string> Mlp::param_names(const std::string& prefix) const {
    std::vector<std::string> names;
    for (std::size_t l = 0; l < n_layers(); ++l) {
        names.push_back(prefix + ".w" + std::to_string(l));
        names.push_back(prefix + ".b" + std::to_string(l));
    }
    return names;
}

std::vector<Tensor> bind_params(Tape& tape, const std::vector<Tensor>& params,
                                bool requires_grad) {
    std::vector<Tensor> bound;
    bound.reserve(params.size());
    for (const Tensor& p : params) bound.push_back(tape.leaf(p, requires_grad));
    return bound;
}

} // namespace omat
