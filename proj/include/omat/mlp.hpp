#pragma once

#include <span>
#include <string>
#include <vector>

#include "omat/rng.hpp"
#include "omat/tape.hpp"
#include "omat/tensor.hpp"

namespace omat {

enum class Act { Relu, Tanh };

// Fully connected stack; params = [W0, b0, W1, b1, ...] with W row-major
// [in, out]. The final layer is always linear. Forward takes the parameter
// bindings explicitly so the same network runs taped (training, attacks) or
// untaped (eval) and so adapters can substitute effective weights.
struct Mlp {
    std::vector<std::size_t> dims; // in, hidden..., out
    Act hidden_act = Act::Relu;
    std::vector<Tensor> params;

    static Mlp init(std::vector<std::size_t> dims, Rng& rng, Act hidden_act = Act::Relu);

    std::size_t n_layers() const { return dims.size() - 1; }

    Tensor forward(const Tensor& x, std::span<const Tensor> p) const;
    Tensor forward(const Tensor& x) const { return forward(x, params); }

    // Canonical checkpoint names: <prefix>.w0, <prefix>.b0, <prefix>.w1, ...
    std::vector<std::string> param_names(const std::string& prefix) const;
};

// Puts every tensor in `params` on the tape as a leaf; returns the handles.
std::vector<Tensor> bind_params(Tape& tape, const std::vector<Tensor>& params,
                                bool requires_grad = true);

} // namespace omat
