#include "omat/tape.hpp"

#include "omat/error.hpp"

namespace omat {

Tensor Tape::leaf(const Tensor& value, bool requires_grad) {
    Node n;
    n.shape = value.shape;
    n.need = requires_grad;
    n.leaf_requires = requires_grad;
    nodes_.push_back(std::move(n));

    Tensor t = value.detached();
    t.requires_grad = requires_grad;
    t.tape = this;
    t.node = static_cast<int>(nodes_.size()) - 1;
    return t;
}

int Tape::record(const Shape& shape, std::vector<int> inputs, BackwardFn backward) {
    Node n;
    n.shape = shape;
    n.need = needs_grad(inputs);
    n.inputs = std::move(inputs);
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

bool Tape::needs_grad(const std::vector<int>& inputs) const {
    for (int id : inputs) {
        if (id >= 0 && nodes_[static_cast<std::size_t>(id)].need) return true;
    }
    return false;
}

GradMap Tape::backward(const Tensor& loss) {
    if (consumed_) throw DomainError("tape already consumed by a previous backward pass");
    if (loss.tape != this || loss.node < 0) {
        throw DomainError("backward: loss is not on this tape");
    }
    if (loss.size() != 1) {
        throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape));
    }
    consumed_ = true;

    std::vector<std::vector<double>> grads(nodes_.size());
    grads[static_cast<std::size_t>(loss.node)] = {1.0};

    for (int id = loss.node; id >= 0; --id) {
        const auto uid = static_cast<std::size_t>(id);
        const Node& node = nodes_[uid];
        if (grads[uid].empty() || !node.need || !node.backward) continue;

        std::vector<bool> need_slot(node.inputs.size(), false);
        for (std::size_t s = 0; s < node.inputs.size(); ++s) {
            const int iid = node.inputs[s];
            need_slot[s] = iid >= 0 && nodes_[static_cast<std::size_t>(iid)].need;
        }

        auto contribs = node.backward(grads[uid], need_slot);
        if (contribs.size() != node.inputs.size()) {
            throw NumericError("backward rule returned wrong number of input gradients");
        }
        for (std::size_t s = 0; s < node.inputs.size(); ++s) {
            if (!need_slot[s] || contribs[s].empty()) continue;
            const auto iid = static_cast<std::size_t>(node.inputs[s]);
            auto& acc = grads[iid];
            if (acc.empty()) {
                acc = std::move(contribs[s]);
            } else {
                for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += contribs[s][k];
            }
        }
        // Interior gradients are no longer needed once propagated.
        grads[uid].clear();
        grads[uid].shrink_to_fit();
    }

    GradMap out;
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
        if (nodes_[id].leaf_requires && !grads[id].empty()) {
            out.emplace(static_cast<int>(id), Tensor(nodes_[id].shape, std::move(grads[id])));
        }
    }
    return out;
}

} // namespace omat
