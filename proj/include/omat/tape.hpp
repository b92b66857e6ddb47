#pragma once

#include <functional>
#include <map>
#include <vector>

#include "omat/tensor.hpp"

namespace omat {

using GradMap = std::map<int, Tensor>;

// Reverse-mode tape. Ops append nodes in execution order, which is a
// topological order by construction; backward walks ids in reverse.
// Single-use: one backward per forward pass.
//
// A node's backward closure receives the upstream gradient and a mask of
// which input slots need gradients; it returns one gradient buffer per
// input slot (empty for slots that were masked out or untaped).
class Tape {
public:
    using BackwardFn = std::function<std::vector<std::vector<double>>(
        const std::vector<double>& upstream, const std::vector<bool>& need)>;

    // Copies `value` onto the tape as a leaf and returns the taped handle.
    Tensor leaf(const Tensor& value, bool requires_grad = true);

    // Records an op node. `inputs` uses -1 for operands not on any tape.
    // Returns the new node id.
    int record(const Shape& shape, std::vector<int> inputs, BackwardFn backward);

    // True if any gradient is required downstream of these input ids.
    bool needs_grad(const std::vector<int>& inputs) const;

    // Gradients of `loss` (a scalar on this tape) for every requires-grad
    // leaf reachable from it, keyed by node id. Consumes the tape.
    GradMap backward(const Tensor& loss);

    bool consumed() const { return consumed_; }
    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Shape shape;
        std::vector<int> inputs;
        BackwardFn backward; // empty for leaves
        bool need = false;   // some requires-grad leaf feeds this node
        bool leaf_requires = false;
    };

    std::vector<Node> nodes_;
    bool consumed_ = false;
};

} // namespace omat
