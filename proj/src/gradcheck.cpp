#include "omat/gradcheck.hpp"

#include <cmath>

#include "omat/error.hpp"

namespace omat {

namespace {

double eval_at(const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& x) {
    Tape tape;
    Tensor leaf = tape.leaf(x, /*requires_grad=*/false);
    return f(tape, leaf).item();
}

} // namespace

GradCheckResult gradcheck(const std::function<Tensor(Tape&, const Tensor&)>& f,
                          const Tensor& x, double h, double rel_tol, double abs_floor) {
    Tape tape;
    Tensor leaf = tape.leaf(x, /*requires_grad=*/true);
    Tensor loss = f(tape, leaf);
    GradMap grads = tape.backward(loss);
    auto it = grads.find(leaf.node);
    if (it == grads.end()) throw DomainError("gradcheck: no gradient reached the input");
    const Tensor& g = it->second;

    GradCheckResult r;
    r.ok = true;
    for (std::size_t i = 0; i < x.size(); ++i) {
        Tensor lo = x.detached(), hi = x.detached();
        lo.data[i] -= h;
        hi.data[i] += h;
        const double fd = (eval_at(f, hi) - eval_at(f, lo)) / (2.0 * h);
        const double err = std::abs(g.data[i] - fd);
        if (err > r.max_err) {
            r.max_err = err;
            r.worst = i;
            r.analytic = g.data[i];
            r.numeric = fd;
        }
        if (err > std::max(rel_tol * std::max(std::abs(g.data[i]), std::abs(fd)), abs_floor)) {
            r.ok = false;
        }
    }
    return r;
}

} // namespace omat
