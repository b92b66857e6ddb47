#pragma once

#include <cstddef>
#include <functional>

#include "omat/tape.hpp"
#include "omat/tensor.hpp"

namespace omat {

struct GradCheckResult {
    bool ok = false;
    double max_err = 0.0;      // worst |analytic - numeric| over elements
    std::size_t worst = 0;     // element index of the worst error
    double analytic = 0.0;     // values at that element
    double numeric = 0.0;
};

// Checks reverse-mode gradients of a scalar-valued function against central
// finite differences. `f` receives a tape plus the taped copy of `x` it
// should differentiate through (other inputs stay closed over as constants)
// and returns the scalar loss. Element i passes when
//   |g_i - fd_i| <= max(rel_tol * max(|g_i|, |fd_i|), abs_floor).
GradCheckResult gradcheck(const std::function<Tensor(Tape&, const Tensor&)>& f,
                          const Tensor& x, double h = 1e-5, double rel_tol = 1e-5,
                          double abs_floor = 1e-8);

} // namespace omat
