#pragma once

#include <functional>
#include <string>

#include "mvreg/nn.hpp"

namespace mvreg {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
    int checked = 0;
};

// Central finite differences against one reverse-mode sweep. `build` must
// construct the scalar loss on the given tape from the store's current
// parameter values. Checks at most `max_per_param` randomly chosen
// elements of each parameter.
GradCheckResult gradient_check(ParamStore& store, const std::function<Var(Tape&)>& build,
                               double step = 1e-5, int max_per_param = 8,
                               uint64_t seed = 0);

}  // namespace mvreg
