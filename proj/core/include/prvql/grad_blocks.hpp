#pragma once

#include <functional>
#include <string>
#include <vector>

#include "prvql/core/grad_check.hpp"

namespace prvql {

// A named finite-difference check over one model block on a tiny float64
// instance. `run` builds the block from `seed` and checks every parameter,
// including the block's random inputs.
struct GradBlock {
    std::string name;
    double tol = 1e-4;
    std::function<GradCheckReport(const GradCheckOptions&, std::uint64_t seed)> run;
};

// Every block the gradient checker covers, in report order.
std::vector<GradBlock> gradient_check_blocks();

// Negative control: a scaling op whose recorded backward is deliberately wrong.
GradBlock faulty_gradient_block();

}  // namespace prvql
