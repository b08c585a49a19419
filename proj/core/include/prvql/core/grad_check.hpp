#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "prvql/core/nn.hpp"

namespace prvql {

struct GradCheckOptions {
    double eps = 1e-4;
    double tol = 1e-4;
    // Denominator floor for the relative error, scaled by max(1, |numeric grad|_inf)
    // of the parameter, so exact zeros compare on an absolute scale.
    double floor = 1e-6;
    // Tensors larger than this are checked on an evenly spaced subset.
    std::int64_t max_entries = 48;
};

struct GradCheckEntry {
    std::string name;
    std::int64_t checked = 0;
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    bool passed = true;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_error = 0.0;
    bool passed = true;
};

// Compares backward() against central differences of `fn` (a scalar) with
// respect to each parameter. Parameters must be float64 leaves. Throws
// ContractError if two evaluations of `fn` disagree.
GradCheckReport grad_check(const std::function<Tensor()>& fn, std::span<const Parameter> params,
                           const GradCheckOptions& options = {});

}  // namespace prvql
