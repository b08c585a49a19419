#include "prvql/core/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace prvql {

namespace {

double eval(const std::function<Tensor()>& fn) {
    NoGradGuard guard;
    const Tensor y = fn();
    if (y.numel() != 1) throw ContractError("grad_check: function must return a scalar, got " + shape_str(y.shape()));
    return y.item();
}

std::vector<std::int64_t> probe_indices(std::int64_t numel, std::int64_t max_entries) {
    std::vector<std::int64_t> idx;
    if (numel <= max_entries) {
        for (std::int64_t i = 0; i < numel; ++i) idx.push_back(i);
        return idx;
    }
    for (std::int64_t i = 0; i < max_entries; ++i) idx.push_back(i * (numel - 1) / (max_entries - 1));
    return idx;
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor()>& fn, std::span<const Parameter> params,
                           const GradCheckOptions& options) {
    for (const auto& p : params) {
        if (p.tensor.dtype() != DType::kFloat64) throw ContractError("grad_check: parameter " + p.name + " is not float64");
        if (!p.tensor.is_leaf()) throw ContractError("grad_check: parameter " + p.name + " is not a leaf");
    }
    const double first = eval(fn);
    const double second = eval(fn);
    if (!(first == second) && !(std::isnan(first) && std::isnan(second)))
        throw ContractError("grad_check: non-deterministic function (" + std::to_string(first) + " vs " +
                            std::to_string(second) + ")");

    for (const auto& p : params) Tensor(p.tensor).zero_grad();
    const Tensor loss = fn();
    backward(loss);

    GradCheckReport report;
    for (const auto& p : params) {
        Tensor t = p.tensor;
        const Tensor analytic = t.grad();
        GradCheckEntry entry{p.name};
        const auto idx = probe_indices(t.numel(), options.max_entries);
        std::vector<double> numeric(idx.size());
        double* data = t.mutable_data<double>();
        for (std::size_t j = 0; j < idx.size(); ++j) {
            const double saved = data[idx[j]];
            data[idx[j]] = saved + options.eps;
            const double up = eval(fn);
            data[idx[j]] = saved - options.eps;
            const double down = eval(fn);
            data[idx[j]] = saved;
            numeric[j] = (up - down) / (2.0 * options.eps);
        }
        double scale = 1.0;
        for (double n : numeric) scale = std::max(scale, std::abs(n));
        const double floor = options.floor * scale;
        for (std::size_t j = 0; j < idx.size(); ++j) {
            const double a = analytic.flat(idx[j]);
            const double n = numeric[j];
            const double abs_err = std::abs(a - n);
            const double rel = abs_err / std::max({std::abs(a), std::abs(n), floor});
            entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
            entry.max_rel_error = std::max(entry.max_rel_error, std::isfinite(rel) ? rel : INFINITY);
        }
        entry.checked = static_cast<std::int64_t>(idx.size());
        entry.passed = entry.max_rel_error < options.tol;
        report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
        report.passed = report.passed && entry.passed;
        report.entries.push_back(std::move(entry));
    }
    for (const auto& p : params) Tensor(p.tensor).zero_grad();
    return report;
}

}  // namespace prvql
