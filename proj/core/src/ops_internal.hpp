#pragma once

#include <memory>
#include <string>

#include "prvql/core/ops.hpp"

namespace prvql::ops::detail {

inline std::shared_ptr<Storage> alloc(DType dtype, std::int64_t n) {
    return std::make_shared<Storage>(dtype, static_cast<std::size_t>(n));
}

inline std::int64_t normalize_axis(std::int64_t axis, std::int64_t rank, const char* op) {
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank)
        throw DimensionError(std::string(op) + ": axis out of range for rank " + std::to_string(rank));
    return axis;
}

inline void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
    if (a.dtype() != b.dtype())
        throw ContractError(std::string(op) + ": mixed dtypes " + dtype_name(a.dtype()) + " and " +
                            dtype_name(b.dtype()));
}

// outer x n x inner decomposition of a shape around `axis`.
struct AxisSplit {
    std::int64_t outer = 1, n = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::int64_t axis) {
    AxisSplit s;
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(shape.size()); ++i) {
        if (i < axis)
            s.outer *= shape[i];
        else if (i == axis)
            s.n = shape[i];
        else
            s.inner *= shape[i];
    }
    return s;
}

}  // namespace prvql::ops::detail
