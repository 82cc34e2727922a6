#pragma once

#include <span>

#include "rave/matrix.hpp"

namespace rave {

// Rotary position embedding over dimension pairs (2m, 2m+1): row i is rotated
// pairwise by angle positions[i] * base^(-2m/d) for pair index m. Position 0
// leaves a row unchanged. Requires even row width and one position per row.
Matrix rope_apply(const Matrix& x, std::span<const int> positions, double base);

// Adjoint of rope_apply: each rotation is orthogonal, so the upstream
// gradient is rotated by the negated angles.
Matrix rope_backward(const Matrix& upstream, std::span<const int> positions, double base);

// Single-row variants used by incremental decoding.
void rope_apply_row(std::span<double> row, int position, double base);

}  // namespace rave
