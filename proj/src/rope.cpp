#include "rave/rope.hpp"

#include <cmath>
#include <stdexcept>

namespace rave {

namespace {

void rotate_row(std::span<double> row, int position, double base, double sign) {
  const int d = static_cast<int>(row.size());
  for (int m = 0; m < d / 2; ++m) {
    const double freq = std::pow(base, -2.0 * m / d);
    const double angle = sign * position * freq;
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double x0 = row[2 * m];
    const double x1 = row[2 * m + 1];
    row[2 * m] = x0 * c - x1 * s;
    row[2 * m + 1] = x0 * s + x1 * c;
  }
}

Matrix apply_with_sign(const Matrix& x, std::span<const int> positions, double base, double sign) {
  if (x.cols() % 2 != 0) {
    throw std::invalid_argument("rope: head dimension must be even");
  }
  if (static_cast<int>(positions.size()) != x.rows()) {
    throw std::invalid_argument("rope: positions length must equal the row count");
  }
  Matrix out = x;
  for (int i = 0; i < out.rows(); ++i) {
    rotate_row(out.row(i), positions[i], base, sign);
  }
  return out;
}

}  // namespace

Matrix rope_apply(const Matrix& x, std::span<const int> positions, double base) {
  return apply_with_sign(x, positions, base, 1.0);
}

Matrix rope_backward(const Matrix& upstream, std::span<const int> positions, double base) {
  return apply_with_sign(upstream, positions, base, -1.0);
}

void rope_apply_row(std::span<double> row, int position, double base) {
  if (row.size() % 2 != 0) {
    throw std::invalid_argument("rope: head dimension must be even");
  }
  rotate_row(row, position, base, 1.0);
}

}  // namespace rave
