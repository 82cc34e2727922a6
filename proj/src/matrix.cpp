#include "rave/matrix.hpp"

#include <stdexcept>

namespace rave {

Matrix::Matrix(int rows, int cols, double fill) : rows_(rows), cols_(cols) {
  if (rows < 0 || cols < 0) {
    throw std::invalid_argument("Matrix: negative dimensions");
  }
  data_.assign(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols), fill);
}

void Matrix::fill(double value) {
  for (double& x : data_) {
    x = value;
  }
}

bool Matrix::all_finite() const {
  for (double x : data_) {
    if (!std::isfinite(x)) {
      return false;
    }
  }
  return true;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  matmul_accumulate(a, b, out);
  return out;
}

void matmul_accumulate(const Matrix& a, const Matrix& b, Matrix& out) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimensions do not match");
  }
  if (out.rows() != a.rows() || out.cols() != b.cols()) {
    throw std::invalid_argument("matmul: output shape mismatch");
  }
  const int m = a.rows();
  const int k = a.cols();
  const int n = b.cols();
  // i,t,j loop order: for a fixed output element the inner-dimension terms
  // still arrive in ascending t, matching a plain i,j,t triple loop bitwise.
  for (int i = 0; i < m; ++i) {
    std::span<double> out_row = out.row(i);
    for (int t = 0; t < k; ++t) {
      const double a_it = a(i, t);
      std::span<const double> b_row = b.row(t);
      for (int j = 0; j < n; ++j) {
        out_row[j] += a_it * b_row[j];
      }
    }
  }
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (int i = 0; i < a.rows(); ++i) {
    for (int j = 0; j < a.cols(); ++j) {
      out(j, i) = a(i, j);
    }
  }
  return out;
}

void add_in_place(Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument("add_in_place: shape mismatch");
  }
  for (int i = 0; i < a.rows(); ++i) {
    for (int j = 0; j < a.cols(); ++j) {
      a(i, j) += b(i, j);
    }
  }
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("dot: length mismatch");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    acc += a[i] * b[i];
  }
  return acc;
}

Matrix column_block(const Matrix& m, int col_begin, int col_end) {
  if (col_begin < 0 || col_end > m.cols() || col_begin > col_end) {
    throw std::invalid_argument("column_block: range out of bounds");
  }
  Matrix out(m.rows(), col_end - col_begin);
  for (int i = 0; i < m.rows(); ++i) {
    for (int j = col_begin; j < col_end; ++j) {
      out(i, j - col_begin) = m(i, j);
    }
  }
  return out;
}

void add_column_block(Matrix& dst, const Matrix& src, int col_begin) {
  if (src.rows() != dst.rows() || col_begin + src.cols() > dst.cols()) {
    throw std::invalid_argument("add_column_block: shape mismatch");
  }
  for (int i = 0; i < src.rows(); ++i) {
    for (int j = 0; j < src.cols(); ++j) {
      dst(i, col_begin + j) += src(i, j);
    }
  }
}

}  // namespace rave
