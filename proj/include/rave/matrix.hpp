#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace rave {

// Dense row-major matrix of doubles. All reductions that consume a Matrix
// (matmul, softmax, dot products) run in ascending index order so that
// repeated runs and incremental re-computation produce identical bits.
class Matrix {
 public:
  Matrix() = default;
  Matrix(int rows, int cols, double fill = 0.0);

  static Matrix zeros(int rows, int cols) { return Matrix(rows, cols, 0.0); }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(int i, int j) { return data_[static_cast<std::size_t>(i) * cols_ + j]; }
  double operator()(int i, int j) const { return data_[static_cast<std::size_t>(i) * cols_ + j]; }

  std::span<double> row(int i) { return {data_.data() + static_cast<std::size_t>(i) * cols_, static_cast<std::size_t>(cols_)}; }
  std::span<const double> row(int i) const { return {data_.data() + static_cast<std::size_t>(i) * cols_, static_cast<std::size_t>(cols_)}; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  void fill(double value);
  bool same_shape(const Matrix& other) const { return rows_ == other.rows_ && cols_ == other.cols_; }
  bool all_finite() const;

  bool operator==(const Matrix& other) const { return rows_ == other.rows_ && cols_ == other.cols_ && data_ == other.data_; }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> data_;
};

// C = A * B, inner dimension summed in ascending order.
Matrix matmul(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& a);

// C += A * B, same summation order as matmul.
void matmul_accumulate(const Matrix& a, const Matrix& b, Matrix& out);

void add_in_place(Matrix& a, const Matrix& b);

double dot(std::span<const double> a, std::span<const double> b);

// Columns [col_begin, col_end) as a new matrix.
Matrix column_block(const Matrix& m, int col_begin, int col_end);

// dst columns [col_begin, ...) += src (shape checked).
void add_column_block(Matrix& dst, const Matrix& src, int col_begin);

}  // namespace rave
