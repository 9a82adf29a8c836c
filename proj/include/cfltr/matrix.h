#ifndef CFLTR_MATRIX_H_
#define CFLTR_MATRIX_H_

#include <cstddef>
#include <span>
#include <vector>

namespace cfltr {

// Dense row-major matrix of doubles. Rows are feature vectors.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);

  static Matrix FromRows(const std::vector<std::vector<double>>& rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return rows_ == 0; }

  double& operator()(std::size_t r, std::size_t c) {
    return data_[r * cols_ + c];
  }
  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }

  // The first appended row fixes the column count of an empty matrix.
  void AppendRow(std::span<const double> values);

  // Rows selected by index, in the given order.
  Matrix SelectRows(std::span<const std::size_t> indices) const;

  const std::vector<double>& data() const { return data_; }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

}  // namespace cfltr

#endif  // CFLTR_MATRIX_H_
