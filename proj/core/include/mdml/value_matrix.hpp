#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace mdml {

// Dense row-major matrix of doubles. The numeric carrier for inputs, latents,
// reconstructions, logits and parameter tensors.
class ValueMatrix {
 public:
  ValueMatrix() = default;
  ValueMatrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  ValueMatrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static ValueMatrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static ValueMatrix identity(std::size_t n);
  static ValueMatrix column(std::span<const double> values);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  void fill(double value);
  bool all_finite() const noexcept;
  bool same_shape(const ValueMatrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  // Rows selected by index, in the given order.
  ValueMatrix gather_rows(std::span<const std::size_t> indices) const;
  // Vertical concatenation; both operands must have equal column counts.
  static ValueMatrix stack(const ValueMatrix& top, const ValueMatrix& bottom);

  friend bool operator==(const ValueMatrix&, const ValueMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Throws DivergenceError unless every entry is finite; `what` names the site.
void require_finite(const ValueMatrix& m, const char* what);

}  // namespace mdml
