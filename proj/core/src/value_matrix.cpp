#include "mdml/value_matrix.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mdml/errors.hpp"

namespace mdml {

ValueMatrix::ValueMatrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

ValueMatrix::ValueMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw DimensionError("ValueMatrix: data length " + std::to_string(data_.size()) +
                         " does not match " + std::to_string(rows_) + "x" +
                         std::to_string(cols_));
  }
}

ValueMatrix ValueMatrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t n = rows.size();
  const std::size_t m = n == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(n * m);
  for (const auto& r : rows) {
    if (r.size() != m) throw DimensionError("ValueMatrix::from_rows: ragged rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return ValueMatrix(n, m, std::move(data));
}

ValueMatrix ValueMatrix::identity(std::size_t n) {
  ValueMatrix out(n, n);
  for (std::size_t i = 0; i < n; ++i) out(i, i) = 1.0;
  return out;
}

ValueMatrix ValueMatrix::column(std::span<const double> values) {
  return ValueMatrix(values.size(), 1, std::vector<double>(values.begin(), values.end()));
}

void ValueMatrix::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool ValueMatrix::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

ValueMatrix ValueMatrix::gather_rows(std::span<const std::size_t> indices) const {
  ValueMatrix out(indices.size(), cols_);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows_) throw DimensionError("gather_rows: row index out of range");
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(indices[i] * cols_), cols_,
                out.data_.begin() + static_cast<std::ptrdiff_t>(i * cols_));
  }
  return out;
}

ValueMatrix ValueMatrix::stack(const ValueMatrix& top, const ValueMatrix& bottom) {
  if (top.cols_ != bottom.cols_) throw DimensionError("stack: column counts differ");
  ValueMatrix out = top;
  out.rows_ += bottom.rows_;
  out.data_.insert(out.data_.end(), bottom.data_.begin(), bottom.data_.end());
  return out;
}

void require_finite(const ValueMatrix& m, const char* what) {
  if (!m.all_finite()) throw DivergenceError(std::string("non-finite values in ") + what);
}

}  // namespace mdml
