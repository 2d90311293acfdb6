#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace model_tailor::linalg {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  /// Takes ownership of `data`; throws a shape error if its length is not rows*cols.
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  /// Builds from nested rows; every row must have the same length.
  static Matrix from_rows(const std::vector<std::vector<double>>& rows);

  [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
  [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] bool is_square() const noexcept { return rows_ == cols_; }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  [[nodiscard]] std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  [[nodiscard]] std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  [[nodiscard]] std::span<double> data() noexcept { return data_; }
  [[nodiscard]] std::span<const double> data() const noexcept { return data_; }
  [[nodiscard]] const std::vector<double>& values() const noexcept { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix transpose(const Matrix& a);
Matrix matmul(const Matrix& a, const Matrix& b);

/// Largest absolute entry (0 for an empty matrix).
double max_abs(const Matrix& a);
/// Largest absolute entrywise difference; shapes must match.
double max_abs_diff(const Matrix& a, const Matrix& b);
bool all_finite(const Matrix& a);

/// Throws ErrorCode::Shape unless square and symmetric within `tol`.
void require_symmetric(const Matrix& h, double tol = 1e-10);

/// Returns (h + hᵀ)/2.
Matrix symmetrize(const Matrix& h);

/// Lower-triangular L with L·Lᵀ = h. Input is validated symmetric and
/// symmetrized before factorization; a nonpositive pivot raises
/// ErrorCode::Definiteness naming the pivot index.
Matrix cholesky(const Matrix& h);

/// Inverse of a symmetric positive definite matrix via its Cholesky factor.
/// The result is exactly symmetric.
Matrix sym_inverse(const Matrix& h);

/// Solves h·x = b for SPD h (b given as a column vector).
std::vector<double> spd_solve(const Matrix& h, std::span<const double> b);

/// Pivot floor for OBS eliminations.
inline constexpr double kPivotFloor = 1e-12;

/// Eliminates coordinate m from an inverse Hessian:
///   K ← K − K[:,m]·K[m,:] / K[m,m]
/// after which row and column m are zero and the remaining block is the
/// inverse of H restricted to the surviving coordinates.
Matrix obs_downdate(const Matrix& hinv, std::size_t m);
void obs_downdate_inplace(Matrix& hinv, std::size_t m);

/// Copies the principal submatrix selected by `index`.
Matrix principal_submatrix(const Matrix& a, std::span<const std::size_t> index);

}  // namespace model_tailor::linalg
