#include "model_tailor/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "model_tailor/error.hpp"

namespace model_tailor::linalg {

namespace {

void require_finite(const Matrix& m, const char* op) {
  if (!all_finite(m)) {
    throw Error(ErrorCode::InvariantViolation, std::string(op) + " produced a non-finite entry");
  }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw Error(ErrorCode::Shape, "matrix data length " + std::to_string(data_.size()) + " != " +
                                      std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_rows(const std::vector<std::vector<double>>& rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.front().size();
  Matrix m(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    if (rows[i].size() != c) throw Error(ErrorCode::Shape, "ragged row " + std::to_string(i));
    std::copy(rows[i].begin(), rows[i].end(), m.row(i).begin());
  }
  return m;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw Error(ErrorCode::Shape, "matmul " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                      " by " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      out(i, j) = acc;
    }
  }
  require_finite(out, "matmul");
  return out;
}

double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error(ErrorCode::Shape, "max_abs_diff shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

bool all_finite(const Matrix& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](double v) { return std::isfinite(v); });
}

void require_symmetric(const Matrix& h, double tol) {
  if (!h.is_square()) throw Error(ErrorCode::Shape, "expected a square matrix");
  for (std::size_t i = 0; i < h.rows(); ++i) {
    for (std::size_t j = i + 1; j < h.cols(); ++j) {
      if (std::abs(h(i, j) - h(j, i)) > tol) {
        throw Error(ErrorCode::Shape, "matrix not symmetric at (" + std::to_string(i) + "," + std::to_string(j) + ")");
      }
    }
  }
}

Matrix symmetrize(const Matrix& h) {
  Matrix s(h.rows(), h.cols());
  for (std::size_t i = 0; i < h.rows(); ++i)
    for (std::size_t j = 0; j < h.cols(); ++j) s(i, j) = 0.5 * (h(i, j) + h(j, i));
  return s;
}

Matrix cholesky(const Matrix& h) {
  require_symmetric(h);
  if (!all_finite(h)) throw Error(ErrorCode::InvalidArgument, "cholesky input has non-finite entries");
  const Matrix a = symmetrize(h);
  const std::size_t n = a.rows();
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0)) {
      throw Error(ErrorCode::Definiteness, "non-positive pivot at index " + std::to_string(j));
    }
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

Matrix sym_inverse(const Matrix& h) {
  const Matrix l = cholesky(h);
  const std::size_t n = l.rows();
  // Linv = L⁻¹ (lower triangular), by forward substitution on the identity.
  Matrix linv(n, n);
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t i = c; i < n; ++i) {
      double s = i == c ? 1.0 : 0.0;
      for (std::size_t k = c; k < i; ++k) s -= l(i, k) * linv(k, c);
      linv(i, c) = s / l(i, i);
    }
  }
  // H⁻¹ = Linvᵀ · Linv; fill the lower triangle and mirror.
  Matrix inv(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = 0.0;
      for (std::size_t k = i; k < n; ++k) s += linv(k, i) * linv(k, j);
      inv(i, j) = s;
      inv(j, i) = s;
    }
  }
  require_finite(inv, "sym_inverse");
  return inv;
}

std::vector<double> spd_solve(const Matrix& h, std::span<const double> b) {
  if (b.size() != h.rows()) throw Error(ErrorCode::Shape, "spd_solve rhs length mismatch");
  const Matrix l = cholesky(h);
  const std::size_t n = l.rows();
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y[k];
    y[i] = s / l(i, i);
  }
  std::vector<double> x(n);
  for (std::size_t ii = n; ii-- > 0;) {
    double s = y[ii];
    for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * x[k];
    x[ii] = s / l(ii, ii);
  }
  return x;
}

void obs_downdate_inplace(Matrix& hinv, std::size_t m) {
  require_symmetric(hinv);
  if (m >= hinv.rows()) throw Error(ErrorCode::InvalidArgument, "obs_downdate index out of range");
  const double pivot = hinv(m, m);
  if (!(pivot > kPivotFloor)) {
    throw Error(ErrorCode::SingularPivot, "pivot " + std::to_string(pivot) + " at index " + std::to_string(m));
  }
  const std::size_t n = hinv.rows();
  std::vector<double> col(n);
  for (std::size_t i = 0; i < n; ++i) col[i] = hinv(i, m);
  // (c_i * c_j) / p is symmetric in i, j bit for bit, so symmetry is preserved exactly.
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) hinv(i, j) -= (col[i] * col[j]) / pivot;
  }
  for (std::size_t i = 0; i < n; ++i) {
    hinv(i, m) = 0.0;
    hinv(m, i) = 0.0;
  }
}

Matrix obs_downdate(const Matrix& hinv, std::size_t m) {
  Matrix out = hinv;
  obs_downdate_inplace(out, m);
  return out;
}

Matrix principal_submatrix(const Matrix& a, std::span<const std::size_t> index) {
  Matrix s(index.size(), index.size());
  for (std::size_t i = 0; i < index.size(); ++i)
    for (std::size_t j = 0; j < index.size(); ++j) s(i, j) = a(index[i], index[j]);
  return s;
}

}  // namespace model_tailor::linalg
