#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>

#include <Eigen/Dense>

#include "implicit_lqg/error.hpp"

namespace implicit_lqg {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

namespace linalg {

inline std::string format_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

inline Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

/// Largest absolute entry; the "infinity norm" used for every residual.
inline double max_abs(const Matrix& m) {
  return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff();
}

inline double max_asymmetry(const Matrix& m) {
  return max_abs(m - m.transpose());
}

inline double min_eigenvalue(const Matrix& sym) {
  if (sym.size() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(sym),
                                           Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

inline double max_eigenvalue(const Matrix& sym) {
  if (sym.size() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(sym),
                                           Eigen::EigenvaluesOnly);
  return es.eigenvalues().maxCoeff();
}

// Eigenvalue tolerances are relative to the matrix scale so that tiny
// covariances (e.g. 1e-20 * I) are still classified correctly.
inline bool is_psd(const Matrix& sym, double rel_tol = 1e-10) {
  const double scale = std::max(max_abs(sym), 1e-300);
  return min_eigenvalue(sym) >= -rel_tol * scale;
}

inline bool is_pd(const Matrix& sym, double rel_tol = 1e-14) {
  if (sym.size() == 0) return true;
  const double scale = max_abs(sym);
  return scale > 0.0 && min_eigenvalue(sym) > rel_tol * scale;
}

/// Smallest eigenvalue of (upper - lower); >= -tol certifies upper ⪰ lower.
inline double loewner_gap(const Matrix& upper, const Matrix& lower) {
  return min_eigenvalue(symmetrize(upper - lower));
}

inline double spectral_radius(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  Eigen::EigenSolver<Matrix> es(m, /*computeEigenvectors=*/false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

/// Rank by column-pivoted QR, threshold 1e-10 times the largest column norm.
inline Eigen::Index numerical_rank(const Matrix& m) {
  if (m.size() == 0) return 0;
  double largest = 0.0;
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    largest = std::max(largest, m.col(j).norm());
  }
  if (largest == 0.0) return 0;
  Eigen::ColPivHouseholderQR<Matrix> qr(m);
  const auto& r = qr.matrixQR();
  const Eigen::Index k = std::min(m.rows(), m.cols());
  Eigen::Index rank = 0;
  for (Eigen::Index i = 0; i < k; ++i) {
    if (std::abs(r(i, i)) > 1e-10 * largest) ++rank;
  }
  return rank;
}

/// [B, AB, ..., A^{n-1}B]
inline Matrix controllability_matrix(const Matrix& a, const Matrix& b) {
  const Eigen::Index n = a.rows();
  Matrix c(n, n * b.cols());
  Matrix block = b;
  for (Eigen::Index i = 0; i < n; ++i) {
    c.middleCols(i * b.cols(), b.cols()) = block;
    block = a * block;
  }
  return c;
}

inline bool is_observable(const Matrix& a, const Matrix& d) {
  return numerical_rank(controllability_matrix(a.transpose(), d.transpose())) ==
         a.rows();
}

/// S with S Sᵀ = m for symmetric PSD m (negative roundoff eigenvalues clipped).
inline Matrix psd_sqrt(const Matrix& m) {
  if (m.size() == 0) return m;
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(m));
  Vector roots = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * roots.asDiagonal();
}

inline double log_det_pd(const Matrix& m, const std::string& what) {
  Eigen::LLT<Matrix> llt(symmetrize(m));
  if (llt.info() != Eigen::Success) {
    throw Error(ErrorCode::kNotPositiveDefinite, what, "Cholesky failed");
  }
  const Matrix& l = llt.matrixL();
  return 2.0 * l.diagonal().array().log().sum();
}

inline Matrix pinv(const Matrix& m) {
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& s = svd.singularValues();
  const double cutoff =
      s.size() == 0 ? 0.0
                    : 1e-13 * s(0) * static_cast<double>(std::max(m.rows(), m.cols()));
  Vector inv = Vector::Zero(s.size());
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (s(i) > cutoff) inv(i) = 1.0 / s(i);
  }
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

inline double condition_number(const Matrix& m) {
  Eigen::JacobiSVD<Matrix> svd(m);
  const auto& s = svd.singularValues();
  if (s.size() == 0) return 1.0;
  const double smallest = s(s.size() - 1);
  return smallest == 0.0 ? INFINITY : s(0) / smallest;
}

inline double min_singular_value(const Matrix& m) {
  Eigen::JacobiSVD<Matrix> svd(m);
  const auto& s = svd.singularValues();
  return s.size() == 0 ? 0.0 : s(s.size() - 1);
}

inline void require_shape(const Matrix& m, Eigen::Index rows, Eigen::Index cols,
                          const std::string& name) {
  if (m.rows() != rows || m.cols() != cols) {
    throw Error(ErrorCode::kDimensionMismatch, name,
                "expected " + std::to_string(rows) + "x" + std::to_string(cols) +
                    ", got " + std::to_string(m.rows()) + "x" +
                    std::to_string(m.cols()));
  }
}

}  // namespace linalg
}  // namespace implicit_lqg
