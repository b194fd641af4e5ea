#pragma once

// Capacity of the implicit channel when controller and receiver both see the
// state exactly: water-filling over the eigenchannels of BᵀΨ_w⁻¹B with the
// control-cost weighted power budget Tr((BᵀΓB + G)Φ) <= V.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "implicit_lqg/lqg_core.hpp"

namespace implicit_lqg {

inline constexpr double kNatsPerBit = 0.69314718055994530942;

/// Capacity in nats per step, or the infinite-capacity tag.
struct Capacity {
  bool infinite = false;
  double nats = 0.0;

  static Capacity Infinite() { return {true, 0.0}; }
  static Capacity Finite(double nats) { return {false, nats}; }
  double bits() const { return nats / kNatsPerBit; }
};

struct ChannelEigen {
  Matrix u;        // orthogonal, columns ordered as lambda
  Vector lambda;   // positive eigenvalues first, descending
  Eigen::Index rank = 0;
};

struct WaterFillingResult {
  bool alpha_infinite = false;
  double alpha = 0.0;
  Vector phi_hat_diag;             // finite allocations (0 where infinite)
  std::vector<bool> phi_infinite;  // φ_i = ∞ channels
  Matrix phi;                      // U diag(phi_hat_diag) Uᵀ
  Capacity capacity;
  Vector gamma_hat_diag;
};

inline ChannelEigen channel_eigen(const ValidatedSystem& sys,
                                  double rank_rel_tol = 1e-10) {
  const Matrix info = linalg::symmetrize(
      sys.b().transpose() * sys.psi_w().llt().solve(sys.b()));
  Eigen::SelfAdjointEigenSolver<Matrix> es(info);
  const Eigen::Index m = info.rows();
  ChannelEigen out;
  out.u.resize(m, m);
  out.lambda.resize(m);
  // SelfAdjointEigenSolver sorts ascending; reverse so positives lead.
  for (Eigen::Index i = 0; i < m; ++i) {
    out.lambda(i) = std::max(es.eigenvalues()(m - 1 - i), 0.0);
    out.u.col(i) = es.eigenvectors().col(m - 1 - i);
  }
  const double threshold = rank_rel_tol * std::max(out.lambda(0), 1e-300);
  out.rank = 0;
  for (Eigen::Index i = 0; i < m; ++i) {
    if (out.lambda(i) > threshold) {
      ++out.rank;
    } else {
      out.lambda(i) = 0.0;
    }
  }
  return out;
}

/// Γ̂ = Uᵀ(BᵀΓB + G)U. Its diagonal is nonnegative for any DARE solution.
inline Matrix gamma_hat(const ValidatedSystem& sys, const RiccatiSolution& ric,
                        const ChannelEigen& eig) {
  const Matrix weight =
      sys.b().transpose() * ric.gamma * sys.b() + sys.g();
  return linalg::symmetrize(eig.u.transpose() * weight * eig.u);
}

struct WaterFillOptions {
  // A channel with Γ̂(i,i) <= diag_rel_tol * Tr(Γ̂)/d2 is treated as free.
  double diag_rel_tol = 1e-10;
  std::size_t bisection_steps = 200;
};

inline WaterFillingResult water_fill(const ChannelEigen& eig,
                                     const Matrix& gamma_hat_matrix, double v,
                                     const WaterFillOptions& opts = {}) {
  if (!(v >= 0.0)) {
    throw Error(ErrorCode::kValidationError, "V", "budget must be >= 0");
  }
  const Eigen::Index m = eig.lambda.size();
  linalg::require_shape(gamma_hat_matrix, m, m, "gamma_hat");

  WaterFillingResult out;
  out.gamma_hat_diag = gamma_hat_matrix.diagonal();
  out.phi_hat_diag = Vector::Zero(m);
  out.phi_infinite.assign(static_cast<std::size_t>(m), false);

  const double scale = out.gamma_hat_diag.sum() / static_cast<double>(m);
  const double zero_threshold = opts.diag_rel_tol * std::max(scale, 0.0);

  std::vector<Eigen::Index> active;
  bool any_free = false;
  for (Eigen::Index i = 0; i < eig.rank; ++i) {
    if (out.gamma_hat_diag(i) <= zero_threshold) {
      out.phi_infinite[static_cast<std::size_t>(i)] = true;
      any_free = true;
    } else {
      active.push_back(i);
    }
  }

  // Water level α: Σ_active max(α − Γ̂ᵢ/λᵢ, 0) = V.
  std::vector<double> floor(active.size());
  for (std::size_t k = 0; k < active.size(); ++k) {
    const auto i = active[k];
    floor[k] = out.gamma_hat_diag(i) / eig.lambda(i);
  }
  auto spent = [&](double alpha) {
    double total = 0.0;
    for (double c : floor) total += std::max(alpha - c, 0.0);
    return total;
  };

  if (!active.empty()) {
    const double lowest = *std::min_element(floor.begin(), floor.end());
    const double highest = *std::max_element(floor.begin(), floor.end());
    if (v == 0.0) {
      out.alpha = lowest;
    } else {
      double lo = lowest;
      double hi = highest + v;
      for (std::size_t it = 0; it < opts.bisection_steps && hi - lo > 0.0; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mid <= lo || mid >= hi) break;
        (spent(mid) < v ? lo : hi) = mid;
      }
      // The bisection fixes the set of filled channels; on that set the
      // budget equation is linear in α and is solved exactly.
      const double bracket = 0.5 * (lo + hi);
      double sum_floor = 0.0;
      std::size_t filled = 0;
      for (double c : floor) {
        if (c < bracket) {
          sum_floor += c;
          ++filled;
        }
      }
      out.alpha = filled > 0 ? (v + sum_floor) / static_cast<double>(filled)
                             : bracket;
    }
    for (const auto i : active) {
      out.phi_hat_diag(i) = std::max(
          out.alpha / out.gamma_hat_diag(i) - 1.0 / eig.lambda(i), 0.0);
    }
  } else {
    out.alpha_infinite = any_free;
  }

  out.phi = linalg::symmetrize(eig.u * out.phi_hat_diag.asDiagonal() *
                               eig.u.transpose());
  if (any_free) {
    out.capacity = Capacity::Infinite();
  } else {
    double c = 0.0;
    for (Eigen::Index i = 0; i < eig.rank; ++i) {
      c += 0.5 * std::log1p(out.phi_hat_diag(i) * eig.lambda(i));
    }
    out.capacity = Capacity::Finite(c);
  }
  return out;
}

/// Convenience: the whole noiseless pipeline for a budget V.
inline WaterFillingResult noiseless_capacity(const ValidatedSystem& sys,
                                             const RiccatiSolution& ric,
                                             double v,
                                             const WaterFillOptions& opts = {}) {
  const ChannelEigen eig = channel_eigen(sys);
  return water_fill(eig, gamma_hat(sys, ric, eig), v, opts);
}

struct FullCapacity {
  Matrix phi;
  Capacity capacity;
  double alpha = 0.0;
};

/// max ½ log det(I + Ψ_w^{-1/2}BΦBᵀΨ_w^{-1/2}) over all Φ ⪰ 0 with
/// Tr(weight Φ) <= V. Water-filling runs in the generalized eigenbasis of
/// (BᵀΨ_w⁻¹B, weight); it coincides with water_fill when Γ̂ is diagonal.
inline FullCapacity weighted_water_fill(const ValidatedSystem& sys, const Matrix& weight,
                                        double v, const WaterFillOptions& opts = {}) {
  const Eigen::Index m = sys.input_dim();
  linalg::require_shape(weight, m, m, "weight");
  const Matrix sym = linalg::symmetrize(weight);
  if (!linalg::is_pd(sym)) {
    throw Error(ErrorCode::kNotPositiveDefinite, "weight",
                "signal weight must be positive definite");
  }
  const Eigen::SelfAdjointEigenSolver<Matrix> es(sym);
  const Matrix inv_root = es.eigenvectors() *
                          es.eigenvalues().cwiseInverse().cwiseSqrt().asDiagonal() *
                          es.eigenvectors().transpose();
  const Matrix info = sys.b().transpose() * sys.psi_w().llt().solve(sys.b());
  const Eigen::SelfAdjointEigenSolver<Matrix> gen(
      linalg::symmetrize(inv_root * info * inv_root));
  ChannelEigen eig;
  eig.u.resize(m, m);
  eig.lambda.resize(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    eig.lambda(i) = std::max(gen.eigenvalues()(m - 1 - i), 0.0);
    eig.u.col(i) = gen.eigenvectors().col(m - 1 - i);
  }
  const double threshold = 1e-10 * std::max(eig.lambda(0), 1e-300);
  for (Eigen::Index i = 0; i < m; ++i) {
    if (eig.lambda(i) > threshold) {
      ++eig.rank;
    } else {
      eig.lambda(i) = 0.0;
    }
  }
  const WaterFillingResult wf = water_fill(eig, Matrix::Identity(m, m), v, opts);
  FullCapacity out;
  out.phi = linalg::symmetrize(inv_root * wf.phi * inv_root);
  out.capacity = wf.capacity;
  out.alpha = wf.alpha;
  return out;
}

inline FullCapacity full_covariance_capacity(const ValidatedSystem& sys,
                                             const RiccatiSolution& ric, double v,
                                             const WaterFillOptions& opts = {}) {
  return weighted_water_fill(
      sys, sys.b().transpose() * ric.gamma * sys.b() + sys.g(), v, opts);
}

struct ScalarCapacity {
  double nats = 0.0;
  double phi = 0.0;  // optimal signal variance V / (B²Γ + G)
};

/// Closed form for d1 = d2 = 1: C(V) = ½ log(1 + V / (J* + G Ψ_w / B²)).
inline ScalarCapacity capacity_scalar(const ValidatedSystem& sys,
                                      const RiccatiSolution& ric, double v) {
  if (sys.state_dim() != 1 || sys.input_dim() != 1) {
    throw Error(ErrorCode::kDimensionMismatch, "system",
                "scalar capacity requires d1 = d2 = 1");
  }
  if (!(v >= 0.0)) {
    throw Error(ErrorCode::kValidationError, "V", "budget must be >= 0");
  }
  const double b = sys.b()(0, 0);
  if (b == 0.0) {
    throw Error(ErrorCode::kNotControllable, "B", "scalar B must be nonzero");
  }
  const double g = sys.g()(0, 0);
  const double psi_w = sys.psi_w()(0, 0);
  ScalarCapacity out;
  out.nats = 0.5 * std::log1p(v / (ric.j_star + g * psi_w / (b * b)));
  out.phi = v / (b * b * ric.gamma(0, 0) + g);
  return out;
}

/// Long-run cost of u = −Kx + s, s ~ N(0, Φ): J* + Tr((BᵀΓB + G)Φ).
inline double cost_with_signal(const ValidatedSystem& sys,
                               const RiccatiSolution& ric, const Matrix& phi) {
  linalg::require_shape(phi, sys.input_dim(), sys.input_dim(), "phi");
  if (linalg::max_asymmetry(phi) > 1e-12 || !linalg::is_psd(phi)) {
    throw Error(ErrorCode::kNotPsd, "phi", "signal covariance must be PSD");
  }
  const Matrix weight = sys.b().transpose() * ric.gamma * sys.b() + sys.g();
  return ric.j_star + (weight * phi).trace();
}

}  // namespace implicit_lqg
