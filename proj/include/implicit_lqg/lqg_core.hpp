#pragma once

// Plant model, validation, Riccati/Lyapunov solvers and the analytic LQG costs
// for a controller that observes the state exactly.

#include <cstddef>
#include <optional>
#include <utility>
#include <vector>

#include "implicit_lqg/error.hpp"
#include "implicit_lqg/linalg.hpp"

namespace implicit_lqg {

/// x_{t+1} = A x_t + B u_t + w_t, w_t ~ N(0, psi_w), x_1 ~ N(0, psi_x),
/// stage cost xᵀ F x + uᵀ G u.
struct LqgSystem {
  Matrix a;
  Matrix b;
  Matrix f;
  Matrix g;
  Matrix psi_w;
  Matrix psi_x;

  Eigen::Index state_dim() const { return a.rows(); }
  Eigen::Index input_dim() const { return b.cols(); }
};

/// An LqgSystem that passed validate_system(). Only constructible there.
class ValidatedSystem {
 public:
  const LqgSystem& plant() const { return sys_; }
  const Matrix& a() const { return sys_.a; }
  const Matrix& b() const { return sys_.b; }
  const Matrix& f() const { return sys_.f; }
  const Matrix& g() const { return sys_.g; }
  const Matrix& psi_w() const { return sys_.psi_w; }
  const Matrix& psi_x() const { return sys_.psi_x; }
  Eigen::Index state_dim() const { return sys_.state_dim(); }
  Eigen::Index input_dim() const { return sys_.input_dim(); }

 private:
  explicit ValidatedSystem(LqgSystem sys) : sys_(std::move(sys)) {}
  friend ValidatedSystem validate_system(LqgSystem sys);

  LqgSystem sys_;
};

namespace detail {

inline constexpr double kSymmetryTolerance = 1e-12;

// Accepts matrices that are symmetric up to 1e-12 and returns the symmetric part.
inline Matrix symmetric_input(const Matrix& m, const std::string& name,
                              ErrorCode on_failure) {
  if (linalg::max_asymmetry(m) > kSymmetryTolerance) {
    throw Error(on_failure, name, "matrix is not symmetric");
  }
  return linalg::symmetrize(m);
}

}  // namespace detail

inline ValidatedSystem validate_system(LqgSystem sys) {
  const Eigen::Index n = sys.a.rows();
  const Eigen::Index m = sys.b.cols();
  if (n == 0 || m == 0) {
    throw Error(ErrorCode::kDimensionMismatch, n == 0 ? "A" : "B",
                "empty matrix");
  }
  linalg::require_shape(sys.a, n, n, "A");
  linalg::require_shape(sys.b, n, m, "B");
  linalg::require_shape(sys.f, n, n, "F");
  linalg::require_shape(sys.g, m, m, "G");
  linalg::require_shape(sys.psi_w, n, n, "psi_w");
  linalg::require_shape(sys.psi_x, n, n, "psi_x");

  sys.psi_w = detail::symmetric_input(sys.psi_w, "psi_w",
                                      ErrorCode::kNotPositiveDefinite);
  sys.psi_x = detail::symmetric_input(sys.psi_x, "psi_x", ErrorCode::kNotPsd);
  sys.f = detail::symmetric_input(sys.f, "F", ErrorCode::kNotPsd);
  sys.g = detail::symmetric_input(sys.g, "G", ErrorCode::kNotPsd);

  if (!linalg::is_pd(sys.psi_w)) {
    throw Error(ErrorCode::kNotPositiveDefinite, "psi_w",
                "process-noise covariance must be positive definite");
  }
  for (const auto& [mat, name] :
       {std::pair<const Matrix&, const char*>{sys.psi_x, "psi_x"},
        {sys.f, "F"},
        {sys.g, "G"}}) {
    if (!linalg::is_psd(mat)) {
      throw Error(ErrorCode::kNotPsd, name, "matrix has a negative eigenvalue");
    }
  }
  if (linalg::numerical_rank(linalg::controllability_matrix(sys.a, sys.b)) != n) {
    throw Error(ErrorCode::kNotControllable, "",
                "rank of [B, AB, ..., A^{n-1}B] is below the state dimension");
  }
  return ValidatedSystem(std::move(sys));
}

struct RiccatiOptions {
  double tol = 1e-12;
  std::size_t max_iterations = 1'000'000;
};

/// Stabilizing solution of the control DARE plus derived quantities.
struct RiccatiSolution {
  Matrix gamma;
  Matrix gain;
  double j_star = 0.0;
  std::size_t iterations = 0;
  double residual = 0.0;
};

struct FiniteHorizonSolution {
  std::vector<Matrix> gammas;  // gammas[t-1] = Γ_t, t = 1..n+1
  std::vector<Matrix> gains;   // gains[t-1] = K_t, t = 1..n
  double j_star_n = 0.0;
};

namespace detail {

// Solves (G + BᵀΓB) X = rhs, surfacing a singular inner matrix as an error.
inline Matrix inner_solve(const Matrix& inner, const Matrix& rhs) {
  Eigen::LDLT<Matrix> ldlt(linalg::symmetrize(inner));
  const Vector pivots = ldlt.vectorD().cwiseAbs();
  if (ldlt.info() != Eigen::Success || !(pivots.minCoeff() > 1e-14 * pivots.maxCoeff())) {
    throw Error(ErrorCode::kSingularInnerMatrix, "G + B'ΓB",
                "matrix is not invertible");
  }
  return ldlt.solve(rhs);
}

inline Matrix riccati_gain(const ValidatedSystem& sys, const Matrix& gamma) {
  const Matrix btg = sys.b().transpose() * gamma;
  return inner_solve(sys.g() + btg * sys.b(), btg * sys.a());
}

// F + Aᵀ(Γ − ΓB(G + BᵀΓB)⁻¹BᵀΓ)A
inline Matrix control_riccati_map(const ValidatedSystem& sys,
                                  const Matrix& gamma) {
  const Matrix btg = sys.b().transpose() * gamma;
  const Matrix inner = sys.g() + btg * sys.b();
  const Matrix middle = gamma - btg.transpose() * inner_solve(inner, btg);
  return linalg::symmetrize(sys.f() + sys.a().transpose() * middle * sys.a());
}

inline bool converged(double step, const Matrix& x, double tol) {
  return step <= tol * std::max(1.0, linalg::max_abs(x));
}

struct FixedPoint {
  Matrix x;
  double residual = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

// Iterates x ← map(x) until ‖map(x) − x‖_∞ <= tol·max(1, ‖x‖_∞). Returns the
// last image when its own residual also passes, else the iterate before it,
// so rounding noise near the floor never hides a converged solve.
template <typename Map>
FixedPoint iterate_fixed_point(const Map& map, Matrix x, const RiccatiOptions& opts) {
  FixedPoint out;
  while (out.iterations < opts.max_iterations) {
    Matrix next = map(x);
    const double step = linalg::max_abs(next - x);
    ++out.iterations;
    if (converged(step, x, opts.tol)) {
      const double after = linalg::max_abs(map(next) - next);
      out.converged = true;
      if (converged(after, next, opts.tol)) {
        out.x = std::move(next);
        out.residual = after;
      } else {
        out.x = std::move(x);
        out.residual = step;
      }
      return out;
    }
    x = std::move(next);
  }
  out.residual = linalg::max_abs(map(x) - x);
  out.x = std::move(x);
  return out;
}

}  // namespace detail

inline RiccatiSolution solve_dare_control(const ValidatedSystem& sys,
                                          const RiccatiOptions& opts = {}) {
  auto fp = detail::iterate_fixed_point(
      [&](const Matrix& g) { return detail::control_riccati_map(sys, g); }, sys.f(), opts);
  if (!fp.converged) {
    throw Error(ErrorCode::kNoConvergence, "gamma",
                "control DARE residual " + linalg::format_g(fp.residual) + " after " +
                    std::to_string(fp.iterations) + " iterations");
  }
  RiccatiSolution sol;
  sol.residual = fp.residual;
  sol.iterations = fp.iterations;
  sol.gamma = std::move(fp.x);
  sol.gain = detail::riccati_gain(sys, sol.gamma);
  sol.j_star = (sol.gamma * sys.psi_w()).trace();
  if (linalg::spectral_radius(sys.a() - sys.b() * sol.gain) >= 1.0) {
    throw Error(ErrorCode::kNoConvergence, "gamma",
                "fixed point is not stabilizing");
  }
  return sol;
}

/// Backward Riccati recursion from Γ_{n+1} = F. K_t is the minimizer of the
/// stage-t Bellman equation and therefore uses the cost-to-go Γ_{t+1}.
inline FiniteHorizonSolution riccati_finite(const ValidatedSystem& sys,
                                            std::size_t n) {
  if (n == 0) {
    throw Error(ErrorCode::kValidationError, "n", "horizon must be >= 1");
  }
  FiniteHorizonSolution out;
  out.gammas.resize(n + 1);
  out.gains.resize(n);
  out.gammas[n] = sys.f();
  for (std::size_t t = n; t-- > 0;) {
    out.gains[t] = detail::riccati_gain(sys, out.gammas[t + 1]);
    out.gammas[t] = detail::control_riccati_map(sys, out.gammas[t + 1]);
  }
  double total = (sys.psi_x() * out.gammas[0]).trace();
  for (std::size_t t = 1; t <= n; ++t) {
    total += (sys.psi_w() * out.gammas[t]).trace();
  }
  out.j_star_n = total / static_cast<double>(n);
  return out;
}

struct LyapunovOptions {
  double tol = 1e-12;
  double stability_margin = 1e-9;
  std::size_t max_iterations = 200;
};

/// X = Q + Mᵀ X M for a Schur-stable M. Iterated with Smith doubling
/// (X ← X + M_kᵀ X M_k, M_k ← M_k²), which reaches the same fixed point in
/// O(log) sweeps.
inline Matrix solve_lyapunov(const Matrix& m, const Matrix& q,
                             const LyapunovOptions& opts = {}) {
  linalg::require_shape(m, m.rows(), m.rows(), "M");
  linalg::require_shape(q, m.rows(), m.rows(), "Q");
  if (linalg::spectral_radius(m) >= 1.0 - opts.stability_margin) {
    throw Error(ErrorCode::kUnstable, "M",
                "spectral radius must be below 1 for the Lyapunov series");
  }
  Matrix x = linalg::symmetrize(q);
  Matrix power = m;
  for (std::size_t it = 0; it < opts.max_iterations; ++it) {
    const Matrix increment = power.transpose() * x * power;
    x = linalg::symmetrize(x + increment);
    power = power * power;
    if (linalg::max_abs(increment) <= 1e-3 * opts.tol * std::max(1.0, linalg::max_abs(x)) ||
        linalg::max_abs(power) == 0.0) {
      break;
    }
  }
  const double residual = linalg::max_abs(x - q - m.transpose() * x * m);
  if (!detail::converged(residual, x, opts.tol)) {
    throw Error(ErrorCode::kNoConvergence, "X",
                "Lyapunov residual " + linalg::format_g(residual));
  }
  return x;
}

/// Steady state of a Kalman filter for s_{t+1} = A s_t + noise(W),
/// y_t = D s_t + noise(R): P = A(P − PDᵀ(DPDᵀ + R)⁻¹DP)Aᵀ + W.
struct FilterRiccatiSolution {
  Matrix p;         // prediction-error covariance
  Matrix gain;      // P Dᵀ (D P Dᵀ + R)⁻¹
  Matrix filtered;  // (I − gain D) P
  std::size_t iterations = 0;
  double residual = 0.0;
};

namespace detail {

inline Matrix filter_riccati_map(const Matrix& a, const Matrix& d,
                                 const Matrix& w, const Matrix& r,
                                 const Matrix& p) {
  const Matrix dp = d * p;
  const Matrix s = linalg::symmetrize(dp * d.transpose() + r);
  Eigen::LLT<Matrix> llt(s);
  if (llt.info() != Eigen::Success) {
    throw Error(ErrorCode::kNotPositiveDefinite, "DPD' + R",
                "innovation covariance is not positive definite");
  }
  const Matrix updated = p - dp.transpose() * llt.solve(dp);
  return linalg::symmetrize(a * updated * a.transpose() + w);
}

}  // namespace detail

inline FilterRiccatiSolution solve_dare_filter(
    const Matrix& a, const Matrix& d, const Matrix& w, const Matrix& r,
    const std::optional<Matrix>& warm_start = std::nullopt,
    const RiccatiOptions& opts = {}) {
  auto fp = detail::iterate_fixed_point(
      [&](const Matrix& x) { return detail::filter_riccati_map(a, d, w, r, x); },
      warm_start ? *warm_start : linalg::symmetrize(w), opts);
  if (!fp.converged) {
    throw Error(ErrorCode::kNoConvergence, "filter DARE",
                "residual " + linalg::format_g(fp.residual) + " after " +
                    std::to_string(fp.iterations) + " iterations");
  }
  FilterRiccatiSolution sol;
  sol.residual = fp.residual;
  const std::size_t it = fp.iterations;
  Matrix p = std::move(fp.x);
  const Matrix s = linalg::symmetrize(d * p * d.transpose() + r);
  sol.gain = s.llt().solve(d * p).transpose();
  sol.filtered = linalg::symmetrize(
      (Matrix::Identity(p.rows(), p.rows()) - sol.gain * d) * p);
  sol.p = std::move(p);
  sol.iterations = it;
  return sol;
}

}  // namespace implicit_lqg
