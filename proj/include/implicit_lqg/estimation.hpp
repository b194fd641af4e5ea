#pragma once

// Noisy-observation machinery: the controller's steady-state Kalman filter,
// the cost ledger of stationary linear Gaussian policies, and the extended
// state ρ_t = [x_t, e_t] seen by the receiver together with its filter and
// smoother steady states.

#include <optional>

#include "implicit_lqg/lqg_core.hpp"

namespace implicit_lqg {

/// Controller sees o_t = D_c x_t + q_t, receiver sees z_t = D_r x_t + v_t.
struct ObservationModel {
  Matrix d_c;
  Matrix psi_q;
  Matrix d_r;
  Matrix psi_v;
};

class ValidatedObservation {
 public:
  const ObservationModel& model() const { return obs_; }
  const Matrix& d_c() const { return obs_.d_c; }
  const Matrix& psi_q() const { return obs_.psi_q; }
  const Matrix& d_r() const { return obs_.d_r; }
  const Matrix& psi_v() const { return obs_.psi_v; }

 private:
  explicit ValidatedObservation(ObservationModel obs) : obs_(std::move(obs)) {}
  friend ValidatedObservation validate_observation(const ValidatedSystem&,
                                                   ObservationModel);
  ObservationModel obs_;
};

inline ValidatedObservation validate_observation(const ValidatedSystem& sys,
                                                 ObservationModel obs) {
  const Eigen::Index n = sys.state_dim();
  const Eigen::Index d3 = obs.d_c.rows();
  if (d3 == 0) {
    throw Error(ErrorCode::kDimensionMismatch, "d_c", "empty matrix");
  }
  linalg::require_shape(obs.d_c, d3, n, "d_c");
  linalg::require_shape(obs.psi_q, d3, d3, "psi_q");
  linalg::require_shape(obs.d_r, n, n, "d_r");
  linalg::require_shape(obs.psi_v, n, n, "psi_v");
  obs.psi_q = detail::symmetric_input(obs.psi_q, "psi_q",
                                      ErrorCode::kNotPositiveDefinite);
  obs.psi_v = detail::symmetric_input(obs.psi_v, "psi_v",
                                      ErrorCode::kNotPositiveDefinite);
  if (!linalg::is_pd(obs.psi_q)) {
    throw Error(ErrorCode::kNotPositiveDefinite, "psi_q",
                "controller observation noise must be positive definite");
  }
  if (!linalg::is_pd(obs.psi_v)) {
    throw Error(ErrorCode::kNotPositiveDefinite, "psi_v",
                "receiver observation noise must be positive definite");
  }
  if (!(linalg::condition_number(obs.d_r) <= 1e12)) {
    throw Error(ErrorCode::kNotInvertible, "d_r",
                "receiver observation map must be invertible");
  }
  if (!linalg::is_observable(sys.a(), obs.d_c)) {
    throw Error(ErrorCode::kNotObservable, "d_c", "(A, D_c) is not observable");
  }
  if (!linalg::is_observable(sys.a(), obs.d_r)) {
    throw Error(ErrorCode::kNotObservable, "d_r", "(A, D_r) is not observable");
  }
  return ValidatedObservation(std::move(obs));
}

struct ControllerFilter {
  Matrix sigma_c;        // steady prediction-error covariance Σ_c
  Matrix l_c;            // steady gain
  Matrix sigma_c_tilde;  // filtered covariance (I − L_c D_c)Σ_c
  double j_star_star = 0.0;
  std::size_t iterations = 0;
  double residual = 0.0;
};

inline ControllerFilter controller_filter(const ValidatedSystem& sys,
                                          const ValidatedObservation& obs,
                                          const RiccatiSolution& ric,
                                          const RiccatiOptions& opts = {}) {
  const auto sol = solve_dare_filter(sys.a(), obs.d_c(), sys.psi_w(),
                                     obs.psi_q(), std::nullopt, opts);
  ControllerFilter cf;
  cf.sigma_c = sol.p;
  cf.l_c = sol.gain;
  cf.sigma_c_tilde = sol.filtered;
  cf.iterations = sol.iterations;
  cf.residual = sol.residual;
  cf.j_star_star = (sys.f() * cf.sigma_c_tilde).trace() +
                   (ric.gamma * (cf.sigma_c - cf.sigma_c_tilde)).trace();
  return cf;
}

/// u_t = −K̄ x̌_{t|t} + s_t with s_t ~ N(0, Φ) independent of the estimate.
struct LinearGaussianPolicy {
  Matrix k_bar;
  Matrix phi;
};

inline double closed_loop_radius(const ValidatedSystem& sys,
                                 const Matrix& k_bar) {
  return linalg::spectral_radius(sys.a() - sys.b() * k_bar);
}

inline void check_policy(const ValidatedSystem& sys,
                         const LinearGaussianPolicy& policy) {
  linalg::require_shape(policy.k_bar, sys.input_dim(), sys.state_dim(), "k_bar");
  linalg::require_shape(policy.phi, sys.input_dim(), sys.input_dim(), "phi");
  if (closed_loop_radius(sys, policy.k_bar) >= 1.0) {
    throw Error(ErrorCode::kUnstable, "k_bar", "A - B K_bar is not Schur stable");
  }
  if (linalg::max_asymmetry(policy.phi) > 1e-12 || !linalg::is_psd(policy.phi)) {
    throw Error(ErrorCode::kNotPsd, "phi", "signal covariance must be PSD");
  }
}

/// Γ̄ = F + K̄ᵀGK̄ + (A − BK̄)ᵀ Γ̄ (A − BK̄).
inline Matrix gamma_bar(const ValidatedSystem& sys, const Matrix& k_bar) {
  linalg::require_shape(k_bar, sys.input_dim(), sys.state_dim(), "k_bar");
  const Matrix closed = sys.a() - sys.b() * k_bar;
  LyapunovOptions opts;
  opts.stability_margin = 0.0;
  return solve_lyapunov(closed, sys.f() + k_bar.transpose() * sys.g() * k_bar,
                        opts);
}

/// Tr((Γ̄ − Γ)(Σ_c − Σ̃_c)): the part of the budget consumed by a suboptimal gain.
inline double gain_penalty(const Matrix& gamma_bar_matrix,
                           const RiccatiSolution& ric,
                           const ControllerFilter& cf) {
  return ((gamma_bar_matrix - ric.gamma) * (cf.sigma_c - cf.sigma_c_tilde))
      .trace();
}

/// Weight of the signal power in the cost: G + BᵀΓ̄B.
inline Matrix signal_weight(const ValidatedSystem& sys,
                            const Matrix& gamma_bar_matrix) {
  return linalg::symmetrize(sys.g() +
                            sys.b().transpose() * gamma_bar_matrix * sys.b());
}

/// J** + Tr((BᵀΓ̄B + G)Φ) + Tr((Γ̄ − Γ)(Σ_c − Σ̃_c)).
inline double cost_noisy_policy(const ValidatedSystem& sys,
                                const RiccatiSolution& ric,
                                const ControllerFilter& cf,
                                const LinearGaussianPolicy& policy) {
  check_policy(sys, policy);
  const Matrix gb = gamma_bar(sys, policy.k_bar);
  return cf.j_star_star + (signal_weight(sys, gb) * policy.phi).trace() +
         gain_penalty(gb, ric, cf);
}

/// Receiver-side model over ρ_t = [x_t, e_t]:
///   ρ_{t+1} = A_ρ ρ_t + s̄_t + w̄_t + q̄_{t+1},  z_t = D_ρ ρ_t + v_t.
struct ExtendedSystem {
  Matrix a_rho;
  Matrix d_rho;
  Matrix phi_bar;
  Matrix psi_w_bar;
  Matrix psi_q_bar;
  Matrix psi_v;
  Matrix sigma_rho;        // prediction error without knowledge of s
  Matrix pi;               // prediction error with knowledge of s
  Matrix l_rho;            // steady filter gain for sigma_rho
  Matrix l_pi;             // steady filter gain for pi
  Matrix q_rho;            // steady RTS smoother gain
  Matrix sigma_rho_tilde;  // filtered covariance (I − L_ρ D_ρ)Σ_ρ
  Matrix pi_tilde;         // filtered covariance (I − L_Π D_ρ)Π

  // Plant pieces needed to lift raw noises into the extended coordinates.
  Matrix input_map;        // B
  Matrix d_r;
  Matrix l_c;
  Matrix innovation_free;  // I − L_c D_c

  Eigen::Index state_dim() const { return a_rho.rows(); }
  Eigen::Index plant_dim() const { return a_rho.rows() / 2; }
  Matrix noise_total() const { return phi_bar + psi_w_bar + psi_q_bar; }

  /// s̄_t + w̄_t + q̄_{t+1} = [B s + w; (I − L_c D_c) w − L_c q].
  Vector lifted_noise(const Vector& s, const Vector& w, const Vector& q_next) const {
    const Eigen::Index n = plant_dim();
    Vector out(2 * n);
    out.head(n) = input_map * s + w;
    out.tail(n) = innovation_free * w - l_c * q_next;
    return out;
  }
  Vector lifted_signal(const Vector& s) const {
    Vector out = Vector::Zero(state_dim());
    out.head(plant_dim()) = input_map * s;
    return out;
  }
};

struct ExtendedOptions {
  RiccatiOptions dare;
  std::optional<Matrix> sigma_warm_start;
  std::optional<Matrix> pi_warm_start;
  // Reuse a Π computed for the same K̄ (Π does not depend on Φ).
  const FilterRiccatiSolution* pi_solution = nullptr;
};

/// Block structure only; no Riccati solves.
inline ExtendedSystem assemble_extended(const ValidatedSystem& sys,
                                        const ValidatedObservation& obs,
                                        const ControllerFilter& cf,
                                        const LinearGaussianPolicy& policy) {
  const Eigen::Index n = sys.state_dim();
  const Matrix eye = Matrix::Identity(n, n);
  const Matrix innovation_free = eye - cf.l_c * obs.d_c();  // I − L_c D_c
  const Matrix bk = sys.b() * policy.k_bar;

  ExtendedSystem ext;
  ext.a_rho = Matrix::Zero(2 * n, 2 * n);
  ext.a_rho.topLeftCorner(n, n) = sys.a() - bk;
  ext.a_rho.topRightCorner(n, n) = bk;
  ext.a_rho.bottomRightCorner(n, n) = innovation_free * sys.a();

  ext.d_rho = Matrix::Zero(n, 2 * n);
  ext.d_rho.leftCols(n) = obs.d_r();

  ext.phi_bar = Matrix::Zero(2 * n, 2 * n);
  ext.phi_bar.topLeftCorner(n, n) =
      linalg::symmetrize(sys.b() * policy.phi * sys.b().transpose());

  ext.psi_w_bar.resize(2 * n, 2 * n);
  ext.psi_w_bar.topLeftCorner(n, n) = sys.psi_w();
  ext.psi_w_bar.topRightCorner(n, n) = sys.psi_w() * innovation_free.transpose();
  ext.psi_w_bar.bottomLeftCorner(n, n) = innovation_free * sys.psi_w();
  ext.psi_w_bar.bottomRightCorner(n, n) =
      innovation_free * sys.psi_w() * innovation_free.transpose();
  ext.psi_w_bar = linalg::symmetrize(ext.psi_w_bar);

  ext.psi_q_bar = Matrix::Zero(2 * n, 2 * n);
  ext.psi_q_bar.bottomRightCorner(n, n) =
      linalg::symmetrize(cf.l_c * obs.psi_q() * cf.l_c.transpose());

  ext.psi_v = obs.psi_v();
  ext.input_map = sys.b();
  ext.d_r = obs.d_r();
  ext.l_c = cf.l_c;
  ext.innovation_free = innovation_free;
  return ext;
}

/// Π's Riccati fixed point for a given extended block structure.
inline FilterRiccatiSolution solve_pi(const ExtendedSystem& ext,
                                      const std::optional<Matrix>& warm = std::nullopt,
                                      const RiccatiOptions& opts = {}) {
  return solve_dare_filter(ext.a_rho, ext.d_rho, ext.psi_w_bar + ext.psi_q_bar,
                           ext.psi_v, warm, opts);
}

inline ExtendedSystem build_extended(const ValidatedSystem& sys,
                                     const ValidatedObservation& obs,
                                     const ControllerFilter& cf,
                                     const LinearGaussianPolicy& policy,
                                     const ExtendedOptions& opts = {}) {
  check_policy(sys, policy);
  ExtendedSystem ext = assemble_extended(sys, obs, cf, policy);

  const auto sigma = solve_dare_filter(ext.a_rho, ext.d_rho, ext.noise_total(),
                                       ext.psi_v, opts.sigma_warm_start, opts.dare);
  const FilterRiccatiSolution pi =
      opts.pi_solution ? *opts.pi_solution
                       : solve_pi(ext, opts.pi_warm_start, opts.dare);

  ext.sigma_rho = sigma.p;
  ext.l_rho = sigma.gain;
  ext.sigma_rho_tilde = sigma.filtered;
  ext.pi = pi.p;
  ext.l_pi = pi.gain;
  ext.pi_tilde = pi.filtered;

  // Q_ρ = Σ̃_ρ A_ρᵀ Σ_ρ⁻¹, i.e. Q_ρᵀ = Σ_ρ⁻¹ A_ρ Σ̃_ρ.
  const Matrix rhs = ext.a_rho * ext.sigma_rho_tilde;
  Eigen::LLT<Matrix> llt(ext.sigma_rho);
  if (llt.info() == Eigen::Success) {
    ext.q_rho = llt.solve(rhs).transpose();
  } else {
    ext.q_rho = (linalg::pinv(ext.sigma_rho) * rhs).transpose();
  }
  return ext;
}

/// ‖(I − A_ρQ_ρ) − (Φ̄ + Ψ_w̄ + Ψ_q̄)Σ_ρ⁻¹‖_∞.
inline double iaq_residual(const ExtendedSystem& ext) {
  const Eigen::Index m = ext.state_dim();
  const Matrix lhs = Matrix::Identity(m, m) - ext.a_rho * ext.q_rho;
  const Matrix rhs =
      ext.sigma_rho.ldlt().solve(ext.noise_total().transpose()).transpose();
  return linalg::max_abs(lhs - rhs);
}

}  // namespace implicit_lqg
