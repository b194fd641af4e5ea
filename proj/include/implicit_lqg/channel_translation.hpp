#pragma once

// Receiver-side translation of observations z^{t+1} into the equivalent
// Gaussian channel output ȳ_t = D_r B s_t + β_t.

#include <utility>

#include "implicit_lqg/estimation.hpp"

namespace implicit_lqg {

struct TranslationStep {
  Vector innovation;  // z_{t+1} − D_ρ A_ρ ρ̂_{t|t}
  Vector y_hat;       // (I − A_ρQ_ρ) L_ρ · innovation
  Vector y_bar;       // L_ρ† (I − A_ρQ_ρ)⁻¹ ŷ_t
};

class TranslationPipeline {
 public:
  explicit TranslationPipeline(ExtendedSystem ext, double pinv_cond_limit = 1e10)
      : ext_(std::move(ext)) {
    const Eigen::Index m = ext_.state_dim();
    if (ext_.l_rho.size() == 0 || ext_.q_rho.size() == 0) {
      throw Error(ErrorCode::kValidationError, "ext",
                  "extended system has no steady-state gains");
    }
    iaq_ = Matrix::Identity(m, m) - ext_.a_rho * ext_.q_rho;
    Eigen::FullPivLU<Matrix> lu(iaq_);
    const double cond = linalg::condition_number(iaq_);
    if (!lu.isInvertible() || !(cond <= pinv_cond_limit)) {
      throw Error(ErrorCode::kNotInvertible, "I - A_rho Q_rho",
                  "condition number " + linalg::format_g(cond) +
                      "; the injected noise covariance is rank deficient");
    }
    iaq_inv_ = lu.inverse();

    const Matrix normal = ext_.l_rho.transpose() * ext_.l_rho;
    if (linalg::condition_number(normal) <= pinv_cond_limit) {
      l_rho_pinv_ = normal.ldlt().solve(ext_.l_rho.transpose());
    } else {
      l_rho_pinv_ = linalg::pinv(ext_.l_rho);
    }
    effective_input_map_ = ext_.d_r * ext_.input_map;
    reset();
  }

  const ExtendedSystem& ext() const { return ext_; }
  const Matrix& iaq() const { return iaq_; }
  const Matrix& iaq_inv() const { return iaq_inv_; }
  const Matrix& l_rho_pinv() const { return l_rho_pinv_; }
  const Matrix& effective_input_map() const { return effective_input_map_; }
  const Vector& state() const { return state_; }

  /// ρ̂_{1|1} = 0 with the steady-state gain from the first step on.
  void reset() { state_ = Vector::Zero(ext_.state_dim()); }

  Vector predicted_observation() const { return predicted_observation(state_); }
  Vector predicted_observation(const Vector& state) const {
    return ext_.d_rho * (ext_.a_rho * state);
  }

  TranslationStep step(const Vector& z_next) {
    TranslationStep out;
    out.innovation = z_next - predicted_observation();
    out.y_hat = iaq_ * (ext_.l_rho * out.innovation);
    out.y_bar = l_rho_pinv_ * (iaq_inv_ * out.y_hat);
    state_ = ext_.a_rho * state_ + ext_.l_rho * out.innovation;
    return out;
  }

  /// z_{t+1} rebuilt from ȳ_t and the filter state ρ̂_{t|t} it was formed
  /// from (inverse of step).
  Vector recover_observation(const Vector& y_bar, const Vector& state) const {
    const Vector y_hat = iaq_ * (ext_.l_rho * y_bar);
    return predicted_observation(state) + l_rho_pinv_ * (iaq_inv_ * y_hat);
  }
  Vector recover_observation(const Vector& y_bar) const {
    return recover_observation(y_bar, state_);
  }

 private:
  ExtendedSystem ext_;
  Matrix iaq_;
  Matrix iaq_inv_;
  Matrix l_rho_pinv_;
  Matrix effective_input_map_;
  Vector state_;
};

/// z holds z_1..z_{n+1} as columns; returns ȳ_1..ȳ_n. z_1 is not used since
/// the filter starts from ρ̂_{1|1} = 0.
inline Matrix translate_stream(TranslationPipeline& pipeline, const Matrix& z) {
  if (z.cols() < 2) {
    throw Error(ErrorCode::kTooShort, "z", "need at least two observations");
  }
  linalg::require_shape(z, pipeline.ext().plant_dim(), z.cols(), "z");
  pipeline.reset();
  Matrix out(z.rows(), z.cols() - 1);
  for (Eigen::Index t = 0; t + 1 < z.cols(); ++t) {
    out.col(t) = pipeline.step(z.col(t + 1)).y_bar;
  }
  return out;
}

/// τ_{t+1} = (I − L_ρD_ρ)(A_ρτ_t + s̄_t + w̄_t + q̄_{t+1}) − L_ρ v_{t+1}
inline Vector tau_recursion_step(const ExtendedSystem& ext, const Vector& tau,
                                 const Vector& s, const Vector& w,
                                 const Vector& q_next, const Vector& v_next) {
  const Vector driven = ext.a_rho * tau + ext.lifted_noise(s, w, q_next);
  return driven - ext.l_rho * (ext.d_rho * driven + v_next);
}

/// β_t = D_r w_t + D_ρ A_ρ τ_t + v_{t+1}
inline Vector channel_noise(const ExtendedSystem& ext, const Vector& tau,
                            const Vector& w, const Vector& v_next) {
  return ext.d_r * w + ext.d_rho * (ext.a_rho * tau) + v_next;
}

struct ChannelCovariances {
  Matrix cov_ybar;           // D_ρΣ_ρD_ρᵀ + Ψ_v
  Matrix cov_beta;           // D_ρΠD_ρᵀ + Ψ_v, β given the past signal
  Matrix cov_beta_marginal;  // lag-0 covariance of β
};

inline ChannelCovariances analytic_channel_covariances(const ExtendedSystem& ext) {
  ChannelCovariances out;
  out.cov_ybar = linalg::symmetrize(ext.d_rho * ext.sigma_rho * ext.d_rho.transpose() +
                                    ext.psi_v);
  out.cov_beta =
      linalg::symmetrize(ext.d_rho * ext.pi * ext.d_rho.transpose() + ext.psi_v);
  const Eigen::Index n = ext.plant_dim();
  out.cov_beta_marginal = linalg::symmetrize(
      out.cov_ybar - ext.d_r * ext.phi_bar.topLeftCorner(n, n) * ext.d_r.transpose());
  return out;
}

/// Spectral radius of (I − L_ρD_ρ)A_ρ.
inline double tau_radius(const ExtendedSystem& ext) {
  const Eigen::Index m = ext.state_dim();
  return linalg::spectral_radius((Matrix::Identity(m, m) - ext.l_rho * ext.d_rho) *
                                 ext.a_rho);
}

}  // namespace implicit_lqg
