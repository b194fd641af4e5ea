#pragma once

// Achievable rate of stationary linear Gaussian policies with noisy
// observations: evaluation for a fixed (K̄, Φ), the concave inner problem over
// Φ for a fixed K̄, and a multistart derivative-free search over K̄.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <thread>
#include <vector>

#include "implicit_lqg/estimation.hpp"
#include "implicit_lqg/noiseless_capacity.hpp"
#include "implicit_lqg/rng.hpp"

namespace implicit_lqg {

struct RateEvaluation {
  double rate = 0.0;  // nats per step
  Matrix sigma_rho;
  Matrix pi;
  double budget_used = 0.0;  // Tr((G + BᵀΓ̄B)Φ)
  double budget_cap = 0.0;   // V − Tr((Γ̄ − Γ)(Σ_c − Σ̃_c))
  bool feasible = false;
};

namespace detail {

/// V − penalty, with rounding-level negatives snapped to zero.
inline double budget_cap(double v, double penalty) {
  const double cap = v - penalty;
  if (cap < 0.0 && -cap <= 1e-10 * std::max({1.0, std::abs(v), std::abs(penalty)})) {
    return 0.0;
  }
  return cap;
}

}  // namespace detail

/// ½ log det(D_ρ X D_ρᵀ + Ψ_v)
inline double half_log_det_output(const ExtendedSystem& ext, const Matrix& x) {
  return 0.5 * linalg::log_det_pd(ext.d_rho * x * ext.d_rho.transpose() + ext.psi_v,
                                  "D X D' + psi_v");
}

inline RateEvaluation rate_for(const ValidatedSystem& sys,
                               const ValidatedObservation& obs,
                               const RiccatiSolution& ric,
                               const ControllerFilter& cf,
                               const LinearGaussianPolicy& policy, double v,
                               const RiccatiOptions& dare = {}) {
  ExtendedOptions eopts;
  eopts.dare = dare;
  const ExtendedSystem ext = build_extended(sys, obs, cf, policy, eopts);
  const Matrix gb = gamma_bar(sys, policy.k_bar);
  RateEvaluation out;
  out.sigma_rho = ext.sigma_rho;
  out.pi = ext.pi;
  out.rate = std::max(0.0, half_log_det_output(ext, ext.sigma_rho) -
                               half_log_det_output(ext, ext.pi));
  out.budget_used = (signal_weight(sys, gb) * policy.phi).trace();
  out.budget_cap = detail::budget_cap(v, gain_penalty(gb, ric, cf));
  out.feasible = out.budget_cap >= 0.0 &&
                 out.budget_used <= out.budget_cap + 1e-12 * std::max(1.0, std::abs(v));
  return out;
}

/// f(K̄, ·) for a fixed gain: everything that does not depend on Φ is computed
/// once; each objective evaluation solves only the Σ_ρ Riccati equation.
class InnerProblem {
 public:
  InnerProblem(const ValidatedSystem& sys, const ValidatedObservation& obs,
               const RiccatiSolution& ric, const ControllerFilter& cf,
               const Matrix& k_bar, double v, const RiccatiOptions& dare = {})
      : sys_(&sys), dare_(dare) {
    const Eigen::Index m = sys.input_dim();
    LinearGaussianPolicy zero{k_bar, Matrix::Zero(m, m)};
    check_policy(sys, zero);
    gamma_bar_ = gamma_bar(sys, k_bar);
    weight_ = signal_weight(sys, gamma_bar_);
    budget_cap_ = detail::budget_cap(v, gain_penalty(gamma_bar_, ric, cf));
    ext_ = assemble_extended(sys, obs, cf, zero);
    pi_ = solve_pi(ext_, std::nullopt, dare_);
    half_log_det_pi_ = half_log_det_output(ext_, pi_.p);

    // Whitening W with Tr(weight Φ) = ‖C‖²_F for Φ = W⁻ᵀ C Cᵀ W⁻¹.
    Matrix w = weight_;
    const double jitter = 1e-12 * std::max(w.trace(), 1e-300);
    Eigen::LLT<Matrix> llt(w);
    if (llt.info() != Eigen::Success || linalg::min_eigenvalue(w) <= jitter) {
      llt.compute(w + jitter * Matrix::Identity(m, m));
    }
    whiten_ = llt.matrixL();  // weight ≈ W Wᵀ
    unwhiten_ = whiten_.triangularView<Eigen::Lower>().solve(Matrix::Identity(m, m));
  }

  double budget_cap() const { return budget_cap_; }
  const Matrix& weight() const { return weight_; }
  const Matrix& gamma_bar_matrix() const { return gamma_bar_; }
  const FilterRiccatiSolution& pi() const { return pi_; }
  Eigen::Index input_dim() const { return sys_->input_dim(); }

  /// Φ for a factor C in whitened coordinates.
  Matrix phi_from_factor(const Matrix& c) const {
    const Matrix left = unwhiten_.transpose() * c;
    return linalg::symmetrize(left * left.transpose());
  }
  /// Lower-triangular C with phi_from_factor(C) = Φ (Φ ⪰ 0).
  Matrix factor_from_phi(const Matrix& phi) const {
    const Eigen::Index m = input_dim();
    Matrix whitened = linalg::symmetrize(whiten_.transpose() * phi * whiten_);
    whitened += 1e-14 * std::max(whitened.trace(), 1e-300) * Matrix::Identity(m, m);
    return Eigen::LLT<Matrix>(whitened).matrixL();
  }

  double objective(const Matrix& phi, Matrix* warm = nullptr) const {
    const Eigen::Index n = sys_->state_dim();
    Matrix noise = ext_.psi_w_bar + ext_.psi_q_bar;
    noise.topLeftCorner(n, n) +=
        linalg::symmetrize(sys_->b() * phi * sys_->b().transpose());
    std::optional<Matrix> start;
    if (warm && warm->size() > 0) start = *warm;
    FilterRiccatiSolution sol;
    try {
      sol = solve_dare_filter(ext_.a_rho, ext_.d_rho, noise, ext_.psi_v, start, dare_);
    } catch (const Error&) {
      if (!start) throw;
      sol = solve_dare_filter(ext_.a_rho, ext_.d_rho, noise, ext_.psi_v,
                              std::nullopt, dare_);
    }
    if (warm) *warm = sol.p;
    return half_log_det_output(ext_, sol.p) - half_log_det_pi_;
  }

 private:
  const ValidatedSystem* sys_;
  RiccatiOptions dare_;
  Matrix gamma_bar_;
  Matrix weight_;
  double budget_cap_ = 0.0;
  ExtendedSystem ext_;
  FilterRiccatiSolution pi_;
  double half_log_det_pi_ = 0.0;
  Matrix whiten_;
  Matrix unwhiten_;
};

struct InnerOptions {
  std::size_t max_iterations = 2000;
  double rel_tol = 1e-8;
  double fd_rel_step = 1e-5;
  std::uint64_t seed = 0;
  bool start_identity = true;
  bool start_water_filling = true;
  bool start_random = true;
  RiccatiOptions dare;
};

struct InnerSolution {
  Matrix phi;
  double value = 0.0;
  double budget_cap = 0.0;
  double budget_used = 0.0;
  std::size_t iterations = 0;
  std::vector<double> start_values;
};

namespace detail {

inline Eigen::Index tri_size(Eigen::Index m) { return m * (m + 1) / 2; }

inline Matrix unpack_lower(const Vector& p, Eigen::Index m) {
  Matrix c = Matrix::Zero(m, m);
  Eigen::Index k = 0;
  for (Eigen::Index j = 0; j < m; ++j)
    for (Eigen::Index i = j; i < m; ++i) c(i, j) = p(k++);
  return c;
}

inline Vector pack_lower(const Matrix& c) {
  const Eigen::Index m = c.rows();
  Vector p(tri_size(m));
  Eigen::Index k = 0;
  for (Eigen::Index j = 0; j < m; ++j)
    for (Eigen::Index i = j; i < m; ++i) p(k++) = c(i, j);
  return p;
}

// Euclidean projection onto the ball ‖p‖² <= cap (the whitened budget set).
inline Vector project_ball(Vector p, double cap) {
  const double sq = p.squaredNorm();
  if (sq > cap && sq > 0.0) p *= std::sqrt(cap / sq);
  return p;
}

struct AscentResult {
  Vector p;
  double value = 0.0;
  std::size_t iterations = 0;
};

inline AscentResult projected_ascent(const InnerProblem& problem, Vector p,
                                     const InnerOptions& opts) {
  const Eigen::Index m = problem.input_dim();
  const double cap = problem.budget_cap();
  const double radius = std::sqrt(cap);
  Matrix warm;
  auto eval = [&](const Vector& q) {
    return problem.objective(problem.phi_from_factor(unpack_lower(q, m)), &warm);
  };
  p = project_ball(std::move(p), cap);
  double f = eval(p);
  double step = radius;
  std::size_t it = 0;
  int quiet = 0;
  const double h_floor = radius / std::sqrt(static_cast<double>(p.size()));
  for (; it < opts.max_iterations; ++it) {
    Vector grad(p.size());
    for (Eigen::Index j = 0; j < p.size(); ++j) {
      const double h = opts.fd_rel_step * std::max(std::abs(p(j)), h_floor);
      Vector plus = p, minus = p;
      plus(j) += h;
      minus(j) -= h;
      grad(j) = (eval(plus) - eval(minus)) / (2.0 * h);
    }
    const double gnorm = grad.norm();
    if (!(gnorm > 0.0)) break;
    step = std::min(2.0 * step, 1e3 * radius / gnorm * gnorm);
    double trial_value = f;
    Vector trial;
    bool accepted = false;
    for (int halving = 0; halving < 60; ++halving) {
      trial = project_ball(p + (step / gnorm) * grad, cap);
      trial_value = eval(trial);
      if (trial_value >= f + 1e-4 * grad.dot(trial - p)) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    const double change = std::abs(trial_value - f);
    p = std::move(trial);
    const double previous = f;
    f = trial_value;
    if (change <= opts.rel_tol * std::max(std::abs(previous), 1e-12)) {
      if (++quiet >= 3) {
        ++it;
        break;
      }
    } else {
      quiet = 0;
    }
  }
  return {p, f, it};
}

}  // namespace detail

/// max_Φ f subject to Tr((G + BᵀΓ̄B)Φ) <= V − Tr((Γ̄ − Γ)(Σ_c − Σ̃_c)).
inline InnerSolution inner_solve(const InnerProblem& problem, const ValidatedSystem& sys,
                                 const InnerOptions& opts = {}) {
  const Eigen::Index m = problem.input_dim();
  InnerSolution out;
  out.budget_cap = problem.budget_cap();
  out.phi = Matrix::Zero(m, m);
  if (out.budget_cap < 0.0) {
    throw Error(ErrorCode::kInfeasibleBudget, "V",
                "gain penalty exceeds the budget (cap " +
                    linalg::format_g(out.budget_cap) + ")");
  }
  if (out.budget_cap <= 1e-15) return out;

  const double cap = out.budget_cap;
  std::vector<Vector> starts;
  if (opts.start_water_filling) {
    // Noiseless water-filling shape with Γ̄ in place of Γ.
    try {
      const FullCapacity wf = weighted_water_fill(sys, problem.weight(), cap);
      if (!wf.capacity.infinite && wf.phi.trace() > 0.0) {
        starts.push_back(detail::pack_lower(problem.factor_from_phi(wf.phi)));
      }
    } catch (const Error&) {
    }
  }
  if (opts.start_identity) {
    starts.push_back(detail::pack_lower(
        std::sqrt(0.5 * cap / static_cast<double>(m)) * Matrix::Identity(m, m)));
  }
  if (opts.start_random) {
    const CounterStream stream(opts.seed, StreamRole::kInnerSeed);
    Vector p = stream.normal_vector(0, detail::tri_size(m));
    if (p.norm() > 0.0) p *= std::sqrt(0.5 * cap) / p.norm();
    starts.push_back(p);
  }
  if (starts.empty()) {
    starts.push_back(detail::pack_lower(
        std::sqrt(0.5 * cap / static_cast<double>(m)) * Matrix::Identity(m, m)));
  }

  out.value = -std::numeric_limits<double>::infinity();
  for (const Vector& start : starts) {
    const auto res = detail::projected_ascent(problem, start, opts);
    out.iterations += res.iterations;
    out.start_values.push_back(res.value);
    if (res.value > out.value) {
      out.value = res.value;
      out.phi = problem.phi_from_factor(detail::unpack_lower(res.p, m));
    }
  }
  out.budget_used = (problem.weight() * out.phi).trace();
  return out;
}

inline InnerSolution inner_solve(const ValidatedSystem& sys,
                                 const ValidatedObservation& obs,
                                 const RiccatiSolution& ric,
                                 const ControllerFilter& cf, const Matrix& k_bar,
                                 double v, const InnerOptions& opts = {}) {
  const InnerProblem problem(sys, obs, ric, cf, k_bar, v, opts.dare);
  return inner_solve(problem, sys, opts);
}

struct OuterOptions {
  std::size_t restarts = 5;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  double stability_margin = 1e-6;
  std::size_t max_evaluations_per_restart = 0;  // 0: 100 * (dim + 1)
  double perturbation_scale = 0.2;
  double simplex_rel_step = 0.05;
  double fatol = 1e-10;
  double xatol = 1e-8;
  InnerOptions inner;          // final solve at the best gain
  InnerOptions search_inner;   // per-candidate solves during the search
  OuterOptions() {
    search_inner.start_identity = false;
    search_inner.start_random = false;
    search_inner.rel_tol = 1e-9;
  }
};

struct LowerBoundResult {
  double value = 0.0;
  Matrix k_bar_opt;
  Matrix phi_opt;
  double seed_value = 0.0;  // f(K, V) at the optimal LQG gain
  double budget_cap = 0.0;
  std::size_t inner_iterations = 0;
  std::size_t outer_evaluations = 0;
  double multistart_spread = 0.0;
  std::vector<double> restart_values;
};

namespace detail {

struct SearchOutcome {
  Vector x;
  double value = -std::numeric_limits<double>::infinity();
  std::size_t evaluations = 0;
};

// Nelder–Mead maximization; −∞ marks infeasible candidates.
template <typename Objective>
SearchOutcome nelder_mead_max(const Objective& objective, const Vector& x0,
                              const OuterOptions& opts) {
  const Eigen::Index dim = x0.size();
  const std::size_t budget = opts.max_evaluations_per_restart > 0
                                 ? opts.max_evaluations_per_restart
                                 : 100 * static_cast<std::size_t>(dim + 1);
  SearchOutcome out;
  std::vector<Vector> pts;
  std::vector<double> vals;
  auto eval = [&](const Vector& x) {
    ++out.evaluations;
    return objective(x);
  };
  const double scale = std::max(x0.cwiseAbs().maxCoeff(), 0.1);
  pts.push_back(x0);
  vals.push_back(eval(x0));
  for (Eigen::Index i = 0; i < dim; ++i) {
    Vector x = x0;
    x(i) += opts.simplex_rel_step * std::max(std::abs(x0(i)), 0.1 * scale);
    pts.push_back(x);
    vals.push_back(eval(x));
  }
  std::vector<std::size_t> order(pts.size());
  while (out.evaluations < budget) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return vals[a] > vals[b]; });
    const std::size_t best = order.front();
    const std::size_t worst = order.back();
    const std::size_t second_worst = order[order.size() - 2];
    double spread_f = 0.0, spread_x = 0.0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      spread_x = std::max(spread_x, (pts[i] - pts[best]).cwiseAbs().maxCoeff());
      spread_f = std::max(spread_f, std::abs(vals[i] - vals[best]));
    }
    if (std::isfinite(vals[worst]) && spread_f <= opts.fatol && spread_x <= opts.xatol) break;

    Vector centroid = Vector::Zero(dim);
    for (std::size_t i = 0; i + 1 < order.size(); ++i) centroid += pts[order[i]];
    centroid /= static_cast<double>(dim);

    const Vector reflected = centroid + (centroid - pts[worst]);
    const double fr = eval(reflected);
    if (fr > vals[best]) {
      const Vector expanded = centroid + 2.0 * (centroid - pts[worst]);
      const double fe = eval(expanded);
      if (fe > fr) {
        pts[worst] = expanded;
        vals[worst] = fe;
      } else {
        pts[worst] = reflected;
        vals[worst] = fr;
      }
      continue;
    }
    if (fr > vals[second_worst]) {
      pts[worst] = reflected;
      vals[worst] = fr;
      continue;
    }
    const bool outside = fr > vals[worst];
    const Vector contracted = outside ? Vector(centroid + 0.5 * (reflected - centroid))
                                      : Vector(centroid + 0.5 * (pts[worst] - centroid));
    const double fc = eval(contracted);
    if (fc > (outside ? fr : vals[worst])) {
      pts[worst] = contracted;
      vals[worst] = fc;
      continue;
    }
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (i == best) continue;
      pts[i] = pts[best] + 0.5 * (pts[i] - pts[best]);
      vals[i] = eval(pts[i]);
    }
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < pts.size(); ++i)
    if (vals[i] > vals[best]) best = i;
  out.x = pts[best];
  out.value = vals[best];
  return out;
}

}  // namespace detail

/// max over K̄ of f(K̄, V), seeded at the optimal LQG gain plus restarts - 1
/// stabilizing perturbations. Restarts draw their perturbations from
/// independent counter streams, so results do not depend on `threads`.
inline LowerBoundResult outer_solve(const ValidatedSystem& sys,
                                    const ValidatedObservation& obs,
                                    const RiccatiSolution& ric,
                                    const ControllerFilter& cf, double v,
                                    const OuterOptions& opts = {}) {
  if (!(v >= 0.0)) {
    throw Error(ErrorCode::kValidationError, "V", "budget must be >= 0");
  }
  const Eigen::Index rows = sys.input_dim();
  const Eigen::Index cols = sys.state_dim();
  auto to_gain = [&](const Vector& x) {
    return Eigen::Map<const Matrix>(x.data(), rows, cols).eval();
  };
  auto to_vec = [&](const Matrix& k) {
    return Eigen::Map<const Vector>(k.data(), k.size()).eval();
  };

  std::atomic<std::size_t> inner_iterations{0};
  auto score = [&](const Vector& x) -> double {
    const Matrix k = to_gain(x);
    if (closed_loop_radius(sys, k) >= 1.0 - opts.stability_margin) {
      return -std::numeric_limits<double>::infinity();
    }
    try {
      const InnerProblem problem(sys, obs, ric, cf, k, v, opts.search_inner.dare);
      if (problem.budget_cap() < 0.0) return -std::numeric_limits<double>::infinity();
      const auto sol = inner_solve(problem, sys, opts.search_inner);
      inner_iterations += sol.iterations;
      return sol.value;
    } catch (const Error&) {
      return -std::numeric_limits<double>::infinity();
    }
  };

  const Vector seed_x = to_vec(ric.gain);
  const double k_scale = std::max(seed_x.cwiseAbs().maxCoeff(), 0.1);
  std::vector<Vector> starts(std::max<std::size_t>(opts.restarts, 1));
  starts[0] = seed_x;
  for (std::size_t r = 1; r < starts.size(); ++r) {
    const CounterStream stream(opts.seed, StreamRole::kRestart);
    const Vector dir = stream.normal_vector(r, seed_x.size());
    double amp = opts.perturbation_scale * k_scale;
    Vector x = seed_x + amp * dir;
    for (int halving = 0; halving < 40 &&
                          closed_loop_radius(sys, to_gain(x)) >= 1.0 - opts.stability_margin;
         ++halving) {
      amp *= 0.5;
      x = seed_x + amp * dir;
    }
    starts[r] = x;
  }

  std::vector<detail::SearchOutcome> outcomes(starts.size());
  auto run = [&](std::size_t r) { outcomes[r] = detail::nelder_mead_max(score, starts[r], opts); };
  const unsigned threads = std::max(1u, std::min<unsigned>(opts.threads,
                                                           static_cast<unsigned>(starts.size())));
  if (threads == 1) {
    for (std::size_t r = 0; r < starts.size(); ++r) run(r);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t r = next++; r < starts.size(); r = next++) run(r);
      });
    }
    for (auto& th : pool) th.join();
  }

  LowerBoundResult out;
  std::size_t best = 0;
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < outcomes.size(); ++r) {
    out.restart_values.push_back(outcomes[r].value);
    out.outer_evaluations += outcomes[r].evaluations;
    if (std::isfinite(outcomes[r].value)) {
      lo = std::min(lo, outcomes[r].value);
      hi = std::max(hi, outcomes[r].value);
    }
    if (outcomes[r].value > outcomes[best].value) best = r;
  }
  out.multistart_spread = std::isfinite(lo) ? hi - lo : 0.0;

  // Seed evaluation with the full multistart inner solve.
  const InnerProblem seed_problem(sys, obs, ric, cf, ric.gain, v, opts.inner.dare);
  std::optional<InnerSolution> seed_sol;
  if (seed_problem.budget_cap() >= 0.0) seed_sol = inner_solve(seed_problem, sys, opts.inner);
  out.seed_value = seed_sol ? seed_sol->value : -std::numeric_limits<double>::infinity();

  out.k_bar_opt = ric.gain;
  out.value = out.seed_value;
  if (seed_sol) {
    out.phi_opt = seed_sol->phi;
    out.budget_cap = seed_sol->budget_cap;
    out.inner_iterations += seed_sol->iterations;
  } else {
    out.phi_opt = Matrix::Zero(rows, rows);
  }
  if (std::isfinite(outcomes[best].value)) {
    const Matrix k = to_gain(outcomes[best].x);
    const InnerProblem problem(sys, obs, ric, cf, k, v, opts.inner.dare);
    const InnerSolution sol = inner_solve(problem, sys, opts.inner);
    out.inner_iterations += sol.iterations;
    if (sol.value > out.value) {
      out.value = sol.value;
      out.k_bar_opt = k;
      out.phi_opt = sol.phi;
      out.budget_cap = sol.budget_cap;
    }
  }
  out.inner_iterations += inner_iterations.load();
  if (!std::isfinite(out.value)) out.value = 0.0;
  return out;
}

}  // namespace implicit_lqg
