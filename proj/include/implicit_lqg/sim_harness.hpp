#pragma once

// Seeded Monte Carlo simulation of the closed loop, empirical cost and rate
// estimators, and a 4-PAM transport demo over the implicit channel.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "implicit_lqg/channel_translation.hpp"
#include "implicit_lqg/noiseless_capacity.hpp"
#include "implicit_lqg/rng.hpp"

namespace implicit_lqg {

/// Column t − 1 holds the value at time t. States and observations run over
/// t = 1..n+1, inputs and process noise over t = 1..n.
struct Trajectory {
  std::string scenario;
  std::uint64_t seed = 0;
  std::size_t burn_in = 200;
  bool noisy = false;
  Matrix x;  // d1 × (n+1)
  Matrix u;  // d2 × n
  Matrix s;  // d2 × n
  Matrix w;  // d1 × n
  Matrix o;        // d3 × (n+1), controller observations
  Matrix z;        // d1 × (n+1), receiver observations
  Matrix x_check;  // d1 × (n+1), x̌_{t|t}
  Matrix v;        // d1 × (n+1)
  Matrix q;        // d3 × (n+1)

  std::size_t steps() const { return static_cast<std::size_t>(u.cols()); }
};

struct SimulationOptions {
  std::string scenario;
  std::size_t burn_in = 200;
  double noise_scale = 1.0;  // multiplies every random draw (x₁, w, q, v, s)
  bool zero_initial_state = false;
  std::optional<Matrix> signal;  // d2 × n, replaces the Gaussian s draws
};

namespace detail {

inline Matrix draw_columns(const CounterStream& stream, const Matrix& cov,
                           std::size_t count, std::size_t first_t, double scale) {
  const Matrix root = linalg::psd_sqrt(cov);
  Matrix out(cov.rows(), static_cast<Eigen::Index>(count));
  for (std::size_t i = 0; i < count; ++i) {
    out.col(static_cast<Eigen::Index>(i)) =
        scale * (root * stream.normal_vector(first_t + i, cov.rows()));
  }
  return out;
}

inline void require_steps(std::size_t n) {
  if (n < 1) throw Error(ErrorCode::kTooShort, "n", "need at least one step");
}

inline Matrix signal_columns(const ValidatedSystem& sys, const LinearGaussianPolicy& policy,
                             std::size_t n, std::uint64_t seed,
                             const SimulationOptions& opts) {
  if (opts.signal) {
    linalg::require_shape(*opts.signal, sys.input_dim(), static_cast<Eigen::Index>(n),
                          "signal");
    return *opts.signal;
  }
  return draw_columns(CounterStream(seed, StreamRole::kSignal), policy.phi, n, 1,
                      opts.noise_scale);
}

}  // namespace detail

/// Noiseless setting: the controller sees x_t and applies u_t = −K̄x_t + s_t.
inline Trajectory simulate(const ValidatedSystem& sys, const LinearGaussianPolicy& policy,
                           std::size_t n, std::uint64_t seed,
                           const SimulationOptions& opts = {}) {
  detail::require_steps(n);
  check_policy(sys, policy);
  const Eigen::Index cols = static_cast<Eigen::Index>(n);
  Trajectory tr;
  tr.scenario = opts.scenario;
  tr.seed = seed;
  tr.burn_in = opts.burn_in;
  tr.s = detail::signal_columns(sys, policy, n, seed, opts);
  tr.w = detail::draw_columns(CounterStream(seed, StreamRole::kProcessNoise), sys.psi_w(),
                              n, 1, opts.noise_scale);
  tr.x.resize(sys.state_dim(), cols + 1);
  tr.u.resize(sys.input_dim(), cols);
  tr.x.col(0) = opts.zero_initial_state
                    ? Vector::Zero(sys.state_dim())
                    : Vector(detail::draw_columns(CounterStream(seed, StreamRole::kInitialState),
                                                  sys.psi_x(), 1, 0, opts.noise_scale)
                                 .col(0));
  for (Eigen::Index t = 0; t < cols; ++t) {
    tr.u.col(t) = -policy.k_bar * tr.x.col(t) + tr.s.col(t);
    tr.x.col(t + 1) = sys.a() * tr.x.col(t) + sys.b() * tr.u.col(t) + tr.w.col(t);
  }
  return tr;
}

/// Noisy setting: the controller runs its steady-state Kalman filter on o_t
/// and applies u_t = −K̄x̌_{t|t} + s_t; the receiver sees z_t = D_r x_t + v_t.
inline Trajectory simulate(const ValidatedSystem& sys, const ValidatedObservation& obs,
                           const ControllerFilter& cf, const LinearGaussianPolicy& policy,
                           std::size_t n, std::uint64_t seed,
                           const SimulationOptions& opts = {}) {
  detail::require_steps(n);
  check_policy(sys, policy);
  const Eigen::Index cols = static_cast<Eigen::Index>(n);
  Trajectory tr;
  tr.scenario = opts.scenario;
  tr.seed = seed;
  tr.burn_in = opts.burn_in;
  tr.noisy = true;
  tr.s = detail::signal_columns(sys, policy, n, seed, opts);
  tr.w = detail::draw_columns(CounterStream(seed, StreamRole::kProcessNoise), sys.psi_w(),
                              n, 1, opts.noise_scale);
  tr.q = detail::draw_columns(CounterStream(seed, StreamRole::kControllerNoise),
                              obs.psi_q(), n + 1, 1, opts.noise_scale);
  tr.v = detail::draw_columns(CounterStream(seed, StreamRole::kReceiverNoise),
                              obs.psi_v(), n + 1, 1, opts.noise_scale);
  tr.x.resize(sys.state_dim(), cols + 1);
  tr.x_check.resize(sys.state_dim(), cols + 1);
  tr.u.resize(sys.input_dim(), cols);
  tr.o.resize(obs.d_c().rows(), cols + 1);
  tr.z.resize(sys.state_dim(), cols + 1);
  tr.x.col(0) = opts.zero_initial_state
                    ? Vector::Zero(sys.state_dim())
                    : Vector(detail::draw_columns(CounterStream(seed, StreamRole::kInitialState),
                                                  sys.psi_x(), 1, 0, opts.noise_scale)
                                 .col(0));
  auto observe = [&](Eigen::Index t) {
    tr.o.col(t) = obs.d_c() * tr.x.col(t) + tr.q.col(t);
    tr.z.col(t) = obs.d_r() * tr.x.col(t) + tr.v.col(t);
  };
  observe(0);
  tr.x_check.col(0) = cf.l_c * tr.o.col(0);  // x̌_{1|0} = 0
  for (Eigen::Index t = 0; t < cols; ++t) {
    tr.u.col(t) = -policy.k_bar * tr.x_check.col(t) + tr.s.col(t);
    tr.x.col(t + 1) = sys.a() * tr.x.col(t) + sys.b() * tr.u.col(t) + tr.w.col(t);
    observe(t + 1);
    const Vector pred = sys.a() * tr.x_check.col(t) + sys.b() * tr.u.col(t);
    tr.x_check.col(t + 1) = pred + cf.l_c * (tr.o.col(t + 1) - obs.d_c() * pred);
  }
  return tr;
}

struct Estimate {
  double value = 0.0;
  double std_error = 0.0;
  std::size_t samples = 0;
};

namespace detail {

class KahanSum {
 public:
  void add(double v) {
    const double y = v - carry_;
    const double t = sum_ + y;
    carry_ = (t - sum_) - y;
    sum_ = t;
  }
  double value() const { return sum_; }

 private:
  double sum_ = 0.0;
  double carry_ = 0.0;
};

inline double mean(const std::vector<double>& xs, std::size_t begin, std::size_t end) {
  KahanSum acc;
  for (std::size_t i = begin; i < end; ++i) acc.add(xs[i]);
  return acc.value() / static_cast<double>(end - begin);
}

/// Mean with a batch-means standard error.
inline Estimate batch_means(const std::vector<double>& xs, std::size_t batches) {
  if (xs.size() < 2 * batches) {
    throw Error(ErrorCode::kTooShort, "trajectory",
                "need at least " + std::to_string(2 * batches) + " post burn-in samples");
  }
  Estimate out;
  out.samples = xs.size();
  out.value = mean(xs, 0, xs.size());
  const std::size_t len = xs.size() / batches;
  KahanSum dev;
  for (std::size_t b = 0; b < batches; ++b) {
    const double m = mean(xs, b * len, (b + 1) * len);
    dev.add((m - out.value) * (m - out.value));
  }
  const double var = dev.value() / static_cast<double>(batches - 1);
  out.std_error = std::sqrt(var / static_cast<double>(batches));
  return out;
}

}  // namespace detail

/// Post burn-in average of x_tᵀFx_t + u_tᵀGu_t, t = burn_in+1..n.
inline Estimate empirical_cost(const Trajectory& tr, const ValidatedSystem& sys,
                               std::size_t batches = 20) {
  const std::size_t n = tr.steps();
  if (n <= tr.burn_in) {
    throw Error(ErrorCode::kTooShort, "trajectory", "shorter than burn-in");
  }
  std::vector<double> costs;
  costs.reserve(n - tr.burn_in);
  for (std::size_t t = tr.burn_in; t < n; ++t) {
    const auto i = static_cast<Eigen::Index>(t);
    const Vector x = tr.x.col(i);
    const Vector u = tr.u.col(i);
    costs.push_back(x.dot(sys.f() * x) + u.dot(sys.g() * u));
  }
  return detail::batch_means(costs, batches);
}

struct RateEstimate {
  double value = 0.0;  // nats per step
  double std_error = 0.0;
  std::size_t samples = 0;
  Matrix cov_without_signal;  // innovations of the filter that treats s as noise
  Matrix cov_with_signal;     // innovations of the filter that knows s
};

struct RateOptions {
  std::size_t block = 1000;
  std::size_t replicates = 200;
};

namespace detail {

// Sufficient statistics of one bootstrap block for two innovation streams.
struct BlockMoments {
  Vector sum_a, sum_b;
  Matrix outer_a, outer_b;
  std::size_t count = 0;
};

inline Matrix centered_cov(const Vector& sum, const Matrix& outer, std::size_t count) {
  const double c = static_cast<double>(count);
  const Vector mu = sum / c;
  return linalg::symmetrize(outer / c - mu * mu.transpose());
}

inline double half_log_ratio(const Matrix& a, const Matrix& b) {
  return 0.5 * (linalg::log_det_pd(a, "innovation covariance") -
                linalg::log_det_pd(b, "innovation covariance"));
}

/// Gaussian plug-in rate from two innovation streams (columns), with a
/// non-overlapping block bootstrap standard error.
inline RateEstimate plug_in_rate(const Matrix& without, const Matrix& with,
                                 std::uint64_t seed, const RateOptions& opts) {
  const std::size_t n = static_cast<std::size_t>(without.cols());
  if (n < static_cast<std::size_t>(2 * without.rows() + 2)) {
    throw Error(ErrorCode::kTooShort, "trajectory", "too few post burn-in samples");
  }
  const std::size_t block = std::max<std::size_t>(1, std::min(opts.block, n / 10));
  const std::size_t blocks = n / block;
  std::vector<BlockMoments> moments(blocks);
  for (std::size_t b = 0; b < blocks; ++b) {
    const auto start = static_cast<Eigen::Index>(b * block);
    const auto len = static_cast<Eigen::Index>(block);
    const auto a = without.middleCols(start, len);
    const auto c = with.middleCols(start, len);
    moments[b] = {a.rowwise().sum(), c.rowwise().sum(), a * a.transpose(),
                  c * c.transpose(), block};
  }
  RateEstimate out;
  out.samples = n;
  out.cov_without_signal = centered_cov(without.rowwise().sum(),
                                        without * without.transpose(), n);
  out.cov_with_signal = centered_cov(with.rowwise().sum(), with * with.transpose(), n);
  out.value = half_log_ratio(out.cov_without_signal, out.cov_with_signal);

  const CounterStream stream(seed, StreamRole::kBootstrap);
  std::vector<double> reps;
  reps.reserve(opts.replicates);
  for (std::size_t r = 0; r < opts.replicates; ++r) {
    BlockMoments acc{Vector::Zero(without.rows()), Vector::Zero(with.rows()),
                     Matrix::Zero(without.rows(), without.rows()),
                     Matrix::Zero(with.rows(), with.rows()), 0};
    for (std::size_t k = 0; k < blocks; ++k) {
      const auto pick = static_cast<std::size_t>(stream.uniform(r, k) *
                                                 static_cast<double>(blocks));
      const BlockMoments& m = moments[std::min(pick, blocks - 1)];
      acc.sum_a += m.sum_a;
      acc.sum_b += m.sum_b;
      acc.outer_a += m.outer_a;
      acc.outer_b += m.outer_b;
      acc.count += m.count;
    }
    reps.push_back(half_log_ratio(centered_cov(acc.sum_a, acc.outer_a, acc.count),
                                  centered_cov(acc.sum_b, acc.outer_b, acc.count)));
  }
  const double m = mean(reps, 0, reps.size());
  KahanSum dev;
  for (double x : reps) dev.add((x - m) * (x - m));
  out.std_error = std::sqrt(dev.value() / static_cast<double>(reps.size() - 1));
  return out;
}

}  // namespace detail

/// Noiseless setting: innovations x_{t+1} − (A − BK̄)x_t with and without B s_t
/// removed.
inline RateEstimate empirical_rate(const Trajectory& tr, const ValidatedSystem& sys,
                                   const Matrix& k_bar, const RateOptions& opts = {}) {
  const std::size_t n = tr.steps();
  if (n <= tr.burn_in) throw Error(ErrorCode::kTooShort, "trajectory", "shorter than burn-in");
  const auto first = static_cast<Eigen::Index>(tr.burn_in);
  const auto len = static_cast<Eigen::Index>(n - tr.burn_in);
  const Matrix closed = sys.a() - sys.b() * k_bar;
  const Matrix without = tr.x.middleCols(first + 1, len) - closed * tr.x.middleCols(first, len);
  const Matrix with = without - sys.b() * tr.s.middleCols(first, len);
  return detail::plug_in_rate(without, with, tr.seed, opts);
}

/// Noisy setting: the receiver filter (gain L_ρ, s unknown) against the filter
/// that knows s̄_t (gain L_Π).
inline RateEstimate empirical_rate(const Trajectory& tr, const ExtendedSystem& ext,
                                   const RateOptions& opts = {}) {
  if (!tr.noisy) {
    throw Error(ErrorCode::kValidationError, "trajectory", "needs receiver observations");
  }
  const std::size_t n = tr.steps();
  if (n <= tr.burn_in) throw Error(ErrorCode::kTooShort, "trajectory", "shorter than burn-in");
  const Eigen::Index m = ext.state_dim();
  const Eigen::Index len = static_cast<Eigen::Index>(n - tr.burn_in);
  Matrix without(ext.plant_dim(), len), with(ext.plant_dim(), len);
  Vector blind = Vector::Zero(m), informed = Vector::Zero(m);
  for (Eigen::Index t = 0; t < static_cast<Eigen::Index>(n); ++t) {
    const Vector z_next = tr.z.col(t + 1);
    const Vector pred_blind = ext.a_rho * blind;
    const Vector innov_blind = z_next - ext.d_rho * pred_blind;
    blind = pred_blind + ext.l_rho * innov_blind;
    const Vector pred_informed = ext.a_rho * informed + ext.lifted_signal(tr.s.col(t));
    const Vector innov_informed = z_next - ext.d_rho * pred_informed;
    informed = pred_informed + ext.l_pi * innov_informed;
    const Eigen::Index k = t - static_cast<Eigen::Index>(tr.burn_in);
    if (k >= 0) {
      without.col(k) = innov_blind;
      with.col(k) = innov_informed;
    }
  }
  return detail::plug_in_rate(without, with, tr.seed, opts);
}

/// Ground-truth replay of the channel translation over a noisy trajectory.
/// Residuals are maxima of ‖·‖_∞ over t > burn_in; the transient maximum
/// covers t <= burn_in.
struct ReplayReport {
  double identity_residual = 0.0;   // ȳ_t − D_rBs_t − β_t
  double block_residual = 0.0;      // ŷ_t against its ground-truth block form
  double tau_residual = 0.0;        // recursion against ρ_t − ρ̂_{t|t}
  double roundtrip_residual = 0.0;  // z_{t+1} rebuilt from ȳ_t
  double transient_residual = 0.0;
  std::size_t steps = 0;
  Matrix y_bar;  // ȳ_1..ȳ_n
  Matrix beta;   // β_1..β_n
};

inline ReplayReport replay_translation(TranslationPipeline& pipeline, const Trajectory& tr) {
  if (!tr.noisy) {
    throw Error(ErrorCode::kValidationError, "trajectory", "needs receiver observations");
  }
  const ExtendedSystem& ext = pipeline.ext();
  const Eigen::Index n = static_cast<Eigen::Index>(tr.steps());
  const Eigen::Index d1 = ext.plant_dim();
  auto rho = [&](Eigen::Index t) {
    Vector out(2 * d1);
    out.head(d1) = tr.x.col(t);
    out.tail(d1) = tr.x.col(t) - tr.x_check.col(t);
    return out;
  };
  ReplayReport out;
  out.steps = static_cast<std::size_t>(n);
  out.y_bar.resize(d1, n);
  out.beta.resize(d1, n);
  pipeline.reset();
  Vector tau_model = rho(0);
  for (Eigen::Index t = 0; t < n; ++t) {
    const Vector tau = rho(t) - pipeline.state();
    const Vector z_next = tr.z.col(t + 1);
    const Vector prior = pipeline.state();
    const TranslationStep step = pipeline.step(z_next);
    const Vector rebuilt = pipeline.recover_observation(step.y_bar, prior);
    const Vector s = tr.s.col(t);
    const Vector w = tr.w.col(t);
    const Vector beta = channel_noise(ext, tau, w, tr.v.col(t + 1));
    const Vector driven = ext.lifted_noise(s, w, tr.q.col(t + 1)) + ext.a_rho * tau;
    const Vector block =
        pipeline.iaq() * (ext.l_rho * (ext.d_rho * driven + tr.v.col(t + 1)));
    const Vector next_tau = rho(t + 1) - pipeline.state();
    tau_model = tau_recursion_step(ext, tau, s, w, tr.q.col(t + 1), tr.v.col(t + 1));

    const double identity =
        (step.y_bar - pipeline.effective_input_map() * s - beta).cwiseAbs().maxCoeff();
    out.y_bar.col(t) = step.y_bar;
    out.beta.col(t) = beta;
    if (static_cast<std::size_t>(t) < tr.burn_in) {
      out.transient_residual = std::max(out.transient_residual, identity);
      continue;
    }
    out.identity_residual = std::max(out.identity_residual, identity);
    out.block_residual =
        std::max(out.block_residual, (step.y_hat - block).cwiseAbs().maxCoeff());
    out.tau_residual =
        std::max(out.tau_residual, (tau_model - next_tau).cwiseAbs().maxCoeff());
    out.roundtrip_residual =
        std::max(out.roundtrip_residual, (rebuilt - z_next).cwiseAbs().maxCoeff());
  }
  return out;
}

struct PamResult {
  double ber = 0.0;
  double rate_used = 0.0;  // nominal bits per step, below capacity
  std::size_t symbols = 0;
  std::size_t bit_errors = 0;
  double power = 0.0;
  double amplitude = 0.0;
  Vector direction;
};

namespace detail {

// Gray labels of the levels −3, −1, +1, +3.
inline constexpr std::array<unsigned, 4> kPamGray = {0b00, 0b01, 0b11, 0b10};

inline unsigned pam_level_of_bits(unsigned bits) {
  for (unsigned i = 0; i < 4; ++i)
    if (kPamGray[i] == bits) return i;
  return 0;
}

inline unsigned pam_decide(double r, double a) {
  if (r < -2.0 * a) return 0;
  if (r < 0.0) return 1;
  if (r < 2.0 * a) return 2;
  return 3;
}

}  // namespace detail

/// 4-PAM over the top eigendirection of `allocation`, with per-symbol
/// whitened matched-filter detection. `obs` and `cf` select the noisy setting.
inline PamResult pam_demo(const ValidatedSystem& sys, const ValidatedObservation* obs,
                          const ControllerFilter* cf, const Matrix& k_bar,
                          const Matrix& allocation, std::size_t symbols, double power,
                          std::uint64_t seed, std::size_t burn_in = 200) {
  const Eigen::Index m = sys.input_dim();
  linalg::require_shape(allocation, m, m, "allocation");
  if (!(power >= 0.0)) throw Error(ErrorCode::kValidationError, "power", "must be >= 0");
  if (symbols < 1) throw Error(ErrorCode::kTooShort, "symbols", "need at least one symbol");
  Eigen::SelfAdjointEigenSolver<Matrix> es(linalg::symmetrize(allocation));
  const double top = es.eigenvalues()(m - 1);
  const Vector dir = es.eigenvectors().col(m - 1);
  if (power > top * (1.0 + 1e-12) + 1e-300) {
    throw Error(ErrorCode::kPowerExceedsBudget, "power",
                "constellation power " + linalg::format_g(power) +
                    " exceeds the allocation " + linalg::format_g(top));
  }
  const double a = std::sqrt(power / 5.0);
  const std::size_t n = burn_in + symbols;
  const CounterStream bit_stream(seed, StreamRole::kBits);
  std::vector<unsigned> sent(n);
  Matrix signal(m, static_cast<Eigen::Index>(n));
  for (std::size_t t = 0; t < n; ++t) {
    sent[t] = static_cast<unsigned>(bit_stream.bits(t, 0) & 3u);
    const double level = 2.0 * detail::pam_level_of_bits(sent[t]) - 3.0;
    signal.col(static_cast<Eigen::Index>(t)) = level * a * dir;
  }
  const LinearGaussianPolicy policy{k_bar, power * dir * dir.transpose()};
  SimulationOptions opts;
  opts.burn_in = burn_in;
  opts.signal = signal;

  Matrix received;  // channel outputs, one column per symbol time
  Matrix noise_cov;
  Vector g;
  if (obs != nullptr && cf != nullptr) {
    const Trajectory tr = simulate(sys, *obs, *cf, policy, n, seed, opts);
    TranslationPipeline pipeline(build_extended(sys, *obs, *cf, policy));
    received = translate_stream(pipeline, tr.z);
    noise_cov = analytic_channel_covariances(pipeline.ext()).cov_beta_marginal;
    g = pipeline.effective_input_map() * dir;
  } else {
    const Trajectory tr = simulate(sys, policy, n, seed, opts);
    const auto cols = static_cast<Eigen::Index>(n);
    received = tr.x.rightCols(cols) - (sys.a() - sys.b() * k_bar) * tr.x.leftCols(cols);
    noise_cov = sys.psi_w();
    g = sys.b() * dir;
  }
  const Eigen::LDLT<Matrix> ldlt(noise_cov);
  const Vector cg = ldlt.solve(g);
  const double gain = g.dot(cg);

  PamResult out;
  out.symbols = symbols;
  out.power = power;
  out.amplitude = a;
  out.direction = dir;
  out.rate_used = 2.0;
  for (std::size_t t = burn_in; t < n; ++t) {
    const double r = gain > 0.0 ? cg.dot(received.col(static_cast<Eigen::Index>(t))) / gain
                                : 0.0;
    const unsigned decided = detail::kPamGray[detail::pam_decide(r, a)];
    out.bit_errors += static_cast<std::size_t>(std::popcount(decided ^ sent[t]));
  }
  out.ber = static_cast<double>(out.bit_errors) / static_cast<double>(2 * symbols);
  return out;
}

}  // namespace implicit_lqg
