// Acceptance run: one PASS/FAIL line per criterion, exit status 1 on any FAIL.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "implicit_lqg/cli_io.hpp"
#include "test_support.hpp"

using namespace implicit_lqg;
using namespace testing_support;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string title;
  double budget_seconds;
  std::function<Outcome()> run;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct Noisy {
  ValidatedSystem sys;
  ValidatedObservation obs;
  RiccatiSolution ric;
  ControllerFilter cf;
};

Noisy make(const LqgSystem& plant, const ObservationModel& model) {
  auto sys = validate_system(plant);
  auto obs = validate_observation(sys, model);
  auto ric = solve_dare_control(sys);
  auto cf = controller_filter(sys, obs, ric);
  return {std::move(sys), std::move(obs), std::move(ric), std::move(cf)};
}

double rel(double a, double b) { return std::abs(a - b) / std::abs(b); }

// ------------------------------------------------------------------ 1

Outcome scalar_closed_form() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto sys = validate_system(golden_plant());
  const auto ric = solve_dare_control(sys);
  const auto wf = noiseless_capacity(sys, ric, 1.0);
  const double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double oracle = 0.5 * std::log(1.0 + 1.0 / ((1.0 + std::sqrt(5.0)) / 2.0 + 1.0));
  const double delta = std::abs(wf.capacity.nats - oracle);
  return {delta <= 1e-10 && elapsed < 1e-3,
          "C(1) = " + fmt("%.12f", wf.capacity.nats) + ", |delta| = " + fmt("%.2e", delta) +
              ", solve " + fmt("%.3f", elapsed * 1e3) + " ms"};
}

// ------------------------------------------------------------------ 2

// Best ½Σlog(1 + λ_iφ_i) over a per-axis grid of diagonal allocations, each
// point scaled radially onto Σ Γ̂_ii φ_i = V.
double grid_max(const Vector& lambda, const Vector& gdiag, double v, int per_axis,
                double cap, double& worst_excess) {
  const Eigen::Index m = lambda.size();
  std::vector<int> idx(static_cast<std::size_t>(m), 0);
  double best = 0.0;
  Vector phi(m);
  for (;;) {
    double used = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) {
      phi(i) = (v / gdiag(i)) * static_cast<double>(idx[static_cast<std::size_t>(i)]) /
               static_cast<double>(per_axis - 1);
      used += gdiag(i) * phi(i);
    }
    if (used > 0.0) {
      phi *= v / used;
      double val = 0.0;
      for (Eigen::Index i = 0; i < m; ++i) val += 0.5 * std::log1p(lambda(i) * phi(i));
      best = std::max(best, val);
      worst_excess = std::max(worst_excess, val - cap);
    }
    Eigen::Index k = 0;
    while (k < m && ++idx[static_cast<std::size_t>(k)] == per_axis) {
      idx[static_cast<std::size_t>(k)] = 0;
      ++k;
    }
    if (k == m) break;
  }
  return best;
}

Outcome water_filling_vs_grid() {
  Random rng(2024);
  int systems = 0, by_dim[4] = {0, 0, 0, 0};
  double worst_gap = 0.0, worst_excess = -1.0;
  while (systems < 20) {
    const Eigen::Index d2 = 1 + systems % 3;
    const auto sys = rng.system(std::max<Eigen::Index>(d2, rng.integer(1, 3)), d2);
    const auto ric = solve_dare_control(sys);
    const auto eig = channel_eigen(sys);
    const Matrix gh = gamma_hat(sys, ric, eig);
    const double v = rng.uniform(0.2, 5.0);
    const auto wf = water_fill(eig, gh, v);
    if (wf.capacity.infinite) continue;
    const int per_axis = d2 == 1 ? 2 : 200;
    double excess = -1.0;
    const double best = grid_max(eig.lambda, gh.diagonal(), v, per_axis, wf.capacity.nats, excess);
    worst_excess = std::max(worst_excess, excess);
    worst_gap = std::max(worst_gap, (wf.capacity.nats - best) / wf.capacity.nats);
    ++by_dim[d2];
    ++systems;
  }
  const bool ok = worst_excess <= 1e-12 && worst_gap <= 1e-3;
  return {ok, std::to_string(systems) + " systems (d2=1/2/3: " + std::to_string(by_dim[1]) +
                  "/" + std::to_string(by_dim[2]) + "/" + std::to_string(by_dim[3]) +
                  "), max grid excess " + fmt("%.2e", std::max(worst_excess, 0.0)) +
                  ", max relative gap " + fmt("%.2e", worst_gap)};
}

// ------------------------------------------------------------------ 3, 4

struct CostCase {
  std::string name;
  std::function<double(std::uint64_t, double&)> run;  // returns empirical, sets analytic
};

Outcome cost_protocol(const std::vector<CostCase>& cases) {
  double worst = 0.0;
  std::string names;
  for (const auto& c : cases) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      double analytic = 0.0;
      const double emp = c.run(seed, analytic);
      worst = std::max(worst, rel(emp, analytic));
    }
    names += (names.empty() ? "" : ", ") + c.name;
  }
  return {worst <= 0.01, std::to_string(cases.size()) + " scenarios x 5 seeds x 1e6 steps (" +
                             names + "), max relative error " + fmt("%.4f", worst)};
}

Outcome lemma2() {
  auto noiseless = [](LqgSystem plant, std::function<Matrix(const ValidatedSystem&,
                                                            const RiccatiSolution&)> phi_of) {
    return [plant, phi_of](std::uint64_t seed, double& analytic) {
      const auto sys = validate_system(plant);
      const auto ric = solve_dare_control(sys);
      const Matrix phi = phi_of(sys, ric);
      analytic = cost_with_signal(sys, ric, phi);
      return empirical_cost(simulate(sys, {ric.gain, phi}, 1000000, seed), sys).value;
    };
  };
  auto water = [](const ValidatedSystem& s, const RiccatiSolution& r) {
    return noiseless_capacity(s, r, 1.0).phi;
  };
  return cost_protocol(
      {{"golden phi=1", noiseless(golden_plant(),
                                  [](const ValidatedSystem&, const RiccatiSolution&) {
                                    return scalar(1.0);
                                  })},
       {"diagonal 2x2 water-filled", noiseless(diagonal_plant(), water)},
       {"coupled 2x2 water-filled", noiseless(coupled_plant(), water)}});
}

Outcome lemma3() {
  auto noisy = [](LqgSystem plant, ObservationModel model, double gain_scale, Matrix phi) {
    return [=](std::uint64_t seed, double& analytic) {
      const auto n = make(plant, model);
      const LinearGaussianPolicy policy{gain_scale * n.ric.gain, phi};
      analytic = cost_noisy_policy(n.sys, n.ric, n.cf, policy);
      return empirical_cost(simulate(n.sys, n.obs, n.cf, policy, 1000000, seed), n.sys).value;
    };
  };
  return cost_protocol(
      {{"golden 1.1K phi=0.5", noisy(golden_plant(), scalar_observation(1.0, 1.0), 1.1,
                                     scalar(0.5))},
       {"golden 0.9K phi=1", noisy(golden_plant(), scalar_observation(0.5, 2.0), 0.9,
                                   scalar(1.0))},
       {"coupled 2x2 1.1K", noisy(coupled_plant(), coupled_observation(), 1.1,
                                  from_rows({{0.4, 0.1}, {0.1, 0.2}}))}});
}

// ------------------------------------------------------------------ 5

Outcome translation_identity() {
  struct Case {
    std::string name;
    LqgSystem plant;
    ObservationModel model;
    Matrix phi;
    double gain_scale;
  };
  const std::vector<Case> cases = {
      {"golden", golden_plant(), scalar_observation(1.0, 1.0), scalar(1.0), 1.0},
      {"golden off-gain", golden_plant(), scalar_observation(0.5, 2.0), scalar(0.5), 1.1},
      {"coupled 2x2", coupled_plant(), coupled_observation(), from_rows({{0.4, 0.1}, {0.1, 0.2}}),
       1.0}};
  double worst = 0.0;
  for (const auto& c : cases) {
    const auto n = make(c.plant, c.model);
    const LinearGaussianPolicy policy{c.gain_scale * n.ric.gain, c.phi};
    TranslationPipeline pipeline(build_extended(n.sys, n.obs, n.cf, policy));
    const auto rep = replay_translation(pipeline, simulate(n.sys, n.obs, n.cf, policy, 10000, 42));
    worst = std::max(worst, rep.identity_residual);
  }
  return {worst <= 1e-8, "3 noisy scenarios x 1e4 steps, max residual " + fmt("%.2e", worst)};
}

// ------------------------------------------------------------------ 6

Outcome noiseless_tightness() {
  std::string detail;
  bool ok = true;
  double worst = 0.0;
  for (const auto& [name, plant] :
       std::vector<std::pair<std::string, LqgSystem>>{{"golden", golden_plant()},
                                                      {"diagonal 2x2", diagonal_plant()}}) {
    const Eigen::Index d1 = plant.a.rows();
    const auto n = make(plant, identity_observation(d1, 1e-8));
    for (double v : {0.5, 1.0, 2.0}) {
      const double c = noiseless_capacity(n.sys, n.ric, v).capacity.nats;
      const double lb = outer_solve(n.sys, n.obs, n.ric, n.cf, v).value;
      worst = std::max(worst, std::abs(lb - c));
      ok &= std::abs(lb - c) <= 1e-3;
    }
  }
  detail = "golden and diagonal 2x2 at V in {0.5, 1, 2}: max |C_lb - C| " + fmt("%.2e", worst);

  // Coupled plant: the diagonal-restricted formula is not the maximum there.
  const auto n = make(coupled_plant(), identity_observation(2, 1e-8));
  double worst_full = 0.0, restricted_gap = 0.0;
  for (double v : {0.5, 1.0, 2.0}) {
    const double full = full_covariance_capacity(n.sys, n.ric, v).capacity.nats;
    const double restricted = noiseless_capacity(n.sys, n.ric, v).capacity.nats;
    const double lb = outer_solve(n.sys, n.obs, n.ric, n.cf, v).value;
    worst_full = std::max(worst_full, std::abs(lb - full));
    restricted_gap = std::max(restricted_gap, lb - restricted);
    ok &= std::abs(lb - full) <= 1e-3;
  }
  detail += "; coupled 2x2 vs full-covariance C: " + fmt("%.2e", worst_full) +
            " (exceeds the diagonal-restricted C by up to " + fmt("%.4f", restricted_gap) + ")";
  return {ok, detail};
}

// ------------------------------------------------------------------ 7

Outcome rate_consistency() {
  const auto sys = validate_system(golden_plant());
  const auto ric = solve_dare_control(sys);
  const auto cap = capacity_scalar(sys, ric, 1.0);
  const auto e1 = empirical_rate(simulate(sys, {ric.gain, scalar(cap.phi)}, 100000, 42), sys,
                                 ric.gain);
  const double r1 = rel(e1.value, cap.nats);

  const auto n = make(golden_plant(), scalar_observation(1.0, 1.0));
  const auto sol = inner_solve(n.sys, n.obs, n.ric, n.cf, n.ric.gain, 1.0);
  const LinearGaussianPolicy policy{n.ric.gain, sol.phi};
  const double analytic = rate_for(n.sys, n.obs, n.ric, n.cf, policy, 1.0).rate;
  const auto e2 = empirical_rate(simulate(n.sys, n.obs, n.cf, policy, 100000, 42),
                                 build_extended(n.sys, n.obs, n.cf, policy));
  const double r2 = rel(e2.value, analytic);
  return {r1 <= 0.02 && r2 <= 0.02,
          "noiseless " + fmt("%.5f", e1.value) + " vs " + fmt("%.5f", cap.nats) + " (rel " +
              fmt("%.4f", r1) + ", stderr " + fmt("%.5f", e1.std_error) + "); noisy " +
              fmt("%.5f", e2.value) + " vs " + fmt("%.5f", analytic) + " (rel " +
              fmt("%.4f", r2) + ", stderr " + fmt("%.5f", e2.std_error) + ")"};
}

// ------------------------------------------------------------------ 8

Outcome structural_suite() {
  Random rng(808);
  double lemma1 = std::numeric_limits<double>::infinity();
  for (int k = 0; k < 100; ++k) {
    const auto sys = rng.system(rng.integer(1, 4), rng.integer(1, 3));
    const auto ric = solve_dare_control(sys);
    const Matrix gh = gamma_hat(sys, ric, channel_eigen(sys));
    lemma1 = std::min(lemma1, gh.diagonal().minCoeff() / std::max(1.0, linalg::max_abs(gh)));
  }
  double pi_diff = 0.0, ordering = std::numeric_limits<double>::infinity(), iaq = 0.0;
  for (int k = 0; k < 20; ++k) {
    const auto sys = rng.system(rng.integer(1, 3), rng.integer(1, 2));
    const auto obs = rng.observation(sys, rng.integer(1, 3));
    const auto ric = solve_dare_control(sys);
    const auto cf = controller_filter(sys, obs, ric);
    const Eigen::Index m = sys.input_dim();
    const auto e1 = build_extended(sys, obs, cf, {ric.gain, rng.pd(m, 0.05)});
    const auto e2 = build_extended(sys, obs, cf, {ric.gain, 3.0 * rng.pd(m, 0.05)});
    pi_diff = std::max(pi_diff, linalg::max_abs(e1.pi - e2.pi));
    ordering = std::min({ordering, linalg::min_eigenvalue(e1.sigma_rho - e1.pi),
                         linalg::min_eigenvalue(e2.sigma_rho - e2.pi)});
    iaq = std::max({iaq, iaq_residual(e1), iaq_residual(e2)});
  }
  int violations = 0;
  for (const LqgSystem& plant : {golden_plant(), diagonal_plant(), coupled_plant()}) {
    const auto sys = validate_system(plant);
    const auto ric = solve_dare_control(sys);
    std::vector<double> c;
    for (int k = 0; k <= 50; ++k)
      c.push_back(noiseless_capacity(sys, ric, 5.0 * k / 50.0).capacity.nats);
    for (std::size_t k = 1; k < c.size(); ++k) {
      if (c[k] < c[k - 1] - 1e-9) ++violations;
      if (k + 1 < c.size() && c[k] < 0.5 * (c[k - 1] + c[k + 1]) - 1e-9) ++violations;
    }
  }
  const bool ok = lemma1 >= -1e-12 && pi_diff <= 1e-10 && ordering >= -1e-10 && iaq <= 1e-8 &&
                  violations == 0;
  return {ok, "min gamma_hat diag " + fmt("%.2e", lemma1) + ", Pi diff " + fmt("%.2e", pi_diff) +
                  ", min eig(Sigma_rho - Pi) " + fmt("%.2e", ordering) + ", IAQ " +
                  fmt("%.2e", iaq) + ", grid violations " + std::to_string(violations)};
}

// ------------------------------------------------------------------ 9

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome determinism() {
  const std::string cli = IMPLICIT_LQG_CLI;
  const std::string dir_s = IMPLICIT_LQG_SCENARIOS;
  const fs::path tmp = fs::temp_directory_path() / "implicit_lqg_acceptance";
  fs::create_directories(tmp);
  struct Run {
    std::string command, scenario, extra;
  };
  const std::vector<Run> runs = {{"capacity", "coupled-2x2", ""},
                                 {"sweep", "diagonal-2x2", "--sweep 0:2:21"},
                                 {"lowerbound", "noisy-golden", ""},
                                 {"simulate", "noisy-2x2", ""},
                                 {"verify-translation", "noisy-2x2", ""}};
  int identical = 0, total = 0;
  for (const auto& r : runs) {
    std::vector<std::string> outputs;
    for (const char* threads : {"1", "1", "4"}) {
      const fs::path out = tmp / (r.command + "_" + std::to_string(outputs.size()) + ".out");
      const std::string cmd = cli + " " + r.command + " --scenario " + dir_s + "/" + r.scenario +
                              ".json --seed 42 --threads " + threads + " " + r.extra +
                              " --out " + out.string();
      // Exit status 1 only reports a failed numeric check; 2 is an error.
      const int rc = WEXITSTATUS(std::system(cmd.c_str()));
      if (rc != 0 && rc != 1) return {false, r.command + " exited with " + std::to_string(rc)};
      outputs.push_back(slurp(out));
    }
    ++total;
    if (!outputs[0].empty() && outputs[0] == outputs[1] && outputs[0] == outputs[2]) ++identical;
  }
  return {identical == total, std::to_string(identical) + "/" + std::to_string(total) +
                                  " commands byte-identical over two runs and threads 1 vs 4"};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {1, "scalar capacity closed form", 1e-3, scalar_closed_form},
      {2, "water-filling vs diagonal grid search", 30, water_filling_vs_grid},
      {3, "noiseless cost ledger", 60, lemma2},
      {4, "noisy cost ledger with suboptimal gain", 60, lemma3},
      {5, "translation identity", 10, translation_identity},
      {6, "noiseless-limit tightness", 300, noiseless_tightness},
      {7, "rate estimator consistency", 30, rate_consistency},
      {8, "structural properties", 60, structural_suite},
      {9, "determinism", 1e9, determinism},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = c.id == 1 || secs <= c.budget_seconds;
    const bool pass = o.passed && in_time;
    if (!pass) ++failed;
    std::printf("%s criterion %d (%s): %s [%.2f s%s]\n", pass ? "PASS" : "FAIL", c.id,
                c.title.c_str(), o.detail.c_str(), secs, in_time ? "" : ", over time budget");
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed,
              criteria.size());
  return failed == 0 ? 0 : 1;
}
