#pragma once

// Scenario files, result records and the command implementations behind the
// implicit_lqg command line tool.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "implicit_lqg/implicit_lqg.hpp"

namespace implicit_lqg::io {

using Json = nlohmann::ordered_json;

inline constexpr const char* kVersion = "implicit-lqg 0.1.0";

struct Tolerances {
  double cost_rel = 0.01;
  double rate_rel = 0.02;
  double identity_abs = 1e-8;
  double lowerbound_abs = 1e-3;
};

struct Scenario {
  std::string name;
  LqgSystem system;
  std::optional<ObservationModel> observation;
  double budget = 0.0;
  std::optional<Matrix> k_bar;
  std::optional<Matrix> phi;
  std::vector<std::uint64_t> seeds{42};
  std::size_t horizon = 100000;
  std::size_t burn_in = 200;
  double noise_scale = 1.0;
  Tolerances tolerances;
};

// ---------------------------------------------------------------- logging

enum class LogLevel { kQuiet = 0, kInfo = 1, kDebug = 2 };

/// IMPLICIT_LQG_LOG = quiet | info | debug (default quiet).
inline LogLevel log_level() {
  const char* env = std::getenv("IMPLICIT_LQG_LOG");
  if (env == nullptr) return LogLevel::kQuiet;
  const std::string v(env);
  if (v == "debug") return LogLevel::kDebug;
  if (v == "info") return LogLevel::kInfo;
  return LogLevel::kQuiet;
}

inline void log(LogLevel level, const std::string& msg) {
  if (static_cast<int>(level) <= static_cast<int>(log_level()) &&
      level != LogLevel::kQuiet) {
    std::cerr << "[implicit-lqg] " << msg << '\n';
  }
}

// ---------------------------------------------------------------- matrices

inline Json matrix_to_json(const Matrix& m) {
  Json data = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
  return Json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

inline Json vector_to_json(const Vector& v) {
  Json out = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

namespace detail {

inline std::size_t line_of_offset(const std::string& text, std::size_t offset) {
  offset = std::min(offset, text.size());
  std::size_t line = 1;
  for (std::size_t i = 0; i < offset; ++i)
    if (text[i] == '\n') ++line;
  return line;
}

// Line of the first occurrence of "key", or 0.
inline std::size_t line_of_key(const std::string& text, const std::string& key) {
  const auto pos = text.find("\"" + key + "\"");
  return pos == std::string::npos ? 0 : line_of_offset(text, pos);
}

class Reader {
 public:
  explicit Reader(const std::string& text) : text_(text) {}

  [[noreturn]] void fail(const std::string& field, const std::string& detail) const {
    const auto dot = field.rfind('.');
    const std::string key = dot == std::string::npos ? field : field.substr(dot + 1);
    throw ParseError(field, line_of_key(text_, key), detail);
  }

  const Json& member(const Json& obj, const std::string& key, const std::string& path) const {
    if (!obj.is_object() || !obj.contains(key)) fail(path, "missing field");
    return obj.at(key);
  }

  double number(const Json& j, const std::string& path) const {
    if (!j.is_number()) fail(path, "expected a number");
    return j.get<double>();
  }

  std::uint64_t count(const Json& j, const std::string& path) const {
    if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<long long>() >= 0)) {
      fail(path, "expected a nonnegative integer");
    }
    return j.get<std::uint64_t>();
  }

  Matrix matrix(const Json& j, const std::string& path) const {
    if (!j.is_object()) fail(path, "expected {\"rows\", \"cols\", \"data\"}");
    const auto rows = count(member(j, "rows", path + ".rows"), path + ".rows");
    const auto cols = count(member(j, "cols", path + ".cols"), path + ".cols");
    const Json& data = member(j, "data", path + ".data");
    if (!data.is_array()) fail(path, "data must be an array");
    if (data.size() != rows * cols) {
      fail(path, "data has " + std::to_string(data.size()) + " entries, expected " +
                     std::to_string(rows * cols));
    }
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (std::size_t k = 0; k < data.size(); ++k) {
      m(static_cast<Eigen::Index>(k / cols), static_cast<Eigen::Index>(k % cols)) =
          number(data[k], path + ".data");
    }
    return m;
  }

 private:
  const std::string& text_;
};

// Validation failures keep their code; the message gains the file line.
template <typename F>
auto with_line(const std::string& text, F&& f) {
  try {
    return f();
  } catch (const ParseError&) {
    throw;
  } catch (const Error& e) {
    const std::size_t line = line_of_key(text, e.subject());
    if (line == 0) throw;
    throw Error(e.code(), e.subject(),
                std::string("line ") + std::to_string(line) + ": " + e.what());
  }
}

}  // namespace detail

inline Json scenario_to_json(const Scenario& sc) {
  Json out;
  out["name"] = sc.name;
  out["system"] = Json{{"A", matrix_to_json(sc.system.a)},
                       {"B", matrix_to_json(sc.system.b)},
                       {"F", matrix_to_json(sc.system.f)},
                       {"G", matrix_to_json(sc.system.g)},
                       {"psi_w", matrix_to_json(sc.system.psi_w)},
                       {"psi_x", matrix_to_json(sc.system.psi_x)}};
  if (sc.observation) {
    out["observation"] = Json{{"d_c", matrix_to_json(sc.observation->d_c)},
                              {"psi_q", matrix_to_json(sc.observation->psi_q)},
                              {"d_r", matrix_to_json(sc.observation->d_r)},
                              {"psi_v", matrix_to_json(sc.observation->psi_v)}};
  }
  out["budget"] = sc.budget;
  if (sc.k_bar || sc.phi) {
    Json policy = Json::object();
    if (sc.k_bar) policy["k_bar"] = matrix_to_json(*sc.k_bar);
    if (sc.phi) policy["phi"] = matrix_to_json(*sc.phi);
    out["policy"] = policy;
  }
  out["seeds"] = sc.seeds;
  out["horizon"] = sc.horizon;
  out["burn_in"] = sc.burn_in;
  out["noise_scale"] = sc.noise_scale;
  out["tolerances"] = Json{{"cost_rel", sc.tolerances.cost_rel},
                           {"rate_rel", sc.tolerances.rate_rel},
                           {"identity_abs", sc.tolerances.identity_abs},
                           {"lowerbound_abs", sc.tolerances.lowerbound_abs}};
  return out;
}

inline std::string serialize_scenario(const Scenario& sc) {
  return scenario_to_json(sc).dump(2) + "\n";
}

/// Parses without the system/observation invariants checks.
inline Scenario parse_scenario_unchecked(const std::string& text) {
  Json doc;
  try {
    doc = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ParseError("", detail::line_of_offset(text, e.byte > 0 ? e.byte - 1 : 0),
                     e.what());
  }
  const detail::Reader rd(text);
  if (!doc.is_object()) rd.fail("scenario", "top level must be an object");
  Scenario sc;
  const Json& name = rd.member(doc, "name", "name");
  if (!name.is_string()) rd.fail("name", "expected a string");
  sc.name = name.get<std::string>();

  const Json& sys = rd.member(doc, "system", "system");
  sc.system.a = rd.matrix(rd.member(sys, "A", "A"), "A");
  sc.system.b = rd.matrix(rd.member(sys, "B", "B"), "B");
  sc.system.f = rd.matrix(rd.member(sys, "F", "F"), "F");
  sc.system.g = rd.matrix(rd.member(sys, "G", "G"), "G");
  sc.system.psi_w = rd.matrix(rd.member(sys, "psi_w", "psi_w"), "psi_w");
  sc.system.psi_x = rd.matrix(rd.member(sys, "psi_x", "psi_x"), "psi_x");

  if (doc.contains("observation") && !doc["observation"].is_null()) {
    const Json& o = doc["observation"];
    ObservationModel obs;
    obs.d_c = rd.matrix(rd.member(o, "d_c", "d_c"), "d_c");
    obs.psi_q = rd.matrix(rd.member(o, "psi_q", "psi_q"), "psi_q");
    obs.d_r = rd.matrix(rd.member(o, "d_r", "d_r"), "d_r");
    obs.psi_v = rd.matrix(rd.member(o, "psi_v", "psi_v"), "psi_v");
    sc.observation = std::move(obs);
  }
  sc.budget = rd.number(rd.member(doc, "budget", "budget"), "budget");
  if (!(sc.budget >= 0.0)) rd.fail("budget", "must be >= 0");

  if (doc.contains("policy") && !doc["policy"].is_null()) {
    const Json& p = doc["policy"];
    if (p.contains("k_bar")) sc.k_bar = rd.matrix(p["k_bar"], "k_bar");
    if (p.contains("phi")) sc.phi = rd.matrix(p["phi"], "phi");
  }
  if (doc.contains("seeds")) {
    const Json& seeds = doc["seeds"];
    if (!seeds.is_array() || seeds.empty()) rd.fail("seeds", "expected a nonempty array");
    sc.seeds.clear();
    for (const auto& s : seeds) sc.seeds.push_back(rd.count(s, "seeds"));
  }
  if (doc.contains("horizon")) sc.horizon = rd.count(doc["horizon"], "horizon");
  if (doc.contains("burn_in")) sc.burn_in = rd.count(doc["burn_in"], "burn_in");
  if (doc.contains("noise_scale")) {
    sc.noise_scale = rd.number(doc["noise_scale"], "noise_scale");
    if (!(sc.noise_scale >= 0.0)) rd.fail("noise_scale", "must be >= 0");
  }
  if (doc.contains("tolerances")) {
    const Json& t = doc["tolerances"];
    if (!t.is_object()) rd.fail("tolerances", "expected an object");
    auto get = [&](const char* key, double& slot) {
      if (t.contains(key)) slot = rd.number(t[key], key);
    };
    get("cost_rel", sc.tolerances.cost_rel);
    get("rate_rel", sc.tolerances.rate_rel);
    get("identity_abs", sc.tolerances.identity_abs);
    get("lowerbound_abs", sc.tolerances.lowerbound_abs);
  }
  return sc;
}

/// Parses and validates. Shape and definiteness problems surface as the
/// library's error codes with the offending field and line.
inline Scenario parse_scenario_text(const std::string& text) {
  Scenario sc = parse_scenario_unchecked(text);
  detail::with_line(text, [&] {
    const ValidatedSystem sys = validate_system(sc.system);
    if (sc.observation) (void)validate_observation(sys, *sc.observation);
    if (sc.k_bar) linalg::require_shape(*sc.k_bar, sys.input_dim(), sys.state_dim(), "k_bar");
    if (sc.phi) linalg::require_shape(*sc.phi, sys.input_dim(), sys.input_dim(), "phi");
    return 0;
  });
  return sc;
}

inline Scenario parse_scenario(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("scenario", 0, "cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_scenario_text(buf.str());
}

// ---------------------------------------------------------------- records

struct Check {
  std::string name;
  double value = 0.0;
  double reference = 0.0;
  double tolerance = 0.0;
  bool passed = true;
};

struct ResultRecord {
  std::string scenario;
  std::string command;
  std::string version = kVersion;
  std::optional<double> wall_time;
  Json payload = Json::object();
  std::vector<Check> checks;

  std::vector<std::string> failures() const {
    std::vector<std::string> out;
    for (const auto& c : checks)
      if (!c.passed) out.push_back(c.name);
    return out;
  }
  bool ok() const { return failures().empty(); }

  void check(std::string name, double value, double reference, double tolerance,
             bool passed) {
    checks.push_back({std::move(name), value, reference, tolerance, passed});
  }
};

inline Json record_to_json(const ResultRecord& r) {
  Json out;
  out["scenario"] = r.scenario;
  out["command"] = r.command;
  out["version"] = r.version;
  if (r.wall_time) out["wall_time"] = *r.wall_time;
  out["payload"] = r.payload;
  Json checks = Json::array();
  for (const auto& c : r.checks) {
    checks.push_back(Json{{"name", c.name},
                          {"value", c.value},
                          {"reference", c.reference},
                          {"tolerance", c.tolerance},
                          {"passed", c.passed}});
  }
  out["checks"] = checks;
  out["failures"] = r.failures();
  out["ok"] = r.ok();
  return out;
}

inline std::string serialize_record(const ResultRecord& r) {
  return record_to_json(r).dump(2) + "\n";
}

// ---------------------------------------------------------------- commands

struct SweepSpec {
  double v_min = 0.0;
  double v_max = 1.0;
  std::size_t steps = 11;
};

/// "a:b:n"
inline SweepSpec parse_sweep(const std::string& text) {
  SweepSpec out;
  const auto c1 = text.find(':');
  const auto c2 = c1 == std::string::npos ? std::string::npos : text.find(':', c1 + 1);
  if (c2 == std::string::npos) throw ParseError("--sweep", 0, "expected a:b:n");
  try {
    std::size_t used = 0;
    out.v_min = std::stod(text.substr(0, c1), &used);
    out.v_max = std::stod(text.substr(c1 + 1, c2 - c1 - 1));
    const long long n = std::stoll(text.substr(c2 + 1));
    if (n < 1) throw std::invalid_argument("steps");
    out.steps = static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw ParseError("--sweep", 0, "expected a:b:n with numbers a <= b and n >= 1");
  }
  if (!(out.v_min >= 0.0) || !(out.v_max >= out.v_min)) {
    throw ParseError("--sweep", 0, "need 0 <= a <= b");
  }
  return out;
}

struct RunOptions {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> burn_in;
  bool bits = false;
  std::optional<SweepSpec> sweep;
  unsigned threads = 1;
  bool timing = false;
};

/// Solved pieces shared by the commands.
struct Context {
  ValidatedSystem sys;
  RiccatiSolution ric;
  std::optional<ValidatedObservation> obs;
  std::optional<ControllerFilter> cf;
};

inline Context load(const Scenario& sc) {
  ValidatedSystem sys = validate_system(sc.system);
  RiccatiSolution ric = solve_dare_control(sys);
  std::optional<ValidatedObservation> obs;
  std::optional<ControllerFilter> cf;
  if (sc.observation) {
    obs = validate_observation(sys, *sc.observation);
    cf = controller_filter(sys, *obs, ric);
  }
  return {std::move(sys), std::move(ric), std::move(obs), std::move(cf)};
}

inline std::vector<std::uint64_t> seeds_for(const Scenario& sc, const RunOptions& opts) {
  if (opts.seed) return {*opts.seed};
  return sc.seeds;
}

inline std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// V, capacity_nats, capacity_bits, alpha, phi_diag_1..phi_diag_d2
inline std::string capacity_csv(const Scenario& sc, const SweepSpec& spec) {
  const Context ctx = load(sc);
  const Eigen::Index m = ctx.sys.input_dim();
  std::string out = "V,capacity_nats,capacity_bits,alpha";
  for (Eigen::Index i = 0; i < m; ++i) out += ",phi_diag_" + std::to_string(i + 1);
  out += "\n";
  for (std::size_t k = 0; k < spec.steps; ++k) {
    const double v =
        spec.steps == 1 ? spec.v_min
                        : spec.v_min + (spec.v_max - spec.v_min) * static_cast<double>(k) /
                                           static_cast<double>(spec.steps - 1);
    const WaterFillingResult wf = noiseless_capacity(ctx.sys, ctx.ric, v);
    const double nats =
        wf.capacity.infinite ? std::numeric_limits<double>::infinity() : wf.capacity.nats;
    out += format_number(v) + "," + format_number(nats) + "," +
           format_number(nats / kNatsPerBit) + "," + format_number(wf.alpha);
    for (Eigen::Index i = 0; i < m; ++i) out += "," + format_number(wf.phi_hat_diag(i));
    out += "\n";
  }
  return out;
}

inline double capacity_value(const Capacity& c) {
  return c.infinite ? std::numeric_limits<double>::infinity() : c.nats;
}

inline ResultRecord cmd_capacity(const Scenario& sc, const RunOptions& = {}) {
  const Context ctx = load(sc);
  ResultRecord rec;
  rec.scenario = sc.name;
  rec.command = "capacity";
  const ChannelEigen eig = channel_eigen(ctx.sys);
  const Matrix gh = gamma_hat(ctx.sys, ctx.ric, eig);
  const WaterFillingResult wf = water_fill(eig, gh, sc.budget);
  Json& p = rec.payload;
  p["V"] = sc.budget;
  p["capacity_nats"] = capacity_value(wf.capacity);
  p["capacity_bits"] = capacity_value(wf.capacity) / kNatsPerBit;
  p["infinite"] = wf.capacity.infinite;
  p["alpha"] = wf.alpha;
  p["phi"] = matrix_to_json(wf.phi);
  p["phi_hat_diag"] = vector_to_json(wf.phi_hat_diag);
  p["gamma_hat_diag"] = vector_to_json(wf.gamma_hat_diag);
  p["channel_eigenvalues"] = vector_to_json(eig.lambda);
  p["j_star"] = ctx.ric.j_star;
  p["gamma"] = matrix_to_json(ctx.ric.gamma);
  p["gain"] = matrix_to_json(ctx.ric.gain);
  p["riccati_residual"] = ctx.ric.residual;
  double off_diagonal = 0.0;
  for (Eigen::Index i = 0; i < gh.rows(); ++i)
    for (Eigen::Index j = 0; j < gh.cols(); ++j)
      if (i != j) off_diagonal = std::max(off_diagonal, std::abs(gh(i, j)));
  p["gamma_hat_max_off_diagonal"] = off_diagonal;
  try {
    const FullCapacity full = full_covariance_capacity(ctx.sys, ctx.ric, sc.budget);
    p["full_covariance_capacity_nats"] = capacity_value(full.capacity);
    p["full_covariance_phi"] = matrix_to_json(full.phi);
  } catch (const Error&) {
    p["full_covariance_capacity_nats"] = nullptr;
  }
  if (!wf.capacity.infinite) {
    const double used = (gh * (eig.u.transpose() * wf.phi * eig.u)).trace();
    rec.check("budget_active", used, sc.budget, 1e-9 * std::max(1.0, sc.budget),
              std::abs(used - sc.budget) <= 1e-9 * std::max(1.0, sc.budget));
  }
  if (ctx.sys.state_dim() == 1 && ctx.sys.input_dim() == 1) {
    const ScalarCapacity closed = capacity_scalar(ctx.sys, ctx.ric, sc.budget);
    const double delta = std::abs(closed.nats - capacity_value(wf.capacity));
    rec.check("scalar_closed_form", capacity_value(wf.capacity), closed.nats, 1e-10,
              delta <= 1e-10);
  }
  return rec;
}

inline ResultRecord cmd_lowerbound(const Scenario& sc, const RunOptions& opts = {}) {
  const Context ctx = load(sc);
  if (!ctx.obs) {
    throw Error(ErrorCode::kValidationError, "observation",
                "lowerbound needs an observation block");
  }
  ResultRecord rec;
  rec.scenario = sc.name;
  rec.command = "lowerbound";
  OuterOptions oo;
  oo.threads = std::max(1u, opts.threads);
  oo.seed = seeds_for(sc, opts).front();
  oo.inner.seed = oo.seed;
  oo.search_inner.seed = oo.seed;
  const LowerBoundResult lb = outer_solve(ctx.sys, *ctx.obs, ctx.ric, *ctx.cf, sc.budget, oo);
  const WaterFillingResult wf = noiseless_capacity(ctx.sys, ctx.ric, sc.budget);
  const FullCapacity full = full_covariance_capacity(ctx.sys, ctx.ric, sc.budget);

  Json& p = rec.payload;
  p["V"] = sc.budget;
  p["value_nats"] = lb.value;
  p["value_bits"] = lb.value / kNatsPerBit;
  p["seed_value_nats"] = lb.seed_value;
  p["k_bar_opt"] = matrix_to_json(lb.k_bar_opt);
  p["phi_opt"] = matrix_to_json(lb.phi_opt);
  p["budget_cap"] = lb.budget_cap;
  p["inner_iterations"] = lb.inner_iterations;
  p["outer_evaluations"] = lb.outer_evaluations;
  p["multistart_spread"] = lb.multistart_spread;
  p["restart_values"] = lb.restart_values;
  p["j_star_star"] = ctx.cf->j_star_star;
  p["noiseless_capacity_nats"] = capacity_value(wf.capacity);
  p["full_covariance_capacity_nats"] = capacity_value(full.capacity);

  rec.check("seed_dominance", lb.value, lb.seed_value, 0.0, lb.value >= lb.seed_value);
  const double upper = capacity_value(full.capacity);
  rec.check("below_noiseless_capacity", lb.value, upper, 1e-9,
            lb.value <= upper + 1e-9 * std::max(1.0, upper));
  const double noise = std::max(linalg::max_eigenvalue(ctx.obs->psi_q()),
                                linalg::max_eigenvalue(ctx.obs->psi_v()));
  if (noise <= 1e-6) {
    rec.check("noiseless_limit", lb.value, upper, sc.tolerances.lowerbound_abs,
              std::abs(lb.value - upper) <= sc.tolerances.lowerbound_abs);
  }
  return rec;
}

/// The scenario's policy, or the default: K with the noiseless water-filled Φ,
/// or K with the inner-problem optimum in the noisy setting.
inline LinearGaussianPolicy scenario_policy(const Scenario& sc, const Context& ctx) {
  LinearGaussianPolicy policy;
  policy.k_bar = sc.k_bar ? *sc.k_bar : ctx.ric.gain;
  if (sc.phi) {
    policy.phi = *sc.phi;
  } else if (ctx.obs) {
    policy.phi = inner_solve(ctx.sys, *ctx.obs, ctx.ric, *ctx.cf, policy.k_bar, sc.budget).phi;
  } else {
    policy.phi = noiseless_capacity(ctx.sys, ctx.ric, sc.budget).phi;
  }
  return policy;
}

inline Json estimate_json(const Estimate& e) {
  return Json{{"value", e.value}, {"stderr", e.std_error}, {"samples", e.samples}};
}

inline ResultRecord cmd_simulate(const Scenario& sc, const RunOptions& opts = {}) {
  const Context ctx = load(sc);
  ResultRecord rec;
  rec.scenario = sc.name;
  rec.command = "simulate";
  const LinearGaussianPolicy policy = scenario_policy(sc, ctx);
  check_policy(ctx.sys, policy);
  const std::size_t burn_in = opts.burn_in.value_or(sc.burn_in);

  double cost_ref = 0.0;
  double rate_ref = 0.0;
  std::optional<ExtendedSystem> ext;
  if (ctx.obs) {
    cost_ref = cost_noisy_policy(ctx.sys, ctx.ric, *ctx.cf, policy);
    ext = build_extended(ctx.sys, *ctx.obs, *ctx.cf, policy);
    rate_ref = std::max(0.0, half_log_det_output(*ext, ext->sigma_rho) -
                                 half_log_det_output(*ext, ext->pi));
  } else {
    const Matrix gb = gamma_bar(ctx.sys, policy.k_bar);
    cost_ref = (gb * ctx.sys.psi_w()).trace() + (signal_weight(ctx.sys, gb) * policy.phi).trace();
    const Matrix bpb = ctx.sys.b() * policy.phi * ctx.sys.b().transpose();
    rate_ref = 0.5 * (linalg::log_det_pd(bpb + ctx.sys.psi_w(), "B phi B' + psi_w") -
                      linalg::log_det_pd(ctx.sys.psi_w(), "psi_w"));
  }
  const bool silent = sc.noise_scale == 0.0;
  Json& p = rec.payload;
  p["noisy"] = ctx.obs.has_value();
  p["horizon"] = sc.horizon;
  p["burn_in"] = burn_in;
  p["k_bar"] = matrix_to_json(policy.k_bar);
  p["phi"] = matrix_to_json(policy.phi);
  p["cost_reference"] = silent ? 0.0 : cost_ref;
  p["rate_reference_nats"] = silent ? 0.0 : rate_ref;
  Json runs = Json::array();
  for (std::uint64_t seed : seeds_for(sc, opts)) {
    SimulationOptions so;
    so.scenario = sc.name;
    so.burn_in = burn_in;
    so.noise_scale = sc.noise_scale;
    const Trajectory tr = ctx.obs ? simulate(ctx.sys, *ctx.obs, *ctx.cf, policy, sc.horizon,
                                             seed, so)
                                  : simulate(ctx.sys, policy, sc.horizon, seed, so);
    const Estimate cost = empirical_cost(tr, ctx.sys);
    Json run{{"seed", seed}, {"j_hat", estimate_json(cost)}};
    const std::string tag = "seed_" + std::to_string(seed);
    if (silent) {
      rec.check(tag + ".j_hat_zero", cost.value, 0.0, 1e-12, std::abs(cost.value) <= 1e-12);
    } else {
      const double rel = std::abs(cost.value - cost_ref) / std::abs(cost_ref);
      rec.check(tag + ".cost_rel", rel, 0.0, sc.tolerances.cost_rel,
                rel <= sc.tolerances.cost_rel);
      const RateEstimate rate = ctx.obs ? empirical_rate(tr, *ext)
                                        : empirical_rate(tr, ctx.sys, policy.k_bar);
      run["rate_hat_nats"] = Json{{"value", rate.value},
                                  {"stderr", rate.std_error},
                                  {"samples", rate.samples}};
      run["innovation_cov_without_signal"] = matrix_to_json(rate.cov_without_signal);
      run["innovation_cov_with_signal"] = matrix_to_json(rate.cov_with_signal);
      const double delta = std::abs(rate.value - rate_ref);
      const double allowed = std::max(sc.tolerances.rate_rel * rate_ref, 2.0 * rate.std_error);
      rec.check(tag + ".rate_abs", delta, 0.0, allowed, delta <= allowed);
    }
    if (opts.bits && !silent) {
      const PamResult pam =
          pam_demo(ctx.sys, ctx.obs ? &*ctx.obs : nullptr, ctx.cf ? &*ctx.cf : nullptr,
                   policy.k_bar, policy.phi, sc.horizon,
                   linalg::max_eigenvalue(linalg::symmetrize(policy.phi)), seed, burn_in);
      run["pam"] = Json{{"ber", pam.ber},
                        {"bit_errors", pam.bit_errors},
                        {"symbols", pam.symbols},
                        {"power", pam.power},
                        {"nominal_bits_per_step", pam.rate_used},
                        {"note", "uncoded per-symbol 4-PAM, below capacity"}};
    }
    runs.push_back(run);
    log(LogLevel::kInfo, "simulate " + sc.name + " seed " + std::to_string(seed) +
                             " j_hat " + format_number(cost.value));
  }
  p["runs"] = runs;
  return rec;
}

inline ResultRecord cmd_verify_translation(const Scenario& sc, const RunOptions& opts = {}) {
  const Context ctx = load(sc);
  if (!ctx.obs) {
    throw Error(ErrorCode::kValidationError, "observation",
                "verify-translation needs an observation block");
  }
  ResultRecord rec;
  rec.scenario = sc.name;
  rec.command = "verify-translation";
  const LinearGaussianPolicy policy = scenario_policy(sc, ctx);
  const std::size_t burn_in = opts.burn_in.value_or(sc.burn_in);
  TranslationPipeline pipeline(build_extended(ctx.sys, *ctx.obs, *ctx.cf, policy));
  const ExtendedSystem& ext = pipeline.ext();
  const Eigen::Index d1 = ext.plant_dim();
  const Eigen::Index m = ext.state_dim();
  const double tol = sc.tolerances.identity_abs;

  Json& p = rec.payload;
  p["horizon"] = sc.horizon;
  p["burn_in"] = burn_in;
  const double iaq = iaq_residual(ext);
  const double pinv = linalg::max_abs(pipeline.l_rho_pinv() * ext.l_rho -
                                      Matrix::Identity(d1, d1));
  const double inv = linalg::max_abs(pipeline.iaq_inv() * pipeline.iaq() -
                                     Matrix::Identity(m, m));
  const double radius = tau_radius(ext);
  p["iaq_identity_residual"] = iaq;
  p["pinv_residual"] = pinv;
  p["iaq_inverse_residual"] = inv;
  p["tau_spectral_radius"] = radius;
  rec.check("iaq_identity", iaq, 0.0, tol, iaq <= tol);
  rec.check("l_rho_pinv", pinv, 0.0, 1e-9, pinv <= 1e-9);
  rec.check("iaq_inverse", inv, 0.0, 1e-9, inv <= 1e-9);
  rec.check("tau_stable", radius, 1.0, 0.0, radius < 1.0);

  Json runs = Json::array();
  for (std::uint64_t seed : seeds_for(sc, opts)) {
    SimulationOptions so;
    so.scenario = sc.name;
    so.burn_in = burn_in;
    so.noise_scale = sc.noise_scale;
    const Trajectory tr = simulate(ctx.sys, *ctx.obs, *ctx.cf, policy, sc.horizon, seed, so);
    const ReplayReport rep = replay_translation(pipeline, tr);
    const std::string tag = "seed_" + std::to_string(seed);
    runs.push_back(Json{{"seed", seed},
                        {"identity_residual", rep.identity_residual},
                        {"block_residual", rep.block_residual},
                        {"tau_residual", rep.tau_residual},
                        {"roundtrip_residual", rep.roundtrip_residual},
                        {"transient_residual", rep.transient_residual},
                        {"steps", rep.steps}});
    rec.check(tag + ".identity", rep.identity_residual, 0.0, tol, rep.identity_residual <= tol);
    rec.check(tag + ".block_form", rep.block_residual, 0.0, tol, rep.block_residual <= tol);
    rec.check(tag + ".tau_recursion", rep.tau_residual, 0.0, tol, rep.tau_residual <= tol);
    rec.check(tag + ".roundtrip", rep.roundtrip_residual, 0.0, tol,
              rep.roundtrip_residual <= tol);
  }
  p["runs"] = runs;
  return rec;
}

/// Dispatches a subcommand; returns the process exit code. Records go to
/// `out` (JSON, or CSV for sweeps).
inline int run_command(const std::string& command, const Scenario& sc, const RunOptions& opts,
                       std::ostream& out) {
  if (command == "sweep" || (command == "capacity" && opts.sweep)) {
    if (!opts.sweep) throw ParseError("--sweep", 0, "sweep needs --sweep a:b:n");
    out << capacity_csv(sc, *opts.sweep);
    return 0;
  }
  const auto start = std::chrono::steady_clock::now();
  ResultRecord rec;
  if (command == "capacity") {
    rec = cmd_capacity(sc, opts);
  } else if (command == "lowerbound") {
    rec = cmd_lowerbound(sc, opts);
  } else if (command == "simulate") {
    rec = cmd_simulate(sc, opts);
  } else if (command == "verify-translation") {
    rec = cmd_verify_translation(sc, opts);
  } else {
    throw Error(ErrorCode::kValidationError, "command", "unknown command " + command);
  }
  if (opts.timing) {
    rec.wall_time =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
  out << serialize_record(rec);
  for (const auto& f : rec.failures()) std::cerr << "check failed: " << f << '\n';
  return rec.ok() ? 0 : 1;
}

}  // namespace implicit_lqg::io
