#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "implicit_lqg/cli_io.hpp"

int main(int argc, char** argv) {
  namespace io = implicit_lqg::io;
  CLI::App app{"Implicit-channel capacity of LQG control systems"};
  app.set_version_flag("--version", std::string(io::kVersion));
  app.require_subcommand(1, 1);

  std::string scenario_path;
  std::string out_path;
  std::string sweep;
  std::uint64_t seed = 0;
  std::size_t burn_in = 0;
  io::RunOptions opts;

  for (const char* name : {"capacity", "lowerbound", "simulate", "verify-translation", "sweep"}) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--scenario", scenario_path, "scenario JSON file")->required();
    sub->add_option("--seed", seed, "master seed (overrides the scenario seeds)");
    sub->add_option("--out", out_path, "write the record here instead of stdout");
    sub->add_flag("--bits", opts.bits, "simulate: also run the 4-PAM bit transport demo");
    sub->add_option("--sweep", sweep, "budget sweep a:b:n, emitted as CSV");
    sub->add_option("--burn-in", burn_in, "steps discarded before statistics");
    sub->add_option("--threads", opts.threads, "worker threads for the restart search");
    sub->add_flag("--timing", opts.timing, "include wall_time in the record");
  }
  CLI11_PARSE(app, argc, argv);

  const CLI::App* sub = app.get_subcommands().front();
  if (sub->count("--seed") > 0) opts.seed = seed;
  if (sub->count("--burn-in") > 0) opts.burn_in = burn_in;
  try {
    if (!sweep.empty()) opts.sweep = io::parse_sweep(sweep);
    const io::Scenario sc = io::parse_scenario(scenario_path);
    io::log(io::LogLevel::kInfo, "running " + sub->get_name() + " on " + sc.name);
    if (out_path.empty()) return io::run_command(sub->get_name(), sc, opts, std::cout);
    std::ofstream out(out_path, std::ios::binary);
    if (!out) {
      std::cerr << "cannot write " << out_path << '\n';
      return 2;
    }
    return io::run_command(sub->get_name(), sc, opts, out);
  } catch (const implicit_lqg::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
