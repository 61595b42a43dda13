// Command-line front end: run, sweep and verify.
#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "mrff/experiment.hpp"
#include "mrff/verify.hpp"

int main(int argc, char** argv) {
  CLI::App app{"MRFF federated recommendation simulator"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string out_dir;
  std::uint64_t seed = 0;
  app.add_option("--out", out_dir, "output directory (overrides the config)");
  auto* seed_opt = app.add_option("--seed", seed, "random seed (overrides the config)");

  auto* run = app.add_subcommand("run", "train one federation and write metrics");
  std::string run_config, resume;
  std::size_t checkpoint_every = 0;
  run->add_option("--config", run_config, "experiment config (JSON)")->required();
  run->add_option("--resume", resume, "checkpoint to continue from");
  auto* ckpt_opt = run->add_option("--checkpoint-every", checkpoint_every, "write checkpoint.bin every N rounds");

  auto* sweep = app.add_subcommand("sweep", "one run per value of a hyperparameter");
  std::string sweep_config, axis, values;
  sweep->add_option("--config", sweep_config, "experiment config (JSON)")->required();
  sweep->add_option("--axis", axis, "alpha, groups or noise")->required();
  sweep->add_option("--values", values, "comma-separated values")->required();

  auto* verify = app.add_subcommand("verify", "gradient, balance, aggregation and privacy self-checks");
  std::string fault;
  verify->add_option("--inject-fault", fault, "flip the sign of one op's backward (mutation test)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : mrff::kExitConfig;
  }

  mrff::RunOverrides overrides;
  if (!out_dir.empty()) overrides.out = out_dir;
  if (seed_opt->count()) overrides.seed = seed;
  if (ckpt_opt->count()) overrides.checkpoint_every = checkpoint_every;
  if (!resume.empty()) overrides.resume = resume;

  if (*run) return mrff::cmd_run(run_config, overrides, std::cerr);
  if (*sweep) return mrff::cmd_sweep(sweep_config, axis, values, overrides, std::cerr);
  if (*verify) {
    if (!fault.empty()) {
      const auto op = mrff::parse_op_kind(fault);
      if (!op) {
        std::cerr << "error: --inject-fault: unknown op \"" << fault << "\"\n";
        return mrff::kExitConfig;
      }
      mrff::debug::inject_fault(*op);
    }
    return mrff::run_verify(std::cout) == 0 ? mrff::kExitOk : mrff::kExitFailure;
  }
  return mrff::kExitConfig;
}
