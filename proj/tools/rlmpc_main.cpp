#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <string>

#include "rlmpc/harness.hpp"

namespace {

// exit codes: 0 ok, 2 config error, 3 numeric failure, 4 divergence abort
constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kNumericError = 3;
constexpr int kDivergence = 4;

rlmpc::ExperimentConfig load_config(const std::string& config_path, long long seed_override,
                                    const std::string& out_override) {
  rlmpc::ExperimentConfig cfg;
  if (config_path.empty()) {
    cfg = rlmpc::default_config();
  } else {
    cfg = rlmpc::config_from_json(rlmpc::io::read_json_file(config_path));
  }
  if (seed_override >= 0) cfg.master_seed = static_cast<std::uint64_t>(seed_override);
  if (!out_override.empty()) cfg.output_dir = out_override;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid RL + MPC engine load-tracking testbed"};
  app.require_subcommand(1);

  std::string config_path;
  long long seed_override = -1;
  std::string out_override;
  app.add_option("--config", config_path, "JSON configuration file");
  app.add_option("--seed", seed_override, "override the master seed");
  app.add_option("--out", out_override, "override the output directory");

  auto* gen = app.add_subcommand("gen-data", "simulate the PRBS identification dataset");
  auto* trp = app.add_subcommand("train-plant", "fit the GRU plant model on the dataset");
  auto* bas = app.add_subcommand("run-baseline",
                                 "run the plain MPC at nominal and mismatch rail pressure");
  auto* tra = app.add_subcommand("train-agent", "train the TD3 reference-offset agent");
  auto* eva = app.add_subcommand("evaluate", "run the trained hybrid controller");
  auto* rep = app.add_subcommand("report", "summarize baseline and hybrid KPIs");
  auto* dfl = app.add_subcommand("dump-config", "write the built-in defaults as JSON to stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (dfl->parsed()) {
      rlmpc::ExperimentConfig cfg = load_config(config_path, seed_override, out_override);
      std::printf("%s\n", rlmpc::config_to_json(cfg).dump(1).c_str());
      return kOk;
    }
    const rlmpc::ExperimentConfig cfg = load_config(config_path, seed_override, out_override);
    if (gen->parsed()) {
      rlmpc::run_gen_data(cfg);
    } else if (trp->parsed()) {
      rlmpc::run_train_plant(cfg);
    } else if (bas->parsed()) {
      rlmpc::run_baseline(cfg);
    } else if (tra->parsed()) {
      rlmpc::run_train_agent(cfg);
    } else if (eva->parsed()) {
      rlmpc::run_evaluate(cfg);
    } else if (rep->parsed()) {
      rlmpc::run_report(cfg);
    }
    return kOk;
  } catch (const rlmpc::DivergenceError& e) {
    std::fprintf(stderr, "divergence: %s\n", e.what());
    return kDivergence;
  } catch (const rlmpc::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigError;
  } catch (const rlmpc::NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kNumericError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kNumericError;
  }
}
