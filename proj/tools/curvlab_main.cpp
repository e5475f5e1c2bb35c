// Command-line front end: one subcommand per experiment kind.
//
//   curvlab ablate --config configs/ablate_mnist.json --data-dir data/mnist --out runs/ablate

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "curvlab/errors.hpp"
#include "curvlab/harness.hpp"

namespace {

struct Args {
  std::string config;
  std::string data_dir = "data/mnist";
  std::string out = "runs";
  int workers = 1;
  bool smoke = false;
  bool print_config = false;
  std::optional<long> steps;
  std::optional<std::uint64_t> seed;
};

nlohmann::json read_json(const std::string& file) {
  std::ifstream in(file);
  if (!in) throw curvlab::ConfigError("cannot open config " + file);
  try {
    return nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw curvlab::ConfigError(file + ": " + e.what());
  }
}

int run(const std::string& kind, const Args& args) {
  nlohmann::json j = args.config.empty() ? nlohmann::json::object() : read_json(args.config);
  if (j.contains("kind") && j.at("kind") != kind) {
    throw curvlab::ConfigError("config kind '" + j.at("kind").get<std::string>() +
                               "' does not match subcommand '" + kind + "'");
  }
  j["kind"] = kind;
  if (args.steps) j["total_steps"] = *args.steps;
  if (args.seed) j["seed"] = *args.seed;
  if (args.smoke) j["smoke"] = true;
  const curvlab::ExperimentConfig cfg = curvlab::ExperimentConfig::from_json(j);
  if (args.print_config) {
    std::cout << cfg.to_json().dump(2) << "\n";
    return 0;
  }

  const curvlab::Dataset ds = curvlab::load_dataset(cfg, args.data_dir);
  curvlab::RunnerOptions opts;
  opts.out = args.out;
  opts.workers = args.workers;
  const auto t0 = std::chrono::steady_clock::now();
  opts.log = [t0](const std::string& msg) {
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::fprintf(stderr, "[%8.1fs] %s\n", s, msg.c_str());
  };
  const curvlab::ExperimentResult res = curvlab::run_experiment(cfg, ds, opts);

  int failed = 0;
  for (const auto& cell : res.cells) {
    if (!cell.error.empty()) ++failed;
  }
  std::fprintf(stderr, "%zu run(s), %d failed, output in %s\n", res.cells.size(), failed,
               args.out.c_str());
  return failed == 0 ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Curvature-aware optimizer experiments"};
  app.require_subcommand(1);
  Args args;

  const std::vector<std::pair<std::string, std::string>> kinds = {
      {"train", "single training run"},
      {"ablate", "Bulk-SGD grid over eta, k and holdout size with SGD baselines"},
      {"switchpoint", "switch from SGD to Dom or Bulk at a sweep of steps"},
      {"accelerate", "SGD warmup then Bulk at the same and a larger step size"},
      {"interpolate", "(alpha, beta) heatmap of the interpolated update"},
      {"energy", "Hessian energy in the dominant subspace during SGD"}};
  for (const auto& [name, help] : kinds) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", args.config, "JSON experiment config")
        ->check(CLI::ExistingFile);
    sub->add_option("-d,--data-dir", args.data_dir, "dataset directory")
        ->capture_default_str();
    sub->add_option("-o,--out", args.out, "output directory")->capture_default_str();
    sub->add_option("-j,--workers", args.workers, "parallel grid cells")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    sub->add_option("--steps", args.steps, "override total_steps");
    sub->add_option("--seed", args.seed, "override the run seed");
    sub->add_flag("--smoke", args.smoke, "20 epochs, holdout 200");
    sub->add_flag("--print-config", args.print_config, "print the resolved config and exit");
  }

  CLI11_PARSE(app, argc, argv);
  try {
    return run(app.get_subcommands().front()->get_name(), args);
  } catch (const curvlab::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
