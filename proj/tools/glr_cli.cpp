// Command-line front end for experiment configs.
//
//   glr_cli run <config.json> [--out DIR] [--jobs N] [--validate-only]
//
// Exit status: 0 success, 1 runtime failure, 2 invalid config or usage.

#include "glr/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

int run_command(const std::string& config_path, const std::string& out_dir, int jobs, bool validate_only, bool quiet) {
  glr::ExperimentConfig cfg;
  try {
    cfg = glr::load_experiment_config(config_path);
  } catch (const glr::Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }
  if (!out_dir.empty()) cfg.output_dir = out_dir;

  const std::size_t cells = cfg.strategies.size() * cfg.sequences.size() * cfg.seeds.size();
  if (validate_only) {
    std::cout << "config ok: " << cfg.strategies.size() << " strategies x " << cfg.sequences.size()
              << " sequences x " << cfg.seeds.size() << " seeds = " << cells << " cells";
    if (!cfg.alpha_sweep.empty())
      std::cout << " (+" << cfg.alpha_sweep.size() * cfg.sequences.size() * cfg.seeds.size() << " alpha-sweep cells)";
    std::cout << "\n";
    return 0;
  }

  glr::RunOptions opts;
  opts.jobs = jobs;
  if (!quiet) opts.log = [](const std::string& line) { std::cerr << line << "\n"; };
  try {
    const auto report = glr::run_experiment(cfg, opts);
    glr::write_report(report, cfg, cfg.output_dir);
    std::cout << "wrote " << cfg.output_dir.string() << " (" << report.cells.size() << " cells, "
              << report.total_seconds << " s)\n";
    for (const auto& a : report.aggregates)
      if (a.sequence == "ALL" && a.acc.stats)
        std::cout << "  " << a.strategy << ": ACC " << glr::format_number(a.acc.stats->mean) << " +- "
                  << glr::format_number(a.acc.stats->std) << "\n";
  } catch (const glr::CellError& e) {
    std::cerr << "run failed in " << e.cell() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "run failed: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generative latent replay experiments"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  int jobs = 1;
  bool validate_only = false, quiet = false;
  auto* run = app.add_subcommand("run", "Run every cell of an experiment config");
  run->add_option("config", config_path, "Experiment config (JSON)")->required();
  run->add_option("--out", out_dir, "Output directory (overrides output_dir)");
  run->add_option("--jobs", jobs, "Worker threads across cells")->check(CLI::PositiveNumber);
  run->add_flag("--validate-only", validate_only, "Check the config and exit");
  run->add_flag("-q,--quiet", quiet, "No per-cell progress");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  return run_command(config_path, out_dir, jobs, validate_only, quiet);
}
