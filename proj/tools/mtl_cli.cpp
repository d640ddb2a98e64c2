#include "mtl/commands.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

namespace {

mtl::ExperimentConfig read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  std::ostringstream text;
  text << in.rdbuf();
  return mtl::parse_config(text.str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-transfer few-shot learning: train, evaluate and report."};
  app.require_subcommand(1);

  std::string config_path, out, checkpoint, spec_name = "mlp", in_path, format = "markdown";
  double eps = 1e-5;
  mtl::Index max_coords = 0;

  auto* train = app.add_subcommand("train", "Train the configured method and write a checkpoint and log");
  train->add_option("--config", config_path, "Experiment config file")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out, "Output directory")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint and append rows to a results file");
  eval->add_option("--config", config_path, "Experiment config file")->required()->check(CLI::ExistingFile);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint written by train")->required();
  eval->add_option("--out", out, "Results CSV (appended)")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  gradcheck->add_option("--spec", spec_name, "mlp | mlp-small | conv-small | conv")->required();
  gradcheck->add_option("--eps", eps, "Central-difference step")->capture_default_str();
  gradcheck->add_option("--max-coords", max_coords, "Probe at most this many coordinates (0 = all)")
      ->capture_default_str();

  auto* report = app.add_subcommand("report", "Pivot a results file into a table");
  report->add_option("--in", in_path, "Results CSV")->required()->check(CLI::ExistingFile);
  report->add_option("--format", format, "csv | markdown")
      ->check(CLI::IsMember({"csv", "markdown"}))
      ->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      const auto a = mtl::run_train(read_config(config_path), out);
      std::cout << "checkpoint " << a.checkpoint.string() << "\nlog " << a.log.string() << "\nconfig "
                << a.resolved_config.string() << '\n';
    } else if (*eval) {
      for (const auto& row : mtl::run_eval(read_config(config_path), checkpoint, out)) {
        std::cout << mtl::format_results_row(row) << '\n';
      }
    } else if (*gradcheck) {
      const auto r = mtl::run_gradcheck(spec_name, eps, max_coords);
      std::cout << "spec " << r.spec_name << " (" << r.parameters << " parameters)\n"
                << "discriminator max rel err " << r.disc_error << "\n"
                << "episode max rel err " << r.episode_error << "\n"
                << (r.passed() ? "PASS" : "FAIL") << " (tolerance " << r.tolerance << ")\n";
      return r.passed() ? 0 : 1;
    } else if (*report) {
      std::cout << mtl::run_report(in_path, format == "csv" ? mtl::TableFormat::Csv : mtl::TableFormat::Markdown);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
