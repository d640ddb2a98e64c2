#pragma once

#include "mtl/config.hpp"
#include "mtl/eval.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace mtl {

/// Runs the training loop selected by `cfg.method` with the master seed.
TrainedModel train_method(const ExperimentConfig& cfg, const Dataset& dataset, const MetaSplit& split,
                          const ModelSpec& spec);

struct TrainArtifacts {
  std::filesystem::path checkpoint;
  std::filesystem::path log;
  std::filesystem::path resolved_config;
};

/// Trains `cfg.method` and writes the checkpoint, training log and the fully
/// resolved config into `out_dir` (created if missing).
TrainArtifacts run_train(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);

/// Scores a checkpoint on every (n_ways, k_shots) pair of the eval section and
/// appends one row per pair to `results`.
std::vector<ResultsRow> run_eval(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                                 const std::filesystem::path& results);

struct GradCheckReport {
  std::string spec_name;
  Index parameters = 0;
  double disc_error = 0.0;
  double episode_error = 0.0;
  double tolerance = 1e-6;
  bool passed() const { return disc_error < tolerance && episode_error < tolerance; }
};

/// Named specs: mlp (the shipped 16-64-64-64 model), mlp-small, conv-small, conv.
std::vector<std::string> gradcheck_spec_names();
ModelSpec gradcheck_spec(const std::string& name);
GradCheckReport run_gradcheck(const std::string& spec_name, double eps = 1e-5, Index max_coords = 0);

std::string run_report(const std::filesystem::path& results, TableFormat format);

}  // namespace mtl
