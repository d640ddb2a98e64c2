#pragma once

#include "mtl/learners.hpp"
#include "mtl/taskspace.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace mtl {

/// How unseen tasks are adapted to and scored.
struct EvalProtocol {
  int adapt_steps = 10;
  double adapt_lr = 0.1;
  int n_episodes = 600;
  int n_ways = 5;
  int k_shots = 1;
  int q_queries = 15;
  std::uint64_t seed = 0;
  bool freeze_trunk = false;

  void validate() const;
};

/// One cell of the accuracy table. Accuracies are in percent.
struct ResultsRow {
  std::string method;
  int n_ways = 0;
  int k_shots = 0;
  double mean_accuracy = 0.0;
  double ci95 = 0.0;
  int n_episodes = 0;
  std::uint64_t seed = 0;
};

/// Fresh episode head, `adapt_steps` full-support SGD steps, then top-1
/// query accuracy in [0, 1]. The model is taken by const reference and never
/// modified.
double adapt_and_eval(const TrainedModel& model, const Episode& episode, const EvalProtocol& proto);

/// Per-episode accuracies (fractions) over `proto.n_episodes` test episodes.
std::vector<double> episode_accuracies(const TrainedModel& model, const Dataset& dataset, const MetaSplit& split,
                                       const EvalProtocol& proto);

/// Mean accuracy and 95% interval half-width (1.96 * population stddev /
/// sqrt(n)), both in percent.
ResultsRow summarize(const std::string& method, const std::vector<double>& accuracies, const EvalProtocol& proto);

ResultsRow evaluate_suite(const TrainedModel& model, const Dataset& dataset, const MetaSplit& split,
                          const EvalProtocol& proto, const std::string& method);

enum class TableFormat { Csv, Markdown };

/// Pivot with one row per (n_ways, k_shots) and one column per method,
/// cells to two decimals. Throws on a duplicate (method, n_ways, k_shots).
std::string emit_table(std::span<const ResultsRow> rows, TableFormat format);

// Results file: CSV with header method,n_ways,k_shots,mean_acc,ci95,n_episodes,seed

std::string results_header();
std::string format_results_row(const ResultsRow& row);
void append_results(const std::filesystem::path& path, std::span<const ResultsRow> rows);
std::vector<ResultsRow> read_results(const std::filesystem::path& path);

}  // namespace mtl
