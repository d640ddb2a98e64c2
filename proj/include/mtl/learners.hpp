#pragma once

#include "mtl/autodiff.hpp"
#include "mtl/model.hpp"
#include "mtl/rng.hpp"
#include "mtl/taskspace.hpp"

#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mtl {

enum class MetaMode { Maml, Fomaml, Reptile };
enum class DiscBatchSource { TaskUnion, GlobalMinibatch };
enum class BlendScope { TrunkOnly, TrunkPlusDiscHead };
/// How the episode head is re-initialized at the start of each training
/// iteration. A zero head gives every class the same logit, so the first
/// inner step sends no gradient into the trunk through a random projection.
enum class HeadInit { Zero, Glorot };

std::string_view to_string(MetaMode m);
std::string_view to_string(DiscBatchSource s);
std::string_view to_string(BlendScope s);
std::string_view to_string(HeadInit h);

/// Hyperparameters of the joint meta/transfer training loop.
struct MTLConfig {
  double alpha_inner = 0.1;
  double alpha_outer = 0.02;
  double alpha_d = 0.1;
  double beta = 0.5;
  int k = 3;
  int meta_batch = 4;
  int iterations = 2000;
  MetaMode meta_mode = MetaMode::Reptile;
  int n_ways = 5;
  int k_shots = 1;
  int q_queries = 15;
  DiscBatchSource disc_batch_source = DiscBatchSource::TaskUnion;
  int disc_batch_size = 64;
  BlendScope blend_scope = BlendScope::TrunkOnly;
  HeadInit episode_head_init = HeadInit::Zero;

  /// Throws std::invalid_argument naming the first offending field.
  void validate() const;
};

/// Scalar loss of `params` on `batch`, recorded on `tape`.
using BatchLoss = std::function<Var(Tape& tape, std::span<const Var> params, const Batch& batch)>;

/// Cross-entropy through the episode head against episode labels.
BatchLoss episode_loss(const ModelSpec& spec);
/// Cross-entropy through the discriminator head against batch labels.
BatchLoss discriminator_loss(const ModelSpec& spec);

/// Loss value of `params` on `batch` without keeping the tape.
double evaluate_loss(const BatchLoss& loss, const ParameterVector& params, const Batch& batch);

/// Parameters after k inner SGD steps on one task.
///
/// In MAML mode the unrolled steps stay recorded on `inner_tape`, with
/// `start` holding the leaves for the initial parameters and `adapted` the
/// nodes for the final ones.
struct AdaptedTask {
  ParameterVector theta_i;
  Episode episode;
  BatchLoss loss;
  std::unique_ptr<Tape> inner_tape;
  std::vector<Var> start;
  std::vector<Var> adapted;
  std::vector<std::size_t> sub_batch_sizes;
};

AdaptedTask inner_adapt(const ParameterVector& theta, const Episode& episode, const MTLConfig& cfg,
                        const BatchLoss& loss, Rng& rng);

/// Sum over tasks of the query-loss gradient: differentiated through the
/// inner steps for MAML, taken at the adapted parameters for FOMAML.
ParameterVector meta_gradient(const ParameterVector& theta, std::span<AdaptedTask> adapted, MetaMode mode,
                              std::vector<double>* query_losses = nullptr);

struct MetaStep {
  ParameterVector theta;
  std::vector<double> query_losses;
};

/// theta - alpha_outer * sum_i g_i.
MetaStep maml_meta_step(const ParameterVector& theta, std::span<AdaptedTask> adapted, const MTLConfig& cfg);

/// theta + alpha_outer * sum_i (theta_i - theta).
ParameterVector reptile_meta_step(const ParameterVector& theta, std::span<const AdaptedTask> adapted,
                                  const MTLConfig& cfg);

struct DiscriminatorStep {
  ParameterVector theta;
  double loss = 0.0;
};

/// One SGD step on the discriminator loss. `batch.labels` index the
/// discriminator classes. The episode head is copied untouched.
DiscriminatorStep discriminator_step(const ModelSpec& spec, const ParameterVector& theta, const Batch& batch,
                                     const MTLConfig& cfg);

/// beta * theta_meta + (1 - beta) * theta_disc on the segments in
/// cfg.blend_scope. Outside it the discriminator head comes from theta_disc
/// and the episode head from theta_meta.
ParameterVector mtl_blend(const ParameterVector& theta_meta, const ParameterVector& theta_disc, const MTLConfig& cfg);

struct LogEntry {
  int iteration = 0;
  double meta_loss = 0.0;  // NaN when the meta path is off
  double disc_loss = 0.0;  // NaN when the discriminator path is off
  double wall_ms = 0.0;
};

struct TrainedModel {
  ModelSpec spec;
  ParameterVector theta;
  MTLConfig config;
  std::vector<LogEntry> log;
};

/// Which halves of the joint update run. Both on is the full algorithm.
struct TrainPaths {
  bool meta = true;
  bool disc = true;
};

/// Discriminator class index of each dataset class (-1 outside the train side).
std::vector<int> discriminator_labels(const Dataset& dataset, const MetaSplit& split);

TrainedModel train_mtl(const ModelSpec& spec, const Dataset& dataset, const MetaSplit& split, const MTLConfig& cfg,
                       std::uint64_t seed, TrainPaths paths = {});

/// Pure meta-learning: train_mtl with the discriminator path off.
TrainedModel train_meta(const ModelSpec& spec, const Dataset& dataset, const MetaSplit& split, const MTLConfig& cfg,
                        std::uint64_t seed);

/// Mini-batch SGD on the discriminator loss over the train classes.
TrainedModel train_transfer(const ModelSpec& spec, const Dataset& dataset, const MetaSplit& split,
                            const MTLConfig& cfg, std::uint64_t seed);

/// CSV: iteration,meta_loss,disc_loss,wall_ms
void write_training_log(const std::filesystem::path& path, const std::vector<LogEntry>& log);

}  // namespace mtl
