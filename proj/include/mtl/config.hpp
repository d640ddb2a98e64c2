#pragma once

#include "mtl/eval.hpp"
#include "mtl/learners.hpp"
#include "mtl/model.hpp"
#include "mtl/taskspace.hpp"

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace mtl {

struct DatasetConfig {
  std::string kind = "blobs";  // blobs | image_dir
  Index n_classes = 100;
  Index dim = 16;
  Index per_class = 600;
  double cluster_std = 1.0;
  std::uint64_t seed = 0;
  std::string path;  // image_dir only
};

struct SplitConfig {
  Index n_train_classes = 64;
  std::uint64_t seed = 0;
};

struct ModelConfig {
  std::string kind = "mlp";  // mlp | conv
  Index hidden = 64;
  Index hidden_layers = 2;
  Index trunk_width = 64;
  Index conv_blocks = 4;
  Index conv_filters = 32;
};

struct EvalConfig {
  EvalProtocol protocol;
  std::vector<int> n_ways{5};
  std::vector<int> k_shots{1};
};

struct OutputConfig {
  std::string checkpoint = "model.ckpt";
  std::string log = "train_log.csv";
};

/// Everything one experiment needs. Sub-seeds left out of the text are
/// derived from the master seed.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string method = "reptile_mtl";
  DatasetConfig dataset;
  SplitConfig split;
  ModelConfig model;
  MTLConfig learner;
  EvalConfig eval;
  OutputConfig output;
};

/// Methods accepted in `method`: transfer, maml, fomaml, reptile and the
/// joint variants maml_mtl, fomaml_mtl, reptile_mtl.
const std::vector<std::string>& known_methods();
bool is_joint_method(std::string_view method);

/// Parses the sectioned key = value format written by serialize_config.
/// Throws std::invalid_argument naming the offending key on unknown keys,
/// malformed values and constraint violations.
ExperimentConfig parse_config(std::string_view text);
std::string serialize_config(const ExperimentConfig& cfg);

Dataset load_dataset(const DatasetConfig& cfg);
ModelSpec build_spec(const ExperimentConfig& cfg, const Shape& input_shape);

}  // namespace mtl
