#pragma once

#include "mtl/rng.hpp"
#include "mtl/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mtl {

/// Examples grouped by class. An example's global label is the index of the
/// class list that holds it.
struct Dataset {
  Shape input_shape;
  std::vector<std::vector<Tensor>> classes;
  std::vector<std::string> class_names;

  Index class_count() const { return static_cast<Index>(classes.size()); }
  Index example_count() const;
};

/// Class-disjoint partition into meta-train and meta-test classes, each
/// sorted ascending.
struct MetaSplit {
  std::vector<int> train_classes;
  std::vector<int> test_classes;
};

struct EpisodeExample {
  Tensor features;
  int episode_label = 0;
  int global_label = 0;
};

/// One N-way K-shot task. `classes[e]` is the global class behind episode
/// label `e`; labels follow draw order.
struct Episode {
  std::vector<EpisodeExample> support;
  std::vector<EpisodeExample> query;
  std::vector<int> classes;
  int n_ways = 0;
  int k_shots = 0;
  int q_queries = 0;

  std::optional<int> remap(int global_label) const;
};

MetaSplit split_classes(const Dataset& dataset, Index n_train, std::uint64_t seed);

/// Draws `n_ways` classes from `side` without replacement, then
/// `k_shots + q_queries` distinct examples of each.
Episode sample_episode(const Dataset& dataset, std::span<const int> side, int n_ways, int k_shots, int q_queries,
                       Rng& rng);

/// Shuffles `items` and cuts them into `k` contiguous chunks whose sizes
/// differ by at most one, larger chunks first.
template <typename T>
std::vector<std::vector<T>> split_sub_batches(std::span<const T> items, int k, Rng& rng) {
  if (k < 1) throw std::invalid_argument("split_sub_batches: k must be >= 1");
  if (static_cast<std::size_t>(k) > items.size()) {
    throw std::invalid_argument("split_sub_batches: k=" + std::to_string(k) + " exceeds " +
                                std::to_string(items.size()) + " examples");
  }
  std::vector<std::size_t> order(items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(std::span<std::size_t>(order));
  const std::size_t base = items.size() / static_cast<std::size_t>(k);
  const std::size_t extra = items.size() % static_cast<std::size_t>(k);
  std::vector<std::vector<T>> out(static_cast<std::size_t>(k));
  std::size_t pos = 0;
  for (std::size_t b = 0; b < out.size(); ++b) {
    const std::size_t n = base + (b < extra ? 1 : 0);
    out[b].reserve(n);
    for (std::size_t i = 0; i < n; ++i) out[b].push_back(items[order[pos++]]);
  }
  return out;
}

/// Gaussian clusters around centers drawn uniformly from [-5, 5]^dim.
Dataset gen_blobs(Index n_classes, Index dim, Index per_class, double cluster_std, std::uint64_t seed);

/// Reads `root/<class>/*.png`; class ids follow sorted class-name order and
/// pixels are scaled to [0, 1] in CHW layout.
Dataset load_image_dataset(const std::filesystem::path& root);

/// Stacked inputs with one integer label per row.
struct Batch {
  Tensor inputs;
  std::vector<int> labels;
};

enum class LabelKind { Episode, Global };

Batch make_batch(std::span<const EpisodeExample> examples, LabelKind kind);

}  // namespace mtl
