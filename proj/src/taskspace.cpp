#include "mtl/taskspace.hpp"

#include "mtl/image_io.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace mtl {

Index Dataset::example_count() const {
  Index n = 0;
  for (const auto& c : classes) n += static_cast<Index>(c.size());
  return n;
}

std::optional<int> Episode::remap(int global_label) const {
  const auto it = std::find(classes.begin(), classes.end(), global_label);
  if (it == classes.end()) return std::nullopt;
  return static_cast<int>(it - classes.begin());
}

MetaSplit split_classes(const Dataset& dataset, Index n_train, std::uint64_t seed) {
  const Index total = dataset.class_count();
  if (n_train <= 0 || n_train >= total) {
    throw std::invalid_argument("split_classes: n_train=" + std::to_string(n_train) + " must lie in (0, " +
                                std::to_string(total) + ")");
  }
  std::vector<int> ids(static_cast<std::size_t>(total));
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span<int>(ids));
  MetaSplit split;
  split.train_classes.assign(ids.begin(), ids.begin() + n_train);
  split.test_classes.assign(ids.begin() + n_train, ids.end());
  std::sort(split.train_classes.begin(), split.train_classes.end());
  std::sort(split.test_classes.begin(), split.test_classes.end());
  return split;
}

Episode sample_episode(const Dataset& dataset, std::span<const int> side, int n_ways, int k_shots, int q_queries,
                       Rng& rng) {
  if (n_ways < 1 || k_shots < 1 || q_queries < 0) {
    throw std::invalid_argument("sample_episode: need n_ways >= 1, k_shots >= 1, q_queries >= 0");
  }
  if (side.size() < static_cast<std::size_t>(n_ways)) {
    throw std::invalid_argument("sample_episode: " + std::to_string(n_ways) + "-way episode needs more than the " +
                                std::to_string(side.size()) + " available classes");
  }
  const auto per_class = static_cast<std::size_t>(k_shots + q_queries);
  for (int c : side) {
    if (c < 0 || c >= dataset.class_count()) {
      throw std::invalid_argument("sample_episode: class " + std::to_string(c) + " not in dataset");
    }
  }

  // Partial Fisher-Yates: the first n_ways entries are the draw.
  std::vector<int> pool(side.begin(), side.end());
  for (std::size_t i = 0; i < static_cast<std::size_t>(n_ways); ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(static_cast<Index>(pool.size() - i)));
    std::swap(pool[i], pool[j]);
  }

  Episode ep;
  ep.n_ways = n_ways;
  ep.k_shots = k_shots;
  ep.q_queries = q_queries;
  ep.classes.assign(pool.begin(), pool.begin() + n_ways);
  ep.support.reserve(static_cast<std::size_t>(n_ways * k_shots));
  ep.query.reserve(static_cast<std::size_t>(n_ways * q_queries));
  for (int e = 0; e < n_ways; ++e) {
    const int global = ep.classes[static_cast<std::size_t>(e)];
    const auto& examples = dataset.classes[static_cast<std::size_t>(global)];
    if (examples.size() < per_class) {
      throw std::invalid_argument("sample_episode: class " + std::to_string(global) + " has " +
                                  std::to_string(examples.size()) + " examples, needs " + std::to_string(per_class));
    }
    std::vector<std::size_t> idx(examples.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < per_class; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.below(static_cast<Index>(idx.size() - i)));
      std::swap(idx[i], idx[j]);
    }
    for (std::size_t i = 0; i < per_class; ++i) {
      auto& dst = i < static_cast<std::size_t>(k_shots) ? ep.support : ep.query;
      dst.push_back(EpisodeExample{examples[idx[i]], e, global});
    }
  }
  return ep;
}

Dataset gen_blobs(Index n_classes, Index dim, Index per_class, double cluster_std, std::uint64_t seed) {
  if (n_classes < 1 || dim < 1 || per_class < 1) throw std::invalid_argument("gen_blobs: counts must be positive");
  if (cluster_std < 0.0) throw std::invalid_argument("gen_blobs: cluster_std must be non-negative");
  Rng rng(seed);
  Dataset ds;
  ds.input_shape = {dim};
  ds.classes.resize(static_cast<std::size_t>(n_classes));
  for (Index c = 0; c < n_classes; ++c) {
    Vector center(dim);
    for (Index d = 0; d < dim; ++d) center[d] = rng.uniform(-5.0, 5.0);
    auto& examples = ds.classes[static_cast<std::size_t>(c)];
    examples.reserve(static_cast<std::size_t>(per_class));
    for (Index i = 0; i < per_class; ++i) {
      Tensor x({dim});
      for (Index d = 0; d < dim; ++d) x[d] = center[d] + cluster_std * rng.normal();
      examples.push_back(std::move(x));
    }
    ds.class_names.push_back("blob" + std::to_string(c));
  }
  return ds;
}

Dataset load_image_dataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw std::runtime_error("image dataset: " + root.string() + " is not a directory");
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  if (class_dirs.empty()) throw std::runtime_error("image dataset: no class directories under " + root.string());
  std::sort(class_dirs.begin(), class_dirs.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });

  Dataset ds;
  for (const auto& dir : class_dirs) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
    }
    if (files.empty()) throw std::runtime_error("image dataset: class directory " + dir.string() + " has no .png files");
    std::sort(files.begin(), files.end());
    std::vector<Tensor> examples;
    for (const auto& f : files) {
      Tensor img = read_png(f);
      if (ds.input_shape.empty()) ds.input_shape = img.shape();
      if (img.shape() != ds.input_shape) {
        throw std::runtime_error("image dataset: " + f.string() + " has shape " + to_string(img.shape()) +
                                 ", expected " + to_string(ds.input_shape));
      }
      examples.push_back(std::move(img));
    }
    ds.classes.push_back(std::move(examples));
    ds.class_names.push_back(dir.filename().string());
  }
  return ds;
}

Batch make_batch(std::span<const EpisodeExample> examples, LabelKind kind) {
  if (examples.empty()) throw std::invalid_argument("make_batch: no examples");
  std::vector<const Tensor*> rows;
  Batch batch;
  rows.reserve(examples.size());
  batch.labels.reserve(examples.size());
  for (const auto& ex : examples) {
    rows.push_back(&ex.features);
    batch.labels.push_back(kind == LabelKind::Episode ? ex.episode_label : ex.global_label);
  }
  batch.inputs = stack(std::span<const Tensor* const>(rows));
  return batch;
}

}  // namespace mtl
