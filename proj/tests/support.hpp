#pragma once

#include "mtl/learners.hpp"
#include "mtl/model.hpp"
#include "mtl/taskspace.hpp"

#include <filesystem>
#include <memory>
#include <string>

namespace mtl::testing {

// A single trunk parameter vector of dimension d, for closed-form oracles.
inline std::shared_ptr<const ParamLayout> flat_layout(Index d) {
  return std::make_shared<const ParamLayout>(
      std::vector<std::pair<std::string, std::pair<Shape, Segment>>>{{"theta", {{d}, Segment::Trunk}}});
}

inline ParameterVector random_params(const std::shared_ptr<const ParamLayout>& layout, Rng& rng, double scale = 1.0) {
  Vector v(layout->total());
  for (Index i = 0; i < v.size(); ++i) v[i] = scale * rng.normal();
  return ParameterVector(layout, v);
}

// 0.5 * ||theta - c||^2, ignoring the batch.
inline BatchLoss quadratic_loss(const Vector& c) {
  return [c](Tape& tape, std::span<const Var> params, const Batch&) {
    const Var d = sub(params[0], tape.constant(Tensor({c.size()}, c)));
    return scale(sum(mul(d, d)), 0.5);
  };
}

// An episode whose examples only matter through their count.
inline Episode dummy_episode(int support, int query) {
  Episode e;
  e.n_ways = 1;
  e.k_shots = support;
  e.q_queries = query;
  e.classes = {0};
  for (int i = 0; i < support; ++i) e.support.push_back({Tensor({1}, {static_cast<double>(i)}), 0, 0});
  for (int i = 0; i < query; ++i) e.query.push_back({Tensor({1}, {static_cast<double>(i)}), 0, 0});
  return e;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("mtl_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace mtl::testing
