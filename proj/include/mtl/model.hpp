#pragma once

#include "mtl/autodiff.hpp"
#include "mtl/tensor.hpp"

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace mtl {

/// Fully connected layer followed by ReLU.
struct DenseLayer {
  Index in = 0;
  Index out = 0;
};

/// Convolution, bias, ReLU, then optional 2x2 max-pool.
struct ConvBlock {
  Index in_channels = 0;
  Index out_channels = 0;
  Index kernel = 3;
  Index stride = 1;
  Index padding = 1;
  bool pool = true;
};

using TrunkLayer = std::variant<DenseLayer, ConvBlock>;

/// A shared feature trunk with two linear heads on its output: one over
/// every base-training class and one over the N ways of an episode.
struct ModelSpec {
  Shape input_shape;  // one example, without the batch axis
  std::vector<TrunkLayer> trunk;
  Index disc_classes = 0;
  Index episode_ways = 0;

  /// Width of the flattened trunk output. Throws if the layers do not chain.
  Index trunk_width() const;
  void validate() const;

  /// input_dim -> widths[0] -> ... -> widths.back(), ReLU after each.
  static ModelSpec mlp(Index input_dim, const std::vector<Index>& widths, Index disc_classes, Index episode_ways);
  /// `blocks` conv blocks of `filters` 3x3 filters on CHW input, then flatten.
  static ModelSpec conv(Shape input_chw, Index blocks, Index filters, Index disc_classes, Index episode_ways);
};

/// Canonical one-line text form; two specs are equal iff these are.
std::string describe(const ModelSpec& spec);
std::uint64_t spec_hash(const ModelSpec& spec);

enum class Segment : std::uint8_t { Trunk = 0, DiscriminatorHead = 1, EpisodeHead = 2 };
enum class Head { Discriminator, Episode };

std::string_view segment_name(Segment s);

struct ParamEntry {
  std::string name;
  Shape shape;
  Index offset = 0;
  Index size = 0;
  Segment segment = Segment::Trunk;

  bool operator==(const ParamEntry&) const = default;
};

/// Names, shapes and flat offsets of every parameter tensor. Segments are
/// contiguous and ordered trunk, discriminator head, episode head.
class ParamLayout {
 public:
  ParamLayout() = default;
  explicit ParamLayout(std::vector<std::pair<std::string, std::pair<Shape, Segment>>> entries);

  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::size_t count() const { return entries_.size(); }
  Index total() const { return total_; }
  /// [offset, length) of a segment in the flat view.
  std::pair<Index, Index> range(Segment s) const;

  bool operator==(const ParamLayout& other) const { return entries_ == other.entries_; }

 private:
  std::vector<ParamEntry> entries_;
  Index total_ = 0;
};

std::shared_ptr<const ParamLayout> make_layout(const ModelSpec& spec);

/// Model parameters stored as one flat vector with a shared layout.
class ParameterVector {
 public:
  ParameterVector() = default;
  ParameterVector(std::shared_ptr<const ParamLayout> layout, Vector values);
  static ParameterVector zeros(std::shared_ptr<const ParamLayout> layout);

  const ParamLayout& layout() const { return *layout_; }
  const std::shared_ptr<const ParamLayout>& layout_ptr() const { return layout_; }
  Index size() const { return values_.size(); }
  std::size_t count() const { return layout_->count(); }

  const Vector& flat() const { return values_; }
  Vector& flat() { return values_; }

  Tensor tensor(std::size_t i) const;
  void set_tensor(std::size_t i, const Tensor& t);

  Eigen::VectorBlock<const Vector> segment(Segment s) const;
  Eigen::VectorBlock<Vector> segment(Segment s);

 private:
  std::shared_ptr<const ParamLayout> layout_;
  Vector values_;
};

const Vector& flatten(const ParameterVector& p);
ParameterVector unflatten(std::shared_ptr<const ParamLayout> layout, const Vector& flat);

bool same_layout(const ParameterVector& a, const ParameterVector& b);
bool bit_equal(const ParameterVector& a, const ParameterVector& b);
bool bit_equal_segment(const ParameterVector& a, const ParameterVector& b, Segment s);

/// a*x + y over the flat view. a == 0 returns y unchanged.
ParameterVector axpy(double a, const ParameterVector& x, const ParameterVector& y);

/// Glorot-uniform weights, zero biases, deterministic in `seed`.
ParameterVector init_params(const ModelSpec& spec, std::uint64_t seed);

/// Replaces the episode head with a fresh one of width `n_ways`; trunk and
/// discriminator head are copied untouched.
ParameterVector reset_episode_head(const ParameterVector& params, Index n_ways, std::uint64_t seed);

/// Records every parameter tensor on `tape` as a leaf.
std::vector<Var> bind(Tape& tape, const ParameterVector& params);

/// Logits of the selected head for `batch` of shape (B, input_shape...).
Var forward(const ModelSpec& spec, std::span<const Var> params, Var batch, Head head);

/// Convenience: logits computed on a scratch tape.
Tensor predict(const ModelSpec& spec, const ParameterVector& params, const Tensor& batch, Head head);

}  // namespace mtl
