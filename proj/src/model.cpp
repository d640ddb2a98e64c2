#include "mtl/model.hpp"

#include "mtl/rng.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace mtl {

namespace {

// Shape of one example after each trunk layer; rank 3 while convolutional,
// rank 1 once flattened.
Shape layer_output_shape(const Shape& in, const TrunkLayer& layer) {
  if (const auto* dense = std::get_if<DenseLayer>(&layer)) {
    if (numel(in) != dense->in) {
      throw std::invalid_argument("model: dense layer expects width " + std::to_string(dense->in) + ", got " +
                                  to_string(in));
    }
    return {dense->out};
  }
  const auto& conv = std::get<ConvBlock>(layer);
  if (in.size() != 3 || in[0] != conv.in_channels) {
    throw std::invalid_argument("model: conv block expects " + std::to_string(conv.in_channels) +
                                " input channels, got " + to_string(in));
  }
  const Index h = (in[1] + 2 * conv.padding - conv.kernel) / conv.stride + 1;
  const Index w = (in[2] + 2 * conv.padding - conv.kernel) / conv.stride + 1;
  if (h < 1 || w < 1) throw std::invalid_argument("model: conv block shrinks input " + to_string(in) + " to nothing");
  if (!conv.pool) return {conv.out_channels, h, w};
  if (h < 2 || w < 2) throw std::invalid_argument("model: cannot pool " + to_string({conv.out_channels, h, w}));
  return {conv.out_channels, h / 2, w / 2};
}

double glorot_bound(Index fan_in, Index fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

void glorot_fill(Eigen::VectorBlock<Vector> w, const Shape& shape, Rng& rng) {
  Index fan_in = 0, fan_out = 0;
  if (shape.size() == 2) {
    fan_in = shape[0];
    fan_out = shape[1];
  } else {
    const Index receptive = shape[2] * shape[3];
    fan_in = shape[1] * receptive;
    fan_out = shape[0] * receptive;
  }
  const double bound = glorot_bound(fan_in, fan_out);
  for (Index i = 0; i < w.size(); ++i) w[i] = rng.uniform(-bound, bound);
}

bool is_weight(const ParamEntry& e) { return e.shape.size() >= 2; }

}  // namespace

Index ModelSpec::trunk_width() const {
  if (input_shape.empty()) throw std::invalid_argument("model: empty input shape");
  Shape s = input_shape;
  for (const auto& layer : trunk) s = layer_output_shape(s, layer);
  return numel(s);
}

void ModelSpec::validate() const {
  trunk_width();
  if (disc_classes < 1) throw std::invalid_argument("model: discriminator head needs at least one class");
  if (episode_ways < 1) throw std::invalid_argument("model: episode head needs at least one way");
}

ModelSpec ModelSpec::mlp(Index input_dim, const std::vector<Index>& widths, Index disc_classes, Index episode_ways) {
  ModelSpec spec;
  spec.input_shape = {input_dim};
  Index prev = input_dim;
  for (Index w : widths) {
    spec.trunk.emplace_back(DenseLayer{prev, w});
    prev = w;
  }
  spec.disc_classes = disc_classes;
  spec.episode_ways = episode_ways;
  spec.validate();
  return spec;
}

ModelSpec ModelSpec::conv(Shape input_chw, Index blocks, Index filters, Index disc_classes, Index episode_ways) {
  ModelSpec spec;
  spec.input_shape = std::move(input_chw);
  Index channels = spec.input_shape.at(0);
  for (Index b = 0; b < blocks; ++b) {
    spec.trunk.emplace_back(ConvBlock{channels, filters});
    channels = filters;
  }
  spec.disc_classes = disc_classes;
  spec.episode_ways = episode_ways;
  spec.validate();
  return spec;
}

std::string describe(const ModelSpec& spec) {
  std::ostringstream os;
  os << "input" << to_string(spec.input_shape);
  for (const auto& layer : spec.trunk) {
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      os << " dense(" << d->in << ',' << d->out << ')';
    } else {
      const auto& c = std::get<ConvBlock>(layer);
      os << " conv(" << c.in_channels << ',' << c.out_channels << ",k" << c.kernel << ",s" << c.stride << ",p"
         << c.padding << (c.pool ? ",pool" : "") << ')';
    }
  }
  os << " disc(" << spec.disc_classes << ") episode(" << spec.episode_ways << ')';
  return os.str();
}

std::uint64_t spec_hash(const ModelSpec& spec) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : describe(spec)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string_view segment_name(Segment s) {
  switch (s) {
    case Segment::Trunk: return "trunk";
    case Segment::DiscriminatorHead: return "discriminator_head";
    case Segment::EpisodeHead: return "episode_head";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Layout and parameter vectors

ParamLayout::ParamLayout(std::vector<std::pair<std::string, std::pair<Shape, Segment>>> entries) {
  Segment prev = Segment::Trunk;
  for (auto& [name, rest] : entries) {
    auto& [shape, segment] = rest;
    if (segment < prev) throw std::invalid_argument("layout: segments must be contiguous and ordered");
    prev = segment;
    const Index n = numel(shape);
    entries_.push_back(ParamEntry{std::move(name), std::move(shape), total_, n, segment});
    total_ += n;
  }
}

std::pair<Index, Index> ParamLayout::range(Segment s) const {
  Index begin = -1, end = -1;
  for (const auto& e : entries_) {
    if (e.segment != s) continue;
    if (begin < 0) begin = e.offset;
    end = e.offset + e.size;
  }
  if (begin < 0) return {0, 0};
  return {begin, end - begin};
}

std::shared_ptr<const ParamLayout> make_layout(const ModelSpec& spec) {
  const Index width = spec.trunk_width();
  std::vector<std::pair<std::string, std::pair<Shape, Segment>>> entries;
  for (std::size_t i = 0; i < spec.trunk.size(); ++i) {
    const std::string prefix = "trunk." + std::to_string(i);
    if (const auto* d = std::get_if<DenseLayer>(&spec.trunk[i])) {
      entries.push_back({prefix + ".weight", {{d->in, d->out}, Segment::Trunk}});
      entries.push_back({prefix + ".bias", {{d->out}, Segment::Trunk}});
    } else {
      const auto& c = std::get<ConvBlock>(spec.trunk[i]);
      entries.push_back({prefix + ".weight", {{c.out_channels, c.in_channels, c.kernel, c.kernel}, Segment::Trunk}});
      entries.push_back({prefix + ".bias", {{c.out_channels}, Segment::Trunk}});
    }
  }
  entries.push_back({"disc.weight", {{width, spec.disc_classes}, Segment::DiscriminatorHead}});
  entries.push_back({"disc.bias", {{spec.disc_classes}, Segment::DiscriminatorHead}});
  entries.push_back({"episode.weight", {{width, spec.episode_ways}, Segment::EpisodeHead}});
  entries.push_back({"episode.bias", {{spec.episode_ways}, Segment::EpisodeHead}});
  return std::make_shared<const ParamLayout>(std::move(entries));
}

ParameterVector::ParameterVector(std::shared_ptr<const ParamLayout> layout, Vector values)
    : layout_(std::move(layout)), values_(std::move(values)) {
  if (!layout_) throw std::invalid_argument("parameters: null layout");
  if (values_.size() != layout_->total()) {
    throw std::invalid_argument("parameters: " + std::to_string(values_.size()) + " values for a layout of " +
                                std::to_string(layout_->total()));
  }
}

ParameterVector ParameterVector::zeros(std::shared_ptr<const ParamLayout> layout) {
  const Index n = layout->total();
  return ParameterVector(std::move(layout), Vector::Zero(n));
}

Tensor ParameterVector::tensor(std::size_t i) const {
  const auto& e = layout_->entries().at(i);
  return Tensor(e.shape, values_.segment(e.offset, e.size));
}

void ParameterVector::set_tensor(std::size_t i, const Tensor& t) {
  const auto& e = layout_->entries().at(i);
  if (t.shape() != e.shape) {
    throw std::invalid_argument("parameters: " + e.name + " expects " + to_string(e.shape) + ", got " +
                                to_string(t.shape()));
  }
  values_.segment(e.offset, e.size) = t.data();
}

Eigen::VectorBlock<const Vector> ParameterVector::segment(Segment s) const {
  const auto [off, len] = layout_->range(s);
  return values_.segment(off, len);
}

Eigen::VectorBlock<Vector> ParameterVector::segment(Segment s) {
  const auto [off, len] = layout_->range(s);
  return values_.segment(off, len);
}

const Vector& flatten(const ParameterVector& p) { return p.flat(); }

ParameterVector unflatten(std::shared_ptr<const ParamLayout> layout, const Vector& flat) {
  return ParameterVector(std::move(layout), flat);
}

bool same_layout(const ParameterVector& a, const ParameterVector& b) {
  return a.layout_ptr() == b.layout_ptr() || a.layout() == b.layout();
}

bool bit_equal(const ParameterVector& a, const ParameterVector& b) {
  return same_layout(a, b) &&
         std::memcmp(a.flat().data(), b.flat().data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

bool bit_equal_segment(const ParameterVector& a, const ParameterVector& b, Segment s) {
  const auto x = a.segment(s);
  const auto y = b.segment(s);
  return x.size() == y.size() &&
         std::memcmp(x.data(), y.data(), sizeof(double) * static_cast<std::size_t>(x.size())) == 0;
}

ParameterVector axpy(double a, const ParameterVector& x, const ParameterVector& y) {
  if (!same_layout(x, y)) throw std::invalid_argument("axpy: parameter layouts differ");
  if (a == 0.0) return y;
  return ParameterVector(y.layout_ptr(), a * x.flat() + y.flat());
}

ParameterVector init_params(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  ParameterVector p = ParameterVector::zeros(make_layout(spec));
  Rng rng(seed);
  for (const auto& e : p.layout().entries()) {
    if (is_weight(e)) glorot_fill(p.flat().segment(e.offset, e.size), e.shape, rng);
  }
  return p;
}

ParameterVector reset_episode_head(const ParameterVector& params, Index n_ways, std::uint64_t seed) {
  if (n_ways < 2) throw std::invalid_argument("reset_episode_head: n_ways must be at least 2");
  std::vector<std::pair<std::string, std::pair<Shape, Segment>>> entries;
  for (const auto& e : params.layout().entries()) {
    Shape shape = e.shape;
    if (e.segment == Segment::EpisodeHead) shape.back() = n_ways;
    entries.push_back({e.name, {shape, e.segment}});
  }
  auto layout = std::make_shared<const ParamLayout>(std::move(entries));
  if (*layout == params.layout()) layout = params.layout_ptr();

  ParameterVector out = ParameterVector::zeros(layout);
  const Index off = params.layout().range(Segment::EpisodeHead).first;
  out.flat().head(off) = params.flat().head(off);
  Rng rng(seed);
  for (const auto& e : out.layout().entries()) {
    if (e.segment == Segment::EpisodeHead && is_weight(e)) glorot_fill(out.flat().segment(e.offset, e.size), e.shape, rng);
  }
  return out;
}

std::vector<Var> bind(Tape& tape, const ParameterVector& params) {
  std::vector<Var> vars;
  vars.reserve(params.count());
  for (std::size_t i = 0; i < params.count(); ++i) vars.push_back(tape.leaf(params.tensor(i)));
  return vars;
}

Var forward(const ModelSpec& spec, std::span<const Var> params, Var batch, Head head) {
  const std::size_t expected = 2 * spec.trunk.size() + 4;
  if (params.size() != expected) {
    throw std::invalid_argument("forward: expected " + std::to_string(expected) + " parameter tensors, got " +
                                std::to_string(params.size()));
  }
  const Shape& in = batch.shape();
  if (in.size() != spec.input_shape.size() + 1 || !std::equal(spec.input_shape.begin(), spec.input_shape.end(), in.begin() + 1)) {
    throw std::invalid_argument("forward: batch shape " + to_string(in) + " does not match input " +
                                to_string(spec.input_shape));
  }
  const Index batch_size = in[0];
  Var x = batch;
  auto flat = [&](Var v) {
    return v.shape().size() == 2 ? v : reshape(v, {batch_size, v.value().size() / batch_size});
  };
  for (std::size_t i = 0; i < spec.trunk.size(); ++i) {
    const Var w = params[2 * i];
    const Var b = params[2 * i + 1];
    if (std::holds_alternative<DenseLayer>(spec.trunk[i])) {
      x = relu(bias_add(matmul(flat(x), w), b));
    } else {
      const auto& c = std::get<ConvBlock>(spec.trunk[i]);
      x = relu(bias_add(conv2d(x, w, c.stride, c.padding), b));
      if (c.pool) x = max_pool2d(x);
    }
  }
  x = flat(x);
  const std::size_t h = 2 * spec.trunk.size() + (head == Head::Discriminator ? 0 : 2);
  return bias_add(matmul(x, params[h]), params[h + 1]);
}

Tensor predict(const ModelSpec& spec, const ParameterVector& params, const Tensor& batch, Head head) {
  Tape tape;
  const auto vars = bind(tape, params);
  return forward(spec, vars, tape.constant(batch), head).value();
}

}  // namespace mtl
