#include "mtl/checkpoint.hpp"
#include "mtl/model.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>

using namespace mtl;

namespace {

std::vector<ModelSpec> shipped_specs() {
  return {ModelSpec::mlp(16, {64, 64, 64}, 64, 5), ModelSpec::mlp(2, {16}, 5, 5),
          ModelSpec::conv({1, 8, 8}, 2, 4, 5, 5), ModelSpec::conv({3, 16, 16}, 4, 32, 64, 5)};
}

Tensor random_batch(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor x(std::move(shape));
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  return x;
}

}  // namespace

TEST_CASE("init_params is deterministic per seed") {
  const ModelSpec spec = ModelSpec::mlp(16, {64, 64}, 10, 5);
  CHECK(bit_equal(init_params(spec, 3), init_params(spec, 3)));
  CHECK_FALSE(bit_equal(init_params(spec, 3), init_params(spec, 4)));
}

TEST_CASE("a 4->3 dense layer has 12 weights and 3 zero biases") {
  const ModelSpec spec = ModelSpec::mlp(4, {3}, 2, 2);
  const ParameterVector p = init_params(spec, 1);
  const auto& e = p.layout().entries();
  REQUIRE(e[0].name == "trunk.0.weight");
  CHECK(e[0].shape == Shape{4, 3});
  CHECK(e[1].name == "trunk.0.bias");
  CHECK(e[1].size == 3);
  const Tensor bias = p.tensor(1);
  for (double b : bias.values()) CHECK(b == 0.0);
}

TEST_CASE("Glorot bound holds for a 100->100 layer") {
  const ModelSpec spec = ModelSpec::mlp(100, {100}, 2, 2);
  const Tensor w = init_params(spec, 5).tensor(0);
  const double bound = std::sqrt(6.0 / 200.0);
  double max_abs = 0.0;
  for (double v : w.values()) max_abs = std::max(max_abs, std::abs(v));
  CHECK(max_abs <= bound);
  CHECK(max_abs > 0.9 * bound);
}

TEST_CASE("zero weights give zero logits") {
  const ModelSpec spec = ModelSpec::mlp(3, {8, 8}, 4, 5);
  const ParameterVector p = ParameterVector::zeros(make_layout(spec));
  const Tensor logits = predict(spec, p, random_batch({4, 3}, 1), Head::Episode);
  for (double v : logits.values()) CHECK(v == 0.0);
}

TEST_CASE("episode logits have shape batch by ways") {
  const ModelSpec spec = ModelSpec::mlp(16, {64, 64}, 64, 5);
  CHECK(predict(spec, init_params(spec, 1), random_batch({7, 16}, 2), Head::Episode).shape() == Shape{7, 5});
  CHECK(predict(spec, init_params(spec, 1), random_batch({7, 16}, 2), Head::Discriminator).shape() == Shape{7, 64});
}

TEST_CASE("duplicated inputs give identical logit rows") {
  for (const ModelSpec& spec : {ModelSpec::mlp(3, {8}, 4, 5), ModelSpec::conv({1, 4, 4}, 1, 2, 3, 3)}) {
    Shape one{1};
    one.insert(one.end(), spec.input_shape.begin(), spec.input_shape.end());
    const Tensor x = random_batch(one, 4);
    const Tensor* rows[] = {&x, &x, &x};
    Tensor batch = stack(std::span<const Tensor* const>(rows));
    batch = batch.reshaped([&] {
      Shape s{3};
      s.insert(s.end(), spec.input_shape.begin(), spec.input_shape.end());
      return s;
    }());
    const Tensor logits = predict(spec, init_params(spec, 3), batch, Head::Episode);
    const auto m = logits.matrix();
    CHECK(m.row(0) == m.row(1));
    CHECK(m.row(1) == m.row(2));
  }
}

TEST_CASE("episode head never reads the discriminator head") {
  const ModelSpec spec = ModelSpec::mlp(6, {8, 8}, 10, 5);
  const ParameterVector p = init_params(spec, 7);
  ParameterVector q = p;
  q.segment(Segment::DiscriminatorHead).array() += 3.0;
  const Tensor x = random_batch({5, 6}, 8);
  CHECK(bit_equal(predict(spec, p, x, Head::Episode), predict(spec, q, x, Head::Episode)));
  CHECK_FALSE(bit_equal(predict(spec, p, x, Head::Discriminator), predict(spec, q, x, Head::Discriminator)));
}

TEST_CASE("axpy examples") {
  auto layout = testing::flat_layout(2);
  const ParameterVector x(layout, Vector{{2.0, 4.0}});
  const ParameterVector y(layout, Vector{{1.0, 1.0}});
  const ParameterVector r = axpy(0.5, x, y);
  CHECK(r.flat()[0] == 2.0);
  CHECK(r.flat()[1] == 3.0);
  CHECK(bit_equal(axpy(0.0, x, y), y));

  ParameterVector neg = y;
  neg.flat() = -y.flat();
  const ParameterVector z = axpy(1.0, neg, y);
  for (Index i = 0; i < 2; ++i) CHECK(z.flat()[i] == 0.0);
}

TEST_CASE("axpy with a zero coefficient returns y bit-exactly for extreme values") {
  auto layout = testing::flat_layout(3);
  const ParameterVector x(layout, Vector{{1e300, -1e300, 3.0}});
  const ParameterVector y(layout, Vector{{-0.0, 0.1, 1e-310}});
  CHECK(bit_equal(axpy(0.0, x, y), y));
}

TEST_CASE("chained axpy on small integers is associative") {
  auto layout = testing::flat_layout(4);
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    Vector a(4), b(4), c(4);
    for (Index i = 0; i < 4; ++i) {
      a[i] = static_cast<double>(rng.below(21) - 10);
      b[i] = static_cast<double>(rng.below(21) - 10);
      c[i] = static_cast<double>(rng.below(21) - 10);
    }
    const ParameterVector pa(layout, a), pb(layout, b), pc(layout, c);
    const ParameterVector left = axpy(2.0, axpy(3.0, pa, pb), pc);
    const ParameterVector right = axpy(1.0, axpy(6.0, pa, axpy(2.0, pb, ParameterVector::zeros(layout))), pc);
    for (Index i = 0; i < 4; ++i) CHECK(std::abs(left.flat()[i] - right.flat()[i]) <= 1e-15);
  }
}

TEST_CASE("axpy rejects mismatched layouts") {
  CHECK_THROWS_AS(axpy(1.0, ParameterVector::zeros(testing::flat_layout(2)), ParameterVector::zeros(testing::flat_layout(3))),
                  std::invalid_argument);
}

TEST_CASE("reset_episode_head leaves trunk and discriminator head alone") {
  const ModelSpec spec = ModelSpec::mlp(16, {64, 64}, 64, 5);
  const ParameterVector p = init_params(spec, 1);
  const ParameterVector r = reset_episode_head(p, 5, 99);
  CHECK(bit_equal_segment(p, r, Segment::Trunk));
  CHECK(bit_equal_segment(p, r, Segment::DiscriminatorHead));
  CHECK(r.layout().range(Segment::EpisodeHead).second == 64 * 5 + 5);
  CHECK(bit_equal(r, reset_episode_head(p, 5, 99)));
  CHECK_FALSE(bit_equal_segment(r, reset_episode_head(p, 5, 100), Segment::EpisodeHead));
}

TEST_CASE("reset_episode_head can change the number of ways") {
  const ModelSpec spec = ModelSpec::mlp(16, {32}, 10, 5);
  const ParameterVector p = init_params(spec, 1);
  const ParameterVector r = reset_episode_head(p, 20, 3);
  CHECK(r.layout().range(Segment::EpisodeHead).second == 32 * 20 + 20);
  CHECK(bit_equal_segment(p, r, Segment::Trunk));
  CHECK(predict(spec, r, random_batch({3, 16}, 1), Head::Episode).shape() == Shape{3, 20});
  CHECK_THROWS_AS(reset_episode_head(p, 1, 3), std::invalid_argument);
}

TEST_CASE("flatten and unflatten round-trip every shipped spec") {
  for (const auto& spec : shipped_specs()) {
    const ParameterVector p = init_params(spec, 17);
    const ParameterVector q = unflatten(p.layout_ptr(), flatten(p));
    CHECK(bit_equal(p, q));
    for (std::size_t i = 0; i < p.count(); ++i) {
      ParameterVector r = ParameterVector::zeros(p.layout_ptr());
      r.set_tensor(i, p.tensor(i));
      CHECK(bit_equal(r.tensor(i), p.tensor(i)));
    }
  }
}

TEST_CASE("segments are contiguous and ordered") {
  for (const auto& spec : shipped_specs()) {
    const auto layout = make_layout(spec);
    const auto [t0, tn] = layout->range(Segment::Trunk);
    const auto [d0, dn] = layout->range(Segment::DiscriminatorHead);
    const auto [e0, en] = layout->range(Segment::EpisodeHead);
    CHECK(t0 == 0);
    CHECK(d0 == t0 + tn);
    CHECK(e0 == d0 + dn);
    CHECK(e0 + en == layout->total());
    CHECK(dn == spec.trunk_width() * spec.disc_classes + spec.disc_classes);
  }
}

TEST_CASE("conv spec output widths") {
  CHECK(ModelSpec::conv({3, 16, 16}, 4, 32, 64, 5).trunk_width() == 32);
  CHECK(ModelSpec::conv({1, 8, 8}, 2, 4, 5, 5).trunk_width() == 16);
  CHECK_THROWS_AS(ModelSpec::conv({1, 4, 4}, 3, 4, 5, 5).validate(), std::invalid_argument);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  for (const auto& spec : shipped_specs()) {
    const ParameterVector p = init_params(spec, 21);
    CHECK(bit_equal(decode_checkpoint(encode_checkpoint(spec, p), spec), p));
  }
  const auto dir = testing::scratch_dir("ckpt");
  const ModelSpec spec = ModelSpec::mlp(4, {8}, 3, 2);
  const ParameterVector p = init_params(spec, 1);
  save_checkpoint(dir / "m.ckpt", spec, p);
  CHECK(bit_equal(load_checkpoint(dir / "m.ckpt", spec), p));
}

TEST_CASE("checkpoint rejects a different spec and damaged bytes") {
  const ModelSpec spec = ModelSpec::mlp(4, {8}, 3, 2);
  const std::string bytes = encode_checkpoint(spec, init_params(spec, 1));
  CHECK_THROWS(decode_checkpoint(bytes, ModelSpec::mlp(4, {9}, 3, 2)));
  CHECK_THROWS(decode_checkpoint(bytes.substr(0, bytes.size() - 3), spec));
  CHECK_THROWS(decode_checkpoint(bytes + "x", spec));
  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS(decode_checkpoint(bad, spec));
  CHECK_THROWS(load_checkpoint("/nonexistent/dir/m.ckpt", spec));
}
