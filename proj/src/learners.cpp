#include "mtl/learners.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace mtl {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

ParameterVector collect(const std::shared_ptr<const ParamLayout>& layout, std::span<const Var> vars) {
  ParameterVector out = ParameterVector::zeros(layout);
  for (std::size_t i = 0; i < vars.size(); ++i) out.set_tensor(i, vars[i].value());
  return out;
}

void require_layout(const ParameterVector& a, const ParameterVector& b, const char* who) {
  if (!same_layout(a, b)) throw std::invalid_argument(std::string(who) + ": parameter layouts differ");
}

// Uniform draw, with replacement, over every example of the train classes.
class TrainPool {
 public:
  TrainPool(const Dataset& dataset, const MetaSplit& split, std::vector<int> disc_labels)
      : dataset_(dataset), disc_labels_(std::move(disc_labels)) {
    for (int c : split.train_classes) {
      for (std::size_t i = 0; i < dataset.classes[static_cast<std::size_t>(c)].size(); ++i) items_.push_back({c, i});
    }
    if (items_.empty()) throw std::invalid_argument("training: train split has no examples");
  }

  Batch draw(int size, Rng& rng) const {
    std::vector<const Tensor*> rows;
    Batch b;
    for (int i = 0; i < size; ++i) {
      const auto& [c, idx] = items_[static_cast<std::size_t>(rng.below(static_cast<Index>(items_.size())))];
      rows.push_back(&dataset_.classes[static_cast<std::size_t>(c)][idx]);
      b.labels.push_back(disc_labels_[static_cast<std::size_t>(c)]);
    }
    b.inputs = stack(std::span<const Tensor* const>(rows));
    return b;
  }

  Batch task_union(std::span<const Episode> episodes) const {
    std::vector<const Tensor*> rows;
    Batch b;
    for (const auto& ep : episodes) {
      for (const auto* set : {&ep.support, &ep.query}) {
        for (const auto& ex : *set) {
          rows.push_back(&ex.features);
          b.labels.push_back(disc_labels_[static_cast<std::size_t>(ex.global_label)]);
        }
      }
    }
    b.inputs = stack(std::span<const Tensor* const>(rows));
    return b;
  }

 private:
  const Dataset& dataset_;
  std::vector<int> disc_labels_;
  std::vector<std::pair<int, std::size_t>> items_;
};

void check_spec(const ModelSpec& spec, const MetaSplit& split, const MTLConfig& cfg) {
  cfg.validate();
  spec.validate();
  if (spec.disc_classes != static_cast<Index>(split.train_classes.size())) {
    throw std::invalid_argument("training: discriminator head has " + std::to_string(spec.disc_classes) +
                                " classes but the split has " + std::to_string(split.train_classes.size()) +
                                " train classes");
  }
  if (spec.episode_ways != cfg.n_ways) {
    throw std::invalid_argument("training: episode head width " + std::to_string(spec.episode_ways) +
                                " differs from n_ways " + std::to_string(cfg.n_ways));
  }
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? kNaN : s / static_cast<double>(v.size());
}

}  // namespace

std::string_view to_string(MetaMode m) {
  switch (m) {
    case MetaMode::Maml: return "maml";
    case MetaMode::Fomaml: return "fomaml";
    case MetaMode::Reptile: return "reptile";
  }
  return "unknown";
}

std::string_view to_string(DiscBatchSource s) {
  return s == DiscBatchSource::TaskUnion ? "task_union" : "global_minibatch";
}

std::string_view to_string(BlendScope s) { return s == BlendScope::TrunkOnly ? "trunk_only" : "trunk_plus_disc_head"; }
std::string_view to_string(HeadInit h) { return h == HeadInit::Zero ? "zero" : "glorot"; }

void MTLConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& rule) {
    throw std::invalid_argument(field + ": must be " + rule);
  };
  if (!(alpha_inner >= 0.0)) fail("alpha_inner", ">= 0");
  if (!(alpha_outer >= 0.0)) fail("alpha_outer", ">= 0");
  if (!(alpha_d >= 0.0)) fail("alpha_d", ">= 0");
  if (!(beta >= 0.0 && beta <= 1.0)) fail("beta", "in [0,1]");
  if (k < 1) fail("k", ">= 1");
  if (meta_batch < 1) fail("meta_batch", ">= 1");
  if (iterations < 0) fail("iterations", ">= 0");
  if (n_ways < 2) fail("n_ways", ">= 2");
  if (k_shots < 1) fail("k_shots", ">= 1");
  if (q_queries < 1) fail("q_queries", ">= 1");
  if (disc_batch_size < 1) fail("disc_batch_size", ">= 1");
  if (k > n_ways * k_shots) fail("k", "<= n_ways * k_shots (one support example per sub-batch at least)");
}

BatchLoss episode_loss(const ModelSpec& spec) {
  return [spec](Tape& tape, std::span<const Var> params, const Batch& batch) {
    const Var logits = forward(spec, params, tape.constant(batch.inputs), Head::Episode);
    return softmax_cross_entropy(logits, batch.labels);
  };
}

BatchLoss discriminator_loss(const ModelSpec& spec) {
  return [spec](Tape& tape, std::span<const Var> params, const Batch& batch) {
    const Var logits = forward(spec, params, tape.constant(batch.inputs), Head::Discriminator);
    return softmax_cross_entropy(logits, batch.labels);
  };
}

double evaluate_loss(const BatchLoss& loss, const ParameterVector& params, const Batch& batch) {
  Tape tape;
  const auto vars = bind(tape, params);
  return loss(tape, vars, batch).value().item();
}

AdaptedTask inner_adapt(const ParameterVector& theta, const Episode& episode, const MTLConfig& cfg,
                        const BatchLoss& loss, Rng& rng) {
  const auto subs = split_sub_batches(std::span<const EpisodeExample>(episode.support), cfg.k, rng);
  AdaptedTask task;
  task.episode = episode;
  task.loss = loss;
  for (const auto& s : subs) task.sub_batch_sizes.push_back(s.size());

  if (cfg.meta_mode == MetaMode::Maml) {
    task.inner_tape = std::make_unique<Tape>();
    Tape& tape = *task.inner_tape;
    task.start = bind(tape, theta);
    std::vector<Var> current = task.start;
    for (const auto& s : subs) {
      const Var l = loss(tape, current, make_batch(s, LabelKind::Episode));
      const auto g = gradients(l, current);
      for (std::size_t i = 0; i < current.size(); ++i) current[i] = sub(current[i], scale(g[i], cfg.alpha_inner));
    }
    task.adapted = current;
    task.theta_i = collect(theta.layout_ptr(), current);
    return task;
  }

  ParameterVector current = theta;
  for (const auto& s : subs) {
    Tape tape;
    const auto vars = bind(tape, current);
    const Var l = loss(tape, vars, make_batch(s, LabelKind::Episode));
    const ParameterVector g = collect(theta.layout_ptr(), gradients(l, vars));
    current = axpy(-cfg.alpha_inner, g, current);
  }
  task.theta_i = std::move(current);
  return task;
}

ParameterVector meta_gradient(const ParameterVector& theta, std::span<AdaptedTask> adapted, MetaMode mode,
                              std::vector<double>* query_losses) {
  if (mode == MetaMode::Reptile) throw std::invalid_argument("meta_gradient: reptile has no meta-gradient");
  ParameterVector total = ParameterVector::zeros(theta.layout_ptr());
  for (auto& task : adapted) {
    require_layout(task.theta_i, theta, "meta_gradient");
    const Batch query = make_batch(task.episode.query, LabelKind::Episode);
    if (mode == MetaMode::Maml) {
      if (!task.inner_tape) throw std::invalid_argument("maml_meta_step: task has no recorded inner loop");
      const Var l = task.loss(*task.inner_tape, task.adapted, query);
      if (query_losses) query_losses->push_back(l.value().item());
      total.flat() += collect(theta.layout_ptr(), gradients(l, task.start)).flat();
    } else {
      Tape tape;
      const auto vars = bind(tape, task.theta_i);
      const Var l = task.loss(tape, vars, query);
      if (query_losses) query_losses->push_back(l.value().item());
      total.flat() += collect(theta.layout_ptr(), gradients(l, vars)).flat();
    }
  }
  return total;
}

MetaStep maml_meta_step(const ParameterVector& theta, std::span<AdaptedTask> adapted, const MTLConfig& cfg) {
  MetaStep step;
  const ParameterVector g = meta_gradient(theta, adapted, cfg.meta_mode, &step.query_losses);
  step.theta = axpy(-cfg.alpha_outer, g, theta);
  return step;
}

ParameterVector reptile_meta_step(const ParameterVector& theta, std::span<const AdaptedTask> adapted,
                                  const MTLConfig& cfg) {
  ParameterVector total = ParameterVector::zeros(theta.layout_ptr());
  for (const auto& task : adapted) {
    require_layout(task.theta_i, theta, "reptile_meta_step");
    total.flat() += task.theta_i.flat() - theta.flat();
  }
  return axpy(cfg.alpha_outer, total, theta);
}

DiscriminatorStep discriminator_step(const ModelSpec& spec, const ParameterVector& theta, const Batch& batch,
                                     const MTLConfig& cfg) {
  for (int y : batch.labels) {
    if (y < 0 || y >= spec.disc_classes) {
      throw std::invalid_argument("discriminator_step: label " + std::to_string(y) + " outside [0," +
                                  std::to_string(spec.disc_classes) + ")");
    }
  }
  Tape tape;
  const auto vars = bind(tape, theta);
  const Var l = discriminator_loss(spec)(tape, vars, batch);
  DiscriminatorStep out{theta, l.value().item()};
  if (cfg.alpha_d == 0.0) return out;

  std::vector<Var> targets;
  std::vector<std::size_t> which;
  for (std::size_t i = 0; i < vars.size(); ++i) {
    if (theta.layout().entries()[i].segment != Segment::EpisodeHead) {
      targets.push_back(vars[i]);
      which.push_back(i);
    }
  }
  const auto g = gradients(l, targets);
  for (std::size_t j = 0; j < which.size(); ++j) {
    const auto& e = theta.layout().entries()[which[j]];
    out.theta.flat().segment(e.offset, e.size) -= cfg.alpha_d * g[j].value().data();
  }
  return out;
}

ParameterVector mtl_blend(const ParameterVector& theta_meta, const ParameterVector& theta_disc, const MTLConfig& cfg) {
  if (!(cfg.beta >= 0.0 && cfg.beta <= 1.0)) throw std::invalid_argument("beta: must be in [0,1]");
  require_layout(theta_meta, theta_disc, "mtl_blend");
  ParameterVector out = theta_meta;
  auto blend = [&](Segment s) {
    if (cfg.beta == 1.0) return;
    if (cfg.beta == 0.0) {
      out.segment(s) = theta_disc.segment(s);
      return;
    }
    out.segment(s) = cfg.beta * theta_meta.segment(s) + (1.0 - cfg.beta) * theta_disc.segment(s);
  };
  blend(Segment::Trunk);
  if (cfg.blend_scope == BlendScope::TrunkPlusDiscHead) blend(Segment::DiscriminatorHead);
  else out.segment(Segment::DiscriminatorHead) = theta_disc.segment(Segment::DiscriminatorHead);
  return out;
}

std::vector<int> discriminator_labels(const Dataset& dataset, const MetaSplit& split) {
  std::vector<int> labels(static_cast<std::size_t>(dataset.class_count()), -1);
  for (std::size_t i = 0; i < split.train_classes.size(); ++i) {
    labels.at(static_cast<std::size_t>(split.train_classes[i])) = static_cast<int>(i);
  }
  return labels;
}

TrainedModel train_mtl(const ModelSpec& spec, const Dataset& dataset, const MetaSplit& split, const MTLConfig& cfg,
                       std::uint64_t seed, TrainPaths paths) {
  check_spec(spec, split, cfg);
  using Clock = std::chrono::steady_clock;

  TrainedModel model{spec, init_params(spec, derive_seed(seed, "init")), cfg, {}};
  const TrainPool pool(dataset, split, discriminator_labels(dataset, split));
  const BatchLoss task_loss = episode_loss(spec);
  Rng head_rng(derive_seed(seed, "head"));
  Rng episode_rng(derive_seed(seed, "episodes"));
  Rng sub_rng(derive_seed(seed, "subbatch"));
  Rng disc_rng(derive_seed(seed, "disc"));
  const bool need_episodes = paths.meta || (paths.disc && cfg.disc_batch_source == DiscBatchSource::TaskUnion);

  ParameterVector& theta = model.theta;
  for (int it = 0; it < cfg.iterations; ++it) {
    const auto t0 = Clock::now();
    if (paths.meta) {
      // The draw happens either way so both settings share the later streams.
      theta = reset_episode_head(theta, cfg.n_ways, head_rng.next_u64());
      if (cfg.episode_head_init == HeadInit::Zero) theta.segment(Segment::EpisodeHead).setZero();
    }

    std::vector<Episode> episodes;
    if (need_episodes) {
      for (int i = 0; i < cfg.meta_batch; ++i) {
        episodes.push_back(sample_episode(dataset, split.train_classes, cfg.n_ways, cfg.k_shots, cfg.q_queries, episode_rng));
      }
    }

    ParameterVector theta_meta = theta;
    double meta_loss = kNaN;
    if (paths.meta) {
      std::vector<AdaptedTask> adapted;
      adapted.reserve(episodes.size());
      for (const auto& ep : episodes) adapted.push_back(inner_adapt(theta, ep, cfg, task_loss, sub_rng));
      if (cfg.meta_mode == MetaMode::Reptile) {
        theta_meta = reptile_meta_step(theta, adapted, cfg);
        std::vector<double> losses;
        for (const auto& task : adapted) {
          losses.push_back(evaluate_loss(task_loss, task.theta_i, make_batch(task.episode.query, LabelKind::Episode)));
        }
        meta_loss = mean_of(losses);
      } else {
        auto step = maml_meta_step(theta, adapted, cfg);
        theta_meta = std::move(step.theta);
        meta_loss = mean_of(step.query_losses);
      }
    }

    double disc_loss = kNaN;
    if (paths.disc) {
      const Batch batch = cfg.disc_batch_source == DiscBatchSource::TaskUnion ? pool.task_union(episodes)
                                                                             : pool.draw(cfg.disc_batch_size, disc_rng);
      auto step = discriminator_step(spec, theta, batch, cfg);
      disc_loss = step.loss;
      theta = mtl_blend(theta_meta, step.theta, cfg);
    } else {
      theta = std::move(theta_meta);
    }

    const double ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    model.log.push_back({it, meta_loss, disc_loss, ms});
  }
  return model;
}

TrainedModel train_meta(const ModelSpec& spec, const Dataset& dataset, const MetaSplit& split, const MTLConfig& cfg,
                        std::uint64_t seed) {
  return train_mtl(spec, dataset, split, cfg, seed, TrainPaths{true, false});
}

TrainedModel train_transfer(const ModelSpec& spec, const Dataset& dataset, const MetaSplit& split,
                            const MTLConfig& cfg, std::uint64_t seed) {
  check_spec(spec, split, cfg);
  using Clock = std::chrono::steady_clock;
  TrainedModel model{spec, init_params(spec, derive_seed(seed, "init")), cfg, {}};
  const TrainPool pool(dataset, split, discriminator_labels(dataset, split));
  Rng disc_rng(derive_seed(seed, "disc"));
  for (int it = 0; it < cfg.iterations; ++it) {
    const auto t0 = Clock::now();
    auto step = discriminator_step(spec, model.theta, pool.draw(cfg.disc_batch_size, disc_rng), cfg);
    model.theta = std::move(step.theta);
    const double ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    model.log.push_back({it, kNaN, step.loss, ms});
  }
  return model;
}

void write_training_log(const std::filesystem::path& path, const std::vector<LogEntry>& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("training log: cannot write " + path.string());
  out << "iteration,meta_loss,disc_loss,wall_ms\n";
  out.precision(17);
  auto field = [&](double v) {
    if (!std::isnan(v)) out << v;
  };
  for (const auto& e : log) {
    out << e.iteration << ',';
    field(e.meta_loss);
    out << ',';
    field(e.disc_loss);
    out << ',' << e.wall_ms << '\n';
  }
  if (!out) throw std::runtime_error("training log: write failed for " + path.string());
}

}  // namespace mtl
