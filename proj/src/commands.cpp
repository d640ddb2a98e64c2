#include "mtl/commands.hpp"

#include "mtl/checkpoint.hpp"

#include <fstream>
#include <stdexcept>

namespace mtl {

namespace {

struct Prepared {
  Dataset dataset;
  MetaSplit split;
  ModelSpec spec;
};

Prepared prepare(const ExperimentConfig& cfg) {
  Prepared p;
  p.dataset = load_dataset(cfg.dataset);
  if (cfg.split.n_train_classes >= p.dataset.class_count()) {
    throw std::invalid_argument("split.n_train_classes: dataset has only " + std::to_string(p.dataset.class_count()) +
                                " classes");
  }
  p.split = split_classes(p.dataset, cfg.split.n_train_classes, cfg.split.seed);
  p.spec = build_spec(cfg, p.dataset.input_shape);
  return p;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace

TrainedModel train_method(const ExperimentConfig& cfg, const Dataset& dataset, const MetaSplit& split,
                          const ModelSpec& spec) {
  if (cfg.method == "transfer") return train_transfer(spec, dataset, split, cfg.learner, cfg.seed);
  if (is_joint_method(cfg.method)) return train_mtl(spec, dataset, split, cfg.learner, cfg.seed);
  return train_meta(spec, dataset, split, cfg.learner, cfg.seed);
}

TrainArtifacts run_train(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  const Prepared p = prepare(cfg);

  const TrainedModel model = train_method(cfg, p.dataset, p.split, p.spec);

  TrainArtifacts a{out_dir / cfg.output.checkpoint, out_dir / cfg.output.log, out_dir / "config.ini"};
  save_checkpoint(a.checkpoint, p.spec, model.theta);
  write_training_log(a.log, model.log);
  write_text(a.resolved_config, serialize_config(cfg));
  return a;
}

std::vector<ResultsRow> run_eval(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                                 const std::filesystem::path& results) {
  if (!std::filesystem::exists(checkpoint)) throw std::runtime_error("checkpoint not found: " + checkpoint.string());
  const Prepared p = prepare(cfg);
  TrainedModel model{p.spec, load_checkpoint(checkpoint, p.spec), cfg.learner, {}};

  std::vector<ResultsRow> rows;
  for (int n : cfg.eval.n_ways) {
    for (int k : cfg.eval.k_shots) {
      EvalProtocol proto = cfg.eval.protocol;
      proto.n_ways = n;
      proto.k_shots = k;
      ResultsRow row = evaluate_suite(model, p.dataset, p.split, proto, cfg.method);
      row.seed = cfg.seed;
      rows.push_back(row);
    }
  }
  append_results(results, rows);
  return rows;
}

std::vector<std::string> gradcheck_spec_names() { return {"mlp", "mlp-small", "conv-small", "conv"}; }

ModelSpec gradcheck_spec(const std::string& name) {
  if (name == "mlp") return ModelSpec::mlp(16, {64, 64, 64}, 64, 5);
  if (name == "mlp-small") return ModelSpec::mlp(2, {16}, 5, 5);
  if (name == "conv-small") return ModelSpec::conv({1, 8, 8}, 2, 4, 5, 5);
  if (name == "conv") return ModelSpec::conv({3, 16, 16}, 4, 32, 64, 5);
  throw std::invalid_argument("spec: unknown name '" + name + "' (expected mlp, mlp-small, conv-small or conv)");
}

GradCheckReport run_gradcheck(const std::string& spec_name, double eps, Index max_coords) {
  const ModelSpec spec = gradcheck_spec(spec_name);
  const std::uint64_t seed = 7;
  const ParameterVector theta = init_params(spec, seed);

  Rng rng(derive_seed(seed, "gradcheck-batch"));
  const Index batch = 8;
  Shape shape{batch};
  shape.insert(shape.end(), spec.input_shape.begin(), spec.input_shape.end());
  Tensor inputs(shape);
  for (Index i = 0; i < inputs.size(); ++i) inputs.data()[i] = rng.normal();
  auto labels = [&](Index classes) {
    std::vector<int> l(static_cast<std::size_t>(batch));
    for (int& y : l) y = static_cast<int>(rng.below(classes));
    return l;
  };
  const Batch disc_batch{inputs, labels(spec.disc_classes)};
  const Batch episode_batch{inputs, labels(spec.episode_ways)};

  auto as_function = [](BatchLoss loss, Batch b) -> TapeFunction {
    return [loss = std::move(loss), b = std::move(b)](Tape& tape, std::span<const Var> params) {
      return loss(tape, params, b);
    };
  };

  GradCheckReport r;
  r.spec_name = spec_name;
  r.parameters = theta.size();
  r.disc_error = grad_check(as_function(discriminator_loss(spec), disc_batch), theta, eps, max_coords);
  r.episode_error = grad_check(as_function(episode_loss(spec), episode_batch), theta, eps, max_coords);
  return r;
}

std::string run_report(const std::filesystem::path& results, TableFormat format) {
  const auto rows = read_results(results);
  return emit_table(rows, format);
}

}  // namespace mtl
