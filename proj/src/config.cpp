#include "mtl/config.hpp"

#include "mtl/rng.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace mtl {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& expected) {
  throw std::invalid_argument(key + ": expected " + expected + ", got '" + value + "'");
}

template <typename T>
T parse_integer(const std::string& key, const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) bad_value(key, v, "an integer");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size()) bad_value(key, v, "a number");
  return d;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  bad_value(key, v, "true or false");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_integer<int>(key, trim(item)));
  if (out.empty()) bad_value(key, v, "a comma-separated list of integers");
  return out;
}

std::string fmt(double d) {
  std::ostringstream os;
  os.precision(17);
  os << d;
  return os.str();
}

std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Field {
  std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

// Ordered registry of every accepted key. Section "" holds top-level keys.
const std::vector<std::pair<std::string, Field>>& registry() {
  using C = ExperimentConfig;
  static const std::vector<std::pair<std::string, Field>> fields = [] {
    std::vector<std::pair<std::string, Field>> f;
    auto integer = [&](std::string key, auto member) {
      f.push_back({std::move(key), Field{[member](C& c, const std::string& k, const std::string& v) {
                                           auto& slot = member(c);
                                           slot = parse_integer<std::remove_reference_t<decltype(slot)>>(k, v);
                                         },
                                         [member](const C& c) { return std::to_string(member(const_cast<C&>(c))); }}});
    };
    auto real = [&](std::string key, auto member) {
      f.push_back({std::move(key), Field{[member](C& c, const std::string& k, const std::string& v) { member(c) = parse_double(k, v); },
                                         [member](const C& c) { return fmt(member(const_cast<C&>(c))); }}});
    };
    auto text = [&](std::string key, auto member) {
      f.push_back({std::move(key), Field{[member](C& c, const std::string&, const std::string& v) { member(c) = v; },
                                         [member](const C& c) { return member(const_cast<C&>(c)); }}});
    };

    integer("seed", [](C& c) -> std::uint64_t& { return c.seed; });
    text("method", [](C& c) -> std::string& { return c.method; });

    text("dataset.kind", [](C& c) -> std::string& { return c.dataset.kind; });
    integer("dataset.n_classes", [](C& c) -> Index& { return c.dataset.n_classes; });
    integer("dataset.dim", [](C& c) -> Index& { return c.dataset.dim; });
    integer("dataset.per_class", [](C& c) -> Index& { return c.dataset.per_class; });
    real("dataset.cluster_std", [](C& c) -> double& { return c.dataset.cluster_std; });
    integer("dataset.seed", [](C& c) -> std::uint64_t& { return c.dataset.seed; });
    text("dataset.path", [](C& c) -> std::string& { return c.dataset.path; });

    integer("split.n_train_classes", [](C& c) -> Index& { return c.split.n_train_classes; });
    integer("split.seed", [](C& c) -> std::uint64_t& { return c.split.seed; });

    text("model.kind", [](C& c) -> std::string& { return c.model.kind; });
    integer("model.hidden", [](C& c) -> Index& { return c.model.hidden; });
    integer("model.hidden_layers", [](C& c) -> Index& { return c.model.hidden_layers; });
    integer("model.trunk_width", [](C& c) -> Index& { return c.model.trunk_width; });
    integer("model.conv_blocks", [](C& c) -> Index& { return c.model.conv_blocks; });
    integer("model.conv_filters", [](C& c) -> Index& { return c.model.conv_filters; });

    real("learner.alpha_inner", [](C& c) -> double& { return c.learner.alpha_inner; });
    real("learner.alpha_outer", [](C& c) -> double& { return c.learner.alpha_outer; });
    real("learner.alpha_d", [](C& c) -> double& { return c.learner.alpha_d; });
    real("learner.beta", [](C& c) -> double& { return c.learner.beta; });
    integer("learner.k", [](C& c) -> int& { return c.learner.k; });
    integer("learner.meta_batch", [](C& c) -> int& { return c.learner.meta_batch; });
    integer("learner.iterations", [](C& c) -> int& { return c.learner.iterations; });
    integer("learner.n_ways", [](C& c) -> int& { return c.learner.n_ways; });
    integer("learner.k_shots", [](C& c) -> int& { return c.learner.k_shots; });
    integer("learner.q_queries", [](C& c) -> int& { return c.learner.q_queries; });
    f.push_back({"learner.disc_batch_source",
                 Field{[](C& c, const std::string& k, const std::string& v) {
                         if (v == "task_union") c.learner.disc_batch_source = DiscBatchSource::TaskUnion;
                         else if (v == "global_minibatch") c.learner.disc_batch_source = DiscBatchSource::GlobalMinibatch;
                         else bad_value(k, v, "task_union or global_minibatch");
                       },
                       [](const C& c) { return std::string(to_string(c.learner.disc_batch_source)); }}});
    integer("learner.disc_batch_size", [](C& c) -> int& { return c.learner.disc_batch_size; });
    f.push_back({"learner.blend_scope",
                 Field{[](C& c, const std::string& k, const std::string& v) {
                         if (v == "trunk_only") c.learner.blend_scope = BlendScope::TrunkOnly;
                         else if (v == "trunk_plus_disc_head") c.learner.blend_scope = BlendScope::TrunkPlusDiscHead;
                         else bad_value(k, v, "trunk_only or trunk_plus_disc_head");
                       },
                       [](const C& c) { return std::string(to_string(c.learner.blend_scope)); }}});

    f.push_back({"learner.episode_head_init",
                 Field{[](C& c, const std::string& k, const std::string& v) {
                         if (v == "zero") c.learner.episode_head_init = HeadInit::Zero;
                         else if (v == "glorot") c.learner.episode_head_init = HeadInit::Glorot;
                         else bad_value(k, v, "zero or glorot");
                       },
                       [](const C& c) { return std::string(to_string(c.learner.episode_head_init)); }}});

    integer("eval.adapt_steps", [](C& c) -> int& { return c.eval.protocol.adapt_steps; });
    real("eval.adapt_lr", [](C& c) -> double& { return c.eval.protocol.adapt_lr; });
    integer("eval.n_episodes", [](C& c) -> int& { return c.eval.protocol.n_episodes; });
    f.push_back({"eval.n_ways", Field{[](C& c, const std::string& k, const std::string& v) { c.eval.n_ways = parse_int_list(k, v); },
                                      [](const C& c) { return join(c.eval.n_ways); }}});
    f.push_back({"eval.k_shots", Field{[](C& c, const std::string& k, const std::string& v) { c.eval.k_shots = parse_int_list(k, v); },
                                       [](const C& c) { return join(c.eval.k_shots); }}});
    integer("eval.q_queries", [](C& c) -> int& { return c.eval.protocol.q_queries; });
    integer("eval.seed", [](C& c) -> std::uint64_t& { return c.eval.protocol.seed; });
    f.push_back({"eval.freeze_trunk",
                 Field{[](C& c, const std::string& k, const std::string& v) { c.eval.protocol.freeze_trunk = parse_bool(k, v); },
                       [](const C& c) { return std::string(c.eval.protocol.freeze_trunk ? "true" : "false"); }}});

    text("output.checkpoint", [](C& c) -> std::string& { return c.output.checkpoint; });
    text("output.log", [](C& c) -> std::string& { return c.output.log; });
    return f;
  }();
  return fields;
}

void validate(const ExperimentConfig& c) {
  const auto& methods = known_methods();
  if (std::find(methods.begin(), methods.end(), c.method) == methods.end()) {
    throw std::invalid_argument("method: unknown method '" + c.method + "'");
  }
  if (c.dataset.kind != "blobs" && c.dataset.kind != "image_dir") {
    throw std::invalid_argument("dataset.kind: expected blobs or image_dir, got '" + c.dataset.kind + "'");
  }
  if (c.dataset.kind == "blobs") {
    if (c.dataset.n_classes < 2) throw std::invalid_argument("dataset.n_classes: must be >= 2");
    if (c.dataset.dim < 1) throw std::invalid_argument("dataset.dim: must be >= 1");
    if (c.dataset.per_class < 1) throw std::invalid_argument("dataset.per_class: must be >= 1");
    if (!(c.dataset.cluster_std >= 0.0)) throw std::invalid_argument("dataset.cluster_std: must be >= 0");
    if (c.split.n_train_classes < 1 || c.split.n_train_classes >= c.dataset.n_classes) {
      throw std::invalid_argument("split.n_train_classes: must lie in [1, dataset.n_classes)");
    }
  } else if (c.dataset.path.empty()) {
    throw std::invalid_argument("dataset.path: required when dataset.kind = image_dir");
  }
  if (c.split.n_train_classes < 1) throw std::invalid_argument("split.n_train_classes: must be >= 1");
  if (c.model.kind != "mlp" && c.model.kind != "conv") {
    throw std::invalid_argument("model.kind: expected mlp or conv, got '" + c.model.kind + "'");
  }
  if (c.model.hidden < 1) throw std::invalid_argument("model.hidden: must be >= 1");
  if (c.model.hidden_layers < 0) throw std::invalid_argument("model.hidden_layers: must be >= 0");
  if (c.model.trunk_width < 1) throw std::invalid_argument("model.trunk_width: must be >= 1");
  if (c.model.conv_blocks < 1) throw std::invalid_argument("model.conv_blocks: must be >= 1");
  if (c.model.conv_filters < 1) throw std::invalid_argument("model.conv_filters: must be >= 1");

  try {
    c.learner.validate();
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument("learner." + std::string(e.what()));
  }
  for (int n : c.eval.n_ways) {
    EvalProtocol p = c.eval.protocol;
    p.n_ways = n;
    for (int k : c.eval.k_shots) {
      p.k_shots = k;
      try {
        p.validate();
      } catch (const std::invalid_argument& e) {
        throw std::invalid_argument("eval." + std::string(e.what()));
      }
    }
  }
  if (c.output.checkpoint.empty()) throw std::invalid_argument("output.checkpoint: must not be empty");
  if (c.output.log.empty()) throw std::invalid_argument("output.log: must not be empty");
}

}  // namespace

const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> m{"transfer", "maml", "fomaml", "reptile", "maml_mtl", "fomaml_mtl", "reptile_mtl"};
  return m;
}

bool is_joint_method(std::string_view method) { return method.ends_with("_mtl"); }

ExperimentConfig parse_config(std::string_view text) {
  std::map<std::string, std::string> values;
  std::string section;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find_first_of("#;");
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw std::invalid_argument("config line " + std::to_string(line_no) + ": unterminated section");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = (section.empty() ? "" : section + ".") + trim(std::string_view(line).substr(0, eq));
    if (!values.emplace(key, trim(std::string_view(line).substr(eq + 1))).second) {
      throw std::invalid_argument(key + ": set more than once");
    }
  }

  const auto& fields = registry();
  for (const auto& [key, value] : values) {
    if (std::none_of(fields.begin(), fields.end(), [&](const auto& f) { return f.first == key; })) {
      throw std::invalid_argument(key + ": unknown key");
    }
  }

  ExperimentConfig cfg;
  for (const auto& [key, field] : fields) {
    if (const auto it = values.find(key); it != values.end()) field.set(cfg, key, it->second);
  }
  // Derived defaults.
  if (!values.contains("dataset.seed")) cfg.dataset.seed = derive_seed(cfg.seed, "dataset");
  if (!values.contains("split.seed")) cfg.split.seed = derive_seed(cfg.seed, "split");
  if (!values.contains("eval.seed")) cfg.eval.protocol.seed = derive_seed(cfg.seed, "eval");
  if (!values.contains("eval.adapt_lr")) cfg.eval.protocol.adapt_lr = cfg.learner.alpha_inner;
  if (cfg.method != "transfer" && !is_joint_method(cfg.method) && !values.contains("learner.beta")) cfg.learner.beta = 1.0;
  const std::string base = cfg.method.substr(0, cfg.method.find('_'));
  if (base == "maml") cfg.learner.meta_mode = MetaMode::Maml;
  else if (base == "fomaml") cfg.learner.meta_mode = MetaMode::Fomaml;
  else cfg.learner.meta_mode = MetaMode::Reptile;

  validate(cfg);
  return cfg;
}

std::string serialize_config(const ExperimentConfig& cfg) {
  std::ostringstream os;
  std::string current = "";
  for (const auto& [key, field] : registry()) {
    const auto dot = key.find('.');
    const std::string section = dot == std::string::npos ? "" : key.substr(0, dot);
    const std::string name = dot == std::string::npos ? key : key.substr(dot + 1);
    if (section != current) {
      os << "\n[" << section << "]\n";
      current = section;
    }
    os << name << " = " << field.get(cfg) << '\n';
  }
  return os.str();
}

Dataset load_dataset(const DatasetConfig& cfg) {
  if (cfg.kind == "blobs") return gen_blobs(cfg.n_classes, cfg.dim, cfg.per_class, cfg.cluster_std, cfg.seed);
  return load_image_dataset(cfg.path);
}

ModelSpec build_spec(const ExperimentConfig& cfg, const Shape& input_shape) {
  const Index disc = cfg.split.n_train_classes;
  const Index ways = cfg.learner.n_ways;
  if (cfg.model.kind == "conv") {
    if (input_shape.size() != 3) throw std::invalid_argument("model.kind: conv needs CHW image input, got " + to_string(input_shape));
    return ModelSpec::conv(input_shape, cfg.model.conv_blocks, cfg.model.conv_filters, disc, ways);
  }
  std::vector<Index> widths(static_cast<std::size_t>(cfg.model.hidden_layers), cfg.model.hidden);
  widths.push_back(cfg.model.trunk_width);
  ModelSpec spec = ModelSpec::mlp(numel(input_shape), widths, disc, ways);
  spec.input_shape = input_shape;
  spec.validate();
  return spec;
}

}  // namespace mtl
