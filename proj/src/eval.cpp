#include "mtl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace mtl {

void EvalProtocol::validate() const {
  auto fail = [](const std::string& field, const std::string& rule) {
    throw std::invalid_argument(field + ": must be " + rule);
  };
  if (adapt_steps < 0) fail("adapt_steps", ">= 0");
  if (!(adapt_lr >= 0.0)) fail("adapt_lr", ">= 0");
  if (n_episodes < 1) fail("n_episodes", ">= 1");
  if (n_ways < 2) fail("n_ways", ">= 2");
  if (k_shots < 1) fail("k_shots", ">= 1");
  if (q_queries < 1) fail("q_queries", ">= 1");
}

double adapt_and_eval(const TrainedModel& model, const Episode& episode, const EvalProtocol& proto) {
  ParameterVector theta = reset_episode_head(model.theta, episode.n_ways, proto.seed);
  const BatchLoss loss = episode_loss(model.spec);
  const Batch support = make_batch(episode.support, LabelKind::Episode);

  for (int step = 0; step < proto.adapt_steps; ++step) {
    Tape tape;
    const auto vars = bind(tape, theta);
    const Var l = loss(tape, vars, support);
    std::vector<Var> targets;
    std::vector<std::size_t> which;
    for (std::size_t i = 0; i < vars.size(); ++i) {
      const Segment s = theta.layout().entries()[i].segment;
      if (s == Segment::EpisodeHead || (!proto.freeze_trunk && s == Segment::Trunk)) {
        targets.push_back(vars[i]);
        which.push_back(i);
      }
    }
    const auto g = gradients(l, targets);
    for (std::size_t j = 0; j < which.size(); ++j) {
      const auto& e = theta.layout().entries()[which[j]];
      theta.flat().segment(e.offset, e.size) -= proto.adapt_lr * g[j].value().data();
    }
  }

  const Batch query = make_batch(episode.query, LabelKind::Episode);
  const Tensor logits = predict(model.spec, theta, query.inputs, Head::Episode);
  const auto m = logits.matrix();
  int correct = 0;
  for (Index r = 0; r < m.rows(); ++r) {
    Index best = 0;
    m.row(r).maxCoeff(&best);
    if (best == query.labels[static_cast<std::size_t>(r)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(m.rows());
}

std::vector<double> episode_accuracies(const TrainedModel& model, const Dataset& dataset, const MetaSplit& split,
                                       const EvalProtocol& proto) {
  proto.validate();
  Rng episode_rng(derive_seed(proto.seed, "eval-episodes"));
  const std::uint64_t head_master = derive_seed(proto.seed, "eval-heads");
  std::vector<double> acc;
  acc.reserve(static_cast<std::size_t>(proto.n_episodes));
  for (int i = 0; i < proto.n_episodes; ++i) {
    const Episode ep = sample_episode(dataset, split.test_classes, proto.n_ways, proto.k_shots, proto.q_queries, episode_rng);
    EvalProtocol local = proto;
    local.seed = derive_seed(head_master, static_cast<std::uint64_t>(i));
    acc.push_back(adapt_and_eval(model, ep, local));
  }
  return acc;
}

ResultsRow summarize(const std::string& method, const std::vector<double>& accuracies, const EvalProtocol& proto) {
  if (accuracies.empty()) throw std::invalid_argument("summarize: no accuracies");
  const double n = static_cast<double>(accuracies.size());
  double total = 0.0;
  for (double a : accuracies) total += a;
  const double mean = total / n;
  double var = 0.0;
  for (double a : accuracies) var += (a - mean) * (a - mean);
  var /= n;
  ResultsRow row;
  row.method = method;
  row.n_ways = proto.n_ways;
  row.k_shots = proto.k_shots;
  row.mean_accuracy = 100.0 * mean;
  row.ci95 = 100.0 * 1.96 * std::sqrt(var) / std::sqrt(n);
  row.n_episodes = static_cast<int>(accuracies.size());
  row.seed = proto.seed;
  return row;
}

ResultsRow evaluate_suite(const TrainedModel& model, const Dataset& dataset, const MetaSplit& split,
                          const EvalProtocol& proto, const std::string& method) {
  return summarize(method, episode_accuracies(model, dataset, split, proto), proto);
}

std::string emit_table(std::span<const ResultsRow> rows, TableFormat format) {
  std::vector<std::string> methods;
  std::map<std::pair<int, int>, std::map<std::string, double>> cells;
  for (const auto& r : rows) {
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
    auto& cell = cells[{r.n_ways, r.k_shots}];
    if (!cell.emplace(r.method, r.mean_accuracy).second) {
      throw std::invalid_argument("emit_table: duplicate cell (" + r.method + ", " + std::to_string(r.n_ways) + "-way, " +
                                  std::to_string(r.k_shots) + "-shot)");
    }
  }

  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  const bool md = format == TableFormat::Markdown;
  if (md) {
    os << "| n_ways | k_shots |";
    for (const auto& m : methods) os << ' ' << m << " |";
    os << "\n|---|---|";
    for (std::size_t i = 0; i < methods.size(); ++i) os << "---|";
    os << '\n';
  } else {
    os << "n_ways,k_shots";
    for (const auto& m : methods) os << ',' << m;
    os << '\n';
  }
  for (const auto& [key, by_method] : cells) {
    os << (md ? "| " : "") << key.first << (md ? "-ways | " : ",") << key.second << (md ? " shots |" : "");
    for (const auto& m : methods) {
      const auto it = by_method.find(m);
      if (md) {
        os << ' ';
        if (it != by_method.end()) os << it->second;
        else os << '-';
        os << " |";
      } else {
        os << ',';
        if (it != by_method.end()) os << it->second;
      }
    }
    os << '\n';
  }
  return os.str();
}

std::string results_header() { return "method,n_ways,k_shots,mean_acc,ci95,n_episodes,seed"; }

std::string format_results_row(const ResultsRow& row) {
  std::ostringstream os;
  os << row.method << ',' << row.n_ways << ',' << row.k_shots << ',' << std::setprecision(17) << row.mean_accuracy << ','
     << row.ci95 << ',' << row.n_episodes << ',' << row.seed;
  return os.str();
}

void append_results(const std::filesystem::path& path, std::span<const ResultsRow> rows) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("results: cannot write " + path.string());
  if (fresh) out << results_header() << '\n';
  for (const auto& r : rows) out << format_results_row(r) << '\n';
  if (!out) throw std::runtime_error("results: write failed for " + path.string());
}

std::vector<ResultsRow> read_results(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("results: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != results_header()) {
    throw std::runtime_error("results: " + path.string() + " lacks the expected header");
  }
  std::vector<ResultsRow> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, ',')) f.push_back(item);
    if (f.size() != 7) throw std::runtime_error("results: line " + std::to_string(line_no) + " needs 7 fields");
    try {
      rows.push_back(ResultsRow{f[0], std::stoi(f[1]), std::stoi(f[2]), std::stod(f[3]), std::stod(f[4]),
                                std::stoi(f[5]), std::stoull(f[6])});
    } catch (const std::logic_error&) {
      throw std::runtime_error("results: malformed number on line " + std::to_string(line_no));
    }
  }
  return rows;
}

}  // namespace mtl
