// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria.

#include "mtl/commands.hpp"
#include "mtl/config.hpp"
#include "mtl/eval.hpp"
#include "mtl/learners.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace mtl;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Tolerances and budgets.
constexpr double kQuadTol = 1e-12;
constexpr double kQuadBudgetS = 1.0;
constexpr double kGradTol = 1e-6;
constexpr double kGradEps = 1e-5;
constexpr double kMamlFdTol = 1e-4;
constexpr double kMamlFdEps = 1e-4;
constexpr double kGradBudgetS = 30.0;
constexpr double kChanceSigmas = 3.0;
constexpr double kOrderSlack = 1.0;
constexpr double kOrderBudgetS = 30.0 * 60.0;

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

void report(int id, const char* name, const Outcome& o) {
  std::printf("criterion %d %-28s %s  %s\n", id, name, o.pass ? "PASS" : "FAIL", o.detail.c_str());
  std::fflush(stdout);
}

std::shared_ptr<const ParamLayout> flat_layout(Index d) {
  return std::make_shared<const ParamLayout>(
      std::vector<std::pair<std::string, std::pair<Shape, Segment>>>{{"theta", {{d}, Segment::Trunk}}});
}

BatchLoss quadratic_loss(const Vector& c) {
  return [c](Tape& tape, std::span<const Var> params, const Batch&) {
    const Var d = sub(params[0], tape.constant(Tensor({c.size()}, c)));
    return scale(sum(mul(d, d)), 0.5);
  };
}

Episode count_only_episode(int support, int query) {
  Episode e;
  e.n_ways = 1;
  e.k_shots = support;
  e.q_queries = query;
  e.classes = {0};
  for (int i = 0; i < support; ++i) e.support.push_back({Tensor({1}, {static_cast<double>(i)}), 0, 0});
  for (int i = 0; i < query; ++i) e.query.push_back({Tensor({1}, {static_cast<double>(i)}), 0, 0});
  return e;
}

Outcome quadratic_oracles() {
  const auto t0 = Clock::now();
  const Index d = 8;
  auto layout = flat_layout(d);
  Rng draw(101);
  double worst = 0.0;
  int cases = 0;
  for (double alpha : {0.1, 0.3}) {
    for (int k : {1, 3}) {
      for (int trial = 0; trial < 100; ++trial) {
        Vector t(d), c(d);
        for (Index i = 0; i < d; ++i) t[i] = draw.normal();
        for (Index i = 0; i < d; ++i) c[i] = draw.normal();
        const ParameterVector theta(layout, t);
        MTLConfig cfg;
        cfg.alpha_inner = alpha;
        cfg.alpha_outer = 0.05;
        cfg.k = k;
        const double shrink = std::pow(1.0 - alpha, k);
        auto adapt = [&](MetaMode mode) {
          cfg.meta_mode = mode;
          Rng rng(static_cast<std::uint64_t>(trial));
          std::vector<AdaptedTask> out;
          out.push_back(inner_adapt(theta, count_only_episode(3, 1), cfg, quadratic_loss(c), rng));
          return out;
        };
        auto rep = adapt(MetaMode::Reptile);
        const Vector reptile = reptile_meta_step(theta, rep, cfg).flat();
        worst = std::max(worst, (reptile - (t + cfg.alpha_outer * (shrink - 1.0) * (t - c))).cwiseAbs().maxCoeff());
        auto fo = adapt(MetaMode::Fomaml);
        const Vector g1 = meta_gradient(theta, fo, MetaMode::Fomaml).flat();
        worst = std::max(worst, (g1 - (fo[0].theta_i.flat() - c)).cwiseAbs().maxCoeff());
        worst = std::max(worst, (g1 - shrink * (t - c)).cwiseAbs().maxCoeff());
        auto so = adapt(MetaMode::Maml);
        const Vector g2 = meta_gradient(theta, so, MetaMode::Maml).flat();
        worst = std::max(worst, (g2 - shrink * shrink * (t - c)).cwiseAbs().maxCoeff());
        ++cases;
      }
    }
  }
  const double s = seconds_since(t0);
  return {worst <= kQuadTol && s < kQuadBudgetS,
          std::to_string(cases) + " draws, max abs err " + fmt("%.2e", worst) + ", " + fmt("%.3f s", s)};
}

double maml_fd_error() {
  const ModelSpec spec = ModelSpec::mlp(2, {8}, 3, 3);
  const Dataset ds = gen_blobs(3, 2, 10, 1.0, 5);
  const std::vector<int> side{0, 1, 2};
  Rng erng(3);
  const Episode ep = sample_episode(ds, side, 3, 2, 3, erng);
  MTLConfig cfg;
  cfg.meta_mode = MetaMode::Maml;
  cfg.k = 1;
  cfg.alpha_inner = 0.5;
  const BatchLoss loss = episode_loss(spec);
  const ParameterVector theta = init_params(spec, 4);
  Rng rng(9);
  std::vector<AdaptedTask> adapted;
  adapted.push_back(inner_adapt(theta, ep, cfg, loss, rng));
  const Vector g = meta_gradient(theta, adapted, MetaMode::Maml).flat();

  auto post_loss = [&](const ParameterVector& th) {
    MTLConfig c = cfg;
    c.meta_mode = MetaMode::Fomaml;
    Rng r(9);
    const AdaptedTask t = inner_adapt(th, ep, c, loss, r);
    return evaluate_loss(loss, t.theta_i, make_batch(ep.query, LabelKind::Episode));
  };
  Vector numeric(theta.size());
  for (Index j = 0; j < theta.size(); ++j) {
    ParameterVector plus = theta, minus = theta;
    plus.flat()[j] += kMamlFdEps;
    minus.flat()[j] -= kMamlFdEps;
    numeric[j] = (post_loss(plus) - post_loss(minus)) / (2 * kMamlFdEps);
  }
  return max_relative_error(g, numeric);
}

Outcome gradient_checks() {
  const auto t0 = Clock::now();
  GradCheckReport r = run_gradcheck("mlp", kGradEps);
  r.tolerance = kGradTol;
  const double fd = maml_fd_error();
  const double s = seconds_since(t0);
  return {r.passed() && fd < kMamlFdTol && s < kGradBudgetS,
          "disc " + fmt("%.2e", r.disc_error) + ", episode " + fmt("%.2e", r.episode_error) + ", maml-vs-fd " +
              fmt("%.2e", fd) + ", " + fmt("%.1f s", s)};
}

Outcome blend_reductions() {
  const Dataset ds = gen_blobs(100, 16, 40, 1.0, 201);
  const MetaSplit split = split_classes(ds, 64, 202);
  const ModelSpec spec = ModelSpec::mlp(16, {64, 64, 64}, 64, 5);
  MTLConfig cfg;
  cfg.iterations = 50;
  int ok = 0, total = 0;
  cfg.beta = 1.0;
  for (MetaMode mode : {MetaMode::Reptile, MetaMode::Fomaml, MetaMode::Maml}) {
    cfg.meta_mode = mode;
    const TrainedModel joint = train_mtl(spec, ds, split, cfg, 203);
    const TrainedModel meta = train_meta(spec, ds, split, cfg, 203);
    ok += bit_equal_segment(joint.theta, meta.theta, Segment::Trunk);
    ++total;
  }
  cfg.beta = 0.0;
  cfg.disc_batch_source = DiscBatchSource::GlobalMinibatch;
  const TrainedModel joint = train_mtl(spec, ds, split, cfg, 204, TrainPaths{false, true});
  const TrainedModel transfer = train_transfer(spec, ds, split, cfg, 204);
  ok += bit_equal_segment(joint.theta, transfer.theta, Segment::Trunk);
  ++total;
  return {ok == total, std::to_string(ok) + "/" + std::to_string(total) + " trunks bit-identical"};
}

bool episode_ok(const Episode& e, const Dataset& ds, std::span<const int> side) {
  const std::set<int> allowed(side.begin(), side.end());
  if (e.classes.size() != static_cast<std::size_t>(e.n_ways)) return false;
  if (std::set<int>(e.classes.begin(), e.classes.end()).size() != e.classes.size()) return false;
  if (e.support.size() != static_cast<std::size_t>(e.n_ways * e.k_shots)) return false;
  if (e.query.size() != static_cast<std::size_t>(e.n_ways * e.q_queries)) return false;
  std::map<int, int> sc, qc;
  std::set<std::vector<double>> seen;
  bool ok = true;
  auto visit = [&](const EpisodeExample& x, std::map<int, int>& counts) {
    ok = ok && allowed.contains(x.global_label) && x.episode_label >= 0 && x.episode_label < e.n_ways &&
         e.classes[static_cast<std::size_t>(x.episode_label)] == x.global_label &&
         e.remap(x.global_label) == x.episode_label && x.features.shape() == ds.input_shape;
    counts[x.episode_label]++;
    std::vector<double> key(x.features.values().begin(), x.features.values().end());
    key.push_back(x.global_label);
    ok = ok && seen.insert(key).second;
  };
  for (const auto& x : e.support) visit(x, sc);
  for (const auto& x : e.query) visit(x, qc);
  for (int l = 0; l < e.n_ways; ++l) ok = ok && sc[l] == e.k_shots && qc[l] == e.q_queries;
  return ok;
}

bool split_ok(const MetaSplit& s, Index n_classes, Index n_train) {
  if (static_cast<Index>(s.train_classes.size()) != n_train) return false;
  if (!std::is_sorted(s.train_classes.begin(), s.train_classes.end())) return false;
  if (!std::is_sorted(s.test_classes.begin(), s.test_classes.end())) return false;
  std::vector<int> all = s.train_classes;
  all.insert(all.end(), s.test_classes.begin(), s.test_classes.end());
  std::sort(all.begin(), all.end());
  if (static_cast<Index>(all.size()) != n_classes) return false;
  for (Index i = 0; i < n_classes; ++i)
    if (all[static_cast<std::size_t>(i)] != i) return false;
  return true;
}

Outcome sampler_and_split() {
  const Dataset ds = gen_blobs(40, 3, 25, 1.0, 301);
  Rng meta(302);
  int bad_episodes = 0, bad_splits = 0, bad_batches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Index n_train = 2 + static_cast<Index>(meta.below(36));
    const MetaSplit s = split_classes(ds, n_train, meta.next_u64());
    bad_splits += !split_ok(s, 40, n_train);
    const auto& side = meta.below(2) ? s.train_classes : s.test_classes;
    const int n = 2 + static_cast<int>(meta.below(std::min<Index>(9, static_cast<Index>(side.size()) - 1)));
    const int k = 1 + static_cast<int>(meta.below(5));
    const int q = 1 + static_cast<int>(meta.below(10));
    Rng rng(meta.next_u64());
    const Episode e = sample_episode(ds, side, n, k, q, rng);
    bad_episodes += !episode_ok(e, ds, side);

    const int parts = 1 + static_cast<int>(meta.below(static_cast<Index>(e.support.size())));
    const auto subs = split_sub_batches(std::span<const EpisodeExample>(e.support), parts, rng);
    std::multiset<std::pair<int, double>> before, after;
    for (const auto& x : e.support) before.insert({x.global_label, x.features.values()[0]});
    std::size_t largest = 0, smallest = e.support.size();
    for (const auto& b : subs) {
      largest = std::max(largest, b.size());
      smallest = std::min(smallest, b.size());
      for (const auto& x : b) after.insert({x.global_label, x.features.values()[0]});
    }
    bad_batches += !(before == after && subs.size() == static_cast<std::size_t>(parts) && largest - smallest <= 1);
  }
  const Dataset hundred = gen_blobs(100, 2, 2, 1.0, 303);
  const MetaSplit s = split_classes(hundred, 64, 304);
  const bool split_64_36 = split_ok(s, 100, 64) && s.test_classes.size() == 36;
  return {bad_episodes == 0 && bad_splits == 0 && bad_batches == 0 && split_64_36,
          "1000 trials: episode violations " + std::to_string(bad_episodes) + ", split violations " +
              std::to_string(bad_splits) + ", sub-batch violations " + std::to_string(bad_batches) + "; 100 -> " +
              std::to_string(s.train_classes.size()) + "/" + std::to_string(s.test_classes.size())};
}

ExperimentConfig blobs_config(const std::string& method, std::uint64_t seed) {
  std::ostringstream text;
  text << "seed = " << seed << "\nmethod = " << method << "\n"
       << "[dataset]\nkind = blobs\nn_classes = 100\ndim = 16\nper_class = 600\ncluster_std = 1.0\n"
       << "[split]\nn_train_classes = 64\n"
       << "[learner]\niterations = 2000\nn_ways = 5\nk_shots = 1\n"
       << "[eval]\nn_episodes = 600\n";
  return parse_config(text.str());
}

Outcome chance_level() {
  const ExperimentConfig cfg = blobs_config("transfer", 1);
  const Dataset ds = load_dataset(cfg.dataset);
  const MetaSplit split = split_classes(ds, cfg.split.n_train_classes, cfg.split.seed);
  bool pass = true;
  std::string detail;
  for (int n : {5, 20}) {
    ExperimentConfig c = cfg;
    c.learner.n_ways = n;
    const ModelSpec spec = build_spec(c, ds.input_shape);
    const TrainedModel m{spec, init_params(spec, derive_seed(cfg.seed, "init")), c.learner, {}};
    EvalProtocol p = c.eval.protocol;
    p.n_ways = n;
    p.k_shots = 1;
    p.adapt_steps = 0;
    const auto acc = episode_accuracies(m, ds, split, p);
    const ResultsRow row = summarize("untrained", acc, p);
    const double sigma = row.ci95 / 1.96;
    const double z = (row.mean_accuracy - 100.0 / n) / sigma;
    pass = pass && std::abs(z) <= kChanceSigmas;
    detail += (detail.empty() ? "" : ", ") + std::to_string(n) + "-way " + fmt("%.2f%%", row.mean_accuracy) +
              " (z=" + fmt("%+.2f", z) + ")";
  }
  return {pass, detail + " over 600 episodes"};
}

Outcome ordering() {
  const auto t0 = Clock::now();
  int holding = 0;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    const ExperimentConfig base = blobs_config("transfer", seed);
    const Dataset ds = load_dataset(base.dataset);
    const MetaSplit split = split_classes(ds, base.split.n_train_classes, base.split.seed);
    std::map<std::string, std::pair<double, double>> acc;
    for (const char* method : {"transfer", "reptile", "reptile_mtl"}) {
      const ExperimentConfig cfg = blobs_config(method, seed);
      const TrainedModel m = train_method(cfg, ds, split, build_spec(cfg, ds.input_shape));
      EvalProtocol p = cfg.eval.protocol;
      p.n_ways = 5;
      p.k_shots = 1;
      const double one_shot = evaluate_suite(m, ds, split, p, method).mean_accuracy;
      p.n_ways = 20;
      p.k_shots = 50;
      const double many_shot = evaluate_suite(m, ds, split, p, method).mean_accuracy;
      acc[method] = {one_shot, many_shot};
    }
    const auto [t1, t50] = acc["transfer"];
    const auto [r1, r50] = acc["reptile"];
    const auto [m1, m50] = acc["reptile_mtl"];
    const bool a = m1 >= t1 - kOrderSlack && m1 >= r1 - kOrderSlack;
    const bool b = t50 >= r50 - kOrderSlack && m50 >= t50 - kOrderSlack && m50 >= r50 - kOrderSlack;
    holding += a && b;
    char line[256];
    std::snprintf(line, sizeof line,
                  "    seed %llu  5w1s transfer %.2f reptile %.2f mtl %.2f [%s]  20w50s transfer %.2f reptile %.2f "
                  "mtl %.2f [%s]\n",
                  static_cast<unsigned long long>(seed), t1, r1, m1, a ? "ok" : "violated", t50, r50, m50,
                  b ? "ok" : "violated");
    std::fputs(line, stdout);
    std::fflush(stdout);
  }
  const double s = seconds_since(t0);
  return {holding >= 2 && s < kOrderBudgetS,
          std::to_string(holding) + "/3 seeds hold, " + fmt("%.0f s", s)};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome determinism() {
  const auto dir = std::filesystem::temp_directory_path() / "mtl_acceptance_determinism";
  std::filesystem::remove_all(dir);
  ExperimentConfig cfg = blobs_config("reptile_mtl", 7);
  cfg.eval.n_ways = {5, 20};
  cfg.eval.k_shots = {1, 5};
  cfg.eval.protocol.n_episodes = 100;
  std::string ckpt[2], results[2];
  for (int run = 0; run < 2; ++run) {
    const auto out = dir / ("run" + std::to_string(run));
    const TrainArtifacts a = run_train(cfg, out);
    run_eval(cfg, a.checkpoint, out / "results.csv");
    ckpt[run] = slurp(a.checkpoint);
    results[run] = slurp(out / "results.csv");
  }
  const bool same = !ckpt[0].empty() && ckpt[0] == ckpt[1] && !results[0].empty() && results[0] == results[1];
  std::filesystem::remove_all(dir);
  return {same, "checkpoint " + std::to_string(ckpt[0].size()) + " bytes, results " +
                    std::to_string(results[0].size()) + " bytes, " + (same ? "identical" : "differ")};
}

}  // namespace

int main() {
  int failed = 0;
  auto run = [&](int id, const char* name, Outcome (*fn)()) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    report(id, name, o);
  };
  run(1, "quadratic-oracle", quadratic_oracles);
  run(2, "gradient-checks", gradient_checks);
  run(3, "blend-reductions", blend_reductions);
  run(4, "sampler-and-split", sampler_and_split);
  run(5, "chance-level", chance_level);
  run(6, "ordering-at-desk-scale", ordering);
  run(7, "determinism", determinism);
  std::printf("%d of 7 criteria failed\n", failed);
  return failed;
}
