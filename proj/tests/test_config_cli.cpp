#include "mtl/commands.hpp"
#include "mtl/config.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

using namespace mtl;

namespace {

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string expect_error(const std::string& text) {
  try {
    parse_config(text);
  } catch (const std::invalid_argument& e) {
    return e.what();
  }
  FAIL("config was accepted: " << text);
  return {};
}

const char* kSmall = R"(seed = 5
method = reptile_mtl

[dataset]
kind = blobs
n_classes = 12
dim = 4
per_class = 25

[split]
n_train_classes = 7

[model]
hidden = 16
hidden_layers = 1
trunk_width = 16

[learner]
iterations = 8
meta_batch = 2

[eval]
n_episodes = 10
n_ways = 3,5
k_shots = 1,2
)";

int run_cli(const std::string& args, const std::filesystem::path& out) {
  const std::string cmd = std::string(MTL_CLI_PATH) + " " + args + " > " + out.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("minimal config gets every default") {
  const ExperimentConfig c = parse_config("method = reptile\n[dataset]\nkind = blobs\n");
  CHECK(c.method == "reptile");
  CHECK(c.dataset.n_classes == 100);
  CHECK(c.split.n_train_classes == 64);
  CHECK(c.learner.iterations == 2000);
  CHECK(c.learner.meta_mode == MetaMode::Reptile);
  CHECK(c.learner.beta == 1.0);
  CHECK(c.eval.protocol.adapt_lr == c.learner.alpha_inner);
  CHECK(c.dataset.seed == derive_seed(0, "dataset"));
  CHECK(c.split.seed == derive_seed(0, "split"));
  CHECK(c.eval.protocol.seed == derive_seed(0, "eval"));

  const ExperimentConfig joint = parse_config("method = maml_mtl\n");
  CHECK(joint.learner.meta_mode == MetaMode::Maml);
  CHECK(joint.learner.beta == MTLConfig{}.beta);
  CHECK(parse_config("method = fomaml\n").learner.meta_mode == MetaMode::Fomaml);
}

TEST_CASE("beta outside [0,1] is rejected by name") {
  const std::string msg = expect_error("[learner]\nbeta = 1.5\n");
  CHECK(msg.find("beta") != std::string::npos);
  CHECK(msg.find("[0,1]") != std::string::npos);
}

TEST_CASE("bad documents name the offending key") {
  CHECK(expect_error("[learner]\nbogus = 1\n").find("learner.bogus") != std::string::npos);
  CHECK(expect_error("[learner]\nk = three\n").find("learner.k") != std::string::npos);
  CHECK(expect_error("[learner]\nk = 2\nk = 3\n").find("learner.k") != std::string::npos);
  CHECK(expect_error("method = prototypical\n").find("method") != std::string::npos);
  CHECK(expect_error("[eval]\nfreeze_trunk = maybe\n").find("eval.freeze_trunk") != std::string::npos);
  CHECK(expect_error("[learner]\ndisc_batch_source = all\n").find("learner.disc_batch_source") != std::string::npos);
  CHECK(expect_error("[eval]\nn_ways = 5,x\n").find("eval.n_ways") != std::string::npos);
  CHECK(expect_error("[dataset]\nkind = image_dir\n").find("dataset.path") != std::string::npos);
  CHECK(expect_error("[split]\nn_train_classes = 100\n").find("split.n_train_classes") != std::string::npos);
  CHECK(expect_error("[learner\n").find("line 1") != std::string::npos);
  CHECK(expect_error("just words\n").find("line 1") != std::string::npos);
}

TEST_CASE("serialize then parse reproduces the config") {
  ExperimentConfig a = parse_config(kSmall);
  a.learner.beta = 0.123456789012345678;
  a.learner.blend_scope = BlendScope::TrunkPlusDiscHead;
  a.learner.disc_batch_source = DiscBatchSource::GlobalMinibatch;
  a.eval.protocol.freeze_trunk = true;
  a.learner.episode_head_init = HeadInit::Glorot;
  a.dataset.seed = 0xFFFFFFFFFFFFFFFFull;
  const std::string text = serialize_config(a);
  const ExperimentConfig b = parse_config(text);
  CHECK(serialize_config(b) == text);
  CHECK(b.learner.beta == a.learner.beta);
  CHECK(b.dataset.seed == a.dataset.seed);
  CHECK(b.eval.n_ways == std::vector<int>{3, 5});
  CHECK(b.learner.blend_scope == BlendScope::TrunkPlusDiscHead);
  CHECK(b.eval.protocol.freeze_trunk);
  CHECK(b.learner.episode_head_init == HeadInit::Glorot);
  CHECK(parse_config("").learner.episode_head_init == HeadInit::Zero);
  CHECK(expect_error("[learner]\nepisode_head_init = normal\n").find("learner.episode_head_init") != std::string::npos);
}

TEST_CASE("comments and blank lines are ignored") {
  const ExperimentConfig c = parse_config("# experiment\n\nseed = 9   # master\n[learner]\n; note\nk = 2\n");
  CHECK(c.seed == 9);
  CHECK(c.learner.k == 2);
}

TEST_CASE("build_spec follows the model section") {
  ExperimentConfig c = parse_config(kSmall);
  const ModelSpec s = build_spec(c, {4});
  CHECK(s.disc_classes == 7);
  CHECK(s.episode_ways == 5);
  CHECK(s.trunk_width() == 16);
  c.model.kind = "conv";
  CHECK_THROWS(build_spec(c, {4}));
  const ModelSpec conv = build_spec(c, {1, 16, 16});
  CHECK(conv.trunk_width() == c.model.conv_filters);
}

TEST_CASE("train then eval twice gives identical artifacts") {
  const auto dir = testing::scratch_dir("determinism");
  const ExperimentConfig cfg = parse_config(kSmall);
  std::string ckpt[2], results[2];
  for (int run = 0; run < 2; ++run) {
    const auto out = dir / ("run" + std::to_string(run));
    const TrainArtifacts a = run_train(cfg, out);
    CHECK(std::filesystem::exists(a.log));
    CHECK(parse_config(read_file(a.resolved_config)).seed == cfg.seed);
    const auto rows = run_eval(cfg, a.checkpoint, out / "results.csv");
    CHECK(rows.size() == 4);
    ckpt[run] = read_file(a.checkpoint);
    results[run] = read_file(out / "results.csv");
  }
  CHECK(ckpt[0] == ckpt[1]);
  CHECK(results[0] == results[1]);
  CHECK_THROWS(run_eval(cfg, dir / "missing.ckpt", dir / "r.csv"));
}

TEST_CASE("every method trains through the command layer") {
  const auto dir = testing::scratch_dir("methods");
  for (const auto& method : known_methods()) {
    ExperimentConfig cfg = parse_config(kSmall);
    cfg.method = method;
    cfg = parse_config(serialize_config(cfg));
    const TrainArtifacts a = run_train(cfg, dir / method);
    CHECK(std::filesystem::file_size(a.checkpoint) > 0);
  }
}

TEST_CASE("gradcheck command on the shipped MLP") {
  const GradCheckReport r = run_gradcheck("mlp");
  CHECK(r.disc_error < 1e-6);
  CHECK(r.episode_error < 1e-6);
  CHECK(r.passed());
  CHECK_THROWS(run_gradcheck("resnet"));
}

TEST_CASE("report over nine rows has three method columns") {
  const auto dir = testing::scratch_dir("report");
  std::vector<ResultsRow> rows;
  for (const char* m : {"transfer", "reptile", "reptile_mtl"})
    for (auto [n, k] : {std::pair{5, 1}, std::pair{5, 5}, std::pair{20, 50}}) rows.push_back({m, n, k, 50.0, 1.0, 600, 1});
  append_results(dir / "r.csv", rows);
  const std::string csv = run_report(dir / "r.csv", TableFormat::Csv);
  CHECK(csv.substr(0, csv.find('\n')) == "n_ways,k_shots,transfer,reptile,reptile_mtl");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
}

TEST_CASE("command-line exit codes") {
  const auto dir = testing::scratch_dir("cli");
  std::ofstream(dir / "c.ini") << kSmall;
  std::ofstream(dir / "bad.ini") << "[learner]\nbeta = 1.5\n";
  const auto log = dir / "out.txt";

  CHECK(run_cli("gradcheck --spec mlp-small", log) == 0);
  CHECK(read_file(log).find("PASS") != std::string::npos);
  CHECK(run_cli("train --config " + (dir / "c.ini").string() + " --out " + (dir / "o").string(), log) == 0);
  CHECK(run_cli("eval --config " + (dir / "c.ini").string() + " --checkpoint " + (dir / "o" / "model.ckpt").string() +
                    " --out " + (dir / "r.csv").string(),
                log) == 0);
  CHECK(run_cli("report --in " + (dir / "r.csv").string() + " --format markdown", log) == 0);
  CHECK(read_file(log).find("| n_ways | k_shots | reptile_mtl |") != std::string::npos);

  CHECK(run_cli("train --config " + (dir / "bad.ini").string() + " --out " + (dir / "o2").string(), log) != 0);
  CHECK(read_file(log).find("beta") != std::string::npos);
  CHECK(run_cli("eval --config " + (dir / "c.ini").string() + " --checkpoint " + (dir / "none.ckpt").string() +
                    " --out " + (dir / "r.csv").string(),
                log) != 0);
  CHECK(run_cli("eval --config " + (dir / "c.ini").string() + " --checkpoint " + (dir / "o" / "model.ckpt").string() +
                    " --out /nonexistent/dir/r.csv",
                log) != 0);
  CHECK(run_cli("report --in " + (dir / "r.csv").string() + " --format html", log) != 0);
  CHECK(run_cli("gradcheck --spec nope", log) != 0);
  CHECK(run_cli("", log) != 0);
}
