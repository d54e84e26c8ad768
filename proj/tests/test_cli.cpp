#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "mcpo/experiment.hpp"
#include "mcpo/io.hpp"

using namespace mcpo;
namespace fs = std::filesystem;

namespace {

std::string cli() {
  const char* p = std::getenv("MCPO_CLI");
  return p ? p : MCPO_CLI_PATH;
}

fs::path source_dir() {
  const char* p = std::getenv("MCPO_SOURCE_DIR");
  return fs::path(p ? p : MCPO_SOURCE_PATH);
}

fs::path small_config() { return source_dir() / "configs" / "small.json"; }

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("mcpo_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Exit status of `mcpo <args>`, output discarded.
int run(const std::string& args) {
  const std::string cmd = cli() + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string quoted(const fs::path& p) { return "'" + p.string() + "'"; }

// Small config rewritten with `edit` applied, saved under dir.
template <class F>
fs::path edited_config(const fs::path& dir, F edit) {
  auto j = Json::parse(read_file(small_config().string()));
  edit(j);
  const auto path = dir / "config.json";
  write_file(path.string(), j.dump(2));
  return path;
}

std::vector<std::vector<double>> read_csv_numbers(const std::string& text) {
  std::vector<std::vector<double>> rows;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::vector<double> row;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(row);
  }
  return rows;
}

// Key structure of a JSON value: objects keep their keys, arrays their first
// element, scalars collapse to their type name.
Json shape(const Json& j) {
  if (j.is_object()) {
    Json out = Json::object();
    for (auto it = j.begin(); it != j.end(); ++it) out[it.key()] = shape(it.value());
    return out;
  }
  if (j.is_array()) return j.empty() ? Json::array() : Json::array({shape(j.front())});
  if (j.is_number()) return "number";
  return j.type_name();
}

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("train /nonexistent/config.json"), 1);
  EXPECT_EQ(run("frobnicate " + quoted(small_config())), 1);
}

TEST(Cli, InvalidConfigsExitOne) {
  const auto dir = scratch("invalid");
  write_file((dir / "broken.json").string(), "{\"env\": ");
  EXPECT_EQ(run("train " + quoted(dir / "broken.json") + " -o " + quoted(dir / "out")), 1);
  const auto unknown = edited_config(dir, [](Json& j) { j["train"]["speed"] = 2; });
  EXPECT_EQ(run("train " + quoted(unknown) + " -o " + quoted(dir / "out")), 1);
  EXPECT_EQ(run("train " + quoted(small_config()) + " --loss ipo -o " + quoted(dir / "out")), 1);
  EXPECT_EQ(run("train " + quoted(small_config()) + " --M 0 -o " + quoted(dir / "out")), 1);
}

TEST(Cli, GenDataTwiceIsByteIdentical) {
  const auto dir = scratch("gen");
  ASSERT_EQ(run("gen-data " + quoted(small_config()) + " -o " + quoted(dir / "a")), 0);
  ASSERT_EQ(run("gen-data " + quoted(small_config()) + " -o " + quoted(dir / "b")), 0);
  const auto a = read_file((dir / "a" / "dataset.jsonl").string());
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, read_file((dir / "b" / "dataset.jsonl").string()));
  ASSERT_EQ(run("gen-data " + quoted(small_config()) + " --seed 77 -o " + quoted(dir / "c")), 0);
  EXPECT_NE(a, read_file((dir / "c" / "dataset.jsonl").string()));
}

TEST(Cli, TrainRerunGivesIdenticalTrace) {
  const auto dir = scratch("replay");
  ASSERT_EQ(run("train " + quoted(small_config()) + " -o " + quoted(dir / "a")), 0);
  ASSERT_EQ(run("train " + quoted(small_config()) + " -o " + quoted(dir / "b")), 0);
  const auto a = read_file((dir / "a" / "trace.csv").string());
  EXPECT_EQ(a.substr(0, a.find('\n')), kTraceHeader);
  EXPECT_EQ(a, read_file((dir / "b" / "trace.csv").string()));
  for (const char* f : {"checkpoint.bin", "checkpoint.json", "train_manifest.json", "dataset.jsonl"}) {
    EXPECT_TRUE(fs::exists(dir / "a" / f)) << f;
  }
  const auto m = Json::parse(read_file((dir / "a" / "train_manifest.json").string()));
  EXPECT_EQ(m["code_version"], kCodeVersion);
  EXPECT_TRUE(m.contains("config_hash"));
}

TEST(Cli, OutputRootPrefixesRelativeDirs) {
  const auto root = scratch("root");
  const std::string cmd = "MCPO_OUTPUT_ROOT=" + quoted(root) + " " + cli() + " gen-data " + quoted(small_config()) +
                          " -o rel/run > /dev/null 2>&1";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  EXPECT_TRUE(fs::exists(root / "rel" / "run" / "dataset.jsonl"));
}

TEST(Cli, ZeroLearningRateLeavesReference) {
  const auto dir = scratch("lr0");
  ASSERT_EQ(run("train " + quoted(small_config()) + " --lr 0 -o " + quoted(dir)), 0);
  const auto cfg = load_experiment_config(small_config().string());
  EXPECT_TRUE(load_checkpoint((dir / "checkpoint.bin").string()) == Environment(cfg.env).uniform_policy());
}

TEST(Cli, DpoMatchesSingleRandomNegative) {
  const auto dir = scratch("dpo");
  ASSERT_EQ(run("train " + quoted(small_config()) + " --loss dpo --strategy random -o " + quoted(dir / "dpo")), 0);
  ASSERT_EQ(run("train " + quoted(small_config()) + " --loss mcpo --M 1 --strategy random -o " +
                quoted(dir / "mcpo")),
            0);
  const auto a = read_csv_numbers(read_file((dir / "dpo" / "trace.csv").string()));
  const auto b = read_csv_numbers(read_file((dir / "mcpo" / "trace.csv").string()));
  ASSERT_EQ(a.size(), b.size());
  ASSERT_FALSE(a.empty());
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t k = 0; k < a[i].size(); ++k) EXPECT_NEAR(a[i][k], b[i][k], 1e-9) << "row " << i << " col " << k;
  }
}

TEST(Cli, DivergenceExitsTwo) {
  const auto dir = scratch("diverge");
  const auto cfg = edited_config(dir, [](Json& j) { j["train"]["max_grad_norm"] = 1e-9; });
  EXPECT_EQ(run("train " + quoted(cfg) + " -o " + quoted(dir / "out")), 2);
  EXPECT_TRUE(fs::exists(dir / "out" / "trace.csv"));
}

TEST(Cli, VerifyPassesAndFaultInjectionFails) {
  const auto dir = scratch("verify");
  EXPECT_EQ(run("verify " + quoted(small_config()) + " -o " + quoted(dir / "ok")), 0);
  const auto j = Json::parse(read_file((dir / "ok" / "verify.json").string()));
  EXPECT_TRUE(j["all_passed"].get<bool>());
  EXPECT_LT(j["unbiasedness"]["max_z_score"].get<double>(), 4.0);
  EXPECT_EQ(run("verify " + quoted(small_config()) + " --corrupt-gradient -o " + quoted(dir / "bad")), 3);
  const auto k = Json::parse(read_file((dir / "bad" / "verify.json").string()));
  EXPECT_FALSE(k["all_passed"].get<bool>());
}

TEST(Cli, EvalSelfAndOptimal) {
  const auto dir = scratch("eval");
  const auto cfg_path = edited_config(dir, [](Json& j) { j["eval"]["shared_draws"] = true; });
  const auto cfg = load_experiment_config(cfg_path.string());
  const Environment env(cfg.env);
  const auto ref = env.uniform_policy();
  save_checkpoint((dir / "ref.bin").string(), ref);
  save_checkpoint((dir / "star.json").string(), optimal_policy(env, ref, 0.5));

  ASSERT_EQ(run("eval " + quoted(cfg_path) + " " + quoted(dir / "ref.bin") + " " + quoted(dir / "ref.bin") + " -o " +
                quoted(dir / "self")),
            0);
  const auto self = Json::parse(read_file((dir / "self" / "eval.json").string()));
  EXPECT_EQ(self["winrate"].get<double>(), 0.5);

  ASSERT_EQ(run("eval " + quoted(small_config()) + " " + quoted(dir / "star.json") + " " + quoted(dir / "ref.bin") +
                " -o " + quoted(dir / "star")),
            0);
  const auto star = Json::parse(read_file((dir / "star" / "eval.json").string()));
  EXPECT_GT(star["winrate"].get<double>(), 0.5);
  const auto log = read_file((dir / "star" / "matches.csv").string());
  EXPECT_EQ(log.substr(0, log.find('\n')), "prompt,y_a,y_b,r_a,r_b,outcome");

  // report layout is pinned by a golden file
  const auto golden = Json::parse(read_file((source_dir() / "tests" / "golden" / "eval_report_shape.json").string()));
  EXPECT_EQ(shape(star), golden) << shape(star).dump(2);

  save_checkpoint((dir / "wrong.bin").string(), TabularPolicy(1, 2));
  EXPECT_EQ(run("eval " + quoted(small_config()) + " " + quoted(dir / "wrong.bin") + " " + quoted(dir / "ref.bin") +
                " -o " + quoted(dir / "wrong")),
            1);
}

TEST(Cli, AblateWritesCombinedCsv) {
  const auto dir = scratch("ablate");
  ASSERT_EQ(run("ablate " + quoted(small_config()) + " -o " + quoted(dir)), 0);
  const auto csv = read_file((dir / "ablate.csv").string());
  std::size_t lines = 0;
  for (char c : csv) lines += c == '\n';
  const auto cfg = load_experiment_config(small_config().string());
  EXPECT_EQ(lines, 1 + ablation_variants(cfg.ablate).size() * cfg.ablate.seeds.size());
}
