#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

#include "mcpo/experiment.hpp"
#include "mcpo/io.hpp"
#include "oracles.hpp"

using namespace mcpo;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("mcpo_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(FormatDouble, RoundTrips) {
  std::mt19937_64 g(1);
  std::normal_distribution<double> n(0.0, 1e3);
  for (int k = 0; k < 10000; ++k) {
    const double v = n(g) * std::pow(10.0, k % 20 - 10);
    EXPECT_EQ(std::strtod(format_double(v).c_str(), nullptr), v);
  }
  EXPECT_EQ(format_double(0.5), "0.5");
  EXPECT_EQ(format_double(0.1), "0.1");
}

TEST(Checkpoint, BinaryAndJsonRoundTripBitExact) {
  std::mt19937_64 g(2);
  auto p = oracle::random_policy(3, 14, g, 5.0);
  std::vector<double> l(p.logits().begin(), p.logits().end());
  l[0] = std::nextafter(1.0, 2.0);
  l[1] = -0.0;
  l[2] = std::numeric_limits<double>::denorm_min();
  p.set_logits(l);
  const auto dir = scratch("ckpt");
  for (const char* name : {"p.bin", "p.json"}) {
    const auto path = (dir / name).string();
    save_checkpoint(path, p);
    const auto q = load_checkpoint(path);
    ASSERT_TRUE(q.same_shape(p));
    for (std::size_t i = 0; i < l.size(); ++i) {
      EXPECT_EQ(std::memcmp(&l[i], &q.logits()[i], sizeof(double)), 0) << name << " index " << i;
    }
  }
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const auto dir = scratch("bad");
  write_file((dir / "short.bin").string(), std::string("MCPOPOL1") + std::string(20, '\0'));
  EXPECT_THROW(load_checkpoint((dir / "short.bin").string()), Error);
  write_file((dir / "shape.json").string(), R"({"prompt_count":2,"completion_count":2,"logits":[0,0,0]})");
  try {
    load_checkpoint((dir / "shape.json").string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
  }
  try {
    load_checkpoint((dir / "missing.bin").string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::IoError);
  }
}

TEST(Dataset, JsonlRoundTrip) {
  EnvironmentSpec s;
  s.prompt_count = 2;
  s.vocab_size = 3;
  s.max_length = 2;
  s.reward_family = RewardFamily::Prefix;
  const Environment env(s);
  const auto data = generate_dataset(env, Proposal::reference(env.uniform_policy()), 3, 25, {true, 1}, 4);
  const auto text = dataset_to_jsonl(data);
  const auto back = dataset_from_jsonl(text, &env);
  ASSERT_EQ(back.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_EQ(back[i].x, data[i].x);
    EXPECT_EQ(back[i].preferred(), data[i].preferred());
    ASSERT_EQ(back[i].candidates.size(), data[i].candidates.size());
    for (std::size_t k = 0; k < data[i].candidates.size(); ++k) {
      EXPECT_EQ(back[i].candidates[k].y, data[i].candidates[k].y);
      EXPECT_EQ(back[i].candidates[k].rank, data[i].candidates[k].rank);
      EXPECT_EQ(back[i].candidates[k].noise, data[i].candidates[k].noise);
    }
  }
  EXPECT_EQ(dataset_to_jsonl(back), text);
  const auto first = text.substr(0, text.find('\n'));
  const auto j = Json::parse(first);
  EXPECT_TRUE(j.contains("x") && j.contains("preferred") && j.contains("candidates"));
}

TEST(Dataset, RejectsBadRecords) {
  EXPECT_THROW(dataset_from_jsonl(R"({"x":0,"preferred":1,"candidates":[{"y":1,"rank":2},{"y":0,"rank":1}]})"),
               Error);
  EXPECT_THROW(dataset_from_jsonl(R"({"x":0,"preferred":1,"candidates":[{"y":1,"rank":1}]})"), Error);
  EXPECT_THROW(dataset_from_jsonl(R"({"x":0,"preferred":1,"extra":3,"candidates":[]})"), Error);
  EXPECT_THROW(dataset_from_jsonl("{not json"), Error);
}

TEST(Config, UnknownKeysAndWarnings) {
  auto j = to_json(standard_fixture());
  EXPECT_NO_THROW(experiment_config_from_json(j));
  j["env"]["vocab"] = 3;
  try {
    experiment_config_from_json(j);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ConfigInvalid);
  }
  auto k = to_json(standard_fixture());
  k["train"]["loss"]["gamma"] = 3.0;
  const auto c = experiment_config_from_json(k);
  EXPECT_FALSE(c.warnings.empty());
}

TEST(Config, RoundTripsThroughJson) {
  const auto a = standard_fixture();
  const auto b = experiment_config_from_json(to_json(a));
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  EXPECT_EQ(config_hash(a), config_hash(b));
  auto c = a;
  c.train.lr = 0.25;
  EXPECT_NE(config_hash(a), config_hash(c));
}

TEST(Config, EnvironmentHashSensitivity) {
  const auto base = standard_fixture().env;
  const auto h = environment_hash(base);
  auto v = base;
  v.prompt_count += 1;
  EXPECT_NE(environment_hash(v), h);
  v = base;
  v.vocab_size += 1;
  EXPECT_NE(environment_hash(v), h);
  v = base;
  v.max_length -= 1;
  EXPECT_NE(environment_hash(v), h);
  v = base;
  v.reward_family = RewardFamily::Feature;
  EXPECT_NE(environment_hash(v), h);
  v = base;
  v.reward_params.length_penalty = 0.3;
  EXPECT_NE(environment_hash(v), h);
  v = base;
  v.prompt_weights = {0.4, 0.2, 0.2, 0.2};
  EXPECT_NE(environment_hash(v), h);
  v = base;
  v.seed += 1;
  EXPECT_NE(environment_hash(v), h);
  EXPECT_EQ(environment_hash(base), h);
}

TEST(Trace, CsvHeaderAndRows) {
  TrainTrace t;
  t.rows.push_back({1, 0.5, 2.0, 0.25, 0.125, -1.0});
  const auto csv = trace_to_csv(t);
  EXPECT_EQ(csv, "step,loss,grad_norm,exact_nll,kl_to_pistar,expected_reward\n1,0.5,2,0.25,0.125,-1\n");
}

TEST(Reports, JsonFields) {
  EvalReport r;
  r.match = {3, 1, 0};
  r.winrate = 0.75;
  r.per_prompt.push_back({0, {3, 1, 0}, 0.1, 0.2});
  const auto j = to_json(r);
  for (const char* key : {"winrate", "wilson_low", "wilson_high", "match", "kl_to_pistar", "expected_reward",
                          "baseline_expected_reward", "per_prompt"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
  EXPECT_EQ(j["match"]["n_cand"], 3);

  UnbiasednessReport u;
  u.seed = 4;
  u.M = 2;
  u.n_trials = 10000;
  u.per_component.push_back({0, 0.1, 0.1, 0.01, 0.0});
  const auto k = to_json(u);
  for (const char* key : {"seed", "M", "n_trials", "max_z_score", "per_component"}) EXPECT_TRUE(k.contains(key)) << key;

  const std::vector<MatchLogEntry> log{{1, 2, 3, 0.5, -0.25, 1}};
  EXPECT_EQ(match_log_to_csv(log), "prompt,y_a,y_b,r_a,r_b,outcome\n1,2,3,0.5,-0.25,1\n");
}

TEST(Commands, GenDataIsByteIdenticalAndEmptyIsValid) {
  auto c = standard_fixture();
  c.dataset.n_records = 40;
  c.output_dir = scratch("gen").string();
  cmd_gen_data(c);
  const auto first = read_file(dataset_path(c));
  cmd_gen_data(c);
  EXPECT_EQ(read_file(dataset_path(c)), first);
  const auto m = Json::parse(read_file((fs::path(c.output_dir) / "manifest.json").string()));
  EXPECT_EQ(m["record_count"], 40);
  EXPECT_EQ(m["env_hash"], hex64(environment_hash(c.env)));

  c.dataset.n_records = 0;
  c.output_dir = scratch("gen0").string();
  EXPECT_TRUE(cmd_gen_data(c).empty());
  EXPECT_EQ(read_file(dataset_path(c)), "");
  EXPECT_EQ(Json::parse(read_file((fs::path(c.output_dir) / "manifest.json").string()))["record_count"], 0);
}

TEST(Commands, TrainWithZeroStepsKeepsInitialization) {
  auto c = standard_fixture();
  c.dataset.n_records = 32;
  c.train.steps = 0;
  c.train.epochs = 0;
  c.output_dir = scratch("train0").string();
  cmd_train(c);
  const auto p = load_checkpoint((fs::path(c.output_dir) / "checkpoint.bin").string());
  const Environment env(c.env);
  EXPECT_TRUE(p == env.uniform_policy());
  EXPECT_EQ(read_file((fs::path(c.output_dir) / "trace.csv").string()), std::string(kTraceHeader) + "\n");
}
