// mcpo: generate data, train, verify, evaluate and ablate from one config file.
//
// Exit codes: 0 success, 1 configuration or I/O error, 2 training divergence,
// 3 verification failure.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "mcpo/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitDivergence = 2;
constexpr int kExitVerify = 3;

struct Overrides {
  std::optional<double> lr;
  std::optional<std::string> loss;
  std::optional<std::string> strategy;
  std::optional<std::size_t> M;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output_dir;
};

mcpo::ExperimentConfig load(const std::string& path, const Overrides& o) {
  auto c = mcpo::load_experiment_config(path);
  if (o.lr) {
    if (!(*o.lr >= 0.0)) throw mcpo::Error(mcpo::ErrorCode::ConfigInvalid, "--lr must be nonnegative");
    c.train.lr = *o.lr;
  }
  if (o.loss) c.train.loss.name = mcpo::parse_loss_name(*o.loss);
  if (o.strategy) c.train.sampler.strategy = mcpo::parse_strategy(*o.strategy);
  if (o.M) {
    if (*o.M == 0) throw mcpo::Error(mcpo::ErrorCode::ConfigInvalid, "--M must be at least 1");
    c.train.loss.M = *o.M;
  }
  if (o.seed) {
    c.train.seed = *o.seed;
    c.dataset.seed = *o.seed;
  }
  if (o.output_dir) c.output_dir = *o.output_dir;
  // Relative output directories live under $MCPO_OUTPUT_ROOT when it is set.
  if (const char* root = std::getenv("MCPO_OUTPUT_ROOT"); root && *root) {
    const std::filesystem::path p(c.output_dir);
    if (p.is_relative()) c.output_dir = (std::filesystem::path(root) / p).string();
  }
  for (const auto& w : c.warnings) std::cerr << "warning: " << w << "\n";
  return c;
}

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--lr", o.lr, "Learning rate");
  cmd->add_option("--loss", o.loss, "Loss name (mcpo, dpo, rpo, ...)");
  cmd->add_option("--strategy", o.strategy, "Negative selection: mc, max, min, random, noise");
  cmd->add_option("--M", o.M, "Negatives per record for mcpo");
  cmd->add_option("--seed", o.seed, "Seed for dataset generation and training");
  cmd->add_option("-o,--output-dir", o.output_dir, "Output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Preference optimization as sampled NLL estimation on exact discrete environments"};
  app.require_subcommand(1);

  std::string config;
  Overrides o;
  bool corrupt = false;
  std::string ckpt_a, ckpt_b;

  auto* gen = app.add_subcommand("gen-data", "Generate a ranked preference dataset");
  auto* train = app.add_subcommand("train", "Train a policy and write checkpoint and trace");
  auto* verify = app.add_subcommand("verify", "Run gradient, identity and sampling checks");
  auto* eval = app.add_subcommand("eval", "Compare two checkpoints head to head");
  auto* ablate = app.add_subcommand("ablate", "Run the strategy, noise, multi-negative and online grid");
  for (auto* cmd : {gen, train, verify, eval, ablate}) {
    cmd->add_option("config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    add_overrides(cmd, o);
  }
  verify->add_flag("--corrupt-gradient", corrupt, "Perturb analytic gradients (fault injection)");
  eval->add_option("checkpoint_a", ckpt_a, "Candidate checkpoint")->required();
  eval->add_option("checkpoint_b", ckpt_b, "Baseline checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    const auto cfg = load(config, o);
    if (gen->parsed()) {
      const auto data = mcpo::cmd_gen_data(cfg);
      std::cout << "wrote " << data.size() << " records to " << mcpo::dataset_path(cfg) << "\n";
    } else if (train->parsed()) {
      const auto res = mcpo::cmd_train(cfg);
      for (const auto& w : res.trace.warnings) std::cerr << "warning: " << w << "\n";
      if (!res.trace.rows.empty()) {
        const auto& last = res.trace.rows.back();
        std::cout << "steps=" << last.step << " loss=" << last.loss << " kl_to_pistar=" << last.kl_to_pistar
                  << " expected_reward=" << last.expected_reward << "\n";
      } else {
        std::cout << "steps=0\n";
      }
    } else if (verify->parsed()) {
      const auto report = mcpo::cmd_verify(cfg, corrupt);
      for (const auto& c : report.checks) {
        std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << " value=" << c.value << " threshold=" << c.threshold
                  << "\n";
      }
      if (!report.all_passed()) return kExitVerify;
    } else if (eval->parsed()) {
      const auto r = mcpo::cmd_eval(cfg, ckpt_a, ckpt_b);
      std::cout << "winrate=" << r.winrate << " [" << r.wilson_low << ", " << r.wilson_high << "]"
                << " kl_to_pistar=" << r.kl_to_pistar << " expected_reward=" << r.expected_reward << "\n";
    } else if (ablate->parsed()) {
      const auto rows = mcpo::cmd_ablate(cfg);
      std::cout << "wrote " << rows.size() << " rows to " << (std::filesystem::path(cfg.output_dir) / "ablate.csv")
                << "\n";
    }
  } catch (const mcpo::DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const mcpo::Error& e) {
    std::cerr << "error [" << mcpo::to_string(e.code()) << "]: " << e.what() << "\n";
    return e.code() == mcpo::ErrorCode::DivergenceDetected ? kExitDivergence : kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitOk;
}
