#pragma once

// Serialization: environment / config JSON, dataset JSONL, policy checkpoints
// (JSON and flat binary), trace and match-log CSV, reports, content hashes.

#include <cstdio>
#include <cstring>
#include <fstream>
#include <initializer_list>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mcpo/core.hpp"
#include "mcpo/env.hpp"
#include "mcpo/eval.hpp"
#include "mcpo/partition.hpp"
#include "mcpo/policy.hpp"
#include "mcpo/training.hpp"

namespace mcpo {

using Json = nlohmann::json;

inline constexpr const char* kCodeVersion = "mcpo-0.1.0";

// ---- hashing ---------------------------------------------------------------

inline std::uint64_t fnv1a64(std::string_view data, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

// ---- files -----------------------------------------------------------------

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write '" + path + "'");
  out << content;
  if (!out) throw Error(ErrorCode::IoError, "write failed for '" + path + "'");
}

inline Json parse_json(const std::string& text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::ConfigInvalid, what + ": " + e.what());
  }
}

// ---- schema helpers --------------------------------------------------------

namespace detail {

inline void require_object(const Json& j, const std::string& where) {
  if (!j.is_object()) throw Error(ErrorCode::ConfigInvalid, where + " must be an object");
}

inline void allow_keys(const Json& j, std::initializer_list<const char*> keys, const std::string& where) {
  require_object(j, where);
  std::set<std::string> ok(keys.begin(), keys.end());
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!ok.count(it.key())) throw Error(ErrorCode::ConfigInvalid, where + ": unknown key '" + it.key() + "'");
  }
}

template <class T>
T get_or(const Json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception&) {
    throw Error(ErrorCode::ConfigInvalid, where + "." + key + " has the wrong type");
  }
}

template <class T>
T get_req(const Json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw Error(ErrorCode::ConfigInvalid, where + "." + key + " is required");
  return get_or<T>(j, key, T{}, where);
}

inline std::size_t get_count(const Json& j, const char* key, std::size_t fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw Error(ErrorCode::ConfigInvalid, where + "." + key + " must be a nonnegative integer");
  }
  return v.get<std::size_t>();
}

}  // namespace detail

// ---- environment -----------------------------------------------------------

inline Json to_json(const EnvironmentSpec& s) {
  Json j;
  j["prompt_count"] = s.prompt_count;
  j["vocab_size"] = s.vocab_size;
  j["max_length"] = s.max_length;
  j["reward_family"] = to_string(s.reward_family);
  j["reward_params"] = {{"scale", s.reward_params.scale},
                        {"token_weight", s.reward_params.token_weight},
                        {"length_penalty", s.reward_params.length_penalty},
                        {"target_offset", s.reward_params.target_offset}};
  j["prompt_weights"] = s.prompt_weights;
  j["seed"] = s.seed;
  j["enumeration_cap"] = s.enumeration_cap;
  return j;
}

inline EnvironmentSpec environment_spec_from_json(const Json& j) {
  const std::string w = "env";
  detail::allow_keys(j, {"prompt_count", "vocab_size", "max_length", "reward_family", "reward_params",
                         "prompt_weights", "seed", "enumeration_cap"},
                     w);
  EnvironmentSpec s;
  s.prompt_count = detail::get_count(j, "prompt_count", s.prompt_count, w);
  s.vocab_size = detail::get_count(j, "vocab_size", s.vocab_size, w);
  s.max_length = detail::get_count(j, "max_length", s.max_length, w);
  s.reward_family = parse_reward_family(detail::get_or<std::string>(j, "reward_family", "random_normal", w));
  if (j.contains("reward_params")) {
    const auto& p = j.at("reward_params");
    const std::string pw = w + ".reward_params";
    detail::allow_keys(p, {"scale", "token_weight", "length_penalty", "target_offset"}, pw);
    s.reward_params.scale = detail::get_or(p, "scale", s.reward_params.scale, pw);
    s.reward_params.token_weight = detail::get_or(p, "token_weight", s.reward_params.token_weight, pw);
    s.reward_params.length_penalty = detail::get_or(p, "length_penalty", s.reward_params.length_penalty, pw);
    s.reward_params.target_offset = detail::get_count(p, "target_offset", s.reward_params.target_offset, pw);
  }
  s.prompt_weights = detail::get_or(j, "prompt_weights", std::vector<double>{}, w);
  s.seed = detail::get_or<std::uint64_t>(j, "seed", 0, w);
  s.enumeration_cap = detail::get_count(j, "enumeration_cap", s.enumeration_cap, w);
  return s;
}

inline std::uint64_t environment_hash(const EnvironmentSpec& s) { return fnv1a64(to_json(s).dump()); }

// ---- losses / sampler / training config -------------------------------------

inline Json to_json(const LossSpec& s) {
  Json j{{"name", to_string(s.name)}, {"beta", s.beta}};
  if (uses_lambda(s.name)) j["lambda"] = s.lambda;
  if (uses_gamma(s.name)) j["gamma"] = s.gamma;
  if (s.name == LossName::Mcpo) j["M"] = s.M;
  if (s.name == LossName::Exo) j["exo_form"] = s.exo_form == ExoForm::Margin ? "margin" : "chosen_only";
  return j;
}

// Hyperparameters a loss does not use are ignored; each one is reported in
// `warnings` when given.
inline LossSpec loss_spec_from_json(const Json& j, std::vector<std::string>* warnings = nullptr) {
  const std::string w = "train.loss";
  detail::allow_keys(j, {"name", "beta", "lambda", "gamma", "M", "exo_form"}, w);
  LossSpec s;
  s.name = parse_loss_name(detail::get_req<std::string>(j, "name", w));
  s.beta = detail::get_or(j, "beta", s.beta, w);
  if (!(s.beta > 0.0)) throw Error(ErrorCode::ConfigInvalid, w + ".beta must be positive");
  auto note = [&](const char* key) {
    if (warnings && j.contains(key)) {
      warnings->push_back(std::string(key) + " is ignored by loss " + to_string(s.name));
    }
  };
  if (uses_lambda(s.name)) {
    s.lambda = detail::get_or(j, "lambda", s.lambda, w);
    if (s.lambda < 0.0) throw Error(ErrorCode::ConfigInvalid, w + ".lambda must be nonnegative");
  } else {
    note("lambda");
  }
  if (uses_gamma(s.name)) s.gamma = detail::get_or(j, "gamma", s.gamma, w);
  else note("gamma");
  if (s.name == LossName::Mcpo) {
    s.M = detail::get_count(j, "M", s.M, w);
    if (s.M == 0) throw Error(ErrorCode::ConfigInvalid, w + ".M must be at least 1");
  } else {
    note("M");
  }
  if (j.contains("exo_form")) {
    const auto f = detail::get_or<std::string>(j, "exo_form", "margin", w);
    if (f == "margin") s.exo_form = ExoForm::Margin;
    else if (f == "chosen_only") s.exo_form = ExoForm::ChosenOnly;
    else throw Error(ErrorCode::ConfigInvalid, w + ".exo_form must be margin or chosen_only");
    if (s.name != LossName::Exo) note("exo_form");
  }
  return s;
}

inline Json to_json(const SamplerSpec& s) {
  return {{"strategy", to_string(s.strategy)}, {"beta", s.beta}, {"draws", s.draws}, {"rng_seed", s.rng_seed}};
}

inline SamplerSpec sampler_spec_from_json(const Json& j) {
  const std::string w = "train.sampler";
  detail::allow_keys(j, {"strategy", "beta", "draws", "rng_seed"}, w);
  SamplerSpec s;
  s.strategy = parse_strategy(detail::get_or<std::string>(j, "strategy", "mc", w));
  s.beta = detail::get_or(j, "beta", s.beta, w);
  if (!(s.beta > 0.0)) throw Error(ErrorCode::ConfigInvalid, w + ".beta must be positive");
  s.draws = detail::get_count(j, "draws", s.draws, w);
  s.rng_seed = detail::get_or<std::uint64_t>(j, "rng_seed", 0, w);
  return s;
}

inline Json to_json(const TrainConfig& c) {
  return {{"loss", to_json(c.loss)},
          {"sampler", to_json(c.sampler)},
          {"lr", c.lr},
          {"steps", c.steps},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"online", c.online},
          {"online_segments", c.online_segments},
          {"online_records", c.online_records},
          {"online_candidates", c.online_candidates},
          {"judge", to_string(c.judge)},
          {"seed", c.seed},
          {"kernel_refresh", c.kernel_refresh == KernelRefresh::PerStep ? "per_step" : "per_epoch"},
          {"eval_beta", c.eval_beta},
          {"max_grad_norm", c.max_grad_norm},
          {"exact_expectation", c.exact_expectation}};
}

inline TrainConfig train_config_from_json(const Json& j, std::vector<std::string>* warnings = nullptr) {
  const std::string w = "train";
  detail::allow_keys(j, {"loss", "sampler", "lr", "steps", "batch_size", "epochs", "online", "online_segments",
                         "online_records", "online_candidates", "judge", "seed", "kernel_refresh", "eval_beta",
                         "max_grad_norm", "exact_expectation"},
                     w);
  TrainConfig c;
  if (j.contains("loss")) c.loss = loss_spec_from_json(j.at("loss"), warnings);
  if (j.contains("sampler")) c.sampler = sampler_spec_from_json(j.at("sampler"));
  c.lr = detail::get_or(j, "lr", c.lr, w);
  if (!(c.lr >= 0.0)) throw Error(ErrorCode::ConfigInvalid, "train.lr must be nonnegative");
  c.steps = detail::get_count(j, "steps", c.steps, w);
  c.batch_size = detail::get_count(j, "batch_size", c.batch_size, w);
  if (c.batch_size == 0) throw Error(ErrorCode::ConfigInvalid, "train.batch_size must be positive");
  c.epochs = detail::get_count(j, "epochs", c.epochs, w);
  c.online = detail::get_or(j, "online", c.online, w);
  c.online_segments = detail::get_count(j, "online_segments", c.online_segments, w);
  if (c.online_segments == 0) throw Error(ErrorCode::ConfigInvalid, "train.online_segments must be at least 1");
  c.online_records = detail::get_count(j, "online_records", c.online_records, w);
  c.online_candidates = detail::get_count(j, "online_candidates", c.online_candidates, w);
  c.judge = parse_judge(detail::get_or<std::string>(j, "judge", "true_reward", w));
  c.seed = detail::get_or<std::uint64_t>(j, "seed", c.seed, w);
  const auto refresh = detail::get_or<std::string>(j, "kernel_refresh", "per_step", w);
  if (refresh == "per_step") c.kernel_refresh = KernelRefresh::PerStep;
  else if (refresh == "per_epoch") c.kernel_refresh = KernelRefresh::PerEpoch;
  else throw Error(ErrorCode::ConfigInvalid, "train.kernel_refresh must be per_step or per_epoch");
  c.eval_beta = detail::get_or(j, "eval_beta", c.eval_beta, w);
  if (c.eval_beta < 0.0) throw Error(ErrorCode::ConfigInvalid, "train.eval_beta must be nonnegative");
  c.max_grad_norm = detail::get_or(j, "max_grad_norm", c.max_grad_norm, w);
  c.exact_expectation = detail::get_or(j, "exact_expectation", c.exact_expectation, w);
  return c;
}

// ---- dataset ---------------------------------------------------------------

inline Json to_json(const PreferenceRecord& r) {
  Json cands = Json::array();
  for (const auto& c : r.candidates) cands.push_back({{"y", c.y}, {"rank", c.rank}, {"noise", c.noise}});
  return {{"x", r.x}, {"preferred", r.preferred()}, {"candidates", std::move(cands)}};
}

inline std::string dataset_to_jsonl(const std::vector<PreferenceRecord>& data) {
  std::string out;
  for (const auto& r : data) {
    out += to_json(r).dump();
    out += '\n';
  }
  return out;
}

// Validates ids against `env` when given; the preferred entry must carry rank 1.
inline std::vector<PreferenceRecord> dataset_from_jsonl(const std::string& text, const Environment* env = nullptr) {
  std::vector<PreferenceRecord> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string w = "dataset line " + std::to_string(lineno);
    const Json j = parse_json(line, w);
    detail::allow_keys(j, {"x", "preferred", "candidates"}, w);
    PreferenceRecord r;
    r.x = detail::get_req<std::size_t>(j, "x", w);
    const auto preferred = detail::get_req<std::size_t>(j, "preferred", w);
    if (!j.contains("candidates") || !j.at("candidates").is_array()) {
      throw Error(ErrorCode::ConfigInvalid, w + ": candidates must be an array");
    }
    bool found = false;
    for (const auto& c : j.at("candidates")) {
      detail::allow_keys(c, {"y", "rank", "noise", "source"}, w + " candidate");
      RankedCandidate rc;
      rc.y = detail::get_req<std::size_t>(c, "y", w);
      rc.rank = detail::get_req<std::size_t>(c, "rank", w);
      rc.noise = detail::get_or(c, "noise", false, w);
      rc.source = detail::get_or<std::string>(c, "source", rc.noise ? "noise" : "proposal", w);
      if (!found && rc.y == preferred && rc.rank == 1) {
        r.preferred_index = r.candidates.size();
        found = true;
      }
      r.candidates.push_back(rc);
    }
    if (!found) throw Error(ErrorCode::ConfigInvalid, w + ": preferred completion missing or not rank 1");
    if (r.candidates.size() < 2) throw Error(ErrorCode::ConfigInvalid, w + ": needs at least 2 candidates");
    if (env) {
      if (r.x >= env->prompt_count()) throw Error(ErrorCode::IndexOutOfRange, w + ": prompt out of range");
      for (const auto& c : r.candidates) {
        if (c.y >= env->completion_count()) throw Error(ErrorCode::IndexOutOfRange, w + ": completion out of range");
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

// ---- checkpoints -----------------------------------------------------------

inline Json checkpoint_to_json(const TabularPolicy& p) {
  return {{"format", "mcpo-policy"},
          {"prompt_count", p.prompt_count()},
          {"completion_count", p.completion_count()},
          {"logits", std::vector<double>(p.logits().begin(), p.logits().end())}};
}

inline TabularPolicy checkpoint_from_json(const Json& j) {
  const std::string w = "checkpoint";
  detail::allow_keys(j, {"format", "prompt_count", "completion_count", "logits"}, w);
  const auto P = detail::get_req<std::size_t>(j, "prompt_count", w);
  const auto C = detail::get_req<std::size_t>(j, "completion_count", w);
  auto logits = detail::get_req<std::vector<double>>(j, "logits", w);
  if (logits.size() != P * C) throw Error(ErrorCode::ShapeMismatch, "checkpoint logits do not match its shape");
  return TabularPolicy(P, C, std::move(logits));
}

inline constexpr char kCheckpointMagic[8] = {'M', 'C', 'P', 'O', 'P', 'O', 'L', '1'};

// Layout: 8-byte magic, u64 prompt_count, u64 completion_count, then the
// row-major logits as IEEE-754 doubles, all in host byte order.
inline std::string checkpoint_to_binary(const TabularPolicy& p) {
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  const std::uint64_t shape[2] = {p.prompt_count(), p.completion_count()};
  out.append(reinterpret_cast<const char*>(shape), sizeof shape);
  const auto& l = p.logits();
  out.append(reinterpret_cast<const char*>(l.data()), l.size() * sizeof(double));
  return out;
}

inline TabularPolicy checkpoint_from_binary(const std::string& bytes) {
  constexpr std::size_t header = sizeof kCheckpointMagic + 2 * sizeof(std::uint64_t);
  if (bytes.size() < header || std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw Error(ErrorCode::IoError, "not a binary policy checkpoint");
  }
  std::uint64_t shape[2];
  std::memcpy(shape, bytes.data() + sizeof kCheckpointMagic, sizeof shape);
  if (shape[1] != 0 && shape[0] > (bytes.size() - header) / sizeof(double) / shape[1]) {
    throw Error(ErrorCode::ShapeMismatch, "checkpoint shape exceeds file size");
  }
  const std::size_t n = shape[0] * shape[1];
  if (bytes.size() != header + n * sizeof(double)) {
    throw Error(ErrorCode::ShapeMismatch, "checkpoint size does not match its shape");
  }
  std::vector<double> logits(n);
  std::memcpy(logits.data(), bytes.data() + header, n * sizeof(double));
  return TabularPolicy(shape[0], shape[1], std::move(logits));
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// ".json" selects the JSON form, anything else the binary form.
inline void save_checkpoint(const std::string& path, const TabularPolicy& p) {
  write_file(path, ends_with(path, ".json") ? checkpoint_to_json(p).dump() + "\n" : checkpoint_to_binary(p));
}

inline TabularPolicy load_checkpoint(const std::string& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() >= sizeof kCheckpointMagic &&
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) == 0) {
    return checkpoint_from_binary(bytes);
  }
  return checkpoint_from_json(parse_json(bytes, path));
}

// ---- traces, logs, reports -------------------------------------------------

inline constexpr const char* kTraceHeader = "step,loss,grad_norm,exact_nll,kl_to_pistar,expected_reward";

inline std::string trace_to_csv(const TrainTrace& t) {
  std::string out = kTraceHeader;
  out += '\n';
  for (const auto& r : t.rows) {
    out += std::to_string(r.step);
    for (double v : {r.loss, r.grad_norm, r.exact_nll, r.kl_to_pistar, r.expected_reward}) {
      out += ',';
      out += format_double(v);
    }
    out += '\n';
  }
  return out;
}

inline std::string match_log_to_csv(const std::vector<MatchLogEntry>& log) {
  std::string out = "prompt,y_a,y_b,r_a,r_b,outcome\n";
  for (const auto& e : log) {
    out += std::to_string(e.prompt) + ',' + std::to_string(e.y_a) + ',' + std::to_string(e.y_b) + ',' +
           format_double(e.r_a) + ',' + format_double(e.r_b) + ',' + std::to_string(e.outcome) + '\n';
  }
  return out;
}

inline Json to_json(const MatchResult& m) {
  return {{"n_cand", m.n_cand}, {"n_base", m.n_base}, {"n_tie", m.n_tie}};
}

inline Json to_json(const EvalReport& r) {
  Json per = Json::array();
  for (const auto& p : r.per_prompt) {
    per.push_back({{"prompt", p.prompt},
                   {"match", to_json(p.match)},
                   {"kl_to_pistar", p.kl_to_pistar},
                   {"expected_reward", p.expected_reward}});
  }
  return {{"winrate", r.winrate},
          {"wilson_low", r.wilson_low},
          {"wilson_high", r.wilson_high},
          {"match", to_json(r.match)},
          {"kl_to_pistar", r.kl_to_pistar},
          {"expected_reward", r.expected_reward},
          {"baseline_expected_reward", r.baseline_expected_reward},
          {"per_prompt", std::move(per)}};
}

inline Json to_json(const UnbiasednessReport& r) {
  Json per = Json::array();
  for (const auto& c : r.per_component) {
    per.push_back({{"index", c.index}, {"mc_mean", c.mc_mean}, {"exact", c.exact}, {"std_error", c.std_error},
                   {"z", c.z_score}});
  }
  return {{"seed", r.seed},
          {"M", r.M},
          {"n_trials", r.n_trials},
          {"prompt", r.prompt},
          {"max_z_score", r.max_z_score},
          {"per_component", std::move(per)}};
}

}  // namespace mcpo
