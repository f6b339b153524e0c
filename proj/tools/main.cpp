// SPDX-License-Identifier: Apache-2.0
//
// dittolab CLI: run single experiments, run comparison sweeps, dump
// environments and exact enumerations, replay rollout traces.
//
// Exit codes: 0 success, 2 configuration error, 3 numeric abort,
//             4 trace integrity failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dittolab/envs.hpp"
#include "dittolab/oracle.hpp"
#include "dittolab/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dittolab;

namespace {

std::string out_root() {
  const char* env = std::getenv("DITTOLAB_OUT");
  return env && *env ? env : "runs";
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& spec) {
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> parts = split_csv(spec);
  if (parts.size() == 1 && parts[0].find_first_not_of("0123456789") == std::string::npos) {
    // A single integer N means seeds 1..N.
    std::uint64_t n = std::stoull(parts[0]);
    if (n == 0) throw config_error("--seeds must name at least one seed");
    for (std::uint64_t s = 1; s <= n; ++s) seeds.push_back(s);
    return seeds;
  }
  for (const std::string& p : parts) seeds.push_back(std::stoull(p));
  if (seeds.empty()) throw config_error("--seeds must name at least one seed");
  return seeds;
}

// Shared run/compare flags. Values land in `cfg` only when the user passed
// the flag, so precedence is defaults < config file < explicit flags.
struct ConfigFlags {
  std::string config_file;
  std::string algo, env, policy, optimizer;
  int group_size = 0, prompts_per_step = 0, steps = 0, workers = 0;
  double lr = 0.0, clip_eps = 0.0, awr_beta = 0.0, eval_holdout = 0.0;
  std::uint64_t seed = 0;
  bool average_tokens = false;
  bool no_feedback = false;

  void attach(CLI::App* app, bool with_algo) {
    app->add_option("--config", config_file, "JSON config file mirroring TrainConfig");
    if (with_algo) app->add_option("--algo", algo, "algorithm id");
    app->add_option("--env", env, "environment id");
    app->add_option("--policy", policy, "policy type: tabular|mlp");
    app->add_option("--seed", seed, "master seed");
    app->add_option("--steps", steps, "training steps");
    app->add_option("--group-size", group_size, "rollout pairs per prompt (G)");
    app->add_option("--batch", prompts_per_step, "groups per step");
    app->add_option("--lr", lr, "learning rate (0 = per-policy default)");
    app->add_option("--clip-eps", clip_eps, "clip epsilon");
    app->add_option("--optimizer", optimizer, "sgd|adam");
    app->add_option("--awr-beta", awr_beta, "RLTF-SD advantage temperature");
    app->add_option("--workers", workers, "worker pool bound");
    app->add_option("--eval-holdout", eval_holdout,
                    "fraction of the prompt space held out for evaluation");
    app->add_flag("--avg-tokens", average_tokens, "average instead of sum over tokens");
    app->add_flag("--no-feedback", no_feedback,
                  "drop judge hints; refined rollouts use the plain context");
  }

  trainer::TrainConfig build(const CLI::App* app_in) const {
    auto* app = const_cast<CLI::App*>(app_in);
    auto passed = [app](const std::string& name) {
      const CLI::Option* opt = app->get_option_no_throw(name);
      return opt != nullptr && opt->count() > 0;
    };
    trainer::TrainConfig cfg;
    if (passed("--config")) {
      std::ifstream in(config_file);
      if (!in) throw config_error("cannot open config file " + config_file);
      json j = json::parse(in, nullptr, false);
      if (j.is_discarded()) throw config_error("config file is not valid JSON");
      cfg = trainer::TrainConfig::from_json(j);
    }
    if (passed("--algo")) cfg.algo = algo;
    if (passed("--env")) cfg.env = env;
    if (passed("--policy")) cfg.policy = policy;
    if (passed("--seed")) cfg.seed = seed;
    if (passed("--steps")) cfg.steps = steps;
    if (passed("--group-size")) cfg.group_size = group_size;
    if (passed("--batch")) cfg.prompts_per_step = prompts_per_step;
    if (passed("--lr")) cfg.learning_rate = lr;
    if (passed("--clip-eps")) cfg.clip_epsilon = clip_eps;
    if (passed("--optimizer")) cfg.optimizer = optimizer;
    if (passed("--awr-beta")) cfg.awr_beta = awr_beta;
    if (passed("--workers")) cfg.workers = workers;
    if (passed("--eval-holdout")) cfg.eval_holdout_fraction = eval_holdout;
    if (passed("--avg-tokens")) cfg.average_tokens = true;
    if (passed("--no-feedback")) cfg.feedback_enabled = false;
    return cfg;
  }
};

int cmd_run(const CLI::App* sub, const ConfigFlags& flags, const std::string& out_dir,
            const std::string& resume, int checkpoint_every, const std::string& trace_out) {
  trainer::TrainConfig cfg = flags.build(sub);
  trainer::RunOptions opts;
  opts.resume_from = resume;
  opts.checkpoint_every = checkpoint_every;
  opts.trace_path = trace_out;
  opts.echo_progress = true;
  if (!out_dir.empty()) {
    opts.out_dir = out_dir;
  } else if (!resume.empty()) {
    opts.out_dir =
        (fs::path(out_root()) / ("resumed_" + fs::path(resume).stem().string())).string();
  } else {
    trainer::TrainConfig resolved = cfg.resolved();
    opts.out_dir = (fs::path(out_root()) /
                    (resolved.algo + "_" + resolved.env + "_s" + std::to_string(resolved.seed)))
                       .string();
  }
  trainer::RunResult result = trainer::run(cfg, opts);
  std::cout << "wrote " << (fs::path(opts.out_dir) / "metrics.csv").string() << " ("
            << result.metrics.size() << " rows)\n";
  return 0;
}

int cmd_compare(const CLI::App* sub, const ConfigFlags& flags, const std::string& algos_arg,
                const std::string& seeds_arg, const std::string& out_dir) {
  std::vector<std::string> algos = split_csv(algos_arg);
  if (algos.size() < 2) throw config_error("--algos needs at least two algorithm ids");
  std::vector<std::uint64_t> seeds = parse_seeds(seeds_arg);

  trainer::TrainConfig base = flags.build(sub).resolved();
  const envs::EnvSpec& spec = envs::get_env(base.env).spec();
  fs::path out = out_dir.empty() ? fs::path(out_root()) / ("compare_" + base.env)
                                 : fs::path(out_dir);

  std::vector<trainer::CellResult> cells;
  std::string plotdata;
  for (const std::string& algo : algos) {
    objectives::algorithm_from_id(algo);
    for (std::uint64_t seed : seeds) {
      trainer::TrainConfig cell_cfg = base;
      cell_cfg.algo = algo;
      cell_cfg.seed = seed;
      trainer::RunOptions opts;
      opts.out_dir =
          (out / "cells" / (algo + "_seed" + std::to_string(seed))).string();
      trainer::RunResult result = trainer::run(cell_cfg, opts);
      if (plotdata.empty())
        plotdata = trainer::metrics_csv(cell_cfg, result.metrics, spec);
      else {
        std::string csv = trainer::metrics_csv(cell_cfg, result.metrics, spec);
        plotdata += csv.substr(csv.find('\n') + 1);  // strip header
      }
      cells.push_back(trainer::CellResult{algo, seed, std::move(result.metrics)});
      std::cout << "cell " << algo << " seed " << seed << " done\n";
    }
  }
  trainer::ComparisonReport report = trainer::build_comparison(base.env, cells, seeds, spec);
  trainer::write_file_atomic((out / "comparison.json").string(),
                             trainer::comparison_to_json(report).dump(2) + "\n");
  trainer::write_file_atomic((out / "plotdata.csv").string(), plotdata);
  std::cout << "wrote " << (out / "comparison.json").string() << "\n";
  return 0;
}

int cmd_dump_env(const std::string& env_id) {
  std::cout << envs::env_dump(envs::get_env(env_id)).dump(2) << "\n";
  return 0;
}

int cmd_enumerate(const std::string& env_id, int index, const std::string& checkpoint,
                  int feedback_dim, int feedback_severity, bool with_feedback) {
  const envs::Environment& env = envs::get_env(env_id);
  const envs::EnvSpec& spec = env.spec();
  std::unique_ptr<Policy> policy;
  if (!checkpoint.empty()) {
    std::ifstream in(checkpoint);
    if (!in) throw config_error("cannot open checkpoint " + checkpoint);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw config_error("checkpoint is not valid JSON");
    policy = policy_from_json(j.contains("policy") ? j.at("policy") : j);
  } else {
    policy = std::make_unique<TabularPolicy>(spec.vocab_size);
  }
  Prompt prompt = env.make_prompt(index);
  std::optional<Feedback> feedback;
  if (with_feedback) {
    if (feedback_dim < 0 || feedback_dim >= spec.rubric.size())
      throw config_error("--feedback-dim outside rubric");
    if (feedback_severity < 0 || feedback_severity >= envs::EnvSpec::kSeverityBuckets)
      throw config_error("--feedback-severity outside severity buckets");
    std::vector<std::pair<int, double>> scores;
    for (int d = 0; d < spec.rubric.size(); ++d) scores.emplace_back(d, 0.0);
    feedback = Feedback::make(
        scores, {static_cast<token_id>(spec.feedback_token_base() + feedback_dim),
                 static_cast<token_id>(spec.feedback_token_base() + spec.rubric.size() +
                                       feedback_severity)});
  }
  oracle::EnumerationResult result =
      oracle::enumerate(*policy, env, prompt, feedback ? &*feedback : nullptr);
  json j = oracle::enumeration_to_json(result);
  j["env"] = env_id;
  j["prompt_index"] = index;
  std::cout << j.dump(2) << "\n";
  return 0;
}

std::string tokens_str(const std::vector<token_id>& tokens) {
  std::string s = "[";
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) s += " ";
    s += std::to_string(tokens[i]);
  }
  return s + "]";
}

// Pretty-prints a trace and recomputes every reward through the judge,
// failing loudly on the first inconsistent record.
int cmd_replay(const std::string& trace_path, const std::string& env_id) {
  const envs::Environment& env = envs::get_env(env_id);
  const envs::EnvSpec& spec = env.spec();
  std::ifstream in(trace_path);
  if (!in) throw config_error("cannot open trace " + trace_path);
  std::string line;
  int line_no = 0, records = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    TraceRecord rec = parse_trace_line(line, line_no);
    if (rec.prompt_id < 0 || rec.prompt_id >= spec.prompt_space_size)
      throw trace_error("record " + std::to_string(line_no) + ": prompt_id outside env space",
                        line_no);
    Prompt prompt = env.make_prompt(static_cast<int>(rec.prompt_id));
    envs::JudgeResult draft = envs::judge(env, prompt, rec.draft_tokens);
    envs::JudgeResult refined = envs::judge(env, prompt, rec.refined_tokens);
    auto mismatch = [&](const std::string& what) {
      throw trace_error("record " + std::to_string(line_no) + ": " + what + " mismatch",
                        line_no);
    };
    if (draft.feedback.hint_tokens != rec.hint_tokens) mismatch("hint_tokens");
    if (draft.reward_vec.size() != rec.dim_scores.size()) mismatch("dim_scores");
    for (std::size_t d = 0; d < draft.reward_vec.size(); ++d)
      if (std::abs(draft.reward_vec[d] - rec.dim_scores[d]) > 1e-12) mismatch("dim_scores");
    if (std::abs(envs::scalarize(spec.rubric, draft.reward_vec) - rec.r_draft) > 1e-12)
      mismatch("r_draft");
    if (std::abs(envs::scalarize(spec.rubric, refined.reward_vec) - rec.r_refined) > 1e-12)
      mismatch("r_refined");
    ++records;
    std::cout << "#" << records << " prompt " << rec.prompt_id << " draft "
              << tokens_str(rec.draft_tokens) << " hint " << tokens_str(rec.hint_tokens)
              << " refined " << tokens_str(rec.refined_tokens) << " r0 "
              << format_double(rec.r_draft) << " r1 " << format_double(rec.r_refined)
              << "\n";
  }
  std::cout << records << " records, 0 mismatches\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dittolab: a desk-scale lab for RL from structured judge feedback"};
  app.require_subcommand(1);

  ConfigFlags run_flags, compare_flags;
  std::string run_out, resume, trace_out;
  int checkpoint_every = 0;
  CLI::App* run = app.add_subcommand("run", "train one configuration");
  run_flags.attach(run, true);
  run->add_option("--out", run_out, "output directory");
  run->add_option("--resume", resume, "resume from a checkpoint file");
  run->add_option("--checkpoint-every", checkpoint_every, "checkpoint cadence in steps");
  run->add_option("--trace-out", trace_out, "write a rollout-pair trace (JSONL)");

  std::string algos_arg, seeds_arg = "1", compare_out;
  CLI::App* compare = app.add_subcommand("compare", "sweep several algorithms");
  compare_flags.attach(compare, false);
  compare->add_option("--algos", algos_arg, "comma-separated algorithm ids")->required();
  compare->add_option("--seeds", seeds_arg, "seed count N (runs 1..N) or comma list");
  compare->add_option("--out", compare_out, "output directory");

  std::string dump_env_id = "secret_env";
  CLI::App* dump = app.add_subcommand("dump-env", "emit rubric and feedback-token mapping");
  dump->add_option("--env", dump_env_id, "environment id");

  std::string enum_env = "secret_env", enum_checkpoint;
  int enum_index = 0, enum_dim = 0, enum_sev = 0;
  CLI::App* enumerate = app.add_subcommand("enumerate", "exact trajectory enumeration");
  enumerate->add_option("--env", enum_env, "environment id");
  enumerate->add_option("--index", enum_index, "prompt index");
  enumerate->add_option("--checkpoint", enum_checkpoint, "policy checkpoint (default uniform)");
  CLI::Option* fb_dim = enumerate->add_option("--feedback-dim", enum_dim,
                                              "condition on a feedback hint: worst dimension");
  enumerate->add_option("--feedback-severity", enum_sev, "feedback severity bucket")
      ->needs(fb_dim);

  std::string replay_trace, replay_env = "secret_env";
  CLI::App* replay = app.add_subcommand("replay", "verify and pretty-print a trace");
  replay->add_option("--trace", replay_trace, "trace file (JSONL)")->required();
  replay->add_option("--env", replay_env, "environment id");

  try {
    app.parse(argc, argv);
    if (run->parsed())
      return cmd_run(run, run_flags, run_out, resume, checkpoint_every, trace_out);
    if (compare->parsed())
      return cmd_compare(compare, compare_flags, algos_arg, seeds_arg, compare_out);
    if (dump->parsed()) return cmd_dump_env(dump_env_id);
    if (enumerate->parsed())
      return cmd_enumerate(enum_env, enum_index, enum_checkpoint, enum_dim, enum_sev,
                           enumerate->count("--feedback-dim") > 0);
    if (replay->parsed()) return cmd_replay(replay_trace, replay_env);
    return 2;
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const trace_error& e) {
    std::cerr << "trace error (line " << e.line_number << "): " << e.what() << "\n";
    return 4;
  } catch (const numeric_error& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return 3;
  } catch (const config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::out_of_range& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
