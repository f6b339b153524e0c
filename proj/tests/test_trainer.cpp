// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "dittolab/oracle.hpp"
#include "dittolab/trainer.hpp"
#include "test_util.hpp"

using namespace dittolab;
using namespace dittolab::trainer;

namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config(const std::string& algo, const std::string& env, int steps,
                        std::uint64_t seed) {
  TrainConfig cfg;
  cfg.algo = algo;
  cfg.env = env;
  cfg.steps = steps;
  cfg.seed = seed;
  cfg.group_size = 4;
  cfg.prompts_per_step = 8;
  return cfg;
}

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("dittolab_test_" + name);
  fs::remove_all(dir);
  return dir;
}

// Scores every trajectory identically.
class ConstantEnv final : public envs::Environment {
 public:
  ConstantEnv() {
    spec_.env_id = "constant";
    spec_.vocab_size = 4;
    spec_.max_len = 3;
    spec_.rubric.dimensions = {{0, "flat", 1.0}};
    spec_.prompt_space_size = 2;
  }
  const envs::EnvSpec& spec() const override { return spec_; }
  std::vector<double> score(const Prompt&, std::span<const token_id>) const override {
    return {0.25};
  }

 private:
  std::vector<token_id> prompt_tokens(int index) const override {
    return {static_cast<token_id>(1 + index)};
  }
  envs::EnvSpec spec_;
};

}  // namespace

TEST_CASE("collect_group is deterministic and well formed") {
  const envs::Environment& env = envs::get_env("secret_env");
  TabularPolicy policy(env.spec().vocab_size);
  Prompt prompt = env.make_prompt(6);
  TrainingGroup a = collect_group(policy, env, prompt, 8, 12345);
  TrainingGroup b = collect_group(policy, env, prompt, 8, 12345);
  CHECK(group_signature(a) == group_signature(b));
  CHECK_NOTHROW(validate_group(a));
  for (const RolloutPair& pair : a.pairs) {
    CHECK(pair.r_draft ==
          envs::scalarize(env.spec().rubric, pair.reward_vec_draft));
    CHECK(pair.r_refined ==
          envs::scalarize(env.spec().rubric, pair.reward_vec_refined));
  }
  TrainingGroup c = collect_group(policy, env, prompt, 8, 54321);
  CHECK(group_signature(a) != group_signature(c));
}

TEST_CASE("untrained policy ignores feedback: draft and refined identically distributed") {
  const envs::Environment& env = envs::get_env("secret_env");
  TabularPolicy policy(env.spec().vocab_size);
  Prompt prompt = env.make_prompt(0);
  double sum = 0.0, sumsq = 0.0;
  const int n = 10000;
  int collected = 0;
  Rng rng(8);
  while (collected < n) {
    TrainingGroup g = collect_group(policy, env, prompt, 8, rng.next_u64());
    for (const RolloutPair& pair : g.pairs) {
      double d = pair.r_refined - pair.r_draft;
      sum += d;
      sumsq += d * d;
      ++collected;
      if (collected == n) break;
    }
  }
  double mean = sum / n;
  double se = std::sqrt((sumsq / n - mean * mean) / n);
  CHECK(std::abs(mean) <= 3 * se);
}

TEST_CASE("feedback-aware policy strictly improves every pair") {
  const envs::Environment& env = envs::get_env("secret_env");
  const envs::EnvSpec& spec = env.spec();
  Prompt prompt = env.make_prompt(0);
  token_id target = prompt.tokens[0], secret = prompt.tokens[1];

  TabularPolicy policy(spec.vocab_size);
  EvalContext plain = plain_context(prompt);
  // Plain context: emit the secret token, then stop.
  policy.set_logits(make_key(plain, {}), [&] {
    std::vector<double> row(spec.vocab_size, 0.0);
    row[secret] = 100.0;
    return row;
  }());
  policy.set_logits(make_key(plain, std::vector<token_id>{secret}), [&] {
    std::vector<double> row(spec.vocab_size, 0.0);
    row[kEosToken] = 100.0;
    return row;
  }());
  // Any feedback context: countermand the base rows toward the target.
  for (int dim = 0; dim < spec.rubric.size(); ++dim) {
    for (int sev = 0; sev < envs::EnvSpec::kSeverityBuckets; ++sev) {
      Feedback fb = Feedback::make(
          {}, {static_cast<token_id>(spec.feedback_token_base() + dim),
               static_cast<token_id>(spec.feedback_token_base() + spec.rubric.size() + sev)});
      EvalContext fb_ctx = envs::render_feedback_context(prompt, &fb);
      std::vector<double> row(spec.vocab_size, 0.0);
      row[target] = 300.0;
      policy.set_logits(make_key(fb_ctx, {}), row);
      std::vector<double> eos(spec.vocab_size, 0.0);
      eos[kEosToken] = 300.0;
      policy.set_logits(make_key(fb_ctx, std::vector<token_id>{target}), eos);
    }
  }

  TrainingGroup g = collect_group(policy, env, prompt, 100, 77);
  for (const RolloutPair& pair : g.pairs) CHECK(pair.r_refined > pair.r_draft);

  // Enumeration oracle over both conditioned distributions.
  oracle::EnumerationResult plain_dist = oracle::enumerate(policy, env, prompt);
  Feedback fb = envs::judge(env, prompt, g.pairs[0].draft.tokens).feedback;
  oracle::EnumerationResult fb_dist = oracle::enumerate(policy, env, prompt, &fb);
  CHECK(plain_dist.expected_reward == doctest::Approx(-0.3).epsilon(1e-9));
  CHECK(fb_dist.expected_reward == doctest::Approx(0.5).epsilon(1e-9));
}

TEST_CASE("constant-reward environment gives zero gradient") {
  ConstantEnv env;
  for (const char* algo : {"ditto", "grpo", "ditto_y1_only", "erl"}) {
    TabularPolicy policy(env.spec().vocab_size);
    PolicySnapshot old = snapshot(policy);
    std::vector<TrainingGroup> groups;
    for (int g = 0; g < 4; ++g)
      groups.push_back(collect_group(policy, env, env.make_prompt(g % 2), 4,
                                     seed_chain(3, {static_cast<std::uint64_t>(g)})));
    objectives::LossResult res = objectives::evaluate_loss(
        objectives::algorithm_from_id(algo), groups, policy, *old, {});
    for (double v : res.grad) CHECK(v == 0.0);
  }
}

TEST_CASE("train_step metrics: gap identity and snapshot timing") {
  TrainConfig cfg = tiny_config("ditto", "secret_env", 3, 11);
  TrainState state = init_state(cfg);
  const envs::Environment& env = envs::get_env(cfg.env);

  // Recompute the first step's collection independently.
  std::vector<TrainingGroup> expected_groups;
  for (int g = 0; g < cfg.prompts_per_step; ++g) {
    Prompt prompt = env.make_prompt(g % env.spec().prompt_space_size);
    expected_groups.push_back(collect_group(*state.policy, env, prompt, cfg.group_size,
                                            group_collection_seed(state.config, 0, g)));
  }
  double dsum = 0, rsum = 0;
  int n = 0;
  for (const TrainingGroup& g : expected_groups)
    for (const RolloutPair& p : g.pairs) {
      dsum += p.r_draft;
      rsum += p.r_refined;
      ++n;
    }

  std::vector<TrainingGroup> collected;
  StepMetrics m = train_step(state, &collected);
  CHECK(m.mean_r_draft == dsum / n);
  CHECK(m.mean_r_refined == rsum / n);
  CHECK(m.gap == m.mean_r_refined - m.mean_r_draft);
  CHECK(collected.size() == static_cast<std::size_t>(cfg.prompts_per_step));
  for (std::size_t g = 0; g < collected.size(); ++g)
    CHECK(group_signature(collected[g]) == group_signature(expected_groups[g]));

  // Snapshot timing: every ratio is exactly 1 on the step's first loss
  // evaluation.
  CHECK(m.max_ratio_dev == 0.0);
  while (state.step < cfg.steps) CHECK(train_step(state).max_ratio_dev == 0.0);
}

TEST_CASE("copy_env learning sanity (scaled-down)") {
  TrainConfig cfg;
  cfg.algo = "grpo";
  cfg.env = "copy_env";
  cfg.steps = 60;
  cfg.seed = 1;
  TrainState state = init_state(cfg);
  const envs::Environment& env = envs::get_env(cfg.env);
  double eval0 = evaluate_policy(*state.policy, env,
                                 eval_prompt_indices(state.config, env.spec()));
  while (state.step < cfg.steps) train_step(state);
  CHECK(state.history.back().eval_mean_reward - eval0 >= 0.3);
}

TEST_CASE("identical configs give identical metric streams") {
  TrainConfig cfg = tiny_config("ditto", "secret_env", 5, 21);
  RunResult a = run(cfg);
  RunResult b = run(cfg);
  const envs::EnvSpec& spec = envs::get_env(cfg.env).spec();
  CHECK(metrics_csv(a.config, a.metrics, spec) == metrics_csv(b.config, b.metrics, spec));
}

TEST_CASE("outputs are independent of the worker count") {
  TrainConfig one = tiny_config("ditto", "secret_env", 4, 9);
  TrainConfig four = one;
  four.workers = 4;
  RunResult a = run(one);
  RunResult b = run(four);
  const envs::EnvSpec& spec = envs::get_env(one.env).spec();
  CHECK(metrics_csv(one, a.metrics, spec) == metrics_csv(one, b.metrics, spec));
}

TEST_CASE("interrupt and resume reproduces the uninterrupted run") {
  TrainConfig cfg = tiny_config("ditto", "secret_env", 8, 33);
  RunResult full = run(cfg);

  fs::path dir = fresh_dir("resume");
  TrainConfig half = cfg;
  half.steps = 4;
  RunOptions opts;
  opts.out_dir = dir.string();
  run(half, opts);

  // Continue from the checkpoint to the full horizon.
  TrainState resumed = load_checkpoint((dir / "checkpoint_final.json").string());
  resumed.config.steps = 8;
  while (resumed.step < resumed.config.steps) train_step(resumed);

  REQUIRE(resumed.history.size() == full.metrics.size());
  const envs::EnvSpec& spec = envs::get_env(cfg.env).spec();
  CHECK(metrics_csv(cfg, resumed.history, spec) == metrics_csv(cfg, full.metrics, spec));
  fs::remove_all(dir);
}

TEST_CASE("zero-step run writes a checkpoint and an empty metrics body") {
  fs::path dir = fresh_dir("zerostep");
  TrainConfig cfg = tiny_config("grpo", "copy_env", 0, 2);
  RunOptions opts;
  opts.out_dir = dir.string();
  RunResult res = run(cfg, opts);
  CHECK(res.metrics.empty());
  CHECK(fs::exists(dir / "checkpoint_final.json"));
  std::ifstream in(dir / "metrics.csv");
  std::string header, extra;
  CHECK(std::getline(in, header));
  CHECK_FALSE(std::getline(in, extra));
  fs::remove_all(dir);
}

TEST_CASE("non-finite state aborts the step with a diagnostic dump") {
  SUBCASE("poisoned parameters surface in collection") {
    TrainConfig cfg = tiny_config("ditto", "secret_env", 2, 13);
    cfg.prompts_per_step = 20;  // cover the whole prompt space each step
    TrainState state = init_state(cfg);
    train_step(state);
    REQUIRE(state.policy->param_count() > 0);
    for (std::size_t i = 0; i < state.policy->param_count(); ++i)
      state.policy->set_param(i, std::numeric_limits<double>::quiet_NaN());
    try {
      train_step(state);
      FAIL("expected numeric_error");
    } catch (const numeric_error& e) {
      CHECK_FALSE(e.diagnostic_json.empty());
      CHECK(nlohmann::json::parse(e.diagnostic_json).at("step").get<int>() == 2);
    }
  }
  SUBCASE("a corrupt ratio surfaces in the loss with the offending group") {
    const envs::Environment& env = envs::get_env("secret_env");
    TabularPolicy policy(env.spec().vocab_size);
    Prompt prompt = env.make_prompt(0);
    std::vector<TrainingGroup> groups{collect_group(policy, env, prompt, 2, 7)};
    PolicySnapshot old = snapshot(policy);
    objectives::evaluate_loss(objectives::Algorithm::kDitto, groups, policy, *old, {});
    for (std::size_t i = 0; i < policy.param_count(); ++i)
      policy.set_param(i, std::numeric_limits<double>::quiet_NaN());
    CHECK_THROWS_AS(
        objectives::evaluate_loss(objectives::Algorithm::kDitto, groups, policy, *old, {}),
        numeric_error);
  }
}

TEST_CASE("config validation rejects unknown ids and bad ranges") {
  TrainConfig cfg;
  cfg.algo = "nosuch";
  CHECK_THROWS_AS(cfg.validate(), config_error);
  cfg = TrainConfig{};
  cfg.env = "nosuch";
  CHECK_THROWS_AS(cfg.validate(), config_error);
  cfg = TrainConfig{};
  cfg.clip_epsilon = 1.5;
  CHECK_THROWS_AS(cfg.validate(), config_error);
  cfg = TrainConfig{};
  cfg.policy = "transformer";
  CHECK_THROWS_AS(cfg.validate(), config_error);

  TrainConfig mlp;
  mlp.policy = "mlp";
  CHECK(mlp.resolved().learning_rate == 0.01);
  CHECK(TrainConfig{}.resolved().learning_rate == 0.05);
}

TEST_CASE("config json round-trips") {
  TrainConfig cfg = tiny_config("rltf_sd", "copy_env", 7, 123);
  cfg.optimizer = "adam";
  cfg.average_tokens = true;
  TrainConfig back = TrainConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
}

TEST_CASE("adam optimizer trains and stays deterministic") {
  TrainConfig cfg = tiny_config("grpo", "copy_env", 10, 5);
  cfg.optimizer = "adam";
  cfg.learning_rate = 0.02;
  RunResult a = run(cfg);
  RunResult b = run(cfg);
  const envs::EnvSpec& spec = envs::get_env(cfg.env).spec();
  CHECK(metrics_csv(cfg, a.metrics, spec) == metrics_csv(cfg, b.metrics, spec));
  CHECK(a.metrics.back().eval_mean_reward > a.metrics.front().eval_mean_reward);
}

TEST_CASE("mlp policy trains end to end") {
  TrainConfig cfg = tiny_config("ditto", "secret_env", 3, 17);
  cfg.policy = "mlp";
  cfg.mlp_hidden = 8;
  cfg.mlp_embed = 4;
  RunResult res = run(cfg);
  CHECK(res.metrics.size() == 3);
  for (const StepMetrics& m : res.metrics) CHECK(std::isfinite(m.loss_total));
}

TEST_CASE("sign test") {
  std::vector<double> ties{0, 0, 0};
  CHECK(sign_test_p_greater(ties) == 1.0);
  std::vector<double> all_pos(20, 1.0);
  CHECK(sign_test_p_greater(all_pos) == doctest::Approx(std::pow(0.5, 20)).epsilon(1e-9));
  std::vector<double> mixed{1, 1, 1, -1};
  // P(X >= 3), X ~ Bin(4, 1/2) = (4 + 1) / 16.
  CHECK(sign_test_p_greater(mixed) == doctest::Approx(5.0 / 16.0).epsilon(1e-12));
}

TEST_CASE("compare runs cells and reports paired tests") {
  TrainConfig ditto = tiny_config("ditto", "secret_env", 3, 1);
  TrainConfig grpo = ditto;
  grpo.algo = "grpo";
  std::vector<TrainConfig> configs{ditto, grpo};
  std::vector<std::uint64_t> seeds{1, 2};
  ComparisonReport report = compare(configs, seeds);
  CHECK(report.algos.size() == 2);
  CHECK(report.algos[0].final_eval_per_seed.size() == 2);
  CHECK(report.algos[0].gap_trajectory.size() == 3);
  bool found_secret = false;
  for (const PairedComparison& t : report.tests)
    if (t.metric == "dim_secret" && t.algo_a == "ditto" && t.algo_b == "grpo")
      found_secret = true;
  CHECK(found_secret);

  // Identical algos on identical seeds: every difference ties, p = 1.
  TrainConfig grpo2 = grpo;
  std::vector<TrainConfig> same{grpo, grpo2};
  ComparisonReport null_report = compare(same, seeds);
  for (const PairedComparison& t : null_report.tests) CHECK(t.p_greater == 1.0);

  TrainConfig other_env = grpo;
  other_env.env = "copy_env";
  std::vector<TrainConfig> bad{ditto, other_env};
  CHECK_THROWS_AS(compare(bad, seeds), config_error);
}

TEST_CASE("eval holdout reserves a disjoint tail range") {
  TrainConfig cfg = tiny_config("grpo", "copy_env", 1, 1);
  cfg.eval_holdout_fraction = 0.25;
  const envs::EnvSpec& spec = envs::get_env("copy_env").spec();
  CHECK(train_prompt_count(cfg, spec) == 12);
  std::vector<int> eval = eval_prompt_indices(cfg, spec);
  REQUIRE(eval.size() == 4);
  CHECK(eval.front() == 12);
  CHECK(eval.back() == 15);
}
