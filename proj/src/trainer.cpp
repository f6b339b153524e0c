// SPDX-License-Identifier: Apache-2.0
#include "dittolab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace dittolab::trainer {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Domain separators for seed chains.
constexpr std::uint64_t kSeedCollect = 0xC011EC7ULL;
constexpr std::uint64_t kSeedPolicyInit = 0x9011C7ULL;

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

bool all_finite(std::span<const double> values) {
  for (double v : values)
    if (!std::isfinite(v)) return false;
  return true;
}

double mean(std::span<const double> values) {
  double s = 0.0;
  for (double v : values) s += v;
  return values.empty() ? 0.0 : s / static_cast<double>(values.size());
}

double median(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  std::size_t n = values.size();
  if (n == 0) return 0.0;
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace

void TrainConfig::validate() const {
  objectives::algorithm_from_id(algo);
  envs::get_env(env);
  if (policy != "tabular" && policy != "mlp")
    throw config_error("unknown policy '" + policy + "' (registered: tabular, mlp)");
  if (optimizer != "sgd" && optimizer != "adam")
    throw config_error("unknown optimizer '" + optimizer + "' (registered: sgd, adam)");
  if (group_size < 1) throw config_error("group_size must be >= 1");
  if (prompts_per_step < 1) throw config_error("prompts_per_step must be >= 1");
  if (steps < 0) throw config_error("steps must be >= 0");
  if (learning_rate < 0.0) throw config_error("learning_rate must be >= 0");
  if (!(clip_epsilon > 0.0 && clip_epsilon < 1.0))
    throw config_error("clip_epsilon must lie in (0, 1)");
  if (awr_beta <= 0.0) throw config_error("awr_beta must be > 0");
  if (workers < 1) throw config_error("workers must be >= 1");
  if (eval_holdout_fraction < 0.0 || eval_holdout_fraction >= 1.0)
    throw config_error("eval_holdout_fraction must lie in [0, 1)");
  if (mlp_hidden < 1 || mlp_embed < 1) throw config_error("mlp dimensions must be >= 1");
  if (eval_holdout_fraction > 0.0) {
    const envs::EnvSpec& spec = envs::get_env(env).spec();
    int hold = static_cast<int>(spec.prompt_space_size * eval_holdout_fraction);
    if (hold < 1 || hold >= spec.prompt_space_size)
      throw config_error("eval_holdout_fraction leaves no train or eval prompts");
  }
}

TrainConfig TrainConfig::resolved() const {
  validate();
  TrainConfig out = *this;
  if (out.learning_rate == 0.0)
    out.learning_rate = out.policy == "tabular" ? 0.05 : 0.01;
  return out;
}

json TrainConfig::to_json() const {
  return json{{"algo", algo},
              {"env", env},
              {"policy", policy},
              {"group_size", group_size},
              {"prompts_per_step", prompts_per_step},
              {"learning_rate", learning_rate},
              {"clip_epsilon", clip_epsilon},
              {"steps", steps},
              {"seed", seed},
              {"optimizer", optimizer},
              {"awr_beta", awr_beta},
              {"average_tokens", average_tokens},
              {"workers", workers},
              {"eval_holdout_fraction", eval_holdout_fraction},
              {"mlp_hidden", mlp_hidden},
              {"mlp_embed", mlp_embed},
              {"feedback_enabled", feedback_enabled}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  auto load = [&j](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  load("algo", c.algo);
  load("env", c.env);
  load("policy", c.policy);
  load("group_size", c.group_size);
  load("prompts_per_step", c.prompts_per_step);
  load("learning_rate", c.learning_rate);
  load("clip_epsilon", c.clip_epsilon);
  load("steps", c.steps);
  load("seed", c.seed);
  load("optimizer", c.optimizer);
  load("awr_beta", c.awr_beta);
  load("average_tokens", c.average_tokens);
  load("workers", c.workers);
  load("eval_holdout_fraction", c.eval_holdout_fraction);
  load("mlp_hidden", c.mlp_hidden);
  load("mlp_embed", c.mlp_embed);
  load("feedback_enabled", c.feedback_enabled);
  return c;
}

TrainState init_state(const TrainConfig& config) {
  TrainState state;
  state.config = config.resolved();
  const envs::EnvSpec& spec = envs::get_env(state.config.env).spec();
  if (state.config.policy == "tabular") {
    state.policy = std::make_unique<TabularPolicy>(spec.vocab_size);
  } else {
    state.policy = std::make_unique<TinyMlpPolicy>(
        spec.vocab_size, spec.extended_vocab_size(), spec.max_len,
        state.config.mlp_hidden, state.config.mlp_embed,
        seed_chain(state.config.seed, {kSeedPolicyInit}));
  }
  return state;
}

int train_prompt_count(const TrainConfig& config, const envs::EnvSpec& spec) {
  int hold = static_cast<int>(spec.prompt_space_size * config.eval_holdout_fraction);
  return spec.prompt_space_size - hold;
}

std::vector<int> eval_prompt_indices(const TrainConfig& config, const envs::EnvSpec& spec) {
  std::vector<int> indices;
  int start = config.eval_holdout_fraction > 0.0 ? train_prompt_count(config, spec) : 0;
  for (int i = start; i < spec.prompt_space_size; ++i) indices.push_back(i);
  return indices;
}

TrainingGroup collect_group(const Policy& policy, const envs::Environment& env,
                            const Prompt& prompt, int group_size,
                            std::uint64_t rng_seed, bool use_feedback) {
  const envs::EnvSpec& spec = env.spec();
  TrainingGroup group;
  group.prompt = prompt;
  group.pairs.reserve(group_size);
  std::uint64_t pid = static_cast<std::uint64_t>(prompt.id);
  for (int i = 0; i < group_size; ++i) {
    RolloutPair pair;
    std::uint64_t draft_seed = seed_chain(rng_seed, {pid, static_cast<std::uint64_t>(i), 0});
    pair.draft = sample(policy, prompt, nullptr, draft_seed, spec.max_len);
    envs::JudgeResult jd = envs::judge(env, prompt, pair.draft.tokens);
    pair.reward_vec_draft = jd.reward_vec;
    pair.r_draft = envs::scalarize(spec.rubric, jd.reward_vec);
    pair.feedback = use_feedback
                        ? jd.feedback
                        : Feedback::make(jd.feedback.dimension_scores, {});
    std::uint64_t refined_seed = seed_chain(rng_seed, {pid, static_cast<std::uint64_t>(i), 1});
    pair.refined = sample(policy, prompt, &pair.feedback, refined_seed, spec.max_len);
    envs::JudgeResult jr = envs::judge(env, prompt, pair.refined.tokens);
    pair.reward_vec_refined = jr.reward_vec;
    pair.r_refined = envs::scalarize(spec.rubric, jr.reward_vec);
    group.pairs.push_back(std::move(pair));
  }
  return group;
}

std::uint64_t group_collection_seed(const TrainConfig& config, int step, int group_index) {
  return seed_chain(config.seed, {kSeedCollect, static_cast<std::uint64_t>(step),
                                  static_cast<std::uint64_t>(group_index)});
}

double evaluate_policy(const Policy& policy, const envs::Environment& env,
                       std::span<const int> prompt_indices) {
  const envs::EnvSpec& spec = env.spec();
  double total = 0.0;
  for (int index : prompt_indices) {
    Prompt prompt = env.make_prompt(index);
    Rollout rollout = greedy_rollout(policy, plain_context(prompt), spec.max_len);
    total += envs::scalarize(spec.rubric, env.score(prompt, rollout.tokens));
  }
  return prompt_indices.empty() ? 0.0 : total / static_cast<double>(prompt_indices.size());
}

namespace {

void apply_update(TrainState& state, std::span<const double> grad) {
  Policy& policy = *state.policy;
  double lr = state.config.learning_rate;
  if (state.config.optimizer == "sgd") {
    for (std::size_t i = 0; i < grad.size(); ++i)
      policy.set_param(i, policy.param(i) - lr * grad[i]);
    return;
  }
  // Adam; moment vectors grow with newly materialized parameters.
  state.adam_m.resize(grad.size(), 0.0);
  state.adam_v.resize(grad.size(), 0.0);
  state.adam_steps += 1;
  double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.adam_steps));
  double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.adam_steps));
  for (std::size_t i = 0; i < grad.size(); ++i) {
    state.adam_m[i] = kAdamBeta1 * state.adam_m[i] + (1.0 - kAdamBeta1) * grad[i];
    state.adam_v[i] = kAdamBeta2 * state.adam_v[i] + (1.0 - kAdamBeta2) * grad[i] * grad[i];
    double mhat = state.adam_m[i] / bc1;
    double vhat = state.adam_v[i] / bc2;
    policy.set_param(i, policy.param(i) - lr * mhat / (std::sqrt(vhat) + kAdamEps));
  }
}

std::string abort_diagnostic(const TrainState& state,
                             std::span<const TrainingGroup> groups, Policy& live,
                             const Policy& old, const objectives::LossOptions& opts,
                             objectives::Algorithm algo) {
  // Single out the first group whose own loss is already non-finite.
  const TrainingGroup* offending = &groups[0];
  for (const TrainingGroup& g : groups) {
    try {
      objectives::LossResult one =
          objectives::evaluate_loss(algo, std::span(&g, 1), live, old, opts);
      if (!std::isfinite(one.report.loss_total) || !all_finite(one.grad)) {
        offending = &g;
        break;
      }
    } catch (const numeric_error&) {
      offending = &g;
      break;
    }
  }
  json records = json::array();
  for (const RolloutPair& pair : offending->pairs)
    records.push_back(json::parse(trace_line(to_trace_record(offending->prompt, pair))));
  json diag{{"step", state.step + 1},
            {"group_signature", group_signature(*offending)},
            {"prompt_id", offending->prompt.id},
            {"pairs", records}};
  return diag.dump();
}

}  // namespace

StepMetrics train_step(TrainState& state, std::vector<TrainingGroup>* collected) {
  const TrainConfig& cfg = state.config;
  const envs::Environment& env = envs::get_env(cfg.env);
  const envs::EnvSpec& spec = env.spec();
  int train_count = train_prompt_count(cfg, spec);

  PolicySnapshot old = snapshot(*state.policy);

  std::vector<TrainingGroup> groups(cfg.prompts_per_step);
  try {
    parallel_for(static_cast<std::size_t>(cfg.prompts_per_step), cfg.workers,
                 [&](std::size_t g) {
                   std::int64_t flat = static_cast<std::int64_t>(state.step) *
                                           cfg.prompts_per_step +
                                       static_cast<std::int64_t>(g);
                   Prompt prompt = env.make_prompt(static_cast<int>(flat % train_count));
                   groups[g] = collect_group(*state.policy, env, prompt, cfg.group_size,
                                             group_collection_seed(cfg, state.step,
                                                                   static_cast<int>(g)),
                                             cfg.feedback_enabled);
                 });
  } catch (const numeric_error& e) {
    json diag{{"step", state.step + 1}, {"phase", "collection"}, {"error", e.what()}};
    throw numeric_error(e.what(), diag.dump());
  }

  StepMetrics m;
  m.step = state.step + 1;
  m.dim_means.assign(spec.rubric.size(), 0.0);
  std::int64_t pairs = 0;
  for (const TrainingGroup& group : groups) {
    for (const RolloutPair& pair : group.pairs) {
      m.mean_r_draft += pair.r_draft;
      m.mean_r_refined += pair.r_refined;
      for (int d = 0; d < spec.rubric.size(); ++d)
        m.dim_means[d] += pair.reward_vec_draft[d];
      ++pairs;
    }
  }
  m.mean_r_draft /= static_cast<double>(pairs);
  m.mean_r_refined /= static_cast<double>(pairs);
  for (double& d : m.dim_means) d /= static_cast<double>(pairs);
  m.gap = m.mean_r_refined - m.mean_r_draft;

  objectives::Algorithm algo = objectives::algorithm_from_id(cfg.algo);
  objectives::LossOptions lopts;
  lopts.clip.epsilon = cfg.clip_epsilon;
  lopts.awr_beta = cfg.awr_beta;
  lopts.average_tokens = cfg.average_tokens;
  lopts.workers = cfg.workers;

  objectives::LossResult loss;
  try {
    loss = objectives::evaluate_loss(algo, groups, *state.policy, *old, lopts);
  } catch (const numeric_error& e) {
    throw numeric_error(e.what(),
                        abort_diagnostic(state, groups, *state.policy, *old, lopts, algo));
  }
  if (!std::isfinite(loss.report.loss_total) || !all_finite(loss.grad))
    throw numeric_error("non-finite loss or gradient at step " + std::to_string(m.step),
                        abort_diagnostic(state, groups, *state.policy, *old, lopts, algo));

  if (loss.report.fb_term_skipped && !state.warned_fb_skip) {
    std::cerr << "[dittolab] warning: feedback-group term skipped (group size 1)\n";
    state.warned_fb_skip = true;
  }

  m.loss_group = loss.report.loss_group;
  m.loss_fb = loss.report.loss_fb;
  m.loss_total = loss.report.loss_total;
  m.clip_fraction = loss.report.clip_fraction;
  m.max_ratio_dev = loss.report.max_ratio_dev;

  apply_update(state, loss.grad);

  std::vector<int> eval_indices = eval_prompt_indices(cfg, spec);
  m.eval_mean_reward = evaluate_policy(*state.policy, env, eval_indices);

  if (collected) *collected = std::move(groups);
  state.history.push_back(m);
  state.step += 1;
  return m;
}

namespace {

std::string csv_header(const envs::EnvSpec& spec) {
  std::ostringstream out;
  out << "step,algo,env,seed,mean_r_draft,mean_r_refined,gap";
  for (int d = 0; d < spec.rubric.size(); ++d) out << ",dim_" << d;
  out << ",loss_group,loss_fb,loss_total,clip_frac,eval_mean_reward\n";
  return out.str();
}

std::string csv_row(const TrainConfig& config, const StepMetrics& m) {
  std::ostringstream out;
  out << m.step << ',' << config.algo << ',' << config.env << ',' << config.seed << ','
      << format_double(m.mean_r_draft) << ',' << format_double(m.mean_r_refined) << ','
      << format_double(m.gap);
  for (double d : m.dim_means) out << ',' << format_double(d);
  out << ',' << format_double(m.loss_group) << ',' << format_double(m.loss_fb) << ','
      << format_double(m.loss_total) << ',' << format_double(m.clip_fraction) << ','
      << format_double(m.eval_mean_reward) << '\n';
  return out.str();
}

}  // namespace

std::string metrics_csv(const TrainConfig& config, std::span<const StepMetrics> metrics,
                        const envs::EnvSpec& spec) {
  std::string out = csv_header(spec);
  for (const StepMetrics& m : metrics) out += csv_row(config, m);
  return out;
}

namespace {

json step_metrics_to_json(const StepMetrics& m) {
  return json{{"step", m.step},
              {"mean_r_draft", m.mean_r_draft},
              {"mean_r_refined", m.mean_r_refined},
              {"gap", m.gap},
              {"dim_means", m.dim_means},
              {"loss_group", m.loss_group},
              {"loss_fb", m.loss_fb},
              {"loss_total", m.loss_total},
              {"clip_fraction", m.clip_fraction},
              {"eval_mean_reward", m.eval_mean_reward},
              {"max_ratio_dev", m.max_ratio_dev}};
}

StepMetrics step_metrics_from_json(const json& j) {
  StepMetrics m;
  m.step = j.at("step").get<int>();
  m.mean_r_draft = j.at("mean_r_draft").get<double>();
  m.mean_r_refined = j.at("mean_r_refined").get<double>();
  m.gap = j.at("gap").get<double>();
  m.dim_means = j.at("dim_means").get<std::vector<double>>();
  m.loss_group = j.at("loss_group").get<double>();
  m.loss_fb = j.at("loss_fb").get<double>();
  m.loss_total = j.at("loss_total").get<double>();
  m.clip_fraction = j.at("clip_fraction").get<double>();
  m.eval_mean_reward = j.at("eval_mean_reward").get<double>();
  m.max_ratio_dev = j.at("max_ratio_dev").get<double>();
  return m;
}

}  // namespace

json checkpoint_to_json(const TrainState& state) {
  json metrics = json::array();
  for (const StepMetrics& m : state.history) metrics.push_back(step_metrics_to_json(m));
  return json{{"format_version", 1},
              {"config", state.config.to_json()},
              {"step", state.step},
              {"policy", policy_to_json(*state.policy)},
              {"adam_m", state.adam_m},
              {"adam_v", state.adam_v},
              {"adam_steps", state.adam_steps},
              {"metrics", metrics}};
}

TrainState checkpoint_from_json(const json& j) {
  if (j.at("format_version").get<int>() != 1)
    throw config_error("unsupported checkpoint format version");
  TrainState state;
  state.config = TrainConfig::from_json(j.at("config")).resolved();
  state.step = j.at("step").get<int>();
  state.policy = policy_from_json(j.at("policy"));
  state.adam_m = j.at("adam_m").get<std::vector<double>>();
  state.adam_v = j.at("adam_v").get<std::vector<double>>();
  state.adam_steps = j.at("adam_steps").get<std::int64_t>();
  for (const json& m : j.at("metrics")) state.history.push_back(step_metrics_from_json(m));
  return state;
}

void write_file_atomic(const std::string& path, const std::string& content) {
  fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out << content;
    if (!out.flush()) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, target);
}

void save_checkpoint(const TrainState& state, const std::string& path) {
  write_file_atomic(path, checkpoint_to_json(state).dump());
}

TrainState load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw config_error("cannot open checkpoint " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw config_error("checkpoint " + path + " is not valid JSON");
  return checkpoint_from_json(j);
}

RunResult run(const TrainConfig& config, const RunOptions& opts) {
  TrainState state;
  if (!opts.resume_from.empty()) {
    state = load_checkpoint(opts.resume_from);
  } else {
    state = init_state(config);
  }
  const envs::EnvSpec& spec = envs::get_env(state.config.env).spec();
  bool io = !opts.out_dir.empty();
  fs::path out(opts.out_dir);

  std::ofstream partial;
  if (io) {
    fs::create_directories(out);
    write_file_atomic((out / "config.json").string(), state.config.to_json().dump(2) + "\n");
    partial.open(out / "metrics.partial.csv", std::ios::trunc);
    partial << metrics_csv(state.config, state.history, spec);
    partial.flush();
  }

  std::string trace;
  int printed_every = std::max(1, state.config.steps / 10);
  while (state.step < state.config.steps) {
    std::vector<TrainingGroup> groups;
    StepMetrics m;
    try {
      m = train_step(state, opts.trace_path.empty() ? nullptr : &groups);
    } catch (const numeric_error& e) {
      if (io && !e.diagnostic_json.empty()) {
        std::string path = (out / "numeric_abort.json").string();
        write_file_atomic(path, e.diagnostic_json + "\n");
        throw numeric_error(std::string(e.what()) + " (diagnostic: " + path + ")",
                            e.diagnostic_json);
      }
      throw;
    }
    if (!opts.trace_path.empty())
      for (const TrainingGroup& g : groups)
        for (const RolloutPair& pair : g.pairs)
          trace += trace_line(to_trace_record(g.prompt, pair)) + "\n";
    if (io) {
      partial << csv_row(state.config, m);
      partial.flush();
      if (opts.checkpoint_every > 0 && state.step % opts.checkpoint_every == 0 &&
          state.step < state.config.steps)
        save_checkpoint(state,
                        (out / ("checkpoint_step" + std::to_string(state.step) + ".json"))
                            .string());
    }
    if (opts.echo_progress && (state.step % printed_every == 0 ||
                               state.step == state.config.steps)) {
      std::cout << "step " << m.step << "/" << state.config.steps
                << " draft " << format_double(m.mean_r_draft)
                << " refined " << format_double(m.mean_r_refined)
                << " gap " << format_double(m.gap)
                << " eval " << format_double(m.eval_mean_reward) << "\n";
    }
  }

  if (io) {
    write_file_atomic((out / "metrics.csv").string(),
                      metrics_csv(state.config, state.history, spec));
    save_checkpoint(state, (out / "checkpoint_final.json").string());
    partial.close();
    fs::remove(out / "metrics.partial.csv");
    if (!opts.trace_path.empty()) write_file_atomic(opts.trace_path, trace);
  } else if (!opts.trace_path.empty()) {
    write_file_atomic(opts.trace_path, trace);
  }

  return RunResult{state.config, state.history};
}

double sign_test_p_greater(std::span<const double> diffs) {
  int n = 0, k = 0;
  for (double d : diffs) {
    if (d > 0.0) {
      ++n;
      ++k;
    } else if (d < 0.0) {
      ++n;
    }
  }
  if (n == 0) return 1.0;
  // P(X >= k), X ~ Binomial(n, 1/2).
  double coeff = 1.0;  // C(n, k)
  for (int j = 0; j < k; ++j) coeff *= static_cast<double>(n - j) / static_cast<double>(j + 1);
  double tail = 0.0, c = coeff;
  for (int j = k; j <= n; ++j) {
    tail += c;
    c *= static_cast<double>(n - j) / static_cast<double>(j + 1);
  }
  return tail * std::pow(0.5, n);
}

ComparisonReport build_comparison(const std::string& env,
                                  std::span<const CellResult> cells,
                                  std::span<const std::uint64_t> seeds,
                                  const envs::EnvSpec& spec) {
  ComparisonReport report;
  report.env = env;
  report.seeds.assign(seeds.begin(), seeds.end());

  std::vector<std::string> algo_order;
  for (const CellResult& cell : cells)
    if (std::find(algo_order.begin(), algo_order.end(), cell.algo) == algo_order.end())
      algo_order.push_back(cell.algo);

  for (const std::string& algo : algo_order) {
    AlgoSummary summary;
    summary.algo = algo;
    std::size_t steps = 0;
    for (const CellResult& cell : cells) {
      if (cell.algo != algo) continue;
      steps = std::max(steps, cell.metrics.size());
    }
    summary.gap_trajectory.assign(steps, 0.0);
    int cells_seen = 0;
    for (const CellResult& cell : cells) {
      if (cell.algo != algo) continue;
      const StepMetrics& last = cell.metrics.back();
      summary.final_eval_per_seed.push_back(last.eval_mean_reward);
      summary.final_dims_per_seed.push_back(last.dim_means);
      std::vector<double> gaps;
      for (const StepMetrics& m : cell.metrics) gaps.push_back(m.gap);
      summary.mean_gap_per_seed.push_back(mean(gaps));
      for (std::size_t t = 0; t < cell.metrics.size(); ++t)
        summary.gap_trajectory[t] += cell.metrics[t].gap;
      ++cells_seen;
    }
    for (double& g : summary.gap_trajectory) g /= static_cast<double>(cells_seen);
    summary.final_eval_mean = mean(summary.final_eval_per_seed);
    summary.final_eval_median = median(summary.final_eval_per_seed);
    summary.final_dim_means.assign(spec.rubric.size(), 0.0);
    for (const std::vector<double>& dims : summary.final_dims_per_seed)
      for (int d = 0; d < spec.rubric.size(); ++d) summary.final_dim_means[d] += dims[d];
    for (double& d : summary.final_dim_means)
      d /= static_cast<double>(summary.final_dims_per_seed.size());
    report.algos.push_back(std::move(summary));
  }

  // Paired one-sided sign tests between every ordered algorithm pair.
  for (const AlgoSummary& a : report.algos) {
    for (const AlgoSummary& b : report.algos) {
      if (a.algo == b.algo) continue;
      auto add_test = [&](const std::string& metric, std::span<const double> va,
                          std::span<const double> vb) {
        PairedComparison test;
        test.algo_a = a.algo;
        test.algo_b = b.algo;
        test.metric = metric;
        std::vector<double> diffs(va.size());
        for (std::size_t i = 0; i < va.size(); ++i) {
          diffs[i] = va[i] - vb[i];
          if (diffs[i] > 0.0)
            ++test.positive;
          else if (diffs[i] < 0.0)
            ++test.negative;
          else
            ++test.ties;
        }
        test.p_greater = sign_test_p_greater(diffs);
        report.tests.push_back(std::move(test));
      };
      add_test("eval_mean_reward", a.final_eval_per_seed, b.final_eval_per_seed);
      add_test("gap", a.mean_gap_per_seed, b.mean_gap_per_seed);
      for (int d = 0; d < spec.rubric.size(); ++d) {
        std::vector<double> va, vb;
        for (const auto& dims : a.final_dims_per_seed) va.push_back(dims[d]);
        for (const auto& dims : b.final_dims_per_seed) vb.push_back(dims[d]);
        add_test("dim_" + spec.rubric.dimensions[d].name, va, vb);
      }
    }
  }
  return report;
}

ComparisonReport compare(std::span<const TrainConfig> configs,
                         std::span<const std::uint64_t> seeds) {
  if (configs.size() < 2) throw config_error("compare needs at least two configs");
  if (seeds.empty()) throw config_error("compare needs at least one seed");
  json base = configs[0].to_json();
  base.erase("algo");
  for (const TrainConfig& c : configs) {
    if (c.env != configs[0].env)
      throw config_error("compare configs must share the same env");
    json other = c.to_json();
    other.erase("algo");
    if (other != base) throw config_error("compare configs may differ only in algo");
  }
  std::vector<CellResult> cells;
  for (const TrainConfig& c : configs) {
    for (std::uint64_t seed : seeds) {
      TrainConfig cell_config = c;
      cell_config.seed = seed;
      RunResult result = run(cell_config);
      cells.push_back(CellResult{c.algo, seed, std::move(result.metrics)});
    }
  }
  const envs::EnvSpec& spec = envs::get_env(configs[0].env).spec();
  return build_comparison(configs[0].env, cells, seeds, spec);
}

json comparison_to_json(const ComparisonReport& report) {
  json algos = json::array();
  for (const AlgoSummary& a : report.algos) {
    algos.push_back(json{{"algo", a.algo},
                         {"final_eval_per_seed", a.final_eval_per_seed},
                         {"final_eval_mean", a.final_eval_mean},
                         {"final_eval_median", a.final_eval_median},
                         {"final_dim_means", a.final_dim_means},
                         {"final_dims_per_seed", a.final_dims_per_seed},
                         {"mean_gap_per_seed", a.mean_gap_per_seed},
                         {"gap_trajectory", a.gap_trajectory}});
  }
  json tests = json::array();
  for (const PairedComparison& t : report.tests) {
    tests.push_back(json{{"algo_a", t.algo_a},
                         {"algo_b", t.algo_b},
                         {"metric", t.metric},
                         {"p_greater", t.p_greater},
                         {"positive", t.positive},
                         {"negative", t.negative},
                         {"ties", t.ties}});
  }
  json seeds = json::array();
  for (std::uint64_t s : report.seeds) seeds.push_back(s);
  return json{{"env", report.env}, {"seeds", seeds}, {"algos", algos}, {"sign_tests", tests}};
}

}  // namespace dittolab::trainer
