// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dittolab/envs.hpp"
#include "dittolab/objectives.hpp"
#include "dittolab/policy.hpp"

namespace dittolab::trainer {

struct TrainConfig {
  std::string algo = "ditto";
  std::string env = "secret_env";
  std::string policy = "tabular";
  int group_size = 8;
  int prompts_per_step = 64;
  double learning_rate = 0.0;  // 0 = per-policy default: 0.05 tabular, 0.01 mlp
  double clip_epsilon = 0.2;
  int steps = 100;
  std::uint64_t seed = 1;
  std::string optimizer = "sgd";  // sgd | adam(0.9, 0.999, 1e-8)
  double awr_beta = 1.0;
  bool average_tokens = false;
  int workers = 1;
  double eval_holdout_fraction = 0.0;  // 0 = evaluate on the full prompt space
  int mlp_hidden = 16;
  int mlp_embed = 8;
  bool feedback_enabled = true;

  void validate() const;          // throws config_error
  TrainConfig resolved() const;   // validates and fills the learning-rate default
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct StepMetrics {
  int step = 0;  // 1-based; metrics describe the state after this update
  double mean_r_draft = 0.0;
  double mean_r_refined = 0.0;
  double gap = 0.0;  // mean_r_refined - mean_r_draft, exactly
  std::vector<double> dim_means;  // per-dimension draft means
  double loss_group = 0.0;
  double loss_fb = 0.0;
  double loss_total = 0.0;
  double clip_fraction = 0.0;
  double eval_mean_reward = 0.0;     // greedy, plain context, eval prompt set
  double max_ratio_dev = 0.0;        // diagnostic; 0 on every step by snapshot timing
};

struct TrainState {
  TrainConfig config;  // resolved
  std::unique_ptr<Policy> policy;
  std::vector<double> adam_m, adam_v;
  std::int64_t adam_steps = 0;
  int step = 0;  // completed steps
  std::vector<StepMetrics> history;
  bool warned_fb_skip = false;
};

TrainState init_state(const TrainConfig& config);

// Prompt indices used for held-out greedy evaluation (the full space unless
// eval_holdout_fraction reserves a tail range).
std::vector<int> eval_prompt_indices(const TrainConfig& config, const envs::EnvSpec& spec);
int train_prompt_count(const TrainConfig& config, const envs::EnvSpec& spec);

/**
 * Samples G (draft, feedback, refined) pairs for one prompt. Sub-seeds are
 * chained per (rng_seed, prompt id, pair index, slot), so collection is
 * deterministic for any worker count. With use_feedback = false the judge's
 * hints are dropped and the refined rollout is drawn from the plain context.
 */
TrainingGroup collect_group(const Policy& policy, const envs::Environment& env,
                            const Prompt& prompt, int group_size,
                            std::uint64_t rng_seed, bool use_feedback = true);

// Seed fed to collect_group for a given step and batch slot.
std::uint64_t group_collection_seed(const TrainConfig& config, int step, int group_index);

// Snapshot, collect, compute the configured loss, apply one optimizer
// update, evaluate. Throws numeric_error (with a diagnostic JSON dump of the
// offending group) if the loss or gradient goes non-finite.
StepMetrics train_step(TrainState& state, std::vector<TrainingGroup>* collected = nullptr);

double evaluate_policy(const Policy& policy, const envs::Environment& env,
                       std::span<const int> prompt_indices);

struct RunOptions {
  std::string out_dir;        // empty = in-memory only
  int checkpoint_every = 0;   // additional checkpoints every N steps
  std::string trace_path;     // write a rollout-pair trace of every step
  bool echo_progress = false;
  std::string resume_from;    // checkpoint path; overrides `config`
};

struct RunResult {
  TrainConfig config;
  std::vector<StepMetrics> metrics;
};

RunResult run(const TrainConfig& config, const RunOptions& opts = {});

std::string metrics_csv(const TrainConfig& config, std::span<const StepMetrics> metrics,
                        const envs::EnvSpec& spec);

nlohmann::json checkpoint_to_json(const TrainState& state);
TrainState checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const TrainState& state, const std::string& path);
TrainState load_checkpoint(const std::string& path);

// Temp-file-plus-rename write; interrupted runs never leave truncated files.
void write_file_atomic(const std::string& path, const std::string& content);

// --- comparison sweeps ---

struct CellResult {
  std::string algo;
  std::uint64_t seed = 0;
  std::vector<StepMetrics> metrics;
};

struct AlgoSummary {
  std::string algo;
  std::vector<double> final_eval_per_seed;
  std::vector<std::vector<double>> final_dims_per_seed;  // [seed][dim]
  std::vector<double> mean_gap_per_seed;                 // averaged over steps
  std::vector<double> gap_trajectory;                    // per step, averaged over seeds
  double final_eval_mean = 0.0;
  double final_eval_median = 0.0;
  std::vector<double> final_dim_means;
};

struct PairedComparison {
  std::string algo_a, algo_b;
  std::string metric;
  double p_greater = 1.0;  // one-sided sign test for algo_a > algo_b
  int positive = 0, negative = 0, ties = 0;
};

struct ComparisonReport {
  std::string env;
  std::vector<std::uint64_t> seeds;
  std::vector<AlgoSummary> algos;
  std::vector<PairedComparison> tests;
};

// Exact one-sided sign test: P(#positives >= observed | no difference),
// ties dropped. Returns 1.0 when every difference is zero.
double sign_test_p_greater(std::span<const double> diffs);

ComparisonReport build_comparison(const std::string& env,
                                  std::span<const CellResult> cells,
                                  std::span<const std::uint64_t> seeds,
                                  const envs::EnvSpec& spec);

// Runs every (config, seed) cell in memory. Configs must differ only in algo.
ComparisonReport compare(std::span<const TrainConfig> configs,
                         std::span<const std::uint64_t> seeds);

nlohmann::json comparison_to_json(const ComparisonReport& report);

}  // namespace dittolab::trainer
