// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "dittolab/core.hpp"
#include "dittolab/policy.hpp"

namespace dittolab::objectives {

// Group-relative advantages over a joint group. Non-degenerate sets have
// mean 0 and population standard deviation 1 by construction; groups with
// sigma below 1e-8 are degenerate and carry all-zero advantages.
struct AdvantageSet {
  std::vector<std::array<double, 2>> a;  // a[i][j], j = 0 draft / 1 refined
  double mu = 0.0;
  double sigma = 0.0;
  bool degenerate = false;

  double at(int i, int j) const { return a[i][j]; }
};

struct ClipConfig {
  double epsilon = 0.2;
};

struct LossReport {
  double loss_group = 0.0;
  double loss_fb = 0.0;
  double loss_total = 0.0;
  // Diagnostics over all ratio-bearing tokens of the batch.
  double clip_fraction = 0.0;
  double mean_ratio = 1.0;
  double max_ratio_dev = 0.0;  // max |rho - 1|; exactly 0 right after snapshotting
  std::int64_t ratio_tokens = 0;
  std::int64_t clipped_tokens = 0;
  bool fb_term_skipped = false;  // G = 1 group seen by an algorithm with an fb term
};

// mu and population sigma over all 2G rewards; A = (r - mu) / sigma.
AdvantageSet joint_advantages(const TrainingGroup& group);

// Advantages over the refined rewards alone. Throws config_error for G < 2
// (callers with an optional fb term skip it instead).
std::vector<double> fb_advantages(const TrainingGroup& group);

// min(rho * A, clip(rho, 1-eps, 1+eps) * A). Throws numeric_error on a
// non-positive ratio, which signals logprob corruption upstream.
double clipped_token_term(double ratio, double advantage, ClipConfig clip);

enum class Algorithm {
  kDitto,
  kGrpo,
  kDittoY1Only,
  kRltfSd,
  kErlSft,
  kSdpoToken,
  kSdpoLogits,
  kSdpoPlusToken,
  kSdpoPlusLogits,
};

Algorithm algorithm_from_id(const std::string& id);  // config_error if unknown
const std::vector<std::string>& algorithm_ids();
std::string algorithm_id(Algorithm algo);

struct LossOptions {
  ClipConfig clip;
  double awr_beta = 1.0;       // RLTF-SD exponential advantage temperature
  bool average_tokens = false; // mean instead of sum over each term's tokens
  int workers = 1;
};

struct LossResult {
  LossReport report;
  std::vector<double> grad;  // dense over live.param_count()
};

/**
 * Loss and exact parameter gradient of the selected algorithm over a batch
 * of groups. Per-group evaluation is pure and may run in parallel; partial
 * results merge in group index order, so the output is byte-identical for
 * any worker count. Ratios are taken against `old_snapshot`, the policy as
 * of collection time.
 */
LossResult evaluate_loss(Algorithm algo, std::span<const TrainingGroup> groups,
                         Policy& live, const Policy& old_snapshot,
                         const LossOptions& opts);

// Named entry points mirroring the algorithm roster.
LossResult loss_ditto(std::span<const TrainingGroup> groups, Policy& live,
                      const Policy& old_snapshot, const LossOptions& opts = {});
LossResult loss_grpo(std::span<const TrainingGroup> groups, Policy& live,
                     const Policy& old_snapshot, const LossOptions& opts = {});
LossResult loss_ditto_y1_only(std::span<const TrainingGroup> groups, Policy& live,
                              const Policy& old_snapshot, const LossOptions& opts = {});
LossResult loss_rltf_sd(std::span<const TrainingGroup> groups, Policy& live,
                        const Policy& old_snapshot, const LossOptions& opts = {});
LossResult loss_erl_sft(std::span<const TrainingGroup> groups, Policy& live,
                        const Policy& old_snapshot, const LossOptions& opts = {});
LossResult loss_sdpo(std::span<const TrainingGroup> groups, Policy& live,
                     const Policy& old_snapshot, bool token_level, bool combine_grpo,
                     const LossOptions& opts = {});

}  // namespace dittolab::objectives
