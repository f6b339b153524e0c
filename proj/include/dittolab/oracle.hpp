// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <optional>
#include <vector>

#include <json.hpp>

#include "dittolab/envs.hpp"
#include "dittolab/policy.hpp"

namespace dittolab::oracle {

// One terminating trajectory with its exact probability and judged rewards.
struct EnumeratedTrajectory {
  std::vector<token_id> tokens;
  double probability = 0.0;
  std::vector<double> reward_vec;
  double reward = 0.0;
};

struct EnumerationResult {
  std::vector<EnumeratedTrajectory> trajectories;
  double total_probability = 0.0;
  double expected_reward = 0.0;
  double optimal_reward = 0.0;
  std::size_t argmax_index = 0;

  const EnumeratedTrajectory& argmax() const { return trajectories[argmax_index]; }
};

/**
 * Exhaustively enumerates every terminating trajectory (EOS-terminated or
 * cut at max_len), with exact probabilities from the policy and exact
 * rewards from the judge. Refuses (config_error, with a size estimate) when
 * vocab^max_len exceeds 10^6. The EOS convention matches the sampler token
 * for token, so any divergence is a bug, not a tolerance.
 */
EnumerationResult enumerate(const Policy& policy, const envs::Environment& env,
                            const Prompt& prompt, const Feedback* feedback = nullptr);

// Exact policy gradient of the expected reward under the plain context,
// via the likelihood-ratio identity over the enumerated space.
std::vector<double> exact_gradient(Policy& policy, const envs::Environment& env,
                                   const Prompt& prompt);

// Central finite differences of an arbitrary scalar over all policy
// parameters. Backs every gradient-correctness test in the project.
std::vector<double> finite_diff_gradient(const std::function<double()>& loss_fn,
                                         Policy& policy, double step = 1e-5);

// Normwise relative disagreement: ||a - b|| / max(||a|| + ||b||, floor).
double relative_error(std::span<const double> a, std::span<const double> b,
                      double floor = 1e-10);

nlohmann::json enumeration_to_json(const EnumerationResult& result);

}  // namespace dittolab::oracle
