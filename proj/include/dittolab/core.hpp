// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dittolab/common.hpp"

namespace dittolab {

// A training context: one task instance of an environment.
struct Prompt {
  std::int64_t id = 0;
  std::vector<token_id> tokens;
  std::string env_id;
};

// Structured judge output: ordered per-dimension scores plus discrete hint
// tokens drawn from the environment's reserved feedback range. An empty hint
// sequence means "no feedback" and carries signature 0, which renders to the
// plain context.
struct Feedback {
  std::vector<std::pair<int, double>> dimension_scores;  // (dimension_id, score)
  std::vector<token_id> hint_tokens;
  std::uint64_t signature = 0;

  static Feedback make(std::vector<std::pair<int, double>> scores,
                       std::vector<token_id> hints);
};

// Signature contract: pure function of the hint tokens, nonzero for any
// non-empty hint sequence, zero for the empty one.
std::uint64_t feedback_signature(std::span<const token_id> hint_tokens);

enum class ContextKind { kPlain, kFeedbackConditioned };

// A sampled token trajectory with the per-token log-probabilities recorded
// under the exact context it was sampled from.
struct Rollout {
  std::vector<token_id> tokens;
  std::vector<double> logprobs;
  ContextKind context_kind = ContextKind::kPlain;

  double total_logprob() const {
    double s = 0.0;
    for (double lp : logprobs) s += lp;
    return s;
  }
};

struct RolloutPair {
  Rollout draft;
  Feedback feedback;
  Rollout refined;
  double r_draft = 0.0;
  double r_refined = 0.0;
  std::vector<double> reward_vec_draft;
  std::vector<double> reward_vec_refined;
};

// G rollout pairs for one prompt; the unit over which advantages are
// normalized. G = 1 (a joint group of two samples) is permitted.
struct TrainingGroup {
  Prompt prompt;
  std::vector<RolloutPair> pairs;

  int size() const { return static_cast<int>(pairs.size()); }
};

// Throws std::invalid_argument on a malformed group (shape mismatches,
// positive logprobs, draft/refined context kinds inconsistent with the
// pair's feedback signature).
void validate_group(const TrainingGroup& group);

// Flat reward vector [r_{1,0}, r_{1,1}, r_{2,0}, r_{2,1}, ...]: pair order,
// draft before refined, so flat index 2i+j addresses advantage (i, j).
std::vector<double> flatten_rewards(const TrainingGroup& group);

// Stable dedup/logging key over (prompt id, all token sequences, all
// feedback signatures). Equal groups hash equal across process restarts.
std::uint64_t group_signature(const TrainingGroup& group);

// Conditioning for one policy evaluation. feedback_signature == 0 and empty
// hint_tokens denote the plain context.
struct EvalContext {
  std::int64_t prompt_id = 0;
  std::uint64_t feedback_signature = 0;
  std::vector<token_id> prompt_tokens;
  std::vector<token_id> hint_tokens;
};

EvalContext plain_context(const Prompt& prompt);

// --- rollout-pair trace (line-delimited JSON) ---

struct TraceRecord {
  std::int64_t prompt_id = 0;
  std::vector<token_id> draft_tokens;
  std::vector<token_id> hint_tokens;
  std::vector<token_id> refined_tokens;
  double r_draft = 0.0;
  double r_refined = 0.0;
  std::vector<double> dim_scores;  // draft reward vector, dimension order
};

TraceRecord to_trace_record(const Prompt& prompt, const RolloutPair& pair);
std::string trace_line(const TraceRecord& record);
// Throws trace_error (with the supplied 1-based line number) on bad input.
TraceRecord parse_trace_line(const std::string& line, int line_number);

}  // namespace dittolab
