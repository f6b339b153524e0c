// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dittolab/core.hpp"

namespace dittolab::envs {

struct RubricDimension {
  int id = 0;
  std::string name;
  double weight = 0.0;
};

// Ordered scoring dimensions; weights are non-negative and sum to 1.
struct Rubric {
  std::vector<RubricDimension> dimensions;
  int size() const { return static_cast<int>(dimensions.size()); }
};

struct EnvSpec {
  std::string env_id;
  int vocab_size = 0;      // trajectory tokens, EOS included
  int max_len = 0;         // maximum trajectory length, EOS included
  Rubric rubric;
  int prompt_space_size = 0;

  // Feedback hint tokens live in a reserved range directly above the
  // trajectory vocabulary, so plain and feedback-conditioned contexts can
  // never collide.
  int feedback_token_base() const { return vocab_size; }
  int feedback_token_count() const { return rubric.size() + kSeverityBuckets; }
  int extended_vocab_size() const { return vocab_size + feedback_token_count(); }

  static constexpr int kSeverityBuckets = 2;
};

/**
 * A synthetic judged environment: deterministic prompts, a pure
 * multi-dimensional scoring function, and structured feedback derived from
 * the scores. Stateless; all member functions are safe to call concurrently.
 */
class Environment {
 public:
  virtual ~Environment() = default;

  virtual const EnvSpec& spec() const = 0;

  // One score per rubric dimension. Tokens must be valid for this env.
  virtual std::vector<double> score(const Prompt& prompt,
                                    std::span<const token_id> tokens) const = 0;

  // Coarse severity bucket of the worst-scoring dimension.
  virtual int severity_bucket(double worst_score) const {
    return worst_score < 0.0 ? 1 : 0;
  }

  // Deterministic prompt for (env, index); distinct indices give distinct
  // prompts. Throws std::out_of_range outside [0, prompt_space_size).
  Prompt make_prompt(int index) const;

 protected:
  virtual std::vector<token_id> prompt_tokens(int index) const = 0;
};

struct JudgeResult {
  std::vector<double> reward_vec;
  Feedback feedback;
};

// (r, h) from the judge: a pure function of (prompt, tokens). The hint names
// the worst-scoring dimension (ties broken by lowest dimension id) plus a
// severity bucket, both as reserved-range tokens.
JudgeResult judge(const Environment& env, const Prompt& prompt,
                  std::span<const token_id> tokens);

// Weighted sum of the reward vector under the rubric.
double scalarize(const Rubric& rubric, std::span<const double> reward_vec);

// Composite conditioning context. Absent feedback is the identity on the
// prompt; equal feedback signatures render identically.
EvalContext render_feedback_context(const Prompt& prompt, const Feedback* feedback);

// Rubric + feedback-token mapping as JSON, for fixtures and the CLI.
nlohmann::json env_dump(const Environment& env);

const Environment& get_env(const std::string& env_id);  // config_error if unknown
std::vector<std::string> registered_envs();

}  // namespace dittolab::envs
