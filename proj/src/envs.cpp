// SPDX-License-Identifier: Apache-2.0
#include "dittolab/envs.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dittolab::envs {

using nlohmann::json;

Prompt Environment::make_prompt(int index) const {
  const EnvSpec& s = spec();
  if (index < 0 || index >= s.prompt_space_size)
    throw std::out_of_range("prompt index " + std::to_string(index) + " outside [0, " +
                            std::to_string(s.prompt_space_size) + ") for " + s.env_id);
  Prompt p;
  p.id = index;
  p.tokens = prompt_tokens(index);
  p.env_id = s.env_id;
  return p;
}

JudgeResult judge(const Environment& env, const Prompt& prompt,
                  std::span<const token_id> tokens) {
  const EnvSpec& s = env.spec();
  for (token_id t : tokens)
    if (t < 0 || t >= s.vocab_size)
      throw std::invalid_argument("token " + std::to_string(t) + " outside vocabulary of " +
                                  s.env_id);
  if (static_cast<int>(tokens.size()) > s.max_len)
    throw std::invalid_argument("trajectory longer than max_len for " + s.env_id);

  JudgeResult result;
  result.reward_vec = env.score(prompt, tokens);

  // Worst dimension = minimum raw score, ties to the lowest dimension id.
  int worst = 0;
  for (int d = 1; d < s.rubric.size(); ++d)
    if (result.reward_vec[d] < result.reward_vec[worst]) worst = d;
  int severity = env.severity_bucket(result.reward_vec[worst]);

  std::vector<std::pair<int, double>> scores;
  scores.reserve(result.reward_vec.size());
  for (int d = 0; d < s.rubric.size(); ++d)
    scores.emplace_back(s.rubric.dimensions[d].id, result.reward_vec[d]);

  std::vector<token_id> hints = {
      static_cast<token_id>(s.feedback_token_base() + worst),
      static_cast<token_id>(s.feedback_token_base() + s.rubric.size() + severity)};
  result.feedback = Feedback::make(std::move(scores), std::move(hints));
  return result;
}

double scalarize(const Rubric& rubric, std::span<const double> reward_vec) {
  if (static_cast<int>(reward_vec.size()) != rubric.size())
    throw std::invalid_argument("reward vector length does not match rubric");
  double total = 0.0;
  for (int d = 0; d < rubric.size(); ++d)
    total += rubric.dimensions[d].weight * reward_vec[d];
  return total;
}

EvalContext render_feedback_context(const Prompt& prompt, const Feedback* feedback) {
  EvalContext ctx = plain_context(prompt);
  if (feedback != nullptr) {
    ctx.feedback_signature = feedback->signature;
    ctx.hint_tokens = feedback->hint_tokens;
  }
  return ctx;
}

namespace {

bool contains(std::span<const token_id> tokens, token_id t) {
  return std::find(tokens.begin(), tokens.end(), t) != tokens.end();
}

bool has_immediate_repeat(std::span<const token_id> tokens) {
  for (std::size_t i = 1; i < tokens.size(); ++i)
    if (tokens[i] == tokens[i - 1]) return true;
  return false;
}

// Per-prompt target and secret token; scoring mirrors a goal/secret/style
// trade-off. goal = 1 if the target token appears; secret = -1 if the secret
// token appears; style = -1 on any immediate repeat.
class SecretEnv final : public Environment {
 public:
  SecretEnv() {
    spec_.env_id = "secret_env";
    spec_.vocab_size = 6;
    spec_.max_len = 3;
    spec_.rubric.dimensions = {{0, "goal", 0.5}, {1, "secret", 0.3}, {2, "style", 0.2}};
    // Ordered (target, secret) pairs of distinct content tokens 1..5.
    spec_.prompt_space_size = 20;
  }

  const EnvSpec& spec() const override { return spec_; }

  std::vector<double> score(const Prompt& prompt,
                            std::span<const token_id> tokens) const override {
    auto [target, secret] = target_secret(static_cast<int>(prompt.id));
    double goal = contains(tokens, target) ? 1.0 : 0.0;
    double leak = contains(tokens, secret) ? -1.0 : 0.0;
    double style = has_immediate_repeat(tokens) ? -1.0 : 0.0;
    return {goal, leak, style};
  }

 private:
  std::pair<token_id, token_id> target_secret(int index) const {
    int target = 1 + index / 4;
    int k = index % 4;
    int secret = 1 + k + (k + 1 > target - 1 ? 1 : 0);  // skip the target slot
    return {static_cast<token_id>(target), static_cast<token_id>(secret)};
  }

  std::vector<token_id> prompt_tokens(int index) const override {
    auto [target, secret] = target_secret(index);
    return {target, secret};
  }

  EnvSpec spec_;
};

// Single-dimension copying task: reward = fraction of target-string
// positions reproduced. Used for oracle and convergence checks.
class CopyEnv final : public Environment {
 public:
  CopyEnv() {
    spec_.env_id = "copy_env";
    spec_.vocab_size = 4;
    spec_.max_len = 3;
    spec_.rubric.dimensions = {{0, "match", 1.0}};
    spec_.prompt_space_size = 16;
  }

  const EnvSpec& spec() const override { return spec_; }

  std::vector<double> score(const Prompt& prompt,
                            std::span<const token_id> tokens) const override {
    const std::vector<token_id>& target = prompt.tokens;
    std::size_t overlap = std::min(tokens.size(), target.size());
    int matched = 0;
    for (std::size_t i = 0; i < overlap; ++i)
      if (tokens[i] == target[i]) ++matched;
    return {static_cast<double>(matched) / static_cast<double>(target.size())};
  }

  // Fractional scores never go negative; split the bucket at half-matched.
  int severity_bucket(double worst_score) const override {
    return worst_score < 0.5 ? 1 : 0;
  }

 private:
  std::vector<token_id> prompt_tokens(int index) const override {
    // Target string of max_len content tokens from {1, 2, 3}, base-3 digits.
    std::vector<token_id> target(spec_.max_len);
    int v = index;
    for (int i = 0; i < spec_.max_len; ++i) {
      target[i] = static_cast<token_id>(1 + v % 3);
      v /= 3;
    }
    return target;
  }

  EnvSpec spec_;
};

const std::vector<const Environment*>& builtin_envs() {
  static const SecretEnv secret;
  static const CopyEnv copy;
  static const std::vector<const Environment*> all = {&secret, &copy};
  return all;
}

}  // namespace

const Environment& get_env(const std::string& env_id) {
  for (const Environment* env : builtin_envs())
    if (env->spec().env_id == env_id) return *env;
  std::string known;
  for (const Environment* env : builtin_envs()) {
    if (!known.empty()) known += ", ";
    known += env->spec().env_id;
  }
  throw config_error("unknown env '" + env_id + "' (registered: " + known + ")");
}

std::vector<std::string> registered_envs() {
  std::vector<std::string> ids;
  for (const Environment* env : builtin_envs()) ids.push_back(env->spec().env_id);
  return ids;
}

nlohmann::json env_dump(const Environment& env) {
  const EnvSpec& s = env.spec();
  json rubric = json::array();
  for (const RubricDimension& d : s.rubric.dimensions)
    rubric.push_back({{"id", d.id}, {"name", d.name}, {"weight", d.weight}});
  json worst_dim_tokens = json::object();
  for (const RubricDimension& d : s.rubric.dimensions)
    worst_dim_tokens[d.name] = s.feedback_token_base() + d.id;
  json severity_tokens = json::object();
  for (int b = 0; b < EnvSpec::kSeverityBuckets; ++b)
    severity_tokens[std::to_string(b)] = s.feedback_token_base() + s.rubric.size() + b;
  return json{{"env_id", s.env_id},
              {"vocab_size", s.vocab_size},
              {"max_len", s.max_len},
              {"eos_token", kEosToken},
              {"prompt_space_size", s.prompt_space_size},
              {"rubric", rubric},
              {"feedback_token_base", s.feedback_token_base()},
              {"feedback_token_count", s.feedback_token_count()},
              {"worst_dimension_tokens", worst_dim_tokens},
              {"severity_tokens", severity_tokens}};
}

}  // namespace dittolab::envs
