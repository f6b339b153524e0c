// SPDX-License-Identifier: Apache-2.0
#include "dittolab/oracle.hpp"

#include <cmath>
#include <string>

namespace dittolab::oracle {

using nlohmann::json;

namespace {

double space_size(int vocab, int max_len) {
  double n = 1.0;
  for (int i = 0; i < max_len; ++i) n *= vocab;
  return n;
}

void enumerate_from(const Policy& policy, const envs::Environment& env,
                    const Prompt& prompt, const EvalContext& ctx,
                    std::vector<token_id>& prefix, double prob,
                    EnumerationResult& out) {
  const int max_len = env.spec().max_len;
  ContextKey key = make_key(ctx, prefix);
  std::vector<double> probs = softmax(policy.logits(key));
  for (int a = 0; a < static_cast<int>(probs.size()); ++a) {
    double p = prob * probs[a];
    prefix.push_back(static_cast<token_id>(a));
    bool terminal = (a == kEosToken) || (static_cast<int>(prefix.size()) == max_len);
    if (terminal) {
      EnumeratedTrajectory traj;
      traj.tokens = prefix;
      traj.probability = p;
      traj.reward_vec = env.score(prompt, prefix);
      traj.reward = envs::scalarize(env.spec().rubric, traj.reward_vec);
      out.trajectories.push_back(std::move(traj));
    } else {
      enumerate_from(policy, env, prompt, ctx, prefix, p, out);
    }
    prefix.pop_back();
  }
}

}  // namespace

EnumerationResult enumerate(const Policy& policy, const envs::Environment& env,
                            const Prompt& prompt, const Feedback* feedback) {
  const envs::EnvSpec& s = env.spec();
  double size = space_size(s.vocab_size, s.max_len);
  if (size > 1e6)
    throw config_error("trajectory space too large to enumerate (~" +
                       std::to_string(size) + " > 1e6)");
  EnumerationResult out;
  EvalContext ctx = envs::render_feedback_context(prompt, feedback);
  std::vector<token_id> prefix;
  enumerate_from(policy, env, prompt, ctx, prefix, 1.0, out);

  for (std::size_t i = 0; i < out.trajectories.size(); ++i) {
    const EnumeratedTrajectory& t = out.trajectories[i];
    out.total_probability += t.probability;
    out.expected_reward += t.probability * t.reward;
    if (t.reward > out.trajectories[out.argmax_index].reward) out.argmax_index = i;
  }
  out.optimal_reward = out.trajectories[out.argmax_index].reward;
  return out;
}

std::vector<double> exact_gradient(Policy& policy, const envs::Environment& env,
                                   const Prompt& prompt) {
  EnumerationResult res = enumerate(policy, env, prompt);
  EvalContext ctx = plain_context(prompt);
  // grad J = sum_y p(y) r(y) grad log p(y)
  LogitGradAccumulator acc;
  for (const EnumeratedTrajectory& traj : res.trajectories) {
    double w = traj.probability * traj.reward;
    if (w == 0.0) continue;
    std::vector<token_id> prefix;
    for (token_id t : traj.tokens) {
      ContextKey key = make_key(ctx, prefix);
      std::vector<double> p = softmax(policy.logits(key));
      std::vector<double>& slot = acc.slot(key, policy.vocab_size());
      for (int a = 0; a < policy.vocab_size(); ++a) slot[a] -= w * p[a];
      slot[t] += w;
      prefix.push_back(t);
    }
  }
  return acc.to_dense(policy);
}

std::vector<double> finite_diff_gradient(const std::function<double()>& loss_fn,
                                         Policy& policy, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite difference step must be > 0");
  std::size_t n = policy.param_count();
  std::vector<double> grad(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double original = policy.param(i);
    policy.set_param(i, original + step);
    double up = loss_fn();
    policy.set_param(i, original - step);
    double down = loss_fn();
    policy.set_param(i, original);
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

double relative_error(std::span<const double> a, std::span<const double> b,
                      double floor) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    diff += d * d;
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  double denom = std::max(std::sqrt(na) + std::sqrt(nb), floor);
  return std::sqrt(diff) / denom;
}

nlohmann::json enumeration_to_json(const EnumerationResult& result) {
  json trajectories = json::array();
  for (const EnumeratedTrajectory& t : result.trajectories)
    trajectories.push_back({{"tokens", t.tokens},
                            {"probability", t.probability},
                            {"reward_vec", t.reward_vec},
                            {"reward", t.reward}});
  return json{{"total_probability", result.total_probability},
              {"expected_reward", result.expected_reward},
              {"optimal_reward", result.optimal_reward},
              {"argmax_tokens", result.argmax().tokens},
              {"trajectories", trajectories}};
}

}  // namespace dittolab::oracle
