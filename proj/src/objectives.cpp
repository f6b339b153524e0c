// SPDX-License-Identifier: Apache-2.0
#include "dittolab/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "dittolab/envs.hpp"

namespace dittolab::objectives {

namespace {

constexpr double kSigmaFloor = 1e-8;

struct Normalized {
  std::vector<double> a;
  double mu = 0.0;
  double sigma = 0.0;
  bool degenerate = false;
};

Normalized normalize_population(std::span<const double> values) {
  Normalized out;
  double mu = 0.0;
  for (double v : values) mu += v;
  mu /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mu) * (v - mu);
  var /= static_cast<double>(values.size());
  out.mu = mu;
  out.sigma = std::sqrt(var);
  out.degenerate = out.sigma < kSigmaFloor;
  out.a.resize(values.size(), 0.0);
  if (!out.degenerate)
    for (std::size_t i = 0; i < values.size(); ++i) out.a[i] = (values[i] - mu) / out.sigma;
  return out;
}

// Accumulated state of one group's loss evaluation. dl carries every
// within-group scaling already; the merge step applies only the cross-group
// normalization, in group index order.
struct GroupEval {
  double loss_group = 0.0;
  double loss_fb = 0.0;
  LogitGradAccumulator dl;
  std::int64_t ratio_tokens = 0;
  std::int64_t clipped_tokens = 0;
  double ratio_sum = 0.0;
  double max_ratio_dev = 0.0;
  double erl_sum = 0.0;  // unnormalized; ERL averages over accepted pairs globally
  int erl_accepted = 0;
  bool fb_skipped = false;
};

// Clipped surrogate for one rollout: adds -min(rho*A, clip(rho)*A) per token
// into `loss` and the matching gradient into `dl`. The gradient flows only
// through the unclipped branch.
void add_clipped_rollout(const Policy& live, const Policy& old, const EvalContext& ctx,
                         std::span<const token_id> tokens, double advantage,
                         double eps, double& loss, LogitGradAccumulator& dl,
                         GroupEval& stats) {
  std::vector<token_id> prefix;
  for (token_id t : tokens) {
    ContextKey key = make_key(ctx, prefix);
    std::vector<double> lp_live = log_softmax(live.logits(key));
    std::vector<double> lp_old = log_softmax(old.logits(key));
    double rho = std::exp(lp_live[t] - lp_old[t]);
    if (!(rho > 0.0) || !std::isfinite(rho))
      throw numeric_error("non-positive or non-finite policy ratio");
    double unclipped = rho * advantage;
    double clipped = std::clamp(rho, 1.0 - eps, 1.0 + eps) * advantage;
    stats.ratio_tokens += 1;
    stats.ratio_sum += rho;
    stats.max_ratio_dev = std::max(stats.max_ratio_dev, std::abs(rho - 1.0));
    if (unclipped <= clipped) {
      loss -= unclipped;
      double coef = -advantage * rho;  // d(-rho*A)/dlogit = -A*rho*(indicator - p)
      if (coef != 0.0) {
        std::vector<double>& slot = dl.slot(key, live.vocab_size());
        for (int a = 0; a < live.vocab_size(); ++a) slot[a] -= coef * std::exp(lp_live[a]);
        slot[t] += coef;
      }
    } else {
      loss -= clipped;  // constant branch: no gradient through rho
      stats.clipped_tokens += 1;
    }
    prefix.push_back(t);
  }
}

// Negative log-likelihood of a rollout under `ctx`, weighted by `weight`.
void add_weighted_nll(const Policy& live, const EvalContext& ctx,
                      std::span<const token_id> tokens, double weight, double& loss,
                      LogitGradAccumulator& dl) {
  std::vector<token_id> prefix;
  for (token_id t : tokens) {
    ContextKey key = make_key(ctx, prefix);
    std::vector<double> lp = log_softmax(live.logits(key));
    loss += -weight * lp[t];
    if (weight != 0.0) {
      std::vector<double>& slot = dl.slot(key, live.vocab_size());
      for (int a = 0; a < live.vocab_size(); ++a) slot[a] += weight * std::exp(lp[a]);
      slot[t] -= weight;
    }
    prefix.push_back(t);
  }
}

// Per-position reverse KL(student || teacher) along a refined trajectory.
// Student: live policy, plain context. Teacher: snapshot policy under the
// feedback context, gradient-stopped by construction.
void add_reverse_kl(const Policy& live, const Policy& old, const EvalContext& plain,
                    const EvalContext& fb_ctx, std::span<const token_id> tokens,
                    double& loss, LogitGradAccumulator& dl) {
  std::vector<token_id> prefix;
  for (token_id t : tokens) {
    ContextKey skey = make_key(plain, prefix);
    ContextKey tkey = make_key(fb_ctx, prefix);
    std::vector<double> lp_s = log_softmax(live.logits(skey));
    std::vector<double> lp_t = log_softmax(old.logits(tkey));
    double kl = 0.0;
    for (std::size_t a = 0; a < lp_s.size(); ++a)
      kl += std::exp(lp_s[a]) * (lp_s[a] - lp_t[a]);
    loss += kl;
    std::vector<double>& slot = dl.slot(skey, live.vocab_size());
    for (std::size_t a = 0; a < lp_s.size(); ++a)
      slot[a] += std::exp(lp_s[a]) * ((lp_s[a] - lp_t[a]) - kl);
    prefix.push_back(t);
  }
}

double token_scale(bool average_tokens, std::int64_t count) {
  if (!average_tokens) return 1.0;
  return count > 0 ? 1.0 / static_cast<double>(count) : 1.0;
}

std::int64_t rollout_tokens_group(const TrainingGroup& g, bool drafts, bool refined) {
  std::int64_t n = 0;
  for (const RolloutPair& p : g.pairs) {
    if (drafts) n += static_cast<std::int64_t>(p.draft.tokens.size());
    if (refined) n += static_cast<std::int64_t>(p.refined.tokens.size());
  }
  return n;
}

// L_group over the joint 2G set, both slots evaluated under the plain
// context (distillation semantics), advantages from the joint group.
void add_joint_group_term(const TrainingGroup& group, const Policy& live,
                          const Policy& old, const LossOptions& opts, GroupEval& ge) {
  AdvantageSet adv = joint_advantages(group);
  EvalContext plain = plain_context(group.prompt);
  double loss = 0.0;
  LogitGradAccumulator dl;
  for (int i = 0; i < group.size(); ++i) {
    const RolloutPair& pair = group.pairs[i];
    add_clipped_rollout(live, old, plain, pair.draft.tokens, adv.at(i, 0),
                        opts.clip.epsilon, loss, dl, ge);
    add_clipped_rollout(live, old, plain, pair.refined.tokens, adv.at(i, 1),
                        opts.clip.epsilon, loss, dl, ge);
  }
  double s = token_scale(opts.average_tokens, rollout_tokens_group(group, true, true));
  ge.loss_group += s * loss;
  ge.dl.add_scaled(dl, s);
}

// L_fb: clipped objective over refined rollouts alone, ratios under the
// feedback-conditioned context, advantages normalized within the refined set.
void add_fb_group_term(const TrainingGroup& group, const Policy& live,
                       const Policy& old, const LossOptions& opts, GroupEval& ge) {
  if (group.size() < 2) {
    ge.fb_skipped = true;
    return;
  }
  std::vector<double> adv = fb_advantages(group);
  double loss = 0.0;
  LogitGradAccumulator dl;
  for (int i = 0; i < group.size(); ++i) {
    const RolloutPair& pair = group.pairs[i];
    EvalContext fb_ctx = envs::render_feedback_context(group.prompt, &pair.feedback);
    add_clipped_rollout(live, old, fb_ctx, pair.refined.tokens, adv[i],
                        opts.clip.epsilon, loss, dl, ge);
  }
  double s = token_scale(opts.average_tokens, rollout_tokens_group(group, false, true));
  ge.loss_fb += s * loss;
  ge.dl.add_scaled(dl, s);
}

// GRPO over drafts only: advantages normalized across the G draft rewards.
void add_draft_group_term(const TrainingGroup& group, const Policy& live,
                          const Policy& old, const LossOptions& opts, GroupEval& ge) {
  std::vector<double> rewards;
  for (const RolloutPair& p : group.pairs) rewards.push_back(p.r_draft);
  Normalized adv = normalize_population(rewards);
  EvalContext plain = plain_context(group.prompt);
  double loss = 0.0;
  LogitGradAccumulator dl;
  for (int i = 0; i < group.size(); ++i)
    add_clipped_rollout(live, old, plain, group.pairs[i].draft.tokens, adv.a[i],
                        opts.clip.epsilon, loss, dl, ge);
  double s = token_scale(opts.average_tokens, rollout_tokens_group(group, true, false));
  ge.loss_group += s * loss;
  ge.dl.add_scaled(dl, s);
}

GroupEval eval_group_ditto(const TrainingGroup& group, const Policy& live,
                           const Policy& old, const LossOptions& opts) {
  GroupEval ge;
  add_joint_group_term(group, live, old, opts, ge);
  add_fb_group_term(group, live, old, opts, ge);
  return ge;
}

GroupEval eval_group_grpo(const TrainingGroup& group, const Policy& live,
                          const Policy& old, const LossOptions& opts) {
  GroupEval ge;
  add_draft_group_term(group, live, old, opts, ge);
  return ge;
}

GroupEval eval_group_y1_only(const TrainingGroup& group, const Policy& live,
                             const Policy& old, const LossOptions& opts) {
  GroupEval ge;
  std::vector<double> rewards;
  for (const RolloutPair& p : group.pairs) rewards.push_back(p.r_refined);
  Normalized adv = normalize_population(rewards);
  EvalContext plain = plain_context(group.prompt);
  double loss = 0.0;
  LogitGradAccumulator dl;
  for (int i = 0; i < group.size(); ++i)
    add_clipped_rollout(live, old, plain, group.pairs[i].refined.tokens, adv.a[i],
                        opts.clip.epsilon, loss, dl, ge);
  double s = token_scale(opts.average_tokens, rollout_tokens_group(group, false, true));
  ge.loss_group += s * loss;
  ge.dl.add_scaled(dl, s);
  return ge;
}

// Advantage-weighted regression: exponentiated refined advantages, weights
// normalized within the group, no ratio clipping.
GroupEval eval_group_rltf(const TrainingGroup& group, const Policy& live,
                          const Policy&, const LossOptions& opts) {
  GroupEval ge;
  std::vector<double> rewards;
  for (const RolloutPair& p : group.pairs) rewards.push_back(p.r_refined);
  Normalized adv = normalize_population(rewards);  // degenerate -> uniform weights
  std::vector<double> w(group.pairs.size());
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = std::exp(adv.a[i] / opts.awr_beta);
    total += w[i];
  }
  EvalContext plain = plain_context(group.prompt);
  for (std::size_t i = 0; i < w.size(); ++i)
    add_weighted_nll(live, plain, group.pairs[i].refined.tokens, w[i] / total,
                     ge.loss_group, ge.dl);
  return ge;
}

// SFT on reject-sampled refined rollouts: pair i participates iff
// r_refined > r_draft (strict). Normalization over accepted pairs happens
// at merge time, across the whole batch.
GroupEval eval_group_erl(const TrainingGroup& group, const Policy& live,
                         const Policy&, const LossOptions&) {
  GroupEval ge;
  EvalContext plain = plain_context(group.prompt);
  for (const RolloutPair& pair : group.pairs) {
    if (!(pair.r_refined > pair.r_draft)) continue;
    add_weighted_nll(live, plain, pair.refined.tokens, 1.0, ge.erl_sum, ge.dl);
    ge.erl_accepted += 1;
  }
  return ge;
}

GroupEval eval_group_sdpo(const TrainingGroup& group, const Policy& live,
                          const Policy& old, bool token_level, bool combine_grpo,
                          const LossOptions& opts) {
  GroupEval ge;
  if (combine_grpo) add_draft_group_term(group, live, old, opts, ge);
  EvalContext plain = plain_context(group.prompt);
  double loss = 0.0;
  LogitGradAccumulator dl;
  for (const RolloutPair& pair : group.pairs) {
    if (token_level) {
      // Hard-label distillation: the refined tokens are the teacher samples.
      add_weighted_nll(live, plain, pair.refined.tokens, 1.0, loss, dl);
    } else {
      EvalContext fb_ctx = envs::render_feedback_context(group.prompt, &pair.feedback);
      add_reverse_kl(live, old, plain, fb_ctx, pair.refined.tokens, loss, dl);
    }
  }
  double s = token_scale(opts.average_tokens, rollout_tokens_group(group, false, true));
  ge.loss_fb += s * loss;
  ge.dl.add_scaled(dl, s);
  return ge;
}

LossResult merge(Algorithm algo, std::vector<GroupEval>& evals, Policy& live) {
  LossResult out;
  LogitGradAccumulator total;
  bool erl = algo == Algorithm::kErlSft;
  if (erl) {
    int accepted = 0;
    for (const GroupEval& ge : evals) accepted += ge.erl_accepted;
    if (accepted > 0) {
      double inv = 1.0 / static_cast<double>(accepted);
      for (const GroupEval& ge : evals) {
        out.report.loss_group += inv * ge.erl_sum;
        total.add_scaled(ge.dl, inv);
      }
    }
  } else {
    double inv = 1.0 / static_cast<double>(evals.size());
    for (const GroupEval& ge : evals) {
      out.report.loss_group += inv * ge.loss_group;
      out.report.loss_fb += inv * ge.loss_fb;
      total.add_scaled(ge.dl, inv);
    }
  }
  for (const GroupEval& ge : evals) {
    out.report.ratio_tokens += ge.ratio_tokens;
    out.report.clipped_tokens += ge.clipped_tokens;
    out.report.max_ratio_dev = std::max(out.report.max_ratio_dev, ge.max_ratio_dev);
    out.report.fb_term_skipped |= ge.fb_skipped;
  }
  double ratio_sum = 0.0;
  for (const GroupEval& ge : evals) ratio_sum += ge.ratio_sum;
  if (out.report.ratio_tokens > 0) {
    out.report.clip_fraction = static_cast<double>(out.report.clipped_tokens) /
                               static_cast<double>(out.report.ratio_tokens);
    out.report.mean_ratio = ratio_sum / static_cast<double>(out.report.ratio_tokens);
  }
  out.report.loss_total = out.report.loss_group + out.report.loss_fb;
  out.grad = total.to_dense(live);
  return out;
}

}  // namespace

AdvantageSet joint_advantages(const TrainingGroup& group) {
  std::vector<double> flat = flatten_rewards(group);
  Normalized n = normalize_population(flat);
  AdvantageSet out;
  out.mu = n.mu;
  out.sigma = n.sigma;
  out.degenerate = n.degenerate;
  out.a.resize(group.pairs.size());
  for (std::size_t i = 0; i < group.pairs.size(); ++i)
    out.a[i] = {n.a[2 * i], n.a[2 * i + 1]};
  return out;
}

std::vector<double> fb_advantages(const TrainingGroup& group) {
  if (group.size() < 2)
    throw config_error("fb advantages require a group size of at least 2");
  std::vector<double> rewards;
  rewards.reserve(group.pairs.size());
  for (const RolloutPair& p : group.pairs) rewards.push_back(p.r_refined);
  return normalize_population(rewards).a;
}

double clipped_token_term(double ratio, double advantage, ClipConfig clip) {
  if (!(ratio > 0.0) || !std::isfinite(ratio))
    throw numeric_error("non-positive or non-finite policy ratio");
  double clipped = std::clamp(ratio, 1.0 - clip.epsilon, 1.0 + clip.epsilon);
  return std::min(ratio * advantage, clipped * advantage);
}

Algorithm algorithm_from_id(const std::string& id) {
  const std::vector<std::string>& ids = algorithm_ids();
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] == id) return static_cast<Algorithm>(i);
  std::string known;
  for (const std::string& s : ids) {
    if (!known.empty()) known += ", ";
    known += s;
  }
  throw config_error("unknown algorithm '" + id + "' (registered: " + known + ")");
}

const std::vector<std::string>& algorithm_ids() {
  static const std::vector<std::string> ids = {
      "ditto",      "grpo",        "ditto_y1_only",   "rltf_sd",         "erl",
      "sdpo_token", "sdpo_logits", "sdpo_plus_token", "sdpo_plus_logits"};
  return ids;
}

std::string algorithm_id(Algorithm algo) {
  return algorithm_ids()[static_cast<std::size_t>(algo)];
}

LossResult evaluate_loss(Algorithm algo, std::span<const TrainingGroup> groups,
                         Policy& live, const Policy& old_snapshot,
                         const LossOptions& opts) {
  if (groups.empty()) throw config_error("loss evaluation needs at least one group");
  std::vector<GroupEval> evals(groups.size());
  parallel_for(groups.size(), opts.workers, [&](std::size_t g) {
    switch (algo) {
      case Algorithm::kDitto:
        evals[g] = eval_group_ditto(groups[g], live, old_snapshot, opts);
        break;
      case Algorithm::kGrpo:
        evals[g] = eval_group_grpo(groups[g], live, old_snapshot, opts);
        break;
      case Algorithm::kDittoY1Only:
        evals[g] = eval_group_y1_only(groups[g], live, old_snapshot, opts);
        break;
      case Algorithm::kRltfSd:
        evals[g] = eval_group_rltf(groups[g], live, old_snapshot, opts);
        break;
      case Algorithm::kErlSft:
        evals[g] = eval_group_erl(groups[g], live, old_snapshot, opts);
        break;
      case Algorithm::kSdpoToken:
        evals[g] = eval_group_sdpo(groups[g], live, old_snapshot, true, false, opts);
        break;
      case Algorithm::kSdpoLogits:
        evals[g] = eval_group_sdpo(groups[g], live, old_snapshot, false, false, opts);
        break;
      case Algorithm::kSdpoPlusToken:
        evals[g] = eval_group_sdpo(groups[g], live, old_snapshot, true, true, opts);
        break;
      case Algorithm::kSdpoPlusLogits:
        evals[g] = eval_group_sdpo(groups[g], live, old_snapshot, false, true, opts);
        break;
    }
  });
  return merge(algo, evals, live);
}

LossResult loss_ditto(std::span<const TrainingGroup> groups, Policy& live,
                      const Policy& old_snapshot, const LossOptions& opts) {
  return evaluate_loss(Algorithm::kDitto, groups, live, old_snapshot, opts);
}
LossResult loss_grpo(std::span<const TrainingGroup> groups, Policy& live,
                     const Policy& old_snapshot, const LossOptions& opts) {
  return evaluate_loss(Algorithm::kGrpo, groups, live, old_snapshot, opts);
}
LossResult loss_ditto_y1_only(std::span<const TrainingGroup> groups, Policy& live,
                              const Policy& old_snapshot, const LossOptions& opts) {
  return evaluate_loss(Algorithm::kDittoY1Only, groups, live, old_snapshot, opts);
}
LossResult loss_rltf_sd(std::span<const TrainingGroup> groups, Policy& live,
                        const Policy& old_snapshot, const LossOptions& opts) {
  return evaluate_loss(Algorithm::kRltfSd, groups, live, old_snapshot, opts);
}
LossResult loss_erl_sft(std::span<const TrainingGroup> groups, Policy& live,
                        const Policy& old_snapshot, const LossOptions& opts) {
  return evaluate_loss(Algorithm::kErlSft, groups, live, old_snapshot, opts);
}
LossResult loss_sdpo(std::span<const TrainingGroup> groups, Policy& live,
                     const Policy& old_snapshot, bool token_level, bool combine_grpo,
                     const LossOptions& opts) {
  Algorithm algo = token_level
                       ? (combine_grpo ? Algorithm::kSdpoPlusToken : Algorithm::kSdpoToken)
                       : (combine_grpo ? Algorithm::kSdpoPlusLogits : Algorithm::kSdpoLogits);
  return evaluate_loss(algo, groups, live, old_snapshot, opts);
}

}  // namespace dittolab::objectives
