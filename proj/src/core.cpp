// SPDX-License-Identifier: Apache-2.0
#include "dittolab/core.hpp"

#include <json.hpp>

#include <cmath>
#include <stdexcept>

namespace dittolab {

using nlohmann::json;

Feedback Feedback::make(std::vector<std::pair<int, double>> scores,
                        std::vector<token_id> hints) {
  Feedback fb;
  fb.dimension_scores = std::move(scores);
  fb.hint_tokens = std::move(hints);
  fb.signature = feedback_signature(fb.hint_tokens);
  return fb;
}

std::uint64_t feedback_signature(std::span<const token_id> hint_tokens)
{
  if (hint_tokens.empty()) return 0;
  StableHash h;
  h.add_tokens(hint_tokens);
  std::uint64_t sig = h.digest();
  return sig == 0 ? 1 : sig;
}

void validate_group(const TrainingGroup& group) {
  if (group.prompt.tokens.empty())
    throw std::invalid_argument("prompt has no tokens");
  if (group.pairs.empty()) throw std::invalid_argument("group has no pairs");
  for (const RolloutPair& pair : group.pairs) {
    auto check_rollout = [](const Rollout& r, const char* what) {
      if (r.tokens.size() != r.logprobs.size())
        throw std::invalid_argument(std::string(what) + ": token/logprob length mismatch");
      for (double lp : r.logprobs)
        if (!(lp <= 0.0))
          throw std::invalid_argument(std::string(what) + ": positive logprob");
    };
    check_rollout(pair.draft, "draft");
    check_rollout(pair.refined, "refined");
    if (pair.draft.context_kind != ContextKind::kPlain)
      throw std::invalid_argument("draft not sampled from the plain context");
    bool conditioned = pair.feedback.signature != 0;
    bool marked = pair.refined.context_kind == ContextKind::kFeedbackConditioned;
    if (conditioned != marked)
      throw std::invalid_argument("refined context kind inconsistent with feedback signature");
    if (pair.feedback.signature != feedback_signature(pair.feedback.hint_tokens))
      throw std::invalid_argument("feedback signature not derived from hint tokens");
  }
}

std::vector<double> flatten_rewards(const TrainingGroup& group) {
  std::vector<double> flat;
  flat.reserve(group.pairs.size() * 2);
  for (const RolloutPair& pair : group.pairs) {
    flat.push_back(pair.r_draft);
    flat.push_back(pair.r_refined);
  }
  return flat;
}

std::uint64_t group_signature(const TrainingGroup& group) {
  StableHash h;
  h.add(static_cast<std::uint64_t>(group.prompt.id));
  h.add_tokens(group.prompt.tokens);
  h.add(group.pairs.size());
  for (const RolloutPair& pair : group.pairs) {
    h.add_tokens(pair.draft.tokens);
    h.add_tokens(pair.refined.tokens);
    h.add(pair.feedback.signature);
  }
  return h.digest();
}

EvalContext plain_context(const Prompt& prompt) {
  return EvalContext{prompt.id, 0, prompt.tokens, {}};
}

TraceRecord to_trace_record(const Prompt& prompt, const RolloutPair& pair) {
  TraceRecord rec;
  rec.prompt_id = prompt.id;
  rec.draft_tokens = pair.draft.tokens;
  rec.hint_tokens = pair.feedback.hint_tokens;
  rec.refined_tokens = pair.refined.tokens;
  rec.r_draft = pair.r_draft;
  rec.r_refined = pair.r_refined;
  rec.dim_scores = pair.reward_vec_draft;
  return rec;
}

std::string trace_line(const TraceRecord& record) {
  json j;
  j["prompt_id"] = record.prompt_id;
  j["draft_tokens"] = record.draft_tokens;
  j["hint_tokens"] = record.hint_tokens;
  j["refined_tokens"] = record.refined_tokens;
  j["r_draft"] = record.r_draft;
  j["r_refined"] = record.r_refined;
  j["dim_scores"] = record.dim_scores;
  return j.dump();
}

TraceRecord parse_trace_line(const std::string& line, int line_number) {
  json j = json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object())
    throw trace_error("malformed trace line", line_number);
  try {
    TraceRecord rec;
    rec.prompt_id = j.at("prompt_id").get<std::int64_t>();
    rec.draft_tokens = j.at("draft_tokens").get<std::vector<token_id>>();
    rec.hint_tokens = j.at("hint_tokens").get<std::vector<token_id>>();
    rec.refined_tokens = j.at("refined_tokens").get<std::vector<token_id>>();
    rec.r_draft = j.at("r_draft").get<double>();
    rec.r_refined = j.at("r_refined").get<double>();
    rec.dim_scores = j.at("dim_scores").get<std::vector<double>>();
    return rec;
  } catch (const json::exception& e) {
    throw trace_error(std::string("trace record field error: ") + e.what(), line_number);
  }
}

}  // namespace dittolab
