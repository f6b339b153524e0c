// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <set>

#include "dittolab/core.hpp"
#include "dittolab/envs.hpp"
#include "dittolab/policy.hpp"
#include "dittolab/trainer.hpp"
#include "test_util.hpp"

using namespace dittolab;

TEST_CASE("flatten_rewards keeps pair order, draft before refined") {
  TrainingGroup g = testutil::synthetic_group({{1, 0}, {1, 0}});
  CHECK(flatten_rewards(g) == std::vector<double>{1, 0, 1, 0});

  TrainingGroup single = testutil::synthetic_group({{0.5, 0.5}});
  CHECK(flatten_rewards(single) == std::vector<double>{0.5, 0.5});

  // Independent field walk as the oracle for the G=4 example.
  TrainingGroup g4 = testutil::synthetic_group({{3, 1}, {2, 2}, {4, 0}, {1, 3}});
  std::vector<double> expected;
  for (const RolloutPair& p : g4.pairs) {
    expected.push_back(p.r_draft);
    expected.push_back(p.r_refined);
  }
  CHECK(flatten_rewards(g4) == expected);
  CHECK(flatten_rewards(g4) == std::vector<double>{3, 1, 2, 2, 4, 0, 1, 3});
  CHECK(flatten_rewards(g4).size() == 2 * g4.pairs.size());
}

TEST_CASE("group_signature: equality and sensitivity") {
  TrainingGroup a = testutil::synthetic_group({{1, 0}, {0.5, 0.25}});
  TrainingGroup b = testutil::synthetic_group({{1, 0}, {0.5, 0.25}});
  CHECK(group_signature(a) == group_signature(b));

  TrainingGroup c = testutil::synthetic_group({{1, 0}, {0.5, 0.25}});
  c.pairs[1].refined.tokens[0] += 1;
  CHECK(group_signature(a) != group_signature(c));
}

TEST_CASE("group_signature is stable across process restarts") {
  // Frozen value: the hash chain has no runtime salt, so the same build
  // reproduces it in any process.
  TrainingGroup g;
  g.prompt = Prompt{1, {1, 2}, "secret_env"};
  RolloutPair p;
  p.draft.tokens = {1, 0};
  p.draft.logprobs = {-1.0, -1.0};
  p.feedback = Feedback::make({{0, 1.0}, {1, 0.0}, {2, 0.0}}, {7, 9});
  p.refined.tokens = {2, 0};
  p.refined.logprobs = {-1.0, -1.0};
  p.refined.context_kind = ContextKind::kFeedbackConditioned;
  p.r_draft = 0.5;
  p.r_refined = 0.5;
  g.pairs.push_back(p);
  CHECK(group_signature(g) == 8100526491241001705ULL);
}

TEST_CASE("feedback signature is a pure nonzero function of hint tokens") {
  Feedback f1 = Feedback::make({{0, 0.0}}, {6, 9});
  Feedback f2 = Feedback::make({{0, -1.0}}, {6, 9});
  CHECK(f1.signature == f2.signature);
  CHECK(f1.signature != 0);
  CHECK(Feedback::make({}, {}).signature == 0);
  CHECK(Feedback::make({}, {7, 9}).signature != f1.signature);
}

TEST_CASE("rollout probability stays in (0, 1]") {
  const envs::Environment& env = envs::get_env("secret_env");
  TabularPolicy policy(env.spec().vocab_size);
  Rng rng(11);
  for (int i = 0; i < 50; ++i) {
    Prompt prompt = env.make_prompt(static_cast<int>(rng.next_u64() % 20));
    Rollout r = sample(policy, prompt, nullptr, rng.next_u64(), env.spec().max_len);
    double p = std::exp(r.total_logprob());
    CHECK(p > 0.0);
    CHECK(p <= 1.0);
  }
}

TEST_CASE("validate_group rejects malformed pairs") {
  TrainingGroup g = testutil::synthetic_group({{1, 0}});
  CHECK_NOTHROW(validate_group(g));

  TrainingGroup shape = g;
  shape.pairs[0].draft.logprobs.push_back(-1.0);
  CHECK_THROWS_AS(validate_group(shape), std::invalid_argument);

  TrainingGroup pos = g;
  pos.pairs[0].refined.logprobs[0] = 0.5;
  CHECK_THROWS_AS(validate_group(pos), std::invalid_argument);

  TrainingGroup kind = g;
  kind.pairs[0].refined.context_kind = ContextKind::kPlain;
  CHECK_THROWS_AS(validate_group(kind), std::invalid_argument);
}

TEST_CASE("trace lines round-trip") {
  const envs::Environment& env = envs::get_env("secret_env");
  TabularPolicy policy(env.spec().vocab_size);
  Prompt prompt = env.make_prompt(3);
  TrainingGroup g = trainer::collect_group(policy, env, prompt, 4, 99);
  for (const RolloutPair& pair : g.pairs) {
    TraceRecord rec = to_trace_record(prompt, pair);
    TraceRecord back = parse_trace_line(trace_line(rec), 1);
    CHECK(back.prompt_id == rec.prompt_id);
    CHECK(back.draft_tokens == rec.draft_tokens);
    CHECK(back.hint_tokens == rec.hint_tokens);
    CHECK(back.refined_tokens == rec.refined_tokens);
    CHECK(back.r_draft == rec.r_draft);
    CHECK(back.r_refined == rec.r_refined);
    CHECK(back.dim_scores == rec.dim_scores);
  }
  CHECK_THROWS_AS(parse_trace_line("not json", 3), trace_error);
  CHECK_THROWS_AS(parse_trace_line("{\"prompt_id\": 1}", 4), trace_error);
}
