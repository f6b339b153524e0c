// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dittolab/core.hpp"

namespace dittolab {

// Conditioning key: (prompt id, feedback signature, generated prefix).
// Equality and hashing use those three fields only; prompt/hint tokens ride
// along as payload for policies that embed tokens instead of keying on ids
// (prompt id and feedback signature determine them injectively per env).
struct ContextKey {
  std::int64_t prompt_id = 0;
  std::uint64_t feedback_signature = 0;
  std::vector<token_id> prefix;
  std::vector<token_id> prompt_tokens;
  std::vector<token_id> hint_tokens;

  int position() const { return static_cast<int>(prefix.size()); }

  bool operator==(const ContextKey& other) const {
    return prompt_id == other.prompt_id &&
           feedback_signature == other.feedback_signature && prefix == other.prefix;
  }

  std::uint64_t stable_hash() const {
    StableHash h;
    h.add(static_cast<std::uint64_t>(prompt_id));
    h.add(feedback_signature);
    h.add_tokens(prefix);
    return h.digest();
  }
};

struct ContextKeyHash {
  std::size_t operator()(const ContextKey& k) const {
    return static_cast<std::size_t>(k.stable_hash());
  }
};

ContextKey make_key(const EvalContext& ctx, std::span<const token_id> prefix);

/**
 * Differentiable autoregressive softmax policy over a fixed vocabulary.
 *
 * Parameters are exposed as a flat, stably indexed vector so optimizers and
 * finite-difference checks treat every policy uniformly. Reads (logits) are
 * pure and safe to run concurrently; ensure_key/set_param are exclusive and
 * happen only between collection phases.
 */
class Policy {
 public:
  virtual ~Policy() = default;

  virtual int vocab_size() const = 0;
  virtual std::string type_name() const = 0;

  // Logit vector for a context. Unseen contexts behave as all-zeros
  // (uniform); this never mutates the policy.
  virtual std::vector<double> logits(const ContextKey& key) const = 0;

  // Flat parameter view. Indices are stable: materialized rows are only ever
  // appended, never reordered or erased.
  virtual std::size_t param_count() const = 0;
  virtual double param(std::size_t i) const = 0;
  virtual void set_param(std::size_t i, double v) = 0;

  // Materializes storage for a context (no-op for dense policies). Must be
  // called before accumulate_param_grad for that context.
  virtual void ensure_key(const ContextKey& key) = 0;

  // Backpropagates dL/dlogits at `key` into dL/dparams, accumulating into
  // `grad` (sized param_count()).
  virtual void accumulate_param_grad(const ContextKey& key,
                                     std::span<const double> dlogits,
                                     std::vector<double>& grad) const = 0;

  virtual std::unique_ptr<Policy> clone() const = 0;
  virtual nlohmann::json to_json() const = 0;
};

// A snapshot is a deep copy: evaluating it is side-effect-free and later
// updates to the live policy leave it unchanged.
using PolicySnapshot = std::unique_ptr<Policy>;
inline PolicySnapshot snapshot(const Policy& policy) { return policy.clone(); }

// Exact tabular policy keyed on the full prefix; default row 0 for unseen
// keys. Feedback-conditioned contexts share the plain context's row and add
// a per-signature offset row on top, mirroring how a single set of weights
// serves both contexts when feedback is concatenated to the prompt: before
// any feedback-specific learning, conditioning behaves exactly like the
// plain policy.
class TabularPolicy final : public Policy {
 public:
  explicit TabularPolicy(int vocab_size) : vocab_(vocab_size) {}

  int vocab_size() const override { return vocab_; }
  std::string type_name() const override { return "tabular"; }
  std::vector<double> logits(const ContextKey& key) const override;
  std::size_t param_count() const override { return entries_.size() * vocab_; }
  double param(std::size_t i) const override;
  void set_param(std::size_t i, double v) override;
  void ensure_key(const ContextKey& key) override;
  void accumulate_param_grad(const ContextKey& key, std::span<const double> dlogits,
                             std::vector<double>& grad) const override;
  std::unique_ptr<Policy> clone() const override;
  nlohmann::json to_json() const override;

  // Direct row access for constructing hand-crafted policies in tests. For
  // feedback-conditioned keys the row is the additive offset.
  void set_logits(const ContextKey& key, std::vector<double> row);
  std::size_t key_count() const { return entries_.size(); }

  static std::unique_ptr<TabularPolicy> from_json(const nlohmann::json& j);

 private:
  struct Entry {
    ContextKey key;
    std::vector<double> row;
  };
  static ContextKey plain_projection(const ContextKey& key);

  int vocab_;
  std::vector<Entry> entries_;  // insertion order == parameter order
  std::unordered_map<ContextKey, std::size_t, ContextKeyHash> index_;
};

/**
 * Small dense alternative to the tabular policy: shared token/feedback
 * embeddings, one tanh hidden layer, linear output head. Generalizes across
 * prompts; gradients are hand-derived backpropagation.
 */
class TinyMlpPolicy final : public Policy {
 public:
  TinyMlpPolicy(int vocab_size, int extended_vocab_size, int max_len,
                int hidden = 16, int embed = 8, std::uint64_t init_seed = 1);

  int vocab_size() const override { return vocab_; }
  std::string type_name() const override { return "mlp"; }
  std::vector<double> logits(const ContextKey& key) const override;
  std::size_t param_count() const override { return params_.size(); }
  double param(std::size_t i) const override { return params_[i]; }
  void set_param(std::size_t i, double v) override { params_[i] = v; }
  void ensure_key(const ContextKey&) override {}
  void accumulate_param_grad(const ContextKey& key, std::span<const double> dlogits,
                             std::vector<double>& grad) const override;
  std::unique_ptr<Policy> clone() const override;
  nlohmann::json to_json() const override;

  static std::unique_ptr<TinyMlpPolicy> from_json(const nlohmann::json& j);

 private:
  int input_dim() const { return 4 * embed_ + (max_len_ + 1); }
  std::vector<double> features(const ContextKey& key) const;
  std::vector<double> forward(std::span<const double> x, std::vector<double>* hidden_out) const;

  int vocab_, ext_vocab_, max_len_, hidden_, embed_;
  std::vector<double> params_;  // [E | W1 | b1 | W2 | b2]
  std::size_t off_w1_, off_b1_, off_w2_, off_b2_;
};

// Versioned checkpoint payload (policy type tag, vocab size, parameters).
nlohmann::json policy_to_json(const Policy& policy);
std::unique_ptr<Policy> policy_from_json(const nlohmann::json& j);

// --- evaluation and sampling ---

std::vector<double> softmax(std::span<const double> logits);
std::vector<double> log_softmax(std::span<const double> logits);

// Autoregressive sampling until EOS or max_len, recording per-token
// logprobs under the exact sampling context. Deterministic in (params, seed).
Rollout sample(const Policy& policy, const EvalContext& ctx, std::uint64_t seed,
               int max_len);
Rollout sample(const Policy& policy, const Prompt& prompt, const Feedback* feedback,
               std::uint64_t seed, int max_len);

// Greedy decode: argmax token each step, ties to the lowest index.
Rollout greedy_rollout(const Policy& policy, const EvalContext& ctx, int max_len);

struct LogprobResult {
  double total = 0.0;
  std::vector<double> per_token;
};
LogprobResult logprob(const Policy& policy, const EvalContext& ctx,
                      std::span<const token_id> tokens);

// Exact gradient of the total logprob w.r.t. all parameters, as a dense
// vector over param_count() (visited contexts are materialized first).
std::vector<double> grad_logprob(Policy& policy, const EvalContext& ctx,
                                 std::span<const token_id> tokens);

// Deterministically ordered accumulator for dL/dlogits per context, used by
// every loss and by the enumeration oracle. Insertion order is evaluation
// order, so merging per-group accumulators in group index order keeps the
// final dense gradient byte-reproducible for any worker count.
class LogitGradAccumulator {
 public:
  std::vector<double>& slot(const ContextKey& key, int vocab);
  void add_scaled(const LogitGradAccumulator& other, double scale);
  void scale_all(double factor);
  bool empty() const { return entries_.empty(); }

  // Materializes all touched keys, then accumulates into a dense gradient
  // sized to the policy's (possibly grown) parameter count.
  std::vector<double> to_dense(Policy& policy) const;

 private:
  std::vector<std::pair<ContextKey, std::vector<double>>> entries_;
  std::unordered_map<ContextKey, std::size_t, ContextKeyHash> index_;
};

}  // namespace dittolab
