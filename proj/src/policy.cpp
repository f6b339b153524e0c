// SPDX-License-Identifier: Apache-2.0
#include "dittolab/policy.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dittolab {

using nlohmann::json;

ContextKey make_key(const EvalContext& ctx, std::span<const token_id> prefix) {
  ContextKey key;
  key.prompt_id = ctx.prompt_id;
  key.feedback_signature = ctx.feedback_signature;
  key.prefix.assign(prefix.begin(), prefix.end());
  key.prompt_tokens = ctx.prompt_tokens;
  key.hint_tokens = ctx.hint_tokens;
  return key;
}

// --- TabularPolicy ---

ContextKey TabularPolicy::plain_projection(const ContextKey& key) {
  ContextKey plain = key;
  plain.feedback_signature = 0;
  plain.hint_tokens.clear();
  return plain;
}

std::vector<double> TabularPolicy::logits(const ContextKey& key) const {
  std::vector<double> out(vocab_, 0.0);
  auto add_row = [&](const ContextKey& k) {
    auto it = index_.find(k);
    if (it == index_.end()) return;
    const std::vector<double>& row = entries_[it->second].row;
    for (int a = 0; a < vocab_; ++a) out[a] += row[a];
  };
  if (key.feedback_signature != 0) add_row(plain_projection(key));
  add_row(key);
  return out;
}

double TabularPolicy::param(std::size_t i) const {
  return entries_[i / vocab_].row[i % vocab_];
}

void TabularPolicy::set_param(std::size_t i, double v) {
  entries_[i / vocab_].row[i % vocab_] = v;
}

void TabularPolicy::ensure_key(const ContextKey& key) {
  if (key.feedback_signature != 0) {
    ContextKey plain = plain_projection(key);
    if (!index_.contains(plain)) {
      index_.emplace(plain, entries_.size());
      entries_.push_back(Entry{plain, std::vector<double>(vocab_, 0.0)});
    }
  }
  if (index_.contains(key)) return;
  index_.emplace(key, entries_.size());
  entries_.push_back(Entry{key, std::vector<double>(vocab_, 0.0)});
}

void TabularPolicy::accumulate_param_grad(const ContextKey& key,
                                          std::span<const double> dlogits,
                                          std::vector<double>& grad) const {
  // Logits are the sum of the plain row and (for conditioned contexts) the
  // offset row, so the gradient lands on both.
  auto add_at = [&](const ContextKey& k) {
    auto it = index_.find(k);
    if (it == index_.end())
      throw std::logic_error("accumulate_param_grad on unmaterialized tabular key");
    std::size_t base = it->second * vocab_;
    for (int a = 0; a < vocab_; ++a) grad[base + a] += dlogits[a];
  };
  if (key.feedback_signature != 0) add_at(plain_projection(key));
  add_at(key);
}

std::unique_ptr<Policy> TabularPolicy::clone() const {
  return std::make_unique<TabularPolicy>(*this);
}

void TabularPolicy::set_logits(const ContextKey& key, std::vector<double> row) {
  if (static_cast<int>(row.size()) != vocab_)
    throw std::invalid_argument("logit row size does not match vocab");
  ensure_key(key);
  entries_[index_.at(key)].row = std::move(row);
}

nlohmann::json TabularPolicy::to_json() const {
  json entries = json::array();
  for (const Entry& e : entries_) {
    entries.push_back({{"prompt_id", e.key.prompt_id},
                       {"sig", e.key.feedback_signature},
                       {"prefix", e.key.prefix},
                       {"prompt_tokens", e.key.prompt_tokens},
                       {"hint_tokens", e.key.hint_tokens},
                       {"logits", e.row}});
  }
  return json{{"type", "tabular"}, {"vocab_size", vocab_}, {"entries", entries}};
}

std::unique_ptr<TabularPolicy> TabularPolicy::from_json(const json& j) {
  auto policy = std::make_unique<TabularPolicy>(j.at("vocab_size").get<int>());
  for (const json& e : j.at("entries")) {
    ContextKey key;
    key.prompt_id = e.at("prompt_id").get<std::int64_t>();
    key.feedback_signature = e.at("sig").get<std::uint64_t>();
    key.prefix = e.at("prefix").get<std::vector<token_id>>();
    key.prompt_tokens = e.at("prompt_tokens").get<std::vector<token_id>>();
    key.hint_tokens = e.at("hint_tokens").get<std::vector<token_id>>();
    policy->set_logits(key, e.at("logits").get<std::vector<double>>());
  }
  return policy;
}

// --- TinyMlpPolicy ---

TinyMlpPolicy::TinyMlpPolicy(int vocab_size, int extended_vocab_size, int max_len,
                             int hidden, int embed, std::uint64_t init_seed)
    : vocab_(vocab_size),
      ext_vocab_(extended_vocab_size),
      max_len_(max_len),
      hidden_(hidden),
      embed_(embed) {
  std::size_t n_embed = static_cast<std::size_t>(ext_vocab_) * embed_;
  std::size_t n_w1 = static_cast<std::size_t>(hidden_) * input_dim();
  std::size_t n_w2 = static_cast<std::size_t>(vocab_) * hidden_;
  off_w1_ = n_embed;
  off_b1_ = off_w1_ + n_w1;
  off_w2_ = off_b1_ + hidden_;
  off_b2_ = off_w2_ + n_w2;
  params_.resize(off_b2_ + vocab_);
  Rng rng(seed_chain(init_seed, {0x6D6C70u}));
  for (double& p : params_) p = rng.next_range(-0.1, 0.1);
}

std::vector<double> TinyMlpPolicy::features(const ContextKey& key) const {
  std::vector<double> x(input_dim(), 0.0);
  auto add_mean = [&](std::span<const token_id> tokens, int slot) {
    if (tokens.empty()) return;
    double inv = 1.0 / static_cast<double>(tokens.size());
    for (token_id t : tokens) {
      const double* e = &params_[static_cast<std::size_t>(t) * embed_];
      for (int j = 0; j < embed_; ++j) x[slot * embed_ + j] += inv * e[j];
    }
  };
  add_mean(key.prompt_tokens, 0);
  add_mean(key.hint_tokens, 1);
  add_mean(key.prefix, 2);
  if (!key.prefix.empty()) {
    const double* e = &params_[static_cast<std::size_t>(key.prefix.back()) * embed_];
    for (int j = 0; j < embed_; ++j) x[3 * embed_ + j] = e[j];
  }
  int pos = std::min(key.position(), max_len_);
  x[4 * embed_ + pos] = 1.0;
  return x;
}

std::vector<double> TinyMlpPolicy::forward(std::span<const double> x,
                                           std::vector<double>* hidden_out) const {
  std::vector<double> h(hidden_);
  int in = input_dim();
  for (int i = 0; i < hidden_; ++i) {
    double acc = params_[off_b1_ + i];
    const double* w = &params_[off_w1_ + static_cast<std::size_t>(i) * in];
    for (int j = 0; j < in; ++j) acc += w[j] * x[j];
    h[i] = std::tanh(acc);
  }
  std::vector<double> z(vocab_);
  for (int v = 0; v < vocab_; ++v) {
    double acc = params_[off_b2_ + v];
    const double* w = &params_[off_w2_ + static_cast<std::size_t>(v) * hidden_];
    for (int i = 0; i < hidden_; ++i) acc += w[i] * h[i];
    z[v] = acc;
  }
  if (hidden_out) *hidden_out = std::move(h);
  return z;
}

std::vector<double> TinyMlpPolicy::logits(const ContextKey& key) const {
  std::vector<double> x = features(key);
  return forward(x, nullptr);
}

void TinyMlpPolicy::accumulate_param_grad(const ContextKey& key,
                                          std::span<const double> dlogits,
                                          std::vector<double>& grad) const {
  std::vector<double> x = features(key);
  std::vector<double> h;
  forward(x, &h);
  int in = input_dim();

  // Output head.
  std::vector<double> dh(hidden_, 0.0);
  for (int v = 0; v < vocab_; ++v) {
    grad[off_b2_ + v] += dlogits[v];
    const double* w = &params_[off_w2_ + static_cast<std::size_t>(v) * hidden_];
    double* gw = &grad[off_w2_ + static_cast<std::size_t>(v) * hidden_];
    for (int i = 0; i < hidden_; ++i) {
      gw[i] += dlogits[v] * h[i];
      dh[i] += dlogits[v] * w[i];
    }
  }

  // Hidden layer (tanh).
  std::vector<double> dx(in, 0.0);
  for (int i = 0; i < hidden_; ++i) {
    double dpre = dh[i] * (1.0 - h[i] * h[i]);
    grad[off_b1_ + i] += dpre;
    const double* w = &params_[off_w1_ + static_cast<std::size_t>(i) * in];
    double* gw = &grad[off_w1_ + static_cast<std::size_t>(i) * in];
    for (int j = 0; j < in; ++j) {
      gw[j] += dpre * x[j];
      dx[j] += dpre * w[j];
    }
  }

  // Scatter into the embedding table, mirroring features().
  auto scatter_mean = [&](std::span<const token_id> tokens, int slot) {
    if (tokens.empty()) return;
    double inv = 1.0 / static_cast<double>(tokens.size());
    for (token_id t : tokens) {
      double* ge = &grad[static_cast<std::size_t>(t) * embed_];
      for (int j = 0; j < embed_; ++j) ge[j] += inv * dx[slot * embed_ + j];
    }
  };
  scatter_mean(key.prompt_tokens, 0);
  scatter_mean(key.hint_tokens, 1);
  scatter_mean(key.prefix, 2);
  if (!key.prefix.empty()) {
    double* ge = &grad[static_cast<std::size_t>(key.prefix.back()) * embed_];
    for (int j = 0; j < embed_; ++j) ge[j] += dx[3 * embed_ + j];
  }
}

std::unique_ptr<Policy> TinyMlpPolicy::clone() const {
  return std::make_unique<TinyMlpPolicy>(*this);
}

nlohmann::json TinyMlpPolicy::to_json() const {
  return json{{"type", "mlp"},
              {"vocab_size", vocab_},
              {"extended_vocab_size", ext_vocab_},
              {"max_len", max_len_},
              {"hidden", hidden_},
              {"embed", embed_},
              {"params", params_}};
}

std::unique_ptr<TinyMlpPolicy> TinyMlpPolicy::from_json(const json& j) {
  auto policy = std::make_unique<TinyMlpPolicy>(
      j.at("vocab_size").get<int>(), j.at("extended_vocab_size").get<int>(),
      j.at("max_len").get<int>(), j.at("hidden").get<int>(), j.at("embed").get<int>());
  auto params = j.at("params").get<std::vector<double>>();
  if (params.size() != policy->params_.size())
    throw config_error("mlp checkpoint parameter count mismatch");
  policy->params_ = std::move(params);
  return policy;
}

nlohmann::json policy_to_json(const Policy& policy) {
  json j = policy.to_json();
  j["format_version"] = 1;
  return j;
}

std::unique_ptr<Policy> policy_from_json(const json& j) {
  const std::string type = j.at("type").get<std::string>();
  if (type == "tabular") return TabularPolicy::from_json(j);
  if (type == "mlp") return TinyMlpPolicy::from_json(j);
  throw config_error("unknown policy type '" + type + "'");
}

// --- evaluation and sampling ---

std::vector<double> log_softmax(std::span<const double> logits) {
  double m = logits[0];
  for (double z : logits) m = std::max(m, z);
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - m);
  double lse = m + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out = log_softmax(logits);
  for (double& v : out) v = std::exp(v);
  return out;
}

Rollout sample(const Policy& policy, const EvalContext& ctx, std::uint64_t seed,
               int max_len) {
  if (max_len < 1) throw std::invalid_argument("max_len must be >= 1");
  Rng rng(seed);
  Rollout out;
  out.context_kind = ctx.feedback_signature == 0 ? ContextKind::kPlain
                                                 : ContextKind::kFeedbackConditioned;
  std::vector<token_id> prefix;
  for (int t = 0; t < max_len; ++t) {
    ContextKey key = make_key(ctx, prefix);
    std::vector<double> lp = log_softmax(policy.logits(key));
    std::vector<double> probs(lp.size());
    for (std::size_t i = 0; i < lp.size(); ++i) probs[i] = std::exp(lp[i]);
    int a = rng.categorical(probs);
    if (!std::isfinite(lp[a]))
      throw numeric_error("non-finite logprob while sampling");
    out.tokens.push_back(static_cast<token_id>(a));
    out.logprobs.push_back(lp[a]);
    if (a == kEosToken) break;
    prefix.push_back(static_cast<token_id>(a));
  }
  return out;
}

Rollout sample(const Policy& policy, const Prompt& prompt, const Feedback* feedback,
               std::uint64_t seed, int max_len) {
  EvalContext ctx = plain_context(prompt);
  if (feedback != nullptr) {
    ctx.feedback_signature = feedback->signature;
    ctx.hint_tokens = feedback->hint_tokens;
  }
  return sample(policy, ctx, seed, max_len);
}

Rollout greedy_rollout(const Policy& policy, const EvalContext& ctx, int max_len) {
  Rollout out;
  out.context_kind = ctx.feedback_signature == 0 ? ContextKind::kPlain
                                                 : ContextKind::kFeedbackConditioned;
  std::vector<token_id> prefix;
  for (int t = 0; t < max_len; ++t) {
    ContextKey key = make_key(ctx, prefix);
    std::vector<double> lp = log_softmax(policy.logits(key));
    int best = 0;
    for (std::size_t i = 1; i < lp.size(); ++i)
      if (lp[i] > lp[best]) best = static_cast<int>(i);
    out.tokens.push_back(static_cast<token_id>(best));
    out.logprobs.push_back(lp[best]);
    if (best == kEosToken) break;
    prefix.push_back(static_cast<token_id>(best));
  }
  return out;
}

LogprobResult logprob(const Policy& policy, const EvalContext& ctx,
                      std::span<const token_id> tokens) {
  LogprobResult result;
  std::vector<token_id> prefix;
  for (token_id t : tokens) {
    if (t < 0 || t >= policy.vocab_size())
      throw std::invalid_argument("token outside policy vocabulary");
    ContextKey key = make_key(ctx, prefix);
    std::vector<double> lp = log_softmax(policy.logits(key));
    result.per_token.push_back(lp[t]);
    result.total += lp[t];
    prefix.push_back(t);
  }
  return result;
}

std::vector<double> grad_logprob(Policy& policy, const EvalContext& ctx,
                                 std::span<const token_id> tokens) {
  LogitGradAccumulator acc;
  std::vector<token_id> prefix;
  for (token_id t : tokens) {
    if (t < 0 || t >= policy.vocab_size())
      throw std::invalid_argument("token outside policy vocabulary");
    ContextKey key = make_key(ctx, prefix);
    std::vector<double> p = softmax(policy.logits(key));
    std::vector<double>& slot = acc.slot(key, policy.vocab_size());
    for (int a = 0; a < policy.vocab_size(); ++a) slot[a] -= p[a];
    slot[t] += 1.0;  // d log softmax / d logit = indicator - probability
    prefix.push_back(t);
  }
  return acc.to_dense(policy);
}

// --- LogitGradAccumulator ---

std::vector<double>& LogitGradAccumulator::slot(const ContextKey& key, int vocab) {
  auto it = index_.find(key);
  if (it != index_.end()) return entries_[it->second].second;
  index_.emplace(key, entries_.size());
  entries_.emplace_back(key, std::vector<double>(vocab, 0.0));
  return entries_.back().second;
}

void LogitGradAccumulator::add_scaled(const LogitGradAccumulator& other, double scale) {
  for (const auto& [key, values] : other.entries_) {
    std::vector<double>& dst = slot(key, static_cast<int>(values.size()));
    for (std::size_t i = 0; i < values.size(); ++i) dst[i] += scale * values[i];
  }
}

void LogitGradAccumulator::scale_all(double factor) {
  for (auto& [key, values] : entries_)
    for (double& v : values) v *= factor;
}

std::vector<double> LogitGradAccumulator::to_dense(Policy& policy) const {
  for (const auto& [key, values] : entries_) policy.ensure_key(key);
  std::vector<double> grad(policy.param_count(), 0.0);
  for (const auto& [key, values] : entries_)
    policy.accumulate_param_grad(key, values, grad);
  return grad;
}

}  // namespace dittolab
