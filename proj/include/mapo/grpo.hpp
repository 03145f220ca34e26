#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "mapo/rollout.hpp"

namespace mapo {

inline constexpr double kSigmaMin = 1e-8;

// Ratio clip interval is [1 - eps_low, 1 + eps_high].
struct ClipConfig {
  double eps_low = 0.2;
  double eps_high = 0.2;

  void validate() const {
    if (!(eps_low > 0.0) || !(eps_high > 0.0))
      throw std::invalid_argument("clip epsilons must be > 0");
  }
  bool symmetric() const { return eps_low == eps_high; }
};

enum class AggregationMode { TokenLevel, SampleLevel, PromptLevel };

inline std::string to_string(AggregationMode m) {
  switch (m) {
    case AggregationMode::TokenLevel: return "token";
    case AggregationMode::SampleLevel: return "sample";
    case AggregationMode::PromptLevel: return "prompt";
  }
  throw std::invalid_argument("unknown aggregation mode");
}

inline AggregationMode parse_aggregation(const std::string& s) {
  if (s == "token") return AggregationMode::TokenLevel;
  if (s == "sample") return AggregationMode::SampleLevel;
  if (s == "prompt") return AggregationMode::PromptLevel;
  throw std::invalid_argument("bad aggregation mode: " + s);
}

struct GroupStats {
  double mu = 0.0;
  double sigma = 0.0;  // population std
  std::vector<double> advantages;
  bool zero_variance = false;
};

// Group-relative normalization: A_i = (r_i - mu) / sigma with population
// sigma. Degenerate groups (sigma < sigma_min) get all-zero advantages and
// the zero_variance flag.
inline GroupStats normalize_group(const std::vector<double>& rewards,
                                  double sigma_min = kSigmaMin) {
  if (rewards.size() < 2)
    throw std::invalid_argument("normalize_group needs at least 2 rewards");
  GroupStats st;
  const double n = static_cast<double>(rewards.size());
  double sum = 0.0;
  for (double r : rewards) sum += r;
  st.mu = sum / n;
  double ss = 0.0;
  for (double r : rewards) ss += (r - st.mu) * (r - st.mu);
  st.sigma = std::sqrt(ss / n);
  st.advantages.resize(rewards.size(), 0.0);
  if (st.sigma < sigma_min) {
    st.zero_variance = true;
  } else {
    for (size_t i = 0; i < rewards.size(); ++i)
      st.advantages[i] = (rewards[i] - st.mu) / st.sigma;
  }
  return st;
}

inline void finalize_group(RolloutGroup& g, double sigma_min = kSigmaMin) {
  std::vector<double> rewards;
  rewards.reserve(g.rollouts.size());
  for (const auto& r : g.rollouts) rewards.push_back(r.reward);
  GroupStats st = normalize_group(rewards, sigma_min);
  g.mu = st.mu;
  g.sigma = st.sigma;
  g.advantages = std::move(st.advantages);
  g.zero_variance = st.zero_variance;
}

// Per-token importance ratios rho_t = pi_train / pi_gen = exp(train - gen).
inline std::vector<double> importance_ratios(const Rollout& r) {
  if (r.gen_logprobs.size() != r.train_logprobs.size())
    throw std::invalid_argument("gen/train logprob length mismatch");
  std::vector<double> ratios(r.gen_logprobs.size());
  for (size_t t = 0; t < ratios.size(); ++t) {
    if (!std::isfinite(r.gen_logprobs[t]) || !std::isfinite(r.train_logprobs[t]))
      throw std::domain_error("non-finite log-probability");
    ratios[t] = std::exp(r.train_logprobs[t] - r.gen_logprobs[t]);
  }
  return ratios;
}

struct TokenObjective {
  double value = 0.0;
  bool clipped = false;  // the min selected the clipped branch
};

// min(rho * A, clip(rho, 1-eps_low, 1+eps_high) * A). `clipped` is set only
// when the clipped branch is strictly the one the min selects, i.e. the
// token's gradient is suppressed.
inline TokenObjective clipped_token_objective(double ratio, double advantage,
                                              const ClipConfig& clip) {
  const double lo = 1.0 - clip.eps_low;
  const double hi = 1.0 + clip.eps_high;
  const double clamped = ratio < lo ? lo : (ratio > hi ? hi : ratio);
  const double unclipped = ratio * advantage;
  const double clipped_val = clamped * advantage;
  TokenObjective out;
  if (clipped_val < unclipped) {
    out.value = clipped_val;
    out.clipped = (ratio < lo || ratio > hi);
  } else {
    out.value = unclipped;
  }
  return out;
}

struct BatchObjective {
  double loss = 0.0;  // surrogate to be maximized
  double clip_fraction = 0.0;
  std::vector<double> per_rollout;  // per-rollout aggregate before batch mean
  int64_t contributing_tokens = 0;
  int64_t clipped_tokens = 0;
  int64_t contributing_rollouts = 0;
};

// Batch surrogate under one of the three aggregation modes.
//   token:  sum of token objectives / total contributing tokens
//   sample: mean over rollouts of per-rollout token mean
//   prompt: mean over rollouts of per-rollout token sum
// Zero-variance groups still pass through the token pipeline (their
// advantages are identically zero, so every term they add is exactly 0.0),
// but their tokens and rollouts stay out of every denominator. A batch with
// them included therefore aggregates to the same value as one with them
// filtered out; filtering only skips their compute.
inline BatchObjective aggregate_loss(const std::vector<RolloutGroup>& groups,
                                     const ClipConfig& clip, AggregationMode mode) {
  clip.validate();
  BatchObjective out;
  double token_sum = 0.0;
  double rollout_sum = 0.0;
  for (const auto& g : groups) {
    if (g.advantages.size() != g.rollouts.size())
      throw std::invalid_argument("group advantages not populated");
    for (size_t i = 0; i < g.rollouts.size(); ++i) {
      const Rollout& r = g.rollouts[i];
      const std::vector<double> ratios = importance_ratios(r);
      double tok_sum = 0.0;
      for (double rho : ratios) {
        TokenObjective o = clipped_token_objective(rho, g.advantages[i], clip);
        tok_sum += o.value;
        if (o.clipped) ++out.clipped_tokens;
      }
      const auto len = static_cast<int64_t>(ratios.size());
      token_sum += tok_sum;
      double contribution = 0.0;
      switch (mode) {
        case AggregationMode::TokenLevel: contribution = tok_sum; break;
        case AggregationMode::SampleLevel:
          contribution = len > 0 ? tok_sum / static_cast<double>(len) : 0.0;
          break;
        case AggregationMode::PromptLevel: contribution = tok_sum; break;
      }
      out.per_rollout.push_back(contribution);
      if (g.zero_variance) continue;
      out.contributing_tokens += len;
      ++out.contributing_rollouts;
      if (mode != AggregationMode::TokenLevel) rollout_sum += contribution;
    }
  }
  int64_t total_rollouts = 0;
  for (const auto& g : groups) total_rollouts += g.group_size();
  if (total_rollouts == 0) throw std::invalid_argument("empty batch");

  if (out.contributing_tokens > 0)
    out.clip_fraction =
        static_cast<double>(out.clipped_tokens) / static_cast<double>(out.contributing_tokens);

  if (out.contributing_rollouts == 0) {
    out.loss = 0.0;  // fully degenerate batch; step becomes a no-op
    return out;
  }
  switch (mode) {
    case AggregationMode::TokenLevel:
      out.loss = token_sum / static_cast<double>(out.contributing_tokens);
      break;
    case AggregationMode::SampleLevel:
    case AggregationMode::PromptLevel:
      out.loss = rollout_sum / static_cast<double>(out.contributing_rollouts);
      break;
  }
  return out;
}

}  // namespace mapo
