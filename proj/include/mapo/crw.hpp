#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

#include "mapo/modality.hpp"
#include "mapo/policy.hpp"
#include "mapo/rng.hpp"
#include "mapo/rollout.hpp"
#include "mapo/task_env.hpp"

namespace mapo {

// Normalized token-multiset cosine similarity. Stand-in for an embedding
// similarity: same [0,1] range, symmetric, sim(a,a) = 1.
inline double similarity_default(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.empty() || b.empty())
    throw std::invalid_argument("similarity_default: empty token sequence");
  auto counts = [](const std::vector<int>& xs) {
    std::vector<std::pair<int, double>> c;
    for (int x : xs) {
      auto it = std::find_if(c.begin(), c.end(), [&](const auto& p) { return p.first == x; });
      if (it == c.end())
        c.emplace_back(x, 1.0);
      else
        it->second += 1.0;
    }
    return c;
  };
  const auto ca = counts(a);
  const auto cb = counts(b);
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (const auto& [tok, n] : ca) {
    na += n * n;
    for (const auto& [tok2, m] : cb)
      if (tok == tok2) dot += n * m;
  }
  for (const auto& [tok, m] : cb) nb += m * m;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), 0.0, 1.0);
}

using SimilarityFn = std::function<double(const std::vector<int>&, const std::vector<int>&)>;

// Contrastive reward weighting. Only meaningful for continuous rewards on
// multi-modality tags; the trainer disables it elsewhere.
struct CrwConfig {
  double alpha = 0.2;  // reward boost scale, >= 0
  double tau = 0.8;    // similarity threshold in [0,1]
  bool gate_below_threshold = true;  // gate opens when s < tau (the positive
                                     // stays distant from the deficit negative)
  SimilarityFn similarity = similarity_default;

  void validate() const {
    if (!(alpha >= 0.0)) throw std::invalid_argument("crw alpha must be >= 0");
    if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("crw tau must be in [0,1]");
    if (!similarity) throw std::invalid_argument("crw similarity must be set");
  }
};

// One deficit-condition rollout for the same prompt: exposure is the task's
// tag minus one seeded-uniformly chosen required modality. Single-modality
// tags have no deficit negative; the result is empty.
inline std::optional<Rollout> generate_negative(const ToyPolicy& policy,
                                                const RewardOracle& oracle,
                                                const SyntheticTask& task, uint64_t seed,
                                                double temperature = 1.0) {
  if (task.tag.complexity() < 2) return std::nullopt;
  Rng rng = make_rng(derive_seed(seed, 0x4e36ull));
  std::vector<Modality> members;
  for (Modality m : kAllModalities)
    if (task.tag.contains(m)) members.push_back(m);
  const Modality removed =
      members[static_cast<size_t>(uniform_int(rng, 0, static_cast<int>(members.size()) - 1))];
  const ModalityTag exposure = task.tag.without(removed);

  Rollout r;
  r.task_id = task.id;
  r.tag = task.tag;
  r.exposure = exposure;
  r.is_negative = true;
  for (int t = 0; t < policy.rollout_len(); ++t) {
    const ToyPolicy::Draw d = policy.sample_token(task.features, exposure, t, temperature, rng);
    r.tokens.push_back(d.token);
    r.gen_logprobs.push_back(d.logprob);
  }
  r.train_logprobs = r.gen_logprobs;
  r.reward = oracle.score(task, r.tokens);
  return r;
}

// R_weighted = clip_[0,1](R_pos * (1 + alpha * gate(s))).
inline double weighted_reward(double r_pos, double similarity, const CrwConfig& cfg) {
  cfg.validate();
  if (!(r_pos >= 0.0 && r_pos <= 1.0))
    throw std::invalid_argument("weighted_reward: r_pos outside [0,1]");
  if (!(similarity >= 0.0 && similarity <= 1.0))
    throw std::invalid_argument("weighted_reward: similarity outside [0,1]");
  const bool gate_open =
      cfg.gate_below_threshold ? similarity < cfg.tau : similarity > cfg.tau;
  const double boosted = r_pos * (1.0 + (gate_open ? cfg.alpha : 0.0));
  return std::clamp(boosted, 0.0, 1.0);
}

}  // namespace mapo
