#pragma once

#include <cstdint>
#include <vector>

#include "mapo/modality.hpp"

namespace mapo {

// One generated response: tokens plus per-token log-probabilities under the
// generator snapshot and under the current trainer parameters.
struct Rollout {
  int64_t task_id = 0;
  ModalityTag tag;
  ModalityTag exposure;  // modalities revealed when the tokens were drawn
  std::vector<int> tokens;
  std::vector<double> gen_logprobs;
  std::vector<double> train_logprobs;
  double reward = 0.0;
  bool is_negative = false;  // deficit-condition contrastive sample; never
                             // enters a policy-gradient batch
};

// G rollouts for one prompt plus group statistics and normalized advantages.
struct RolloutGroup {
  int64_t task_id = 0;
  ModalityTag tag;
  std::vector<Rollout> rollouts;
  double mu = 0.0;     // mean of rewards
  double sigma = 0.0;  // population std of rewards
  std::vector<double> advantages;
  bool zero_variance = false;  // sigma < sigma_min; advantages all zero

  int group_size() const { return static_cast<int>(rollouts.size()); }
  int64_t token_count() const {
    int64_t n = 0;
    for (const auto& r : rollouts) n += static_cast<int64_t>(r.tokens.size());
    return n;
  }
};

}  // namespace mapo
