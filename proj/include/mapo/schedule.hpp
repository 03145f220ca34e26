#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mapo/difficulty.hpp"
#include "mapo/modality.hpp"

namespace mapo {

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

struct TagWeight {
  ModalityTag tag;
  double z = 0.0;
  double w = 0.5;  // sigmoid(z), strictly inside (0,1)
};

// Keeps sigmoid(z) strictly inside (0,1) at double precision; z-scores this
// large only arise from the +eps stabilizer on a constant history.
inline constexpr double kZsClamp = 36.0;

// Difficulty-adaptive stratum weight:
//   z = (d_kl - mu_H) / (sigma_H + eps),  w = sigmoid(z)
// An empty history yields the neutral z = 0, w = 0.5.
inline TagWeight adaptive_weight(double d_kl, const KlHistory& history,
                                 double eps = kHistoryEps) {
  TagWeight tw;
  tw.tag = history.tag();
  if (!history.empty()) {
    const KlHistory::Stats st = history.stats();
    tw.z = std::clamp((d_kl - st.mu) / (st.sigma + eps), -kZsClamp, kZsClamp);
  }
  tw.w = sigmoid(tw.z);
  return tw;
}

enum class CurriculumMode { None, Static, Dynamic };

inline std::string to_string(CurriculumMode m) {
  switch (m) {
    case CurriculumMode::None: return "none";
    case CurriculumMode::Static: return "static";
    case CurriculumMode::Dynamic: return "dynamic";
  }
  throw std::invalid_argument("unknown curriculum mode");
}

inline CurriculumMode parse_curriculum_mode(const std::string& s) {
  if (s == "none") return CurriculumMode::None;
  if (s == "static") return CurriculumMode::Static;
  if (s == "dynamic") return CurriculumMode::Dynamic;
  throw std::invalid_argument("bad curriculum mode: " + s);
}

inline constexpr size_t kCurriculumWindow = 5;  // L_W

struct CurriculumPlan {
  CurriculumMode mode = CurriculumMode::Static;
  std::array<ModalityTag, 7> order = kCanonicalTags;
  size_t window = kCurriculumWindow;
};

// Complexity-ascending order: uni -> bi -> tri, V before A before S inside a
// level. This is also the tie-break for every other ordering.
inline CurriculumPlan static_order() {
  CurriculumPlan plan;
  plan.mode = CurriculumMode::Static;
  plan.order = kCanonicalTags;
  return plan;
}

// KL-driven plan. Epoch 1 orders by zero-shot accuracy ascending (hardest
// first); later epochs order by the windowed mean of recent KL scores,
// descending. Ties fall back to the static order. An empty zero-shot map is
// allowed and degrades epoch 1 to the static order.
inline CurriculumPlan dynamic_order(
    const std::map<ModalityTag, KlHistory, TagCanonicalLess>& histories,
    const std::map<ModalityTag, double, TagCanonicalLess>& zero_shot_acc, int epoch,
    size_t window = kCurriculumWindow) {
  if (epoch < 1) throw std::invalid_argument("epoch must be >= 1");
  if (window < 1) throw std::invalid_argument("curriculum window must be >= 1");
  CurriculumPlan plan;
  plan.mode = CurriculumMode::Dynamic;
  plan.window = window;

  std::array<double, 7> priority{};  // higher schedules earlier
  if (epoch == 1) {
    if (zero_shot_acc.empty()) {
      plan.order = kCanonicalTags;  // no zero-shot data: fall back to static
      return plan;
    }
    std::string missing;
    for (ModalityTag tag : kCanonicalTags)
      if (!zero_shot_acc.count(tag)) missing += missing.empty() ? tag.to_string() : "," + tag.to_string();
    if (!missing.empty())
      throw std::invalid_argument("dynamic_order: missing zero-shot accuracy for: " + missing);
    for (ModalityTag tag : kCanonicalTags)
      priority[static_cast<size_t>(canonical_index(tag))] = -zero_shot_acc.at(tag);
  } else {
    for (ModalityTag tag : kCanonicalTags) {
      auto it = histories.find(tag);
      priority[static_cast<size_t>(canonical_index(tag))] =
          it == histories.end() ? 0.0 : it->second.recent_mean(window);
    }
  }

  std::array<int, 7> idx = {0, 1, 2, 3, 4, 5, 6};
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return priority[static_cast<size_t>(a)] > priority[static_cast<size_t>(b)];
  });
  for (int i = 0; i < 7; ++i)
    plan.order[static_cast<size_t>(i)] = kCanonicalTags[static_cast<size_t>(idx[static_cast<size_t>(i)])];
  return plan;
}

inline bool is_permutation_of_all_tags(const std::array<ModalityTag, 7>& order) {
  std::array<bool, 7> seen{};
  for (ModalityTag t : order) {
    const int i = canonical_index(t);
    if (seen[static_cast<size_t>(i)]) return false;
    seen[static_cast<size_t>(i)] = true;
  }
  return true;
}

}  // namespace mapo
