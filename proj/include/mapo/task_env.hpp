#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <stdexcept>
#include <string>
#include <vector>

#include "mapo/grpo.hpp"
#include "mapo/modality.hpp"
#include "mapo/policy.hpp"
#include "mapo/rng.hpp"
#include "mapo/rollout.hpp"

namespace mapo {

enum class Stratum { Exact, Superset, Deficit };

inline std::string to_string(Stratum s) {
  switch (s) {
    case Stratum::Exact: return "exact";
    case Stratum::Superset: return "superset";
    case Stratum::Deficit: return "deficit";
  }
  throw std::invalid_argument("unknown stratum");
}

inline Stratum parse_stratum(const std::string& s) {
  if (s == "exact") return Stratum::Exact;
  if (s == "superset") return Stratum::Superset;
  if (s == "deficit") return Stratum::Deficit;
  throw std::invalid_argument("bad stratum: " + s);
}

struct SyntheticTask {
  int64_t id = 0;
  ModalityTag tag;        // required modality tag
  Stratum stratum = Stratum::Exact;
  ModalityTag exposure;   // modalities revealed at rollout time
  FeatureBlocks features; // all three blocks always populated
  std::vector<int> target;
};

struct EnvSpec {
  int feature_dim = 4;
  int vocab_size = 8;
  int rollout_len = 4;

  void validate() const {
    if (feature_dim < 1) throw std::invalid_argument("feature_dim must be >= 1");
    if (vocab_size < 2) throw std::invalid_argument("vocab_size must be >= 2");
    if (rollout_len < 1) throw std::invalid_argument("rollout_len must be >= 1");
  }
};

// Fixed random projection used to derive targets from features. Targets
// depend only on the feature blocks of the task's tag members, so masking a
// required modality destroys recoverability while extra modalities change
// nothing.
struct TargetProjection {
  Eigen::MatrixXd feature_weights;  // (3F) x A
  Eigen::MatrixXd position_scores;  // T x A

  static TargetProjection make(uint64_t corpus_seed, const EnvSpec& env) {
    Rng rng = make_rng(derive_seed(corpus_seed, 0xfacadeull));
    TargetProjection p;
    p.feature_weights = Eigen::MatrixXd(3 * env.feature_dim, env.vocab_size);
    for (int i = 0; i < p.feature_weights.rows(); ++i)
      for (int j = 0; j < p.feature_weights.cols(); ++j)
        p.feature_weights(i, j) = standard_normal(rng);
    p.position_scores = Eigen::MatrixXd(env.rollout_len, env.vocab_size);
    for (int i = 0; i < p.position_scores.rows(); ++i)
      for (int j = 0; j < p.position_scores.cols(); ++j)
        p.position_scores(i, j) = standard_normal(rng);
    return p;
  }

  std::vector<int> target_for(const FeatureBlocks& features, ModalityTag tag,
                              const EnvSpec& env) const {
    const int fd = env.feature_dim;
    Eigen::VectorXd masked = Eigen::VectorXd::Zero(3 * fd);
    for (Modality m : kAllModalities) {
      if (!tag.contains(m)) continue;
      const int base = static_cast<int>(m) * fd;
      for (int k = 0; k < fd; ++k)
        masked[base + k] = features[static_cast<size_t>(m)][static_cast<size_t>(k)];
    }
    const Eigen::VectorXd base_scores = feature_weights.transpose() * masked;
    std::vector<int> target(static_cast<size_t>(env.rollout_len));
    for (int t = 0; t < env.rollout_len; ++t) {
      int best = 0;
      double best_score = -std::numeric_limits<double>::infinity();
      for (int a = 0; a < env.vocab_size; ++a) {
        const double s = base_scores[a] + position_scores(t, a);
        if (s > best_score) {
          best_score = s;
          best = a;
        }
      }
      target[static_cast<size_t>(t)] = best;
    }
    return target;
  }
};

struct StrataDistribution {
  double exact = 1.0;
  double superset = 0.0;
  double deficit = 0.0;

  void validate() const {
    if (exact < 0 || superset < 0 || deficit < 0)
      throw std::invalid_argument("strata weights must be nonnegative");
    if (exact + superset + deficit <= 0)
      throw std::invalid_argument("strata weights must not all be zero");
  }
};

namespace detail {

// Quota allocation by largest remainder; keeps realized proportions within
// one task of the request.
inline std::array<int, 3> stratum_quota(int n, const StrataDistribution& d) {
  const double total = d.exact + d.superset + d.deficit;
  const std::array<double, 3> w = {d.exact / total, d.superset / total, d.deficit / total};
  std::array<int, 3> counts{};
  std::array<double, 3> frac{};
  int assigned = 0;
  for (int k = 0; k < 3; ++k) {
    const double exactly = w[static_cast<size_t>(k)] * n;
    counts[static_cast<size_t>(k)] = static_cast<int>(std::floor(exactly));
    frac[static_cast<size_t>(k)] = exactly - std::floor(exactly);
    assigned += counts[static_cast<size_t>(k)];
  }
  while (assigned < n) {
    int best = 0;
    for (int k = 1; k < 3; ++k)
      if (frac[static_cast<size_t>(k)] > frac[static_cast<size_t>(best)]) best = k;
    frac[static_cast<size_t>(best)] = -1.0;
    ++counts[static_cast<size_t>(best)];
    ++assigned;
  }
  return counts;
}

inline ModalityTag superset_exposure(ModalityTag tag, Rng& rng) {
  std::vector<ModalityTag> options;
  for (ModalityTag t : kCanonicalTags)
    if (t.contains(tag) && !(t == tag)) options.push_back(t);
  if (options.empty()) return tag;  // VAS has no proper superset
  return options[static_cast<size_t>(uniform_int(rng, 0, static_cast<int>(options.size()) - 1))];
}

inline ModalityTag deficit_exposure(ModalityTag tag, Rng& rng) {
  std::vector<Modality> members;
  for (Modality m : kAllModalities)
    if (tag.contains(m)) members.push_back(m);
  const Modality removed =
      members[static_cast<size_t>(uniform_int(rng, 0, static_cast<int>(members.size()) - 1))];
  ModalityTag exposure = tag.without(removed);
  if (!exposure.empty()) return exposure;
  // Uni-modal tag: reveal one of the two modalities the task does not need,
  // so the exposure stays a valid nonempty tag while missing the required one.
  std::vector<Modality> others;
  for (Modality m : kAllModalities)
    if (!tag.contains(m)) others.push_back(m);
  return ModalityTag().with(
      others[static_cast<size_t>(uniform_int(rng, 0, static_cast<int>(others.size()) - 1))]);
}

}  // namespace detail

// Deterministic synthetic corpus: per-tag counts, stratum quotas, uniform
// [-1,1] features, projection-derived targets.
inline std::vector<SyntheticTask> generate_tasks(
    uint64_t seed, const std::map<ModalityTag, int, TagCanonicalLess>& count_per_tag,
    const StrataDistribution& strata, const EnvSpec& env) {
  env.validate();
  strata.validate();
  int total = 0;
  for (const auto& [tag, count] : count_per_tag) {
    if (count < 0) throw std::invalid_argument("task counts must be >= 0");
    total += count;
  }
  if (total == 0) throw std::invalid_argument("empty corpus: all task counts are zero");

  const TargetProjection proj = TargetProjection::make(seed, env);
  std::vector<SyntheticTask> tasks;
  tasks.reserve(static_cast<size_t>(total));
  int64_t next_id = 0;
  for (ModalityTag tag : kCanonicalTags) {
    auto it = count_per_tag.find(tag);
    if (it == count_per_tag.end() || it->second == 0) continue;
    const int n = it->second;
    const std::array<int, 3> quota = detail::stratum_quota(n, strata);
    for (int i = 0; i < n; ++i) {
      SyntheticTask task;
      task.id = next_id++;
      task.tag = tag;
      task.stratum = i < quota[0]             ? Stratum::Exact
                     : i < quota[0] + quota[1] ? Stratum::Superset
                                               : Stratum::Deficit;
      Rng rng = make_rng(derive_seed(seed, 0x7a5c5ull + tag.bits(), static_cast<uint64_t>(i)));
      for (Modality m : kAllModalities) {
        auto& block = task.features[static_cast<size_t>(m)];
        block.resize(static_cast<size_t>(env.feature_dim));
        for (double& f : block) f = uniform_real(rng, -1.0, 1.0);
      }
      switch (task.stratum) {
        case Stratum::Exact: task.exposure = tag; break;
        case Stratum::Superset: task.exposure = detail::superset_exposure(tag, rng); break;
        case Stratum::Deficit: task.exposure = detail::deficit_exposure(tag, rng); break;
      }
      task.target = proj.target_for(task.features, tag, env);
      tasks.push_back(std::move(task));
    }
  }
  return tasks;
}

enum class RewardMode { BinaryQa, ContinuousCaption };

inline std::string to_string(RewardMode m) {
  return m == RewardMode::BinaryQa ? "binary-qa" : "continuous-caption";
}

inline RewardMode parse_reward_mode(const std::string& s) {
  if (s == "binary-qa") return RewardMode::BinaryQa;
  if (s == "continuous-caption") return RewardMode::ContinuousCaption;
  throw std::invalid_argument("bad reward mode: " + s);
}

// Scores rollouts against the task target. Continuous rewards are the
// matched-token fraction plus a per-tag offset (clipped back to [0,1]); the
// offsets manufacture between-group mean differences. Binary rewards are
// 1 iff every token matches and take no offset.
class RewardOracle {
 public:
  RewardOracle() = default;
  explicit RewardOracle(RewardMode mode) : mode_(mode) {}

  RewardMode mode() const { return mode_; }

  void set_offset(ModalityTag tag, double offset) {
    offsets_[static_cast<size_t>(canonical_index(tag))] = offset;
  }
  double offset(ModalityTag tag) const {
    return offsets_[static_cast<size_t>(canonical_index(tag))];
  }

  double score(const SyntheticTask& task, const std::vector<int>& tokens) const {
    if (tokens.size() != task.target.size())
      throw std::invalid_argument("token/target length mismatch");
    int matched = 0;
    for (size_t t = 0; t < tokens.size(); ++t)
      if (tokens[t] == task.target[t]) ++matched;
    if (mode_ == RewardMode::BinaryQa)
      return matched == static_cast<int>(tokens.size()) ? 1.0 : 0.0;
    const double frac = static_cast<double>(matched) / static_cast<double>(tokens.size());
    return std::clamp(frac + offset(task.tag), 0.0, 1.0);
  }

 private:
  RewardMode mode_ = RewardMode::ContinuousCaption;
  std::array<double, 7> offsets_{};
};

// G rollouts for one prompt, scored and group-normalized. Deterministic per
// (seed): rollout i draws from its own derived stream, so groups can be
// generated in parallel without changing results.
inline RolloutGroup make_rollout_group(const ToyPolicy& policy, const RewardOracle& oracle,
                                       const SyntheticTask& task, int group_size,
                                       double temperature, uint64_t seed,
                                       double sigma_min = kSigmaMin) {
  if (group_size < 2) throw std::invalid_argument("group size must be >= 2");
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  RolloutGroup group;
  group.task_id = task.id;
  group.tag = task.tag;
  group.rollouts.reserve(static_cast<size_t>(group_size));
  for (int i = 0; i < group_size; ++i) {
    Rng rng = make_rng(derive_seed(seed, 0x0110ull, static_cast<uint64_t>(i)));
    Rollout r;
    r.task_id = task.id;
    r.tag = task.tag;
    r.exposure = task.exposure;
    r.tokens.reserve(static_cast<size_t>(policy.rollout_len()));
    r.gen_logprobs.reserve(static_cast<size_t>(policy.rollout_len()));
    for (int t = 0; t < policy.rollout_len(); ++t) {
      const ToyPolicy::Draw d = policy.sample_token(task.features, task.exposure, t, temperature, rng);
      r.tokens.push_back(d.token);
      r.gen_logprobs.push_back(d.logprob);
    }
    r.train_logprobs = policy.sequence_logprobs(task.features, task.exposure, r.tokens);
    r.reward = oracle.score(task, r.tokens);
    group.rollouts.push_back(std::move(r));
  }
  finalize_group(group, sigma_min);
  return group;
}

// Exact score-function gradient of the rollout's sequence log-likelihood.
inline Eigen::MatrixXd policy_grad_logprob(const ToyPolicy& policy, const SyntheticTask& task,
                                           const Rollout& rollout) {
  return policy.grad_sequence_logprob(task.features, rollout.exposure, rollout.tokens);
}

// ---- corpus serialization: one JSON object per line ----

inline nlohmann::json task_to_json(const SyntheticTask& t) {
  nlohmann::json features;
  for (Modality m : kAllModalities)
    features[std::string(1, modality_char(m))] = t.features[static_cast<size_t>(m)];
  return nlohmann::json{{"id", t.id},
                        {"tag", t.tag.to_string()},
                        {"stratum", to_string(t.stratum)},
                        {"exposure", t.exposure.to_string()},
                        {"features", features},
                        {"target", t.target}};
}

inline SyntheticTask task_from_json(const nlohmann::json& j) {
  SyntheticTask t;
  t.id = j.at("id").get<int64_t>();
  t.tag = ModalityTag::parse(j.at("tag").get<std::string>());
  t.stratum = parse_stratum(j.at("stratum").get<std::string>());
  t.exposure = ModalityTag::parse(j.at("exposure").get<std::string>());
  const auto& features = j.at("features");
  for (Modality m : kAllModalities)
    t.features[static_cast<size_t>(m)] =
        features.at(std::string(1, modality_char(m))).get<std::vector<double>>();
  t.target = j.at("target").get<std::vector<int>>();
  return t;
}

inline void save_corpus(const std::vector<SyntheticTask>& tasks, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open corpus file for writing: " + path);
  for (const auto& t : tasks) out << task_to_json(t).dump() << '\n';
}

inline std::vector<SyntheticTask> load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus file: " + path);
  std::vector<SyntheticTask> tasks;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    tasks.push_back(task_from_json(nlohmann::json::parse(line)));
  }
  if (tasks.empty()) throw std::runtime_error("corpus file has no tasks: " + path);
  return tasks;
}

}  // namespace mapo
