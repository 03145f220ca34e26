#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mapo/grpo.hpp"
#include "mapo/parallel.hpp"
#include "mapo/rollout.hpp"
#include "mapo/task_env.hpp"

namespace mapo {

// All rollout groups whose tasks share one required modality tag.
struct TaggedBatch {
  ModalityTag tag;
  std::vector<RolloutGroup> groups;
};

enum class EstimatorKind { ModalityUnaware, ModalityAware };

struct GradientEstimate {
  Eigen::MatrixXd grad;
  int64_t sample_count = 0;  // rollouts that entered the estimate
  EstimatorKind kind = EstimatorKind::ModalityUnaware;
  bool degenerate = false;  // normalization pool(s) had no reward variance
};

enum class MuNormalization { Pooled, PerGroup };

inline std::string to_string(MuNormalization m) {
  return m == MuNormalization::Pooled ? "pooled" : "per-group";
}

inline MuNormalization parse_mu_normalization(const std::string& s) {
  if (s == "pooled") return MuNormalization::Pooled;
  if (s == "per-group") return MuNormalization::PerGroup;
  throw std::invalid_argument("bad mu_normalization: " + s);
}

// Lookup from task id to task, for pairing rollouts with their features.
class TaskIndex {
 public:
  explicit TaskIndex(const std::vector<SyntheticTask>& tasks) {
    for (const auto& t : tasks) by_id_.emplace(t.id, &t);
  }
  const SyntheticTask& at(int64_t id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end())
      throw std::invalid_argument("unknown task id: " + std::to_string(id));
    return *it->second;
  }

 private:
  std::unordered_map<int64_t, const SyntheticTask*> by_id_;
};

namespace detail {

struct PooledStats {
  double mu = 0.0;
  double sigma = 0.0;
  bool degenerate = false;
};

inline PooledStats pooled_stats(const std::vector<double>& rewards, double sigma_min) {
  PooledStats st;
  const double n = static_cast<double>(rewards.size());
  double sum = 0.0;
  for (double r : rewards) sum += r;
  st.mu = sum / n;
  double ss = 0.0;
  for (double r : rewards) ss += (r - st.mu) * (r - st.mu);
  st.sigma = std::sqrt(ss / n);
  st.degenerate = st.sigma < sigma_min;
  return st;
}

}  // namespace detail

// Modality-unaware estimator: one normalization over the pooled rewards of
// the whole mixed batch (or the stored per-group advantages, under the
// per-group flag), then the per-sample average of advantage-weighted score
// functions. With per-group normalization, degenerate groups contribute
// nothing and stay out of the sample count.
inline GradientEstimate grad_mu(const ToyPolicy& policy, const TaskIndex& tasks,
                                const std::vector<RolloutGroup>& batch,
                                MuNormalization normalization = MuNormalization::Pooled,
                                double sigma_min = kSigmaMin) {
  if (batch.empty()) throw std::invalid_argument("grad_mu: empty batch");
  GradientEstimate out;
  out.kind = EstimatorKind::ModalityUnaware;
  out.grad = Eigen::MatrixXd::Zero(policy.input_dim(), policy.vocab_size());

  if (normalization == MuNormalization::Pooled) {
    std::vector<double> rewards;
    for (const auto& g : batch)
      for (const auto& r : g.rollouts) rewards.push_back(r.reward);
    const auto st = detail::pooled_stats(rewards, sigma_min);
    out.sample_count = static_cast<int64_t>(rewards.size());
    if (st.degenerate) {
      out.degenerate = true;
      return out;
    }
    for (const auto& g : batch)
      for (const auto& r : g.rollouts) {
        const double adv = (r.reward - st.mu) / st.sigma;
        out.grad.noalias() += adv * policy_grad_logprob(policy, tasks.at(r.task_id), r);
      }
    out.grad /= static_cast<double>(out.sample_count);
    return out;
  }

  for (const auto& g : batch) {
    if (g.advantages.size() != g.rollouts.size())
      throw std::invalid_argument("grad_mu: group advantages not populated");
    if (g.zero_variance) continue;
    for (size_t i = 0; i < g.rollouts.size(); ++i) {
      const Rollout& r = g.rollouts[i];
      out.grad.noalias() += g.advantages[i] * policy_grad_logprob(policy, tasks.at(r.task_id), r);
      ++out.sample_count;
    }
  }
  if (out.sample_count == 0) {
    out.degenerate = true;
    return out;
  }
  out.grad /= static_cast<double>(out.sample_count);
  return out;
}

enum class StratumWeighting {
  EqualPerTag,   // sum over tags of per-tag means (the stratified training form)
  Proportional,  // per-sample average with per-tag normalization; scale-matched
                 // to grad_mu for variance comparisons
};

// Modality-aware estimator: advantages normalized within each tag's reward
// pool, score functions accumulated per tag in canonical order.
inline GradientEstimate grad_ma(const ToyPolicy& policy, const TaskIndex& tasks,
                                const std::vector<TaggedBatch>& batches,
                                StratumWeighting weighting = StratumWeighting::EqualPerTag,
                                double sigma_min = kSigmaMin) {
  GradientEstimate out;
  out.kind = EstimatorKind::ModalityAware;
  out.grad = Eigen::MatrixXd::Zero(policy.input_dim(), policy.vocab_size());

  int64_t total_rollouts = 0;
  for (const auto& b : batches)
    for (const auto& g : b.groups) total_rollouts += g.group_size();
  if (total_rollouts == 0) throw std::invalid_argument("grad_ma: empty batch");

  std::vector<const TaggedBatch*> ordered;
  for (const auto& b : batches) ordered.push_back(&b);
  std::sort(ordered.begin(), ordered.end(), [](const TaggedBatch* a, const TaggedBatch* b) {
    return canonical_index(a->tag) < canonical_index(b->tag);
  });

  bool any_live_stratum = false;
  for (const TaggedBatch* b : ordered) {
    std::vector<double> rewards;
    for (const auto& g : b->groups) {
      if (!(g.tag == b->tag)) throw std::invalid_argument("grad_ma: group tag mismatch");
      for (const auto& r : g.rollouts) rewards.push_back(r.reward);
    }
    if (rewards.empty()) continue;
    const auto st = detail::pooled_stats(rewards, sigma_min);
    out.sample_count += static_cast<int64_t>(rewards.size());
    if (st.degenerate) continue;
    any_live_stratum = true;
    Eigen::MatrixXd stratum_grad =
        Eigen::MatrixXd::Zero(policy.input_dim(), policy.vocab_size());
    for (const auto& g : b->groups)
      for (const auto& r : g.rollouts) {
        const double adv = (r.reward - st.mu) / st.sigma;
        stratum_grad.noalias() += adv * policy_grad_logprob(policy, tasks.at(r.task_id), r);
      }
    const double denom = weighting == StratumWeighting::EqualPerTag
                             ? static_cast<double>(rewards.size())
                             : static_cast<double>(total_rollouts);
    out.grad.noalias() += stratum_grad / denom;
  }
  out.degenerate = !any_live_stratum;
  return out;
}

struct VarianceStudyOptions {
  int trials = 1000;
  uint64_t seed = 0;
  int groups_per_tag = 2;  // prompts drawn per tag per trial
  int group_size = 8;
  double temperature = 1.0;
  int threads = 1;
  // Parameter distance between the generator snapshot and the point where the
  // score functions are evaluated (per-entry stddev of a seeded perturbation).
  // Replay-style training scores rollouts several updates after generation,
  // which is where stratified normalization pays off: strictly on-policy
  // (set 0), group-normalized advantages make per-prompt score means vanish
  // and the between-tag penalty with them.
  double trainer_displacement = 0.8;
};

struct VarianceReport {
  double var_mu = 0.0;  // trace of empirical covariance of the flattened grad
  double var_ma = 0.0;
  double within = 0.0;   // = var_ma (the stratified estimator keeps only it)
  double between = 0.0;  // var_mu - var_ma; 0 for single-tag corpora
  double ratio = 0.0;    // var_ma / var_mu
  double p_value = 1.0;  // one-sided: is var_ma < var_mu
  bool significant = false;
  int trials = 0;
  std::vector<double> trace_norm_mu;  // per-trial Frobenius norms
  std::vector<double> trace_norm_ma;
};

// Empirical variance comparison of the two estimators over resampled batches.
// Both estimators see the same rollouts per trial, generated under full
// exposure, so the contrast isolates pooled vs. per-tag normalization; the
// modality-aware side uses the proportional stratum weighting to stay on the
// same per-sample scale as the unaware one. Score functions are evaluated at
// the displaced trainer point (see VarianceStudyOptions).
inline VarianceReport variance_study(const ToyPolicy& policy,
                                     const std::vector<SyntheticTask>& corpus,
                                     const RewardOracle& oracle,
                                     const VarianceStudyOptions& opt) {
  if (opt.trials < 30) throw std::invalid_argument("variance_study needs >= 30 trials");
  if (corpus.empty()) throw std::invalid_argument("variance_study: empty corpus");
  if (opt.groups_per_tag < 1) throw std::invalid_argument("groups_per_tag must be >= 1");

  std::map<int, std::vector<const SyntheticTask*>> by_tag;  // canonical index
  for (const auto& t : corpus) by_tag[canonical_index(t.tag)].push_back(&t);
  const TaskIndex index(corpus);

  ToyPolicy scored = policy;  // where the estimators evaluate grad log pi
  if (opt.trainer_displacement > 0.0) {
    Rng rng = make_rng(derive_seed(opt.seed, 0xd15bull));
    Eigen::MatrixXd theta = policy.params();
    for (Eigen::Index r = 0; r < theta.rows(); ++r)
      for (Eigen::Index c = 0; c < theta.cols(); ++c)
        theta(r, c) += opt.trainer_displacement * standard_normal(rng);
    scored.set_params(theta);
  }

  const auto dims = static_cast<int64_t>(policy.input_dim()) * policy.vocab_size();
  std::vector<Eigen::VectorXd> flat_mu(static_cast<size_t>(opt.trials));
  std::vector<Eigen::VectorXd> flat_ma(static_cast<size_t>(opt.trials));

  parallel_for(opt.trials, opt.threads, [&](int64_t trial) {
    std::vector<RolloutGroup> mixed;
    std::vector<TaggedBatch> tagged;
    for (const auto& [tag_idx, tag_tasks] : by_tag) {
      TaggedBatch batch;
      batch.tag = kCanonicalTags[static_cast<size_t>(tag_idx)];
      for (int k = 0; k < opt.groups_per_tag; ++k) {
        const uint64_t pick_seed =
            derive_seed(opt.seed, 0xbadceull + static_cast<uint64_t>(tag_idx),
                        static_cast<uint64_t>(trial) * 1000003ull + static_cast<uint64_t>(k));
        Rng rng = make_rng(pick_seed);
        SyntheticTask task =
            *tag_tasks[static_cast<size_t>(uniform_int(rng, 0, static_cast<int>(tag_tasks.size()) - 1))];
        task.exposure = tags::VAS;  // exposure equalized across estimators
        RolloutGroup g = make_rollout_group(policy, oracle, task, opt.group_size,
                                            opt.temperature, derive_seed(pick_seed, 0x9011ull));
        mixed.push_back(g);
        batch.groups.push_back(std::move(g));
      }
      tagged.push_back(std::move(batch));
    }
    const GradientEstimate mu = grad_mu(scored, index, mixed, MuNormalization::Pooled);
    const GradientEstimate ma =
        grad_ma(scored, index, tagged, StratumWeighting::Proportional);
    flat_mu[static_cast<size_t>(trial)] =
        Eigen::Map<const Eigen::VectorXd>(mu.grad.data(), dims);
    flat_ma[static_cast<size_t>(trial)] =
        Eigen::Map<const Eigen::VectorXd>(ma.grad.data(), dims);
  });

  VarianceReport report;
  report.trials = opt.trials;
  Eigen::VectorXd mean_mu = Eigen::VectorXd::Zero(dims);
  Eigen::VectorXd mean_ma = Eigen::VectorXd::Zero(dims);
  for (int t = 0; t < opt.trials; ++t) {
    mean_mu += flat_mu[static_cast<size_t>(t)];
    mean_ma += flat_ma[static_cast<size_t>(t)];
  }
  mean_mu /= opt.trials;
  mean_ma /= opt.trials;

  std::vector<double> dev_mu(static_cast<size_t>(opt.trials));
  std::vector<double> dev_ma(static_cast<size_t>(opt.trials));
  for (int t = 0; t < opt.trials; ++t) {
    dev_mu[static_cast<size_t>(t)] = (flat_mu[static_cast<size_t>(t)] - mean_mu).squaredNorm();
    dev_ma[static_cast<size_t>(t)] = (flat_ma[static_cast<size_t>(t)] - mean_ma).squaredNorm();
    report.trace_norm_mu.push_back(flat_mu[static_cast<size_t>(t)].norm());
    report.trace_norm_ma.push_back(flat_ma[static_cast<size_t>(t)].norm());
    report.var_mu += dev_mu[static_cast<size_t>(t)];
    report.var_ma += dev_ma[static_cast<size_t>(t)];
  }
  report.var_mu /= opt.trials;
  report.var_ma /= opt.trials;
  report.within = report.var_ma;
  report.between = by_tag.size() < 2 ? 0.0 : report.var_mu - report.var_ma;
  report.ratio = report.var_mu > 0 ? report.var_ma / report.var_mu : 1.0;

  // Paired one-sided test on per-trial squared deviations.
  double mean_diff = 0.0;
  for (int t = 0; t < opt.trials; ++t)
    mean_diff += dev_mu[static_cast<size_t>(t)] - dev_ma[static_cast<size_t>(t)];
  mean_diff /= opt.trials;
  double ss = 0.0;
  for (int t = 0; t < opt.trials; ++t) {
    const double d =
        dev_mu[static_cast<size_t>(t)] - dev_ma[static_cast<size_t>(t)] - mean_diff;
    ss += d * d;
  }
  const double sd = std::sqrt(ss / (opt.trials - 1));
  if (sd < 1e-300) {
    report.p_value = mean_diff > 0 ? 0.0 : 1.0;
  } else {
    const double z = mean_diff / (sd / std::sqrt(static_cast<double>(opt.trials)));
    report.p_value = 0.5 * std::erfc(z / std::sqrt(2.0));
  }
  report.significant = report.p_value < 0.01;
  return report;
}

enum class FilterMode { None, Early, Mid };

inline std::string to_string(FilterMode m) {
  switch (m) {
    case FilterMode::None: return "none";
    case FilterMode::Early: return "early";
    case FilterMode::Mid: return "mid";
  }
  throw std::invalid_argument("unknown filter mode");
}

inline FilterMode parse_filter_mode(const std::string& s) {
  if (s == "none") return FilterMode::None;
  if (s == "early") return FilterMode::Early;
  if (s == "mid") return FilterMode::Mid;
  throw std::invalid_argument("bad filter mode: " + s);
}

struct FilterPolicy {
  FilterMode mode = FilterMode::None;
  int activation_epoch = 2;  // mid-mode: filter from this epoch (1-based) on
};

struct FilterResult {
  std::vector<RolloutGroup> kept;
  int64_t dropped_count = 0;  // groups removed
};

// Zero-variance dynamic sampling. Dropping flagged groups never changes a
// gradient (their advantages are identically zero); it only skips their
// compute.
inline FilterResult apply_filter(const std::vector<RolloutGroup>& groups,
                                 const FilterPolicy& policy, int epoch) {
  FilterResult out;
  const bool active = policy.mode == FilterMode::Early ||
                      (policy.mode == FilterMode::Mid && epoch >= policy.activation_epoch);
  for (const auto& g : groups) {
    if (active && g.zero_variance) {
      ++out.dropped_count;
      continue;
    }
    out.kept.push_back(g);
  }
  return out;
}

struct SurrogateGradient {
  Eigen::MatrixXd grad;  // gradient of the aggregate surrogate (to ascend)
  BatchObjective objective;
};

// Gradient of aggregate_loss with respect to the trainer parameters.
// Per token, the min selects either the live branch rho*A (derivative
// A * rho * grad log pi) or the clipped constant (derivative zero).
// Zero-variance rollouts run the full per-token pipeline (that is the compute
// early filtering saves) but every term they produce is exactly zero and they
// stay out of all denominators, so the gradient is identical whether or not
// they were filtered out beforehand.
inline SurrogateGradient surrogate_gradient(const ToyPolicy& policy, const TaskIndex& tasks,
                                            const std::vector<RolloutGroup>& groups,
                                            const ClipConfig& clip, AggregationMode mode,
                                            int threads = 1) {
  SurrogateGradient out;
  out.objective = aggregate_loss(groups, clip, mode);
  out.grad = Eigen::MatrixXd::Zero(policy.input_dim(), policy.vocab_size());

  struct RolloutRef {
    const RolloutGroup* group;
    size_t index;
    bool contributing;
  };
  std::vector<RolloutRef> refs;
  for (const auto& g : groups)
    for (size_t i = 0; i < g.rollouts.size(); ++i) refs.push_back({&g, i, !g.zero_variance});
  if (refs.empty()) return out;

  std::vector<Eigen::MatrixXd> grads(refs.size());
  std::vector<int64_t> lens(refs.size());
  parallel_for(static_cast<int64_t>(refs.size()), threads, [&](int64_t k) {
    const RolloutGroup& g = *refs[static_cast<size_t>(k)].group;
    const size_t i = refs[static_cast<size_t>(k)].index;
    const Rollout& r = g.rollouts[i];
    const SyntheticTask& task = tasks.at(r.task_id);
    const double adv = g.advantages[i];
    const std::vector<double> ratios = importance_ratios(r);
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(policy.input_dim(), policy.vocab_size());
    for (size_t t = 0; t < ratios.size(); ++t) {
      const TokenObjective o = clipped_token_objective(ratios[t], adv, clip);
      if (o.clipped) continue;
      const Eigen::VectorXd phi =
          policy.feature_vector(task.features, r.exposure, static_cast<int>(t));
      Eigen::VectorXd delta = -policy.action_distribution(phi);
      delta[r.tokens[t]] += 1.0;
      acc.noalias() += (adv * ratios[t]) * (phi * delta.transpose());
    }
    grads[static_cast<size_t>(k)] = std::move(acc);
    lens[static_cast<size_t>(k)] = static_cast<int64_t>(ratios.size());
  });

  int64_t contributing_rollouts = 0;
  int64_t contributing_tokens = 0;
  for (size_t k = 0; k < refs.size(); ++k) {
    if (!refs[k].contributing) continue;
    ++contributing_rollouts;
    contributing_tokens += lens[k];
  }
  if (contributing_rollouts == 0) return out;  // fully degenerate batch: no-op

  switch (mode) {
    case AggregationMode::TokenLevel:
      for (const auto& g : grads) out.grad.noalias() += g;
      out.grad /= static_cast<double>(contributing_tokens);
      break;
    case AggregationMode::SampleLevel:
      for (size_t k = 0; k < grads.size(); ++k)
        out.grad.noalias() += grads[k] / static_cast<double>(lens[k]);
      out.grad /= static_cast<double>(contributing_rollouts);
      break;
    case AggregationMode::PromptLevel:
      for (const auto& g : grads) out.grad.noalias() += g;
      out.grad /= static_cast<double>(contributing_rollouts);
      break;
  }
  return out;
}

}  // namespace mapo
