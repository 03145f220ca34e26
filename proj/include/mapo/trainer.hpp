#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "mapo/config.hpp"
#include "mapo/crw.hpp"
#include "mapo/difficulty.hpp"
#include "mapo/grpo.hpp"
#include "mapo/metrics.hpp"
#include "mapo/parallel.hpp"
#include "mapo/schedule.hpp"
#include "mapo/stratified.hpp"
#include "mapo/task_env.hpp"

namespace mapo {

struct StepRecord {
  int64_t step = 0;  // 1-based, monotone
  int epoch = 0;
  std::string tag;  // tag string, or "mixed" for modality-unaware batches
  double loss = 0.0;
  double grad_norm = 0.0;  // weighted gradient norm before the norm clip
  double clip_fraction = 0.0;
  double mean_reward = 0.0;  // over all the step's rollouts, before filtering
  double d_kl = 0.0;
  double w = 1.0;
  int64_t dropped_count = 0;  // groups removed by the filter
  double wall_ms = 0.0;       // serialized to the timing sidecar, not the step log
};

// Step log line; wall_ms stays out so (seed, config) fully determine the bytes.
inline nlohmann::json step_to_json(const StepRecord& r) {
  return nlohmann::json{{"step", r.step},
                        {"epoch", r.epoch},
                        {"tag", r.tag},
                        {"loss", r.loss},
                        {"grad_norm", r.grad_norm},
                        {"clip_fraction", r.clip_fraction},
                        {"mean_reward", r.mean_reward},
                        {"d_kl", r.d_kl},
                        {"w", r.w},
                        {"dropped_count", r.dropped_count}};
}

inline void save_params(const Eigen::MatrixXd& theta, const std::string& path) {
  nlohmann::json j;
  j["rows"] = theta.rows();
  j["cols"] = theta.cols();
  std::vector<double> data;
  data.reserve(static_cast<size_t>(theta.size()));
  for (Eigen::Index r = 0; r < theta.rows(); ++r)
    for (Eigen::Index c = 0; c < theta.cols(); ++c) data.push_back(theta(r, c));
  j["data"] = data;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write params file: " + path);
  out << j.dump() << '\n';
}

inline Eigen::MatrixXd load_params(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open params file: " + path);
  nlohmann::json j;
  in >> j;
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(data.size()) != rows * cols)
    throw std::runtime_error("params file data size mismatch");
  Eigen::MatrixXd theta(rows, cols);
  size_t k = 0;
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) theta(r, c) = data[k++];
  return theta;
}

// Loads or generates the corpus. A corpus file fixes feature_dim and
// rollout_len, so those env fields are inferred from it; vocab_size cannot be
// read off the file and must come from the config.
inline std::vector<SyntheticTask> materialize_corpus(RunConfig& c) {
  std::vector<SyntheticTask> tasks;
  if (!c.corpus.path.empty()) {
    tasks = load_corpus(c.corpus.path);
    c.env.feature_dim = static_cast<int>(tasks.front().features[0].size());
    c.env.rollout_len = static_cast<int>(tasks.front().target.size());
    c.env.validate();
    for (const auto& t : tasks) {
      for (Modality m : kAllModalities)
        if (static_cast<int>(t.features[static_cast<size_t>(m)].size()) != c.env.feature_dim)
          throw std::runtime_error("corpus has inconsistent feature dimensions");
      if (static_cast<int>(t.target.size()) != c.env.rollout_len)
        throw std::runtime_error("corpus has inconsistent target lengths");
      for (int tok : t.target)
        if (tok < 0 || tok >= c.env.vocab_size)
          throw std::runtime_error(
              "corpus target token outside env.vocab_size; pass the vocabulary "
              "size the corpus was generated with");
    }
  } else {
    tasks = generate_tasks(c.seed, c.corpus.count_per_tag, c.corpus.strata, c.env);
  }
  return tasks;
}

inline ToyPolicy make_policy(const RunConfig& c) {
  ToyPolicy policy(c.env.feature_dim, c.env.vocab_size, c.env.rollout_len);
  if (c.init_scale > 0.0) {
    Rng rng = make_rng(derive_seed(c.seed, 0x1417ull));
    Eigen::MatrixXd theta(policy.input_dim(), policy.vocab_size());
    for (Eigen::Index r = 0; r < theta.rows(); ++r)
      for (Eigen::Index col = 0; col < theta.cols(); ++col)
        theta(r, col) = c.init_scale * standard_normal(rng);
    policy.set_params(theta);
  }
  return policy;
}

struct TrainResult {
  std::string run_dir;
  Eigen::MatrixXd final_params;
  std::vector<StepRecord> records;
  int64_t total_groups = 0;
  int64_t total_rollouts = 0;  // generated = steps' groups x G
  int64_t dropped_groups = 0;
};

namespace detail {

struct Chunk {
  ModalityTag tag;  // meaningful for stratified batches
  bool mixed = false;
  std::vector<SyntheticTask> tasks;  // exposure already set for this run
};

struct CrwLogLine {
  int64_t task_id;
  int rollout;
  double s;
  bool gate;
  double r_pos;
  double r_weighted;
};

inline double kl_for_mode(RewardMode mode, const std::vector<double>& rewards) {
  return mode == RewardMode::BinaryQa ? kl_binary(rewards) : kl_continuous(rewards);
}

}  // namespace detail

// Runs the configured training loop and writes the run directory:
//   config.json     effective configuration echo
//   tasks.jsonl     the corpus, when generated rather than loaded
//   steps.jsonl     one StepRecord per optimizer step (deterministic bytes)
//   difficulty.jsonl per-step difficulty and weighting signals
//   plan.jsonl      per-epoch curriculum order
//   crw.jsonl       per-rollout contrastive reweighting, when enabled
//   timing.jsonl    per-step wall time (the one nondeterministic output)
//   params.json     final parameters
//   summary.json    budget accounting
inline TrainResult train(RunConfig config, const std::string& out_dir) {
  config.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const auto path = [&](const std::string& name) { return (fs::path(out_dir) / name).string(); };

  std::vector<SyntheticTask> corpus = materialize_corpus(config);  // resolves env
  {
    std::ofstream cfg(path("config.json"));
    if (!cfg) throw std::runtime_error("cannot write run directory: " + out_dir);
    cfg << config_to_json(config).dump(2) << '\n';
  }
  if (config.corpus.path.empty()) save_corpus(corpus, path("tasks.jsonl"));
  const TaskIndex index(corpus);
  const RewardOracle oracle = config.make_oracle();
  ToyPolicy policy = make_policy(config);
  const bool mapo = config.optimizer == Optimizer::Mapo;

  std::map<ModalityTag, std::vector<const SyntheticTask*>, TagCanonicalLess> by_tag;
  for (const auto& t : corpus) by_tag[t.tag].push_back(&t);

  // History capacity ~ steps per epoch, so one window spans a training cycle.
  int64_t steps_per_epoch = 0;
  if (mapo) {
    for (const auto& [tag, tasks] : by_tag)
      steps_per_epoch += (static_cast<int64_t>(tasks.size()) + config.groups_per_step - 1) /
                         config.groups_per_step;
  } else {
    steps_per_epoch = (static_cast<int64_t>(corpus.size()) + config.groups_per_step - 1) /
                      config.groups_per_step;
  }
  const size_t history_capacity = static_cast<size_t>(std::max<int64_t>(1, steps_per_epoch));

  std::map<ModalityTag, KlHistory, TagCanonicalLess> histories;
  for (ModalityTag tag : kCanonicalTags) histories.emplace(tag, KlHistory(history_capacity, tag));
  KlHistory mixed_history(history_capacity);

  std::ofstream steps_out(path("steps.jsonl"));
  std::ofstream difficulty_out(path("difficulty.jsonl"));
  std::ofstream plan_out(path("plan.jsonl"));
  std::ofstream timing_out(path("timing.jsonl"));
  std::ofstream crw_out;
  if (config.crw.enabled) crw_out.open(path("crw.jsonl"));

  TrainResult result;
  result.run_dir = out_dir;
  int64_t step = 0;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    // Epoch plan: which strata run, in which order.
    CurriculumPlan plan = static_order();
    if (mapo) {
      switch (config.curriculum) {
        case CurriculumMode::None: {
          plan.mode = CurriculumMode::None;
          Rng rng = make_rng(derive_seed(config.seed, 0x3ead5ull, static_cast<uint64_t>(epoch)));
          for (int i = 6; i > 0; --i)
            std::swap(plan.order[static_cast<size_t>(i)],
                      plan.order[static_cast<size_t>(uniform_int(rng, 0, i))]);
          break;
        }
        case CurriculumMode::Static: plan = static_order(); break;
        case CurriculumMode::Dynamic: {
          std::map<ModalityTag, double, TagCanonicalLess> zero_shot;
          if (config.zero_shot) zero_shot = *config.zero_shot;
          plan = dynamic_order(histories, zero_shot, epoch);
          break;
        }
      }
    }
    {
      std::string order;
      if (mapo) {
        for (ModalityTag tag : plan.order) {
          if (!order.empty()) order += ',';
          order += tag.to_string();
        }
      } else {
        order = "mixed";
      }
      plan_out << nlohmann::json{{"epoch", epoch}, {"order", order}}.dump() << '\n';
    }

    // Chunk list for this epoch.
    std::vector<detail::Chunk> chunks;
    if (mapo) {
      for (ModalityTag tag : plan.order) {
        auto it = by_tag.find(tag);
        if (it == by_tag.end()) continue;
        const auto& tag_tasks = it->second;
        for (size_t start = 0; start < tag_tasks.size();
             start += static_cast<size_t>(config.groups_per_step)) {
          detail::Chunk chunk;
          chunk.tag = tag;
          const size_t end =
              std::min(tag_tasks.size(), start + static_cast<size_t>(config.groups_per_step));
          for (size_t i = start; i < end; ++i) {
            SyntheticTask t = *tag_tasks[i];
            t.exposure = t.tag;  // modality-exact exposure
            chunk.tasks.push_back(std::move(t));
          }
          chunks.push_back(std::move(chunk));
        }
      }
    } else {
      std::vector<const SyntheticTask*> shuffled;
      for (const auto& t : corpus) shuffled.push_back(&t);
      Rng rng = make_rng(derive_seed(config.seed, 0x50f71eull, static_cast<uint64_t>(epoch)));
      for (size_t i = shuffled.size() - 1; i > 0; --i)
        std::swap(shuffled[i], shuffled[static_cast<size_t>(
                                   uniform_int(rng, 0, static_cast<int>(i)))]);
      for (size_t start = 0; start < shuffled.size();
           start += static_cast<size_t>(config.groups_per_step)) {
        detail::Chunk chunk;
        chunk.mixed = true;
        const size_t end =
            std::min(shuffled.size(), start + static_cast<size_t>(config.groups_per_step));
        for (size_t i = start; i < end; ++i) {
          SyntheticTask t = *shuffled[i];
          t.exposure = tags::VAS;  // full-signal exposure
          chunk.tasks.push_back(std::move(t));
        }
        chunks.push_back(std::move(chunk));
      }
    }

    // Generation blocks: consecutive chunks (never spanning a stratum
    // boundary) share one generation pass under the block-start parameters,
    // then update sequentially; later chunks in a block see ratios != 1.
    size_t block_start = 0;
    while (block_start < chunks.size()) {
      size_t block_end = block_start;
      while (block_end < chunks.size() &&
             block_end - block_start < static_cast<size_t>(config.gen_block_chunks) &&
             (chunks[block_end].mixed ||
              chunks[block_end].tag == chunks[block_start].tag))
        ++block_end;

      struct GroupSlot {
        size_t chunk;
        size_t pos;
        const SyntheticTask* task;
        uint64_t seed;
      };
      std::vector<GroupSlot> slots;
      for (size_t ci = block_start; ci < block_end; ++ci)
        for (size_t gi = 0; gi < chunks[ci].tasks.size(); ++gi) {
          const uint64_t group_seed =
              derive_seed(config.seed, 0x9e11ull + static_cast<uint64_t>(epoch) * 131ull,
                          (static_cast<uint64_t>(ci) << 20) + gi);
          slots.push_back({ci, gi, &chunks[ci].tasks[gi], group_seed});
        }

      std::vector<RolloutGroup> generated(slots.size());
      std::vector<std::vector<detail::CrwLogLine>> crw_lines(slots.size());
      parallel_for(static_cast<int64_t>(slots.size()), config.threads, [&](int64_t k) {
        const GroupSlot& slot = slots[static_cast<size_t>(k)];
        RolloutGroup g = make_rollout_group(policy, oracle, *slot.task, config.group_size,
                                            config.temperature, slot.seed);
        if (config.crw.enabled && slot.task->tag.complexity() >= 2) {
          const auto negative = generate_negative(policy, oracle, *slot.task,
                                                  derive_seed(slot.seed, 0xc27ull),
                                                  config.temperature);
          if (negative) {
            const CrwConfig crw_cfg = config.crw.to_config();
            for (size_t i = 0; i < g.rollouts.size(); ++i) {
              Rollout& pos = g.rollouts[i];
              const double s = crw_cfg.similarity(pos.tokens, negative->tokens);
              const double reweighted = weighted_reward(pos.reward, s, crw_cfg);
              const bool gate = crw_cfg.gate_below_threshold ? s < crw_cfg.tau : s > crw_cfg.tau;
              crw_lines[static_cast<size_t>(k)].push_back(
                  {pos.task_id, static_cast<int>(i), s, gate, pos.reward, reweighted});
              pos.reward = reweighted;
            }
            finalize_group(g);
          }
        }
        generated[static_cast<size_t>(k)] = std::move(g);
      });
      if (config.crw.enabled)
        for (const auto& lines : crw_lines)
          for (const auto& l : lines)
            crw_out << nlohmann::json{{"task_id", l.task_id}, {"rollout", l.rollout},
                                      {"s", l.s},           {"gate", l.gate},
                                      {"r_pos", l.r_pos},   {"r_weighted", l.r_weighted}}
                           .dump()
                    << '\n';

      std::vector<std::vector<RolloutGroup>> block_groups(block_end - block_start);
      for (size_t k = 0; k < slots.size(); ++k)
        block_groups[slots[k].chunk - block_start].push_back(std::move(generated[k]));

      // One optimizer step per chunk.
      for (size_t ci = block_start; ci < block_end; ++ci) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<RolloutGroup>& groups = block_groups[ci - block_start];
        ++step;

        for (const auto& g : groups)
          for (const auto& r : g.rollouts) {
            if (mapo && !(r.exposure == r.tag))
              throw std::logic_error("mapo step saw exposure != tag");
            if (!mapo && !(r.exposure == tags::VAS))
              throw std::logic_error("mupo step saw exposure != VAS");
          }

        // Pooled normalization variant for the modality-unaware baseline:
        // one (mu, sigma) across the whole mixed chunk.
        if (!mapo && config.mu_normalization == MuNormalization::Pooled) {
          std::vector<double> rewards;
          for (const auto& g : groups)
            for (const auto& r : g.rollouts) rewards.push_back(r.reward);
          const auto st = normalize_group(rewards, kSigmaMin);
          size_t j = 0;
          for (auto& g : groups) {
            g.mu = st.mu;
            g.sigma = st.sigma;
            g.zero_variance = st.zero_variance;
            g.advantages.resize(g.rollouts.size());
            for (size_t i = 0; i < g.rollouts.size(); ++i)
              g.advantages[i] = st.advantages[j++];
          }
        }

        std::vector<double> rewards;
        for (const auto& g : groups)
          for (const auto& r : g.rollouts) rewards.push_back(r.reward);
        double mean_reward = 0.0;
        for (double r : rewards) mean_reward += r;
        mean_reward /= static_cast<double>(rewards.size());

        const double d_kl = detail::kl_for_mode(config.reward_mode, rewards);
        KlHistory& history =
            mapo ? histories.at(chunks[ci].tag) : mixed_history;
        const KlHistory::Stats hstats = history.push_and_stats(d_kl);
        double z = 0.0, w = 1.0;
        if (mapo && config.adaptive_weights) {
          const TagWeight tw = adaptive_weight(d_kl, history);
          z = tw.z;
          w = tw.w;
        }

        auto filtered = apply_filter(groups, config.filter, epoch);

        // Trainer forward: refresh train log-probs under the current
        // parameters for everything that stays in the batch.
        parallel_for(static_cast<int64_t>(filtered.kept.size()), config.threads, [&](int64_t k) {
          RolloutGroup& g = filtered.kept[static_cast<size_t>(k)];
          const SyntheticTask& task = index.at(g.task_id);
          for (auto& r : g.rollouts)
            r.train_logprobs = policy.sequence_logprobs(task.features, r.exposure, r.tokens);
        });

        StepRecord rec;
        rec.step = step;
        rec.epoch = epoch;
        rec.tag = mapo ? chunks[ci].tag.to_string() : "mixed";
        rec.mean_reward = mean_reward;
        rec.d_kl = d_kl;
        rec.w = w;
        rec.dropped_count = filtered.dropped_count;

        result.total_groups += static_cast<int64_t>(groups.size());
        result.total_rollouts += static_cast<int64_t>(groups.size()) * config.group_size;
        result.dropped_groups += filtered.dropped_count;

        if (!filtered.kept.empty()) {
          const SurrogateGradient sg = surrogate_gradient(policy, index, filtered.kept,
                                                          config.clip, config.aggregation,
                                                          config.threads);
          rec.loss = w * sg.objective.loss;
          rec.clip_fraction = sg.objective.clip_fraction;
          Eigen::MatrixXd grad = w * sg.grad;
          if (!grad.allFinite()) throw std::runtime_error("non-finite gradient at step " +
                                                          std::to_string(step));
          rec.grad_norm = grad.norm();
          if (rec.grad_norm > 1.0) grad /= rec.grad_norm;  // global norm clip at 1.0
          policy.params() += config.learning_rate * grad;  // ascend the surrogate
        }
        if (!std::isfinite(rec.loss))
          throw std::runtime_error("non-finite loss at step " + std::to_string(step));

        const auto t1 = std::chrono::steady_clock::now();
        rec.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();

        steps_out << step_to_json(rec).dump() << '\n';
        difficulty_out << nlohmann::json{{"step", step},
                                         {"tag", rec.tag},
                                         {"mode", to_string(config.reward_mode)},
                                         {"d_kl", d_kl},
                                         {"mu_h", hstats.mu},
                                         {"sigma_h", hstats.sigma},
                                         {"z", z},
                                         {"w", w}}
                              .dump()
                       << '\n';
        timing_out << nlohmann::json{{"step", step}, {"wall_ms", rec.wall_ms}}.dump() << '\n';
        result.records.push_back(std::move(rec));
      }
      block_start = block_end;
    }
  }

  save_params(policy.params(), path("params.json"));
  {
    std::ofstream summary(path("summary.json"));
    summary << nlohmann::json{
                   {"total_steps", step},
                   {"total_groups", result.total_groups},
                   {"total_rollouts", result.total_rollouts},
                   {"dropped_groups", result.dropped_groups},
                   {"dropped_rollouts", result.dropped_groups * config.group_size},
                   {"processed_rollouts",
                    result.total_rollouts - result.dropped_groups * config.group_size}}
                   .dump(2)
            << '\n';
  }
  result.final_params = policy.params();
  return result;
}

// First step (1-based) whose trailing `window`-step mean of step mean-rewards
// reaches the threshold. Only full windows count; empty when the run never
// gets there.
inline std::optional<int64_t> steps_to_reward(const std::vector<StepRecord>& records,
                                              double threshold, int window) {
  if (window < 1) throw std::invalid_argument("window must be >= 1");
  for (size_t i = static_cast<size_t>(window) - 1; i < records.size(); ++i) {
    double mean = 0.0;
    for (size_t k = i + 1 - static_cast<size_t>(window); k <= i; ++k)
      mean += records[k].mean_reward;
    mean /= static_cast<double>(window);
    if (mean >= threshold) return records[i].step;
  }
  return std::nullopt;
}

}  // namespace mapo
