#pragma once

#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>

#include "mapo/crw.hpp"
#include "mapo/grpo.hpp"
#include "mapo/schedule.hpp"
#include "mapo/stratified.hpp"
#include "mapo/task_env.hpp"

namespace mapo {

enum class Optimizer { Mupo, Mapo };

inline std::string to_string(Optimizer o) { return o == Optimizer::Mupo ? "mupo" : "mapo"; }

inline Optimizer parse_optimizer(const std::string& s) {
  if (s == "mupo") return Optimizer::Mupo;
  if (s == "mapo") return Optimizer::Mapo;
  throw std::invalid_argument("bad optimizer: " + s);
}

struct CorpusSpec {
  std::string path;  // load this corpus file when nonempty ...
  std::map<ModalityTag, int, TagCanonicalLess> count_per_tag;  // ... else generate
  StrataDistribution strata;
};

struct CrwSettings {
  bool enabled = false;
  double alpha = 0.2;
  double tau = 0.8;
  bool gate_below_threshold = true;

  CrwConfig to_config() const {
    CrwConfig cfg;
    cfg.alpha = alpha;
    cfg.tau = tau;
    cfg.gate_below_threshold = gate_below_threshold;
    return cfg;
  }
};

// Full experiment description. Every knob is validated up front and the
// effective configuration is echoed into the run directory.
struct RunConfig {
  uint64_t seed = 0;
  int threads = 1;
  CorpusSpec corpus;
  EnvSpec env;
  RewardMode reward_mode = RewardMode::ContinuousCaption;
  std::array<double, 7> offsets{};  // per-tag reward offsets, canonical order
  Optimizer optimizer = Optimizer::Mapo;
  AggregationMode aggregation = AggregationMode::TokenLevel;
  ClipConfig clip;
  FilterPolicy filter;
  CurriculumMode curriculum = CurriculumMode::None;
  bool adaptive_weights = false;
  CrwSettings crw;
  int epochs = 2;
  int groups_per_step = 8;
  double learning_rate = 2e-6;
  int group_size = 8;  // G
  double temperature = 1.0;
  MuNormalization mu_normalization = MuNormalization::PerGroup;
  int gen_block_chunks = 4;  // optimizer steps sharing one generation pass
  double init_scale = 0.0;   // 0: zero-initialized policy; >0: N(0, scale) entries
  std::optional<std::map<ModalityTag, double, TagCanonicalLess>> zero_shot;

  void validate() const {
    env.validate();
    clip.validate();
    if (threads < 1) throw std::invalid_argument("threads must be >= 1");
    if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    if (groups_per_step < 1) throw std::invalid_argument("groups_per_step must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
    if (group_size < 2) throw std::invalid_argument("group_size must be >= 2");
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
    if (gen_block_chunks < 1) throw std::invalid_argument("gen_block_chunks must be >= 1");
    if (!(init_scale >= 0.0)) throw std::invalid_argument("init_scale must be >= 0");
    if (corpus.path.empty()) {
      corpus.strata.validate();
      int total = 0;
      for (const auto& [tag, n] : corpus.count_per_tag) {
        if (n < 0) throw std::invalid_argument("count_per_tag entries must be >= 0");
        total += n;
      }
      if (total == 0)
        throw std::invalid_argument("corpus: provide a path or nonzero count_per_tag");
    }
    if (optimizer == Optimizer::Mupo) {
      if (curriculum != CurriculumMode::None)
        throw std::invalid_argument("curriculum requires the mapo optimizer");
      if (adaptive_weights)
        throw std::invalid_argument("adaptive_weights requires the mapo optimizer");
    }
    if (crw.enabled && reward_mode != RewardMode::ContinuousCaption)
      throw std::invalid_argument("crw requires continuous-caption rewards");
    if (!(crw.alpha >= 0.0)) throw std::invalid_argument("crw alpha must be >= 0");
    if (!(crw.tau >= 0.0 && crw.tau <= 1.0))
      throw std::invalid_argument("crw tau must be in [0,1]");
    if (reward_mode == RewardMode::BinaryQa)
      for (double o : offsets)
        if (o != 0.0)
          throw std::invalid_argument("reward offsets apply to continuous rewards only");
    if (zero_shot) {
      for (ModalityTag tag : kCanonicalTags)
        if (!zero_shot->count(tag))
          throw std::invalid_argument("zero_shot must cover all 7 tags (missing " +
                                      tag.to_string() + ")");
    }
  }

  RewardOracle make_oracle() const {
    RewardOracle oracle(reward_mode);
    for (ModalityTag tag : kCanonicalTags)
      oracle.set_offset(tag, offsets[static_cast<size_t>(canonical_index(tag))]);
    return oracle;
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& context) {
  if (!j.is_object()) throw std::invalid_argument("config: " + context + " must be an object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key))
      throw std::invalid_argument("config: unknown key '" + key + "' in " + context);
}

inline std::array<double, 7> parse_tag_map(const nlohmann::json& j, const std::string& context) {
  std::array<double, 7> out{};
  for (const auto& [key, value] : j.items()) {
    const ModalityTag tag = ModalityTag::parse(key);  // rejects unknown keys
    out[static_cast<size_t>(canonical_index(tag))] = value.get<double>();
  }
  (void)context;
  return out;
}

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) {
  detail::check_keys(
      j,
      {"seed", "threads", "corpus", "env", "reward", "optimizer", "aggregation", "clip",
       "filter", "curriculum", "adaptive_weights", "crw", "epochs", "groups_per_step",
       "learning_rate", "group_size", "temperature", "mu_normalization", "gen_block_chunks",
       "init_scale", "zero_shot"},
      "top level");
  RunConfig c;
  if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
  if (j.contains("threads")) c.threads = j.at("threads").get<int>();
  if (j.contains("corpus")) {
    const auto& corpus = j.at("corpus");
    detail::check_keys(corpus, {"path", "count_per_tag", "strata"}, "corpus");
    if (corpus.contains("path")) c.corpus.path = corpus.at("path").get<std::string>();
    if (corpus.contains("count_per_tag")) {
      for (const auto& [key, value] : corpus.at("count_per_tag").items())
        c.corpus.count_per_tag[ModalityTag::parse(key)] = value.get<int>();
    }
    if (corpus.contains("strata")) {
      const auto& strata = corpus.at("strata");
      detail::check_keys(strata, {"exact", "superset", "deficit"}, "corpus.strata");
      c.corpus.strata.exact = strata.value("exact", 0.0);
      c.corpus.strata.superset = strata.value("superset", 0.0);
      c.corpus.strata.deficit = strata.value("deficit", 0.0);
    }
    if (!c.corpus.path.empty() && !c.corpus.count_per_tag.empty())
      throw std::invalid_argument("corpus: give either a path or a generation spec, not both");
  }
  if (j.contains("env")) {
    const auto& env = j.at("env");
    detail::check_keys(env, {"feature_dim", "vocab_size", "rollout_len"}, "env");
    c.env.feature_dim = env.value("feature_dim", c.env.feature_dim);
    c.env.vocab_size = env.value("vocab_size", c.env.vocab_size);
    c.env.rollout_len = env.value("rollout_len", c.env.rollout_len);
  }
  if (j.contains("reward")) {
    const auto& reward = j.at("reward");
    detail::check_keys(reward, {"mode", "offsets"}, "reward");
    if (reward.contains("mode"))
      c.reward_mode = parse_reward_mode(reward.at("mode").get<std::string>());
    if (reward.contains("offsets"))
      c.offsets = detail::parse_tag_map(reward.at("offsets"), "reward.offsets");
  }
  if (j.contains("optimizer")) c.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
  if (j.contains("aggregation"))
    c.aggregation = parse_aggregation(j.at("aggregation").get<std::string>());
  if (j.contains("clip")) {
    const auto& clip = j.at("clip");
    detail::check_keys(clip, {"eps_low", "eps_high"}, "clip");
    c.clip.eps_low = clip.value("eps_low", c.clip.eps_low);
    c.clip.eps_high = clip.value("eps_high", c.clip.eps_high);
  }
  if (j.contains("filter")) {
    const auto& filter = j.at("filter");
    detail::check_keys(filter, {"mode", "activation_epoch"}, "filter");
    if (filter.contains("mode"))
      c.filter.mode = parse_filter_mode(filter.at("mode").get<std::string>());
    c.filter.activation_epoch = filter.value("activation_epoch", c.filter.activation_epoch);
  }
  if (j.contains("curriculum"))
    c.curriculum = parse_curriculum_mode(j.at("curriculum").get<std::string>());
  if (j.contains("adaptive_weights")) c.adaptive_weights = j.at("adaptive_weights").get<bool>();
  if (j.contains("crw")) {
    const auto& crw = j.at("crw");
    detail::check_keys(crw, {"enabled", "alpha", "tau", "gate_below_threshold"}, "crw");
    c.crw.enabled = crw.value("enabled", false);
    c.crw.alpha = crw.value("alpha", c.crw.alpha);
    c.crw.tau = crw.value("tau", c.crw.tau);
    c.crw.gate_below_threshold = crw.value("gate_below_threshold", c.crw.gate_below_threshold);
  }
  if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
  if (j.contains("groups_per_step")) c.groups_per_step = j.at("groups_per_step").get<int>();
  if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
  if (j.contains("group_size")) c.group_size = j.at("group_size").get<int>();
  if (j.contains("temperature")) c.temperature = j.at("temperature").get<double>();
  if (j.contains("mu_normalization"))
    c.mu_normalization = parse_mu_normalization(j.at("mu_normalization").get<std::string>());
  if (j.contains("gen_block_chunks")) c.gen_block_chunks = j.at("gen_block_chunks").get<int>();
  if (j.contains("init_scale")) c.init_scale = j.at("init_scale").get<double>();
  if (j.contains("zero_shot") && !j.at("zero_shot").is_null()) {
    std::map<ModalityTag, double, TagCanonicalLess> zs;
    for (const auto& [key, value] : j.at("zero_shot").items())
      zs[ModalityTag::parse(key)] = value.get<double>();
    c.zero_shot = std::move(zs);
  }
  c.validate();
  return c;
}

inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json corpus;
  if (!c.corpus.path.empty()) {
    corpus["path"] = c.corpus.path;
  } else {
    nlohmann::json counts;
    for (const auto& [tag, n] : c.corpus.count_per_tag) counts[tag.to_string()] = n;
    corpus["count_per_tag"] = counts;
    corpus["strata"] = {{"exact", c.corpus.strata.exact},
                        {"superset", c.corpus.strata.superset},
                        {"deficit", c.corpus.strata.deficit}};
  }
  nlohmann::json offsets;
  for (ModalityTag tag : kCanonicalTags)
    offsets[tag.to_string()] = c.offsets[static_cast<size_t>(canonical_index(tag))];
  nlohmann::json out{
      {"seed", c.seed},
      {"threads", c.threads},
      {"corpus", corpus},
      {"env",
       {{"feature_dim", c.env.feature_dim},
        {"vocab_size", c.env.vocab_size},
        {"rollout_len", c.env.rollout_len}}},
      {"reward", {{"mode", to_string(c.reward_mode)}, {"offsets", offsets}}},
      {"optimizer", to_string(c.optimizer)},
      {"aggregation", to_string(c.aggregation)},
      {"clip", {{"eps_low", c.clip.eps_low}, {"eps_high", c.clip.eps_high}}},
      {"filter",
       {{"mode", to_string(c.filter.mode)}, {"activation_epoch", c.filter.activation_epoch}}},
      {"curriculum", to_string(c.curriculum)},
      {"adaptive_weights", c.adaptive_weights},
      {"crw",
       {{"enabled", c.crw.enabled},
        {"alpha", c.crw.alpha},
        {"tau", c.crw.tau},
        {"gate_below_threshold", c.crw.gate_below_threshold}}},
      {"epochs", c.epochs},
      {"groups_per_step", c.groups_per_step},
      {"learning_rate", c.learning_rate},
      {"group_size", c.group_size},
      {"temperature", c.temperature},
      {"mu_normalization", to_string(c.mu_normalization)},
      {"gen_block_chunks", c.gen_block_chunks},
      {"init_scale", c.init_scale}};
  if (c.zero_shot) {
    nlohmann::json zs;
    for (const auto& [tag, acc] : *c.zero_shot) zs[tag.to_string()] = acc;
    out["zero_shot"] = zs;
  } else {
    out["zero_shot"] = nullptr;
  }
  return out;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  nlohmann::json j;
  in >> j;
  return config_from_json(j);
}

}  // namespace mapo
