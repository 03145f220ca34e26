// Command-line front end: gen-tasks, train, evaluate, variance-report.

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>
#include <nlohmann/json.hpp>
#include <string>

#include "mapo/mapo.hpp"

namespace {

namespace fs = std::filesystem;

struct ConfigArgs {
  std::string config_path;
  uint64_t seed = 0;
  bool seed_set = false;
  int threads = 0;
  std::string optimizer, aggregation, curriculum, filter_mode, mu_normalization;
  int epochs = -1, groups_per_step = -1, group_size = -1, gen_block_chunks = -1;
  int feature_dim = -1, vocab_size = -1, rollout_len = -1;
  double learning_rate = -1.0, temperature = -1.0, init_scale = -1.0;
  double eps_low = -1.0, eps_high = -1.0;
  int activation_epoch = -1;
  int adaptive_weights = -1;  // tri-state: unset / off / on
  int crw_enabled = -1;
  double crw_alpha = -1.0, crw_tau = -1.0;
  std::string corpus_path;
  std::string reward_mode;
};

void add_config_flags(CLI::App* cmd, ConfigArgs& a) {
  cmd->add_option("--config", a.config_path, "JSON run configuration");
  cmd->add_option("--seed", a.seed, "master seed")->each([&](const std::string&) {
    a.seed_set = true;
  });
  cmd->add_option("--threads", a.threads, "parallelism degree");
  cmd->add_option("--corpus", a.corpus_path, "task corpus file (JSONL)");
  cmd->add_option("--feature-dim", a.feature_dim, "per-modality feature dimension (generate)");
  cmd->add_option("--vocab-size", a.vocab_size, "vocabulary size");
  cmd->add_option("--rollout-len", a.rollout_len, "tokens per response (generate)");
  cmd->add_option("--optimizer", a.optimizer, "mupo | mapo");
  cmd->add_option("--aggregation", a.aggregation, "token | sample | prompt");
  cmd->add_option("--curriculum", a.curriculum, "none | static | dynamic");
  cmd->add_option("--filter", a.filter_mode, "none | early | mid");
  cmd->add_option("--activation-epoch", a.activation_epoch, "mid-filter activation epoch");
  cmd->add_option("--mu-normalization", a.mu_normalization, "pooled | per-group");
  cmd->add_option("--epochs", a.epochs, "training epochs");
  cmd->add_option("--groups-per-step", a.groups_per_step, "prompts per optimizer step");
  cmd->add_option("--group-size", a.group_size, "rollouts per prompt (G)");
  cmd->add_option("--gen-block-chunks", a.gen_block_chunks, "steps sharing one generation pass");
  cmd->add_option("--learning-rate", a.learning_rate, "ascent step size");
  cmd->add_option("--temperature", a.temperature, "generation temperature");
  cmd->add_option("--init-scale", a.init_scale, "stddev of random parameter init (0 = zeros)");
  cmd->add_option("--eps-low", a.eps_low, "lower clip epsilon");
  cmd->add_option("--eps-high", a.eps_high, "upper clip epsilon");
  cmd->add_flag("--adaptive-weights{1},--no-adaptive-weights{0}", a.adaptive_weights,
                "difficulty-adaptive stratum weights");
  cmd->add_flag("--crw{1},--no-crw{0}", a.crw_enabled, "contrastive reward weighting");
  cmd->add_option("--crw-alpha", a.crw_alpha, "CRW boost scale");
  cmd->add_option("--crw-tau", a.crw_tau, "CRW similarity threshold");
  cmd->add_option("--reward-mode", a.reward_mode, "binary-qa | continuous-caption");
}

mapo::RunConfig build_config(const ConfigArgs& a) {
  mapo::RunConfig c;
  if (!a.config_path.empty()) c = mapo::load_config(a.config_path);
  if (a.seed_set) c.seed = a.seed;
  if (a.threads > 0) c.threads = a.threads;
  if (!a.corpus_path.empty()) {
    c.corpus.path = a.corpus_path;
    c.corpus.count_per_tag.clear();
  }
  if (a.feature_dim > 0) c.env.feature_dim = a.feature_dim;
  if (a.vocab_size > 0) c.env.vocab_size = a.vocab_size;
  if (a.rollout_len > 0) c.env.rollout_len = a.rollout_len;
  if (!a.optimizer.empty()) c.optimizer = mapo::parse_optimizer(a.optimizer);
  if (!a.aggregation.empty()) c.aggregation = mapo::parse_aggregation(a.aggregation);
  if (!a.curriculum.empty()) c.curriculum = mapo::parse_curriculum_mode(a.curriculum);
  if (!a.filter_mode.empty()) c.filter.mode = mapo::parse_filter_mode(a.filter_mode);
  if (a.activation_epoch >= 0) c.filter.activation_epoch = a.activation_epoch;
  if (!a.mu_normalization.empty())
    c.mu_normalization = mapo::parse_mu_normalization(a.mu_normalization);
  if (a.epochs >= 0) c.epochs = a.epochs;
  if (a.groups_per_step > 0) c.groups_per_step = a.groups_per_step;
  if (a.group_size > 0) c.group_size = a.group_size;
  if (a.gen_block_chunks > 0) c.gen_block_chunks = a.gen_block_chunks;
  if (a.learning_rate > 0) c.learning_rate = a.learning_rate;
  if (a.temperature > 0) c.temperature = a.temperature;
  if (a.init_scale >= 0) c.init_scale = a.init_scale;
  if (a.eps_low > 0) c.clip.eps_low = a.eps_low;
  if (a.eps_high > 0) c.clip.eps_high = a.eps_high;
  if (a.adaptive_weights >= 0) c.adaptive_weights = a.adaptive_weights == 1;
  if (a.crw_enabled >= 0) c.crw.enabled = a.crw_enabled == 1;
  if (a.crw_alpha >= 0) c.crw.alpha = a.crw_alpha;
  if (a.crw_tau >= 0) c.crw.tau = a.crw_tau;
  if (!a.reward_mode.empty()) c.reward_mode = mapo::parse_reward_mode(a.reward_mode);
  c.validate();
  return c;
}

int cmd_gen_tasks(uint64_t seed, int count, const std::string& counts_json,
                  const std::string& strata_json, const mapo::EnvSpec& env,
                  const std::string& out) {
  std::map<mapo::ModalityTag, int, mapo::TagCanonicalLess> counts;
  if (!counts_json.empty()) {
    const auto parsed = nlohmann::json::parse(counts_json);  // keep alive for items()
    for (const auto& [key, value] : parsed.items())
      counts[mapo::ModalityTag::parse(key)] = value.get<int>();
  } else {
    for (mapo::ModalityTag tag : mapo::kCanonicalTags) counts[tag] = count;
  }
  mapo::StrataDistribution strata;
  if (!strata_json.empty()) {
    const auto j = nlohmann::json::parse(strata_json);
    mapo::detail::check_keys(j, {"exact", "superset", "deficit"}, "strata");
    strata.exact = j.value("exact", 0.0);
    strata.superset = j.value("superset", 0.0);
    strata.deficit = j.value("deficit", 0.0);
  }
  const auto tasks = mapo::generate_tasks(seed, counts, strata, env);
  fs::create_directories(fs::path(out).parent_path().empty() ? "." : fs::path(out).parent_path().string());
  mapo::save_corpus(tasks, out);
  std::cout << "wrote " << tasks.size() << " tasks to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"modality-stratified policy-optimization simulator"};
  app.require_subcommand(1);

  // gen-tasks
  auto* gen = app.add_subcommand("gen-tasks", "generate a synthetic task corpus");
  uint64_t gen_seed = 0;
  int gen_count = 8;
  std::string gen_counts, gen_strata, gen_out = "tasks.jsonl";
  mapo::EnvSpec gen_env;
  gen->add_option("--seed", gen_seed, "corpus seed");
  gen->add_option("--count-per-tag", gen_count, "tasks per tag (uniform)");
  gen->add_option("--counts", gen_counts, "per-tag counts as JSON, e.g. {\"V\":4,\"VAS\":2}");
  gen->add_option("--strata", gen_strata,
                  "stratum weights as JSON, e.g. {\"exact\":0.5,\"deficit\":0.5}");
  gen->add_option("--feature-dim", gen_env.feature_dim, "per-modality feature dimension");
  gen->add_option("--vocab-size", gen_env.vocab_size, "vocabulary size");
  gen->add_option("--rollout-len", gen_env.rollout_len, "tokens per response");
  gen->add_option("--out", gen_out, "output corpus file")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "run a training experiment");
  ConfigArgs train_args;
  std::string train_out;
  add_config_flags(train_cmd, train_args);
  train_cmd->add_option("--out", train_out, "run directory")->required();

  // evaluate
  auto* eval_cmd = app.add_subcommand("evaluate", "evaluate trained parameters");
  std::string eval_run, eval_corpus, eval_out;
  int eval_draws = 5;
  uint64_t eval_seed = 0;
  int eval_threads = 1;
  eval_cmd->add_option("--run", eval_run, "run directory with params.json and config.json")
      ->required();
  eval_cmd->add_option("--corpus", eval_corpus, "evaluation corpus (defaults to the run's)");
  eval_cmd->add_option("--draws", eval_draws, "samples per query for pass@1");
  eval_cmd->add_option("--seed", eval_seed, "evaluation seed");
  eval_cmd->add_option("--threads", eval_threads, "parallelism degree");
  eval_cmd->add_option("--out", eval_out, "metrics directory (defaults to <run>/metrics)");

  // variance-report
  auto* var_cmd = app.add_subcommand("variance-report",
                                     "compare estimator variances on resampled batches");
  ConfigArgs var_args;
  std::string var_out;
  int var_trials = 1000;
  int var_groups_per_tag = 2;
  double var_displacement = 0.8;
  add_config_flags(var_cmd, var_args);
  var_cmd->add_option("--trials", var_trials, "number of resampled batches");
  var_cmd->add_option("--groups-per-tag", var_groups_per_tag, "prompts per tag per trial");
  var_cmd->add_option("--trainer-displacement", var_displacement,
                      "parameter distance between generator and scored trainer (0 = on-policy)");
  var_cmd->add_option("--out", var_out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      return cmd_gen_tasks(gen_seed, gen_count, gen_counts, gen_strata, gen_env, gen_out);
    }
    if (train_cmd->parsed()) {
      const mapo::RunConfig config = build_config(train_args);
      const mapo::TrainResult result = mapo::train(config, train_out);
      std::cout << "run " << result.run_dir << ": " << result.records.size() << " steps, "
                << result.total_rollouts << " rollouts, " << result.dropped_groups
                << " groups filtered\n";
      return 0;
    }
    if (eval_cmd->parsed()) {
      const mapo::RunConfig config =
          mapo::load_config((fs::path(eval_run) / "config.json").string());
      mapo::ToyPolicy policy(config.env.feature_dim, config.env.vocab_size,
                             config.env.rollout_len);
      policy.set_params(mapo::load_params((fs::path(eval_run) / "params.json").string()));
      std::vector<mapo::SyntheticTask> corpus;
      if (!eval_corpus.empty()) {
        corpus = mapo::load_corpus(eval_corpus);
      } else if (!config.corpus.path.empty()) {
        corpus = mapo::load_corpus(config.corpus.path);
      } else {
        corpus = mapo::load_corpus((fs::path(eval_run) / "tasks.jsonl").string());
      }
      mapo::EvalOptions opt;
      opt.draws = eval_draws;
      opt.seed = eval_seed;
      opt.temperature = config.temperature;
      opt.threads = eval_threads;
      const mapo::EvalResult result =
          mapo::evaluate_policy(policy, config.make_oracle(), corpus, opt);
      const std::string out_dir =
          eval_out.empty() ? (fs::path(eval_run) / "metrics").string() : eval_out;
      mapo::write_eval_csvs(result, out_dir);
      mapo::write_eval_records(result, out_dir,
                               config.reward_mode == mapo::RewardMode::ContinuousCaption);
      std::cout << "evaluated " << result.queries << " queries; gap avg "
                << result.gap_weighted.avg << "; metrics in " << out_dir << "\n";
      return 0;
    }
    if (var_cmd->parsed()) {
      mapo::RunConfig config = build_config(var_args);
      const auto corpus = mapo::materialize_corpus(config);
      const mapo::ToyPolicy policy = mapo::make_policy(config);
      mapo::VarianceStudyOptions opt;
      opt.trials = var_trials;
      opt.seed = config.seed;
      opt.groups_per_tag = var_groups_per_tag;
      opt.group_size = config.group_size;
      opt.temperature = config.temperature;
      opt.threads = config.threads;
      opt.trainer_displacement = var_displacement;
      const mapo::VarianceReport report =
          mapo::variance_study(policy, corpus, config.make_oracle(), opt);
      fs::create_directories(var_out);
      mapo::write_variance_csv(report, (fs::path(var_out) / "variance.csv").string());
      std::cout << "var_mu " << report.var_mu << "  var_ma " << report.var_ma << "  ratio "
                << report.ratio << "  p " << report.p_value << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
