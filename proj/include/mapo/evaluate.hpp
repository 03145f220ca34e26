#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mapo/config.hpp"
#include "mapo/metrics.hpp"
#include "mapo/parallel.hpp"
#include "mapo/stratified.hpp"
#include "mapo/task_env.hpp"

namespace mapo {

// One evaluation draw: a single rollout under the task's stored exposure.
inline double eval_draw_reward(const ToyPolicy& policy, const RewardOracle& oracle,
                               const SyntheticTask& task, double temperature, uint64_t seed) {
  Rng rng = make_rng(seed);
  std::vector<int> tokens;
  tokens.reserve(static_cast<size_t>(policy.rollout_len()));
  for (int t = 0; t < policy.rollout_len(); ++t)
    tokens.push_back(policy.sample_token(task.features, task.exposure, t, temperature, rng).token);
  return oracle.score(task, tokens);
}

struct EvalOptions {
  int draws = 5;  // pass@1 estimated from this many samples per query
  uint64_t seed = 0;
  double temperature = 1.0;
  int threads = 1;
};

struct QueryEval {
  int64_t query = 0;
  ModalityTag tag;
  std::vector<int> draws;  // exact-match success per draw
  double score = 0.0;      // mean reward over draws at exact exposure
  SampleScores exposure_scores{};  // continuous mode only
};

struct EvalResult {
  TagAccuracyTable table;  // fraction unit; binary: pass@1, continuous: mean score
  GapReport gap_weighted;
  GapReport gap_unweighted;
  std::array<std::array<double, 7>, 7> disparity{};
  std::optional<double> fusion;  // continuous mode only
  int64_t queries = 0;
  std::vector<QueryEval> records;
};

// Modality-exact evaluation: k draws per query under exposure = tag, plus,
// for continuous rewards, per-sample scores under all seven exposures for the
// fusion-gain counting rule.
inline EvalResult evaluate_policy(const ToyPolicy& policy, const RewardOracle& oracle,
                                  const std::vector<SyntheticTask>& corpus,
                                  const EvalOptions& opt) {
  if (opt.draws < 1) throw std::invalid_argument("evaluate: draws must be >= 1");
  if (corpus.empty()) throw std::invalid_argument("evaluate: empty corpus");
  const bool continuous = oracle.mode() == RewardMode::ContinuousCaption;

  struct PerTask {
    int tag_idx = 0;
    double mean_reward = 0.0;
    double pass1 = 0.0;
    QueryEval record;
    SampleScores exposure_scores{};
  };
  std::vector<PerTask> rows(corpus.size());

  parallel_for(static_cast<int64_t>(corpus.size()), opt.threads, [&](int64_t i) {
    const SyntheticTask& original = corpus[static_cast<size_t>(i)];
    PerTask row;
    row.tag_idx = canonical_index(original.tag);
    row.record.query = original.id;
    row.record.tag = original.tag;
    SyntheticTask task = original;
    task.exposure = task.tag;
    double sum = 0.0;
    int exact = 0;
    for (int d = 0; d < opt.draws; ++d) {
      const double r = eval_draw_reward(
          policy, oracle, task, opt.temperature,
          derive_seed(opt.seed, 0xe7a1ull + static_cast<uint64_t>(original.id),
                      static_cast<uint64_t>(d)));
      sum += r;
      if (r == 1.0) ++exact;
      row.record.draws.push_back(r == 1.0 ? 1 : 0);
    }
    row.mean_reward = sum / opt.draws;
    row.pass1 = static_cast<double>(exact) / opt.draws;
    row.record.score = row.mean_reward;
    if (continuous) {
      for (int e = 0; e < 7; ++e) {
        task.exposure = kCanonicalTags[static_cast<size_t>(e)];
        double esum = 0.0;
        for (int d = 0; d < opt.draws; ++d)
          esum += eval_draw_reward(
              policy, oracle, task, opt.temperature,
              derive_seed(opt.seed,
                          0xf0510ull + static_cast<uint64_t>(original.id) * 7ull +
                              static_cast<uint64_t>(e),
                          static_cast<uint64_t>(d)));
        row.exposure_scores[static_cast<size_t>(e)] = esum / opt.draws;
      }
      row.record.exposure_scores = row.exposure_scores;
    }
    rows[static_cast<size_t>(i)] = row;
  });

  EvalResult out;
  out.queries = static_cast<int64_t>(rows.size());
  out.table.unit = TagAccuracyTable::Unit::Fraction;
  std::array<double, 7> acc_sum{};
  std::array<int64_t, 7> counts{};
  for (const auto& row : rows) {
    acc_sum[static_cast<size_t>(row.tag_idx)] += continuous ? row.mean_reward : row.pass1;
    ++counts[static_cast<size_t>(row.tag_idx)];
  }
  for (int i = 0; i < 7; ++i) {
    out.table.count[static_cast<size_t>(i)] = counts[static_cast<size_t>(i)];
    out.table.accuracy[static_cast<size_t>(i)] =
        counts[static_cast<size_t>(i)] > 0
            ? acc_sum[static_cast<size_t>(i)] / static_cast<double>(counts[static_cast<size_t>(i)])
            : 0.0;
  }
  bool all_tags = true;
  for (int64_t c : counts)
    if (c == 0) all_tags = false;
  if (all_tags) {
    out.gap_weighted = modality_gap(out.table, GapWeighting::SampleWeighted);
    out.gap_unweighted = modality_gap(out.table, GapWeighting::Unweighted);
  }
  out.disparity = disparity_matrix(out.table);
  if (continuous) {
    std::vector<SampleScores> scores;
    scores.reserve(rows.size());
    for (const auto& row : rows) scores.push_back(row.exposure_scores);
    out.fusion = fusion_gain(scores);
  }
  for (auto& row : rows) out.records.push_back(std::move(row.record));
  return out;
}

// Line-delimited evaluation records, consumable by table_from_draws_file and
// samples_from_scores_file.
inline void write_eval_records(const EvalResult& eval, const std::string& dir,
                               bool continuous) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream draws((fs::path(dir) / "draws.jsonl").string());
  for (const auto& r : eval.records)
    draws << nlohmann::json{{"query", r.query}, {"tag", r.tag.to_string()}, {"draws", r.draws}}
                 .dump()
          << '\n';
  if (!continuous) return;
  std::ofstream scores((fs::path(dir) / "scores.jsonl").string());
  for (const auto& r : eval.records)
    for (int e = 0; e < 7; ++e)
      scores << nlohmann::json{{"query", r.query},
                               {"tag", kCanonicalTags[static_cast<size_t>(e)].to_string()},
                               {"score", r.exposure_scores[static_cast<size_t>(e)]}}
                    .dump()
             << '\n';
}

namespace detail {

inline std::string csv_num(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

// metrics/ CSV outputs: accuracy.csv, gap.csv, disparity.csv, fusion.csv.
inline void write_eval_csvs(const EvalResult& eval, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream out((fs::path(dir) / "accuracy.csv").string());
    out << "tag,samples,accuracy,unit\n";
    for (int i = 0; i < 7; ++i)
      out << kCanonicalTags[static_cast<size_t>(i)].to_string() << ','
          << eval.table.count[static_cast<size_t>(i)] << ','
          << detail::csv_num(eval.table.accuracy[static_cast<size_t>(i)]) << ",fraction\n";
  }
  {
    std::ofstream out((fs::path(dir) / "gap.csv").string());
    out << "weighting,uni_bi,uni_tri,bi_tri,avg\n";
    out << "sample-weighted," << detail::csv_num(eval.gap_weighted.uni_bi) << ','
        << detail::csv_num(eval.gap_weighted.uni_tri) << ','
        << detail::csv_num(eval.gap_weighted.bi_tri) << ','
        << detail::csv_num(eval.gap_weighted.avg) << '\n';
    out << "unweighted," << detail::csv_num(eval.gap_unweighted.uni_bi) << ','
        << detail::csv_num(eval.gap_unweighted.uni_tri) << ','
        << detail::csv_num(eval.gap_unweighted.bi_tri) << ','
        << detail::csv_num(eval.gap_unweighted.avg) << '\n';
  }
  {
    std::ofstream out((fs::path(dir) / "disparity.csv").string());
    out << "tag";
    for (ModalityTag t : kCanonicalTags) out << ',' << t.to_string();
    out << '\n';
    for (int i = 0; i < 7; ++i) {
      out << kCanonicalTags[static_cast<size_t>(i)].to_string();
      for (int j = 0; j < 7; ++j)
        out << ',' << detail::csv_num(eval.disparity[static_cast<size_t>(i)][static_cast<size_t>(j)]);
      out << '\n';
    }
  }
  {
    std::ofstream out((fs::path(dir) / "fusion.csv").string());
    out << "queries,fusion_gain\n";
    out << eval.queries << ',' << (eval.fusion ? detail::csv_num(*eval.fusion) : "") << '\n';
  }
}

// variance CSV: per-trial gradient norms plus a summary row carrying the
// decomposition and the one-sided significance test.
inline void write_variance_csv(const VarianceReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write variance csv: " + path);
  out << "trial,estimator,grad_trace_norm,var_mu,var_ma,ratio,within,between,p_value,"
         "significant\n";
  for (int t = 0; t < report.trials; ++t) {
    out << t << ",mu," << detail::csv_num(report.trace_norm_mu[static_cast<size_t>(t)])
        << ",,,,,,,\n";
    out << t << ",ma," << detail::csv_num(report.trace_norm_ma[static_cast<size_t>(t)])
        << ",,,,,,,\n";
  }
  out << "summary,," << ',' << detail::csv_num(report.var_mu) << ','
      << detail::csv_num(report.var_ma) << ',' << detail::csv_num(report.ratio) << ','
      << detail::csv_num(report.within) << ',' << detail::csv_num(report.between) << ','
      << detail::csv_num(report.p_value) << ',' << (report.significant ? 1 : 0) << '\n';
}

}  // namespace mapo
