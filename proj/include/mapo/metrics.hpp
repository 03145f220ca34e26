#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mapo/modality.hpp"

namespace mapo {

// Per-tag accuracy plus sample count, indexed canonically. One unit (percent
// or fraction) per table; the gap computation is unit-free.
struct TagAccuracyTable {
  enum class Unit { Percent, Fraction };
  Unit unit = Unit::Percent;
  std::array<double, 7> accuracy{};
  std::array<int64_t, 7> count{};

  double& acc(ModalityTag t) { return accuracy[static_cast<size_t>(canonical_index(t))]; }
  double acc(ModalityTag t) const { return accuracy[static_cast<size_t>(canonical_index(t))]; }
  int64_t& samples(ModalityTag t) { return count[static_cast<size_t>(canonical_index(t))]; }
  int64_t samples(ModalityTag t) const {
    return count[static_cast<size_t>(canonical_index(t))];
  }
};

// Absolute relative gaps between complexity-level means, in percent.
struct GapReport {
  double uni_bi = 0.0;
  double uni_tri = 0.0;
  double bi_tri = 0.0;
  double avg = 0.0;
};

enum class GapWeighting {
  SampleWeighted,  // group means weighted by per-tag sample counts
  Unweighted,      // plain means over the tags of each group
};

// Mean over queries of the per-query success fraction, from k binary draws
// per query (uniform k).
inline double pass_at_1(const std::vector<std::vector<int>>& outcomes) {
  if (outcomes.empty()) throw std::invalid_argument("pass_at_1: no queries");
  const size_t k = outcomes.front().size();
  if (k < 1) throw std::invalid_argument("pass_at_1: need k >= 1 draws per query");
  double total = 0.0;
  for (const auto& draws : outcomes) {
    if (draws.size() != k)
      throw std::invalid_argument("pass_at_1: non-uniform draw counts");
    int successes = 0;
    for (int d : draws) {
      if (d != 0 && d != 1) throw std::invalid_argument("pass_at_1: draws must be 0/1");
      successes += d;
    }
    total += static_cast<double>(successes) / static_cast<double>(k);
  }
  return total / static_cast<double>(outcomes.size());
}

// Modality gap across the Uni = {V,A,S}, Bi = {VA,VS,AS}, Tri = {VAS}
// partition: three absolute relative differences with the earlier-complexity
// mean as denominator, averaged. Sample weighting is the default; it is the
// convention under which the group means reproduce published tables.
inline GapReport modality_gap(const TagAccuracyTable& table,
                              GapWeighting weighting = GapWeighting::SampleWeighted) {
  for (ModalityTag t : kCanonicalTags)
    if (table.samples(t) <= 0)
      throw std::invalid_argument("modality_gap: zero sample count for tag " + t.to_string());

  auto group_mean = [&](std::initializer_list<ModalityTag> tags) {
    double num = 0.0, den = 0.0;
    for (ModalityTag t : tags) {
      const double w = weighting == GapWeighting::SampleWeighted
                           ? static_cast<double>(table.samples(t))
                           : 1.0;
      num += w * table.acc(t);
      den += w;
    }
    return num / den;
  };
  const double uni = group_mean({tags::V, tags::A, tags::S});
  const double bi = group_mean({tags::VA, tags::VS, tags::AS});
  const double tri = table.acc(tags::VAS);

  GapReport g;
  g.uni_bi = 100.0 * std::abs(bi - uni) / uni;
  g.uni_tri = 100.0 * std::abs(tri - uni) / uni;
  g.bi_tri = 100.0 * std::abs(tri - bi) / bi;
  g.avg = (g.uni_bi + g.uni_tri + g.bi_tri) / 3.0;
  return g;
}

// Per-sample judge scores under all seven exposure conditions.
using SampleScores = std::array<double, 7>;

// Fraction of samples whose best multi-modal score strictly exceeds the best
// uni-modal score.
inline double fusion_gain(const std::vector<SampleScores>& samples) {
  if (samples.empty()) throw std::invalid_argument("fusion_gain: no samples");
  int64_t wins = 0;
  for (const auto& s : samples) {
    for (double v : s)
      if (!(v >= 0.0 && v <= 1.0))
        throw std::invalid_argument("fusion_gain: score outside [0,1]");
    const double uni = std::max({s[static_cast<size_t>(canonical_index(tags::V))],
                                 s[static_cast<size_t>(canonical_index(tags::A))],
                                 s[static_cast<size_t>(canonical_index(tags::S))]});
    const double multi = std::max({s[static_cast<size_t>(canonical_index(tags::VA))],
                                   s[static_cast<size_t>(canonical_index(tags::VS))],
                                   s[static_cast<size_t>(canonical_index(tags::AS))],
                                   s[static_cast<size_t>(canonical_index(tags::VAS))]});
    if (multi > uni) ++wins;
  }
  return static_cast<double>(wins) / static_cast<double>(samples.size());
}

// Reads a line-delimited draws file ({"query", "tag", "draws": [0/1,...]})
// into a per-tag pass@1 table (fraction unit).
inline TagAccuracyTable table_from_draws_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open draws file: " + path);
  std::map<int, std::vector<std::vector<int>>> per_tag;  // canonical index
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    const ModalityTag tag = ModalityTag::parse(j.at("tag").get<std::string>());
    per_tag[canonical_index(tag)].push_back(j.at("draws").get<std::vector<int>>());
  }
  if (per_tag.empty()) throw std::runtime_error("draws file has no records: " + path);
  TagAccuracyTable table;
  table.unit = TagAccuracyTable::Unit::Fraction;
  for (const auto& [idx, outcomes] : per_tag) {
    table.accuracy[static_cast<size_t>(idx)] = pass_at_1(outcomes);
    table.count[static_cast<size_t>(idx)] = static_cast<int64_t>(outcomes.size());
  }
  return table;
}

// Reads a line-delimited score file ({"query", "tag", "score"}) and regroups
// it into per-query score vectors over all seven exposures. A query with a
// missing or duplicated tag is an error.
inline std::vector<SampleScores> samples_from_scores_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open scores file: " + path);
  std::map<int64_t, std::array<std::optional<double>, 7>> per_query;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    const int64_t query = j.at("query").get<int64_t>();
    const int idx = canonical_index(ModalityTag::parse(j.at("tag").get<std::string>()));
    auto& slot = per_query[query][static_cast<size_t>(idx)];
    if (slot.has_value())
      throw std::runtime_error("duplicate score for query " + std::to_string(query));
    slot = j.at("score").get<double>();
  }
  if (per_query.empty()) throw std::runtime_error("scores file has no records: " + path);
  std::vector<SampleScores> samples;
  for (const auto& [query, scores] : per_query) {
    SampleScores s{};
    for (int i = 0; i < 7; ++i) {
      if (!scores[static_cast<size_t>(i)].has_value())
        throw std::runtime_error("query " + std::to_string(query) + " is missing a " +
                                 kCanonicalTags[static_cast<size_t>(i)].to_string() +
                                 " score");
      s[static_cast<size_t>(i)] = *scores[static_cast<size_t>(i)];
    }
    samples.push_back(s);
  }
  return samples;
}

// Symmetric 7x7 matrix of absolute pairwise accuracy differences.
inline std::array<std::array<double, 7>, 7> disparity_matrix(const TagAccuracyTable& table) {
  std::array<std::array<double, 7>, 7> m{};
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 7; ++j)
      m[static_cast<size_t>(i)][static_cast<size_t>(j)] =
          std::abs(table.accuracy[static_cast<size_t>(i)] - table.accuracy[static_cast<size_t>(j)]);
  return m;
}

}  // namespace mapo
