#include <doctest.h>

#include <cmath>
#include <set>

#include "mapo/crw.hpp"

using namespace mapo;

TEST_CASE("similarity_default") {
  SUBCASE("self-similarity is one") {
    CHECK(similarity_default({1, 2, 3}, {1, 2, 3}) == doctest::Approx(1.0));
    CHECK(similarity_default({5}, {5}) == doctest::Approx(1.0));
  }
  SUBCASE("disjoint multisets are orthogonal") {
    CHECK(similarity_default({1, 2}, {3, 4}) == doctest::Approx(0.0));
  }
  SUBCASE("count-vector cosine worked example") {
    // counts a = {1:2, 2:1}, b = {1:1, 2:2}; cos = 4 / (sqrt(5) sqrt(5))
    CHECK(similarity_default({1, 1, 2}, {1, 2, 2}) == doctest::Approx(0.8));
  }
  SUBCASE("symmetry and range") {
    const std::vector<int> a = {0, 0, 1, 3}, b = {0, 2, 3, 3};
    CHECK(similarity_default(a, b) == doctest::Approx(similarity_default(b, a)));
    const double s = similarity_default(a, b);
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
  }
  SUBCASE("empty input is an error") {
    CHECK_THROWS_AS(similarity_default({}, {1}), std::invalid_argument);
    CHECK_THROWS_AS(similarity_default({1}, {}), std::invalid_argument);
  }
}

TEST_CASE("weighted_reward") {
  CrwConfig cfg;
  cfg.alpha = 0.2;
  cfg.tau = 0.8;
  SUBCASE("alpha zero is the identity") {
    CrwConfig id = cfg;
    id.alpha = 0.0;
    for (double s : {0.0, 0.5, 0.79, 0.8, 1.0})
      CHECK(weighted_reward(0.37, s, id) == doctest::Approx(0.37));
  }
  SUBCASE("open gate boosts and clips to one") {
    CHECK(weighted_reward(0.9, 0.5, cfg) == doctest::Approx(1.0));  // 0.9*1.2 = 1.08 -> 1
    CHECK(weighted_reward(0.5, 0.5, cfg) == doctest::Approx(0.6));
  }
  SUBCASE("closed gate passes through") {
    CHECK(weighted_reward(0.9, 0.9, cfg) == doctest::Approx(0.9));
    CHECK(weighted_reward(0.9, 0.8, cfg) == doctest::Approx(0.9));  // s == tau stays closed
  }
  SUBCASE("gate discontinuity sits exactly at tau with strict less") {
    const double below = weighted_reward(0.5, std::nextafter(0.8, 0.0), cfg);
    const double at = weighted_reward(0.5, 0.8, cfg);
    CHECK(below == doctest::Approx(0.6));
    CHECK(at == doctest::Approx(0.5));
  }
  SUBCASE("direction flag flips the comparison") {
    CrwConfig flipped = cfg;
    flipped.gate_below_threshold = false;
    CHECK(weighted_reward(0.5, 0.9, flipped) == doctest::Approx(0.6));
    CHECK(weighted_reward(0.5, 0.5, flipped) == doctest::Approx(0.5));
  }
  SUBCASE("monotone in r_pos and alpha while the gate stays open") {
    double prev = -1.0;
    for (double r = 0.0; r <= 1.0; r += 0.05) {
      const double v = weighted_reward(r, 0.1, cfg);
      CHECK(v >= prev);
      prev = v;
    }
    prev = -1.0;
    for (double alpha = 0.0; alpha <= 2.0; alpha += 0.1) {
      CrwConfig c = cfg;
      c.alpha = alpha;
      const double v = weighted_reward(0.4, 0.1, c);
      CHECK(v >= prev);
      prev = v;
    }
  }
  SUBCASE("range always [0,1]") {
    for (double r = 0.0; r <= 1.0; r += 0.1)
      for (double s = 0.0; s <= 1.0; s += 0.1) {
        const double v = weighted_reward(r, s, cfg);
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
  }
  SUBCASE("input validation") {
    CHECK_THROWS_AS(weighted_reward(1.2, 0.5, cfg), std::invalid_argument);
    CHECK_THROWS_AS(weighted_reward(0.5, -0.1, cfg), std::invalid_argument);
  }
}

TEST_CASE("generate_negative") {
  const EnvSpec env{.feature_dim = 3, .vocab_size = 5, .rollout_len = 3};
  std::map<ModalityTag, int, TagCanonicalLess> counts = {
      {tags::V, 1}, {tags::VAS, 1}, {tags::VA, 1}};
  const auto tasks = generate_tasks(11, counts, StrataDistribution{}, env);
  const ToyPolicy policy(env.feature_dim, env.vocab_size, env.rollout_len);
  const RewardOracle oracle(RewardMode::ContinuousCaption);

  const SyntheticTask* uni = nullptr;
  const SyntheticTask* tri = nullptr;
  const SyntheticTask* bi = nullptr;
  for (const auto& t : tasks) {
    if (t.tag == tags::V) uni = &t;
    if (t.tag == tags::VAS) tri = &t;
    if (t.tag == tags::VA) bi = &t;
  }
  REQUIRE(uni);
  REQUIRE(tri);
  REQUIRE(bi);

  SUBCASE("single-modality tags are not applicable") {
    CHECK_FALSE(generate_negative(policy, oracle, *uni, 3).has_value());
  }
  SUBCASE("tri-modal exposure drops exactly one required modality, per seed") {
    const auto neg = generate_negative(policy, oracle, *tri, 3);
    REQUIRE(neg.has_value());
    CHECK(neg->is_negative);
    CHECK(neg->exposure.complexity() == 2);
    CHECK(tri->tag.contains(neg->exposure));
    const auto again = generate_negative(policy, oracle, *tri, 3);
    CHECK(again->exposure == neg->exposure);
    CHECK(again->tokens == neg->tokens);
    std::set<uint8_t> seen;
    for (uint64_t seed = 0; seed < 64; ++seed)
      seen.insert(generate_negative(policy, oracle, *tri, seed)->exposure.bits());
    CHECK(seen == std::set<uint8_t>{tags::VA.bits(), tags::VS.bits(), tags::AS.bits()});
  }
  SUBCASE("bi-modal exposure is the remaining single modality") {
    const auto neg = generate_negative(policy, oracle, *bi, 9);
    REQUIRE(neg.has_value());
    CHECK(neg->exposure.complexity() == 1);
    CHECK(bi->tag.contains(neg->exposure));
  }
}
