#include <doctest.h>

#include <cmath>

#include "mapo/policy.hpp"
#include "mapo/task_env.hpp"
#include "test_support.hpp"

using namespace mapo;

TEST_CASE("action distribution normalizes to one") {
  ToyPolicy policy(3, 6, 2);
  Rng rng = make_rng(2);
  Eigen::MatrixXd theta(policy.input_dim(), policy.vocab_size());
  for (Eigen::Index r = 0; r < theta.rows(); ++r)
    for (Eigen::Index c = 0; c < theta.cols(); ++c) theta(r, c) = 3.0 * standard_normal(rng);
  policy.set_params(theta);
  FeatureBlocks features = {std::vector<double>{0.3, -0.2, 0.9},
                            std::vector<double>{1.0, 0.0, -1.0},
                            std::vector<double>{0.5, 0.5, 0.5}};
  for (int t = 0; t < 2; ++t) {
    const auto p = policy.action_distribution(policy.feature_vector(features, tags::VAS, t));
    CHECK(std::abs(p.sum() - 1.0) < 1e-12);
    for (int a = 0; a < 6; ++a) CHECK(p[a] > 0.0);
  }
}

TEST_CASE("masking zeroes exactly the non-exposed feature blocks") {
  ToyPolicy policy(2, 4, 3);
  FeatureBlocks features = {std::vector<double>{1.0, 2.0}, std::vector<double>{3.0, 4.0},
                            std::vector<double>{5.0, 6.0}};
  const auto phi = policy.feature_vector(features, tags::VS, 1);
  CHECK(phi[0] == 1.0);
  CHECK(phi[1] == 2.0);
  CHECK(phi[2] == 0.0);  // A masked
  CHECK(phi[3] == 0.0);
  CHECK(phi[4] == 5.0);
  CHECK(phi[5] == 6.0);
  CHECK(phi[6] == 0.0);  // position one-hot
  CHECK(phi[7] == 1.0);
  CHECK(phi[8] == 0.0);
}

TEST_CASE("single-step uniform softmax gradient") {
  // |A| = 2, phi = (1), pi = (0.5, 0.5), action 0 -> column (+0.5, -0.5)
  ToyPolicy policy(1, 2, 1);
  FeatureBlocks features = {std::vector<double>{1.0}, std::vector<double>{0.0},
                            std::vector<double>{0.0}};
  const auto g = policy.grad_sequence_logprob(features, tags::V, {0});
  CHECK(g(0, 0) == doctest::Approx(0.5));
  CHECK(g(0, 1) == doctest::Approx(-0.5));
}

TEST_CASE("score function matches central finite differences") {
  const EnvSpec env{.feature_dim = 3, .vocab_size = 5, .rollout_len = 4};
  std::map<ModalityTag, int, TagCanonicalLess> counts;
  for (ModalityTag tag : kCanonicalTags) counts[tag] = 2;
  const auto tasks = generate_tasks(17, counts, StrataDistribution{}, env);
  const RewardOracle oracle(RewardMode::ContinuousCaption);
  Rng rng = make_rng(3);

  for (int draw = 0; draw < 25; ++draw) {
    ToyPolicy policy(env.feature_dim, env.vocab_size, env.rollout_len);
    Eigen::MatrixXd theta(policy.input_dim(), policy.vocab_size());
    for (Eigen::Index r = 0; r < theta.rows(); ++r)
      for (Eigen::Index c = 0; c < theta.cols(); ++c) theta(r, c) = standard_normal(rng);
    policy.set_params(theta);
    const SyntheticTask& task = tasks[static_cast<size_t>(
        uniform_int(rng, 0, static_cast<int>(tasks.size()) - 1))];
    const auto group = make_rollout_group(policy, oracle, task, 2, 1.0,
                                          derive_seed(100, static_cast<uint64_t>(draw)));
    const Rollout& rollout = group.rollouts[0];

    const Eigen::MatrixXd analytic = policy_grad_logprob(policy, task, rollout);
    const Eigen::MatrixXd numeric = oracle::finite_difference_grad(policy, [&]() {
      return policy.total_logprob(task.features, rollout.exposure, rollout.tokens);
    });
    CHECK(oracle::max_relative_error(analytic, numeric) < 1e-6);
  }
}

TEST_CASE("softmax score identity: pi-weighted gradient over actions is zero") {
  ToyPolicy policy(2, 4, 2);
  Rng rng = make_rng(5);
  Eigen::MatrixXd theta(policy.input_dim(), policy.vocab_size());
  for (Eigen::Index r = 0; r < theta.rows(); ++r)
    for (Eigen::Index c = 0; c < theta.cols(); ++c) theta(r, c) = standard_normal(rng);
  policy.set_params(theta);
  FeatureBlocks features = {std::vector<double>{0.4, -0.7}, std::vector<double>{0.1, 0.2},
                            std::vector<double>{-0.3, 0.8}};
  for (int t = 0; t < 2; ++t) {
    const auto phi = policy.feature_vector(features, tags::VA, t);
    const auto pi = policy.action_distribution(phi);
    Eigen::MatrixXd weighted = Eigen::MatrixXd::Zero(policy.input_dim(), policy.vocab_size());
    for (int a = 0; a < 4; ++a) {
      Eigen::VectorXd delta = -pi;
      delta[a] += 1.0;
      weighted += pi[a] * (phi * delta.transpose());
    }
    CHECK(weighted.cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("dimension mismatch raises") {
  ToyPolicy policy(3, 4, 2);
  FeatureBlocks wrong = {std::vector<double>{1.0}, std::vector<double>{1.0},
                         std::vector<double>{1.0}};
  CHECK_THROWS_AS(policy.feature_vector(wrong, tags::V, 0), std::invalid_argument);
  FeatureBlocks ok = {std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 3},
                      std::vector<double>{1, 2, 3}};
  CHECK_THROWS_AS(policy.grad_sequence_logprob(ok, tags::V, {9}), std::invalid_argument);
  CHECK_THROWS_AS(policy.feature_vector(ok, tags::V, 5), std::invalid_argument);
}
