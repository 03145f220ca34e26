#pragma once

#include <Eigen/Core>
#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "mapo/modality.hpp"
#include "mapo/rng.hpp"

namespace mapo {

// Per-modality feature blocks, indexed by Modality. Every task carries all
// three blocks; exposure decides which ones the policy sees.
using FeatureBlocks = std::array<std::vector<double>, 3>;

// Linear-softmax policy over a fixed vocabulary. The input at step t is
//   phi(x, exposure, t) = [V block | A block | S block | onehot(t)]
// with the block of every modality not in exposure zeroed. Token draws are
// conditionally independent given features, so the position block is what
// lets one parameter matrix express a different distribution per step.
class ToyPolicy {
 public:
  ToyPolicy(int feature_dim, int vocab_size, int rollout_len)
      : feature_dim_(feature_dim), vocab_(vocab_size), len_(rollout_len) {
    if (feature_dim < 1 || vocab_size < 2 || rollout_len < 1)
      throw std::invalid_argument("bad policy dimensions");
    theta_ = Eigen::MatrixXd::Zero(input_dim(), vocab_);
  }

  int feature_dim() const { return feature_dim_; }
  int vocab_size() const { return vocab_; }
  int rollout_len() const { return len_; }
  int input_dim() const { return 3 * feature_dim_ + len_; }

  const Eigen::MatrixXd& params() const { return theta_; }
  Eigen::MatrixXd& params() { return theta_; }

  void set_params(const Eigen::MatrixXd& theta) {
    if (theta.rows() != input_dim() || theta.cols() != vocab_)
      throw std::invalid_argument("parameter shape mismatch");
    theta_ = theta;
  }

  Eigen::VectorXd feature_vector(const FeatureBlocks& features, ModalityTag exposure,
                                 int step) const {
    if (step < 0 || step >= len_) throw std::invalid_argument("step out of range");
    Eigen::VectorXd phi = Eigen::VectorXd::Zero(input_dim());
    for (Modality m : kAllModalities) {
      const auto& block = features[static_cast<size_t>(m)];
      if (static_cast<int>(block.size()) != feature_dim_)
        throw std::invalid_argument("feature block dimension mismatch");
      if (!exposure.contains(m)) continue;
      const int base = static_cast<int>(m) * feature_dim_;
      for (int k = 0; k < feature_dim_; ++k) phi[base + k] = block[static_cast<size_t>(k)];
    }
    phi[3 * feature_dim_ + step] = 1.0;
    return phi;
  }

  // softmax(theta^T phi / temperature); stable and normalized to 1.
  Eigen::VectorXd action_distribution(const Eigen::VectorXd& phi,
                                      double temperature = 1.0) const {
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
    Eigen::VectorXd logits = theta_.transpose() * phi / temperature;
    if (!logits.allFinite()) throw std::domain_error("non-finite policy logits");
    const double zmax = logits.maxCoeff();
    Eigen::VectorXd p = (logits.array() - zmax).exp();
    p /= p.sum();
    return p;
  }

  struct Draw {
    int token = 0;
    double logprob = 0.0;  // log-probability under the sampling distribution
  };

  Draw sample_token(const FeatureBlocks& features, ModalityTag exposure, int step,
                    double temperature, Rng& rng) const {
    const Eigen::VectorXd p =
        action_distribution(feature_vector(features, exposure, step), temperature);
    const double u = uniform_real(rng, 0.0, 1.0);
    double acc = 0.0;
    int tok = vocab_ - 1;
    for (int a = 0; a < vocab_; ++a) {
      acc += p[a];
      if (u < acc) {
        tok = a;
        break;
      }
    }
    return {tok, std::log(p[tok])};
  }

  // Per-token log pi_theta(a_t | phi_t) at temperature 1 (the trainer
  // distribution the surrogate differentiates).
  std::vector<double> sequence_logprobs(const FeatureBlocks& features, ModalityTag exposure,
                                        const std::vector<int>& tokens) const {
    std::vector<double> lps;
    lps.reserve(tokens.size());
    for (size_t t = 0; t < tokens.size(); ++t) {
      const Eigen::VectorXd p =
          action_distribution(feature_vector(features, exposure, static_cast<int>(t)));
      const int a = tokens[t];
      if (a < 0 || a >= vocab_) throw std::invalid_argument("token out of vocabulary");
      lps.push_back(std::log(p[a]));
    }
    return lps;
  }

  double total_logprob(const FeatureBlocks& features, ModalityTag exposure,
                       const std::vector<int>& tokens) const {
    double s = 0.0;
    for (double lp : sequence_logprobs(features, exposure, tokens)) s += lp;
    return s;
  }

  // Exact score function of the sequence log-likelihood:
  //   sum_t phi_t (onehot(a_t) - pi(.|phi_t))^T
  Eigen::MatrixXd grad_sequence_logprob(const FeatureBlocks& features, ModalityTag exposure,
                                        const std::vector<int>& tokens) const {
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(input_dim(), vocab_);
    for (size_t t = 0; t < tokens.size(); ++t) {
      const Eigen::VectorXd phi = feature_vector(features, exposure, static_cast<int>(t));
      Eigen::VectorXd delta = -action_distribution(phi);
      const int a = tokens[t];
      if (a < 0 || a >= vocab_) throw std::invalid_argument("token out of vocabulary");
      delta[a] += 1.0;
      g.noalias() += phi * delta.transpose();
    }
    return g;
  }

 private:
  int feature_dim_;
  int vocab_;
  int len_;
  Eigen::MatrixXd theta_;  // input_dim x vocab
};

}  // namespace mapo
