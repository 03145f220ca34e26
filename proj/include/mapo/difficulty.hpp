#pragma once

#include <cmath>
#include <deque>
#include <stdexcept>
#include <vector>

#include "mapo/modality.hpp"

namespace mapo {

// Near-optimal reward target: Beta(100,1) on [0,1] for continuous rewards,
// and a Bernoulli with success rate equal to its mean for binary rewards.
struct KlTarget {
  static constexpr double kBernoulliTarget = 100.0 / 101.0;

  static double beta_pdf(double x) { return 100.0 * std::pow(x, 99.0); }
};

inline constexpr int kKlBins = 50;
inline constexpr double kKlEps = 1e-10;
inline constexpr double kBinaryClipEps = 1e-6;
inline constexpr double kHistoryEps = 1e-8;

// Binned KL divergence of the empirical reward density against Beta(100,1):
//   sum_i p(x_i) log((p(x_i)+eps)/(q(x_i)+eps)) dx
// over K uniform bins with density normalization (counts / (N dx)) and the
// pdf evaluated at bin centers. The epsilon smoothing keeps it finite but can
// push the binned value slightly negative; it is a difficulty score, not a
// true divergence.
inline double kl_continuous(const std::vector<double>& rewards, int bins = kKlBins,
                            double eps = kKlEps) {
  if (rewards.empty()) throw std::invalid_argument("kl_continuous: empty rewards");
  if (bins < 2) throw std::invalid_argument("kl_continuous: need at least 2 bins");
  const double dx = 1.0 / bins;
  std::vector<double> counts(static_cast<size_t>(bins), 0.0);
  for (double r : rewards) {
    if (!(r >= 0.0 && r <= 1.0))
      throw std::invalid_argument("kl_continuous: reward outside [0,1]");
    int b = static_cast<int>(r * bins);
    if (b == bins) b = bins - 1;  // r == 1 falls in the right-closed last bin
    counts[static_cast<size_t>(b)] += 1.0;
  }
  const double n = static_cast<double>(rewards.size());
  double kl = 0.0;
  for (int i = 0; i < bins; ++i) {
    const double p = counts[static_cast<size_t>(i)] / (n * dx);
    const double x = (i + 0.5) * dx;
    const double q = KlTarget::beta_pdf(x);
    kl += p * std::log((p + eps) / (q + eps)) * dx;
  }
  return kl;
}

inline double kl_binary_from_rate(double p_emp, double clip_eps = kBinaryClipEps) {
  const double p_tgt = KlTarget::kBernoulliTarget;
  double p = p_emp;
  if (p < clip_eps) p = clip_eps;
  if (p > 1.0 - clip_eps) p = 1.0 - clip_eps;
  return p * std::log(p / p_tgt) + (1.0 - p) * std::log((1.0 - p) / (1.0 - p_tgt));
}

// Bernoulli-Bernoulli KL divergence of the empirical success rate against
// the Beta(100,1) mean, with the rate clipped to [eps, 1-eps].
inline double kl_binary(const std::vector<double>& rewards,
                        double clip_eps = kBinaryClipEps) {
  if (rewards.empty()) throw std::invalid_argument("kl_binary: empty rewards");
  double successes = 0.0;
  for (double r : rewards) {
    if (r != 0.0 && r != 1.0)
      throw std::invalid_argument("kl_binary: rewards must be exactly 0 or 1");
    successes += r;
  }
  return kl_binary_from_rate(successes / static_cast<double>(rewards.size()), clip_eps);
}

// Per-tag ring buffer of difficulty scores with running mean and population
// std over the current contents. Capacity is sized to roughly one epoch of
// steps so the history spans all tags of a training cycle.
class KlHistory {
 public:
  explicit KlHistory(size_t capacity, ModalityTag tag = ModalityTag())
      : tag_(tag), capacity_(capacity) {
    if (capacity_ == 0) throw std::invalid_argument("KlHistory capacity must be >= 1");
  }

  ModalityTag tag() const { return tag_; }
  size_t capacity() const { return capacity_; }
  size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }
  const std::deque<double>& values() const { return values_; }

  struct Stats {
    double mu = 0.0;
    double sigma = 0.0;
  };

  Stats stats() const {
    Stats st;
    if (values_.empty()) return st;
    const double n = static_cast<double>(values_.size());
    for (double v : values_) st.mu += v;
    st.mu /= n;
    double ss = 0.0;
    for (double v : values_) ss += (v - st.mu) * (v - st.mu);
    st.sigma = std::sqrt(ss / n);
    return st;
  }

  // Append (evicting the oldest at capacity) and return the updated stats.
  Stats push_and_stats(double d_kl) {
    if (!std::isfinite(d_kl)) throw std::invalid_argument("KlHistory: non-finite value");
    if (values_.size() == capacity_) values_.pop_front();
    values_.push_back(d_kl);
    return stats();
  }

  // Mean of the last min(window, size) values; curriculum priority s_M.
  double recent_mean(size_t window) const {
    if (values_.empty()) return 0.0;
    const size_t w = window < values_.size() ? window : values_.size();
    double s = 0.0;
    for (size_t i = values_.size() - w; i < values_.size(); ++i) s += values_[i];
    return s / static_cast<double>(w);
  }

 private:
  ModalityTag tag_;
  size_t capacity_;
  std::deque<double> values_;
};

}  // namespace mapo
