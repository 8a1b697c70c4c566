// Output-head distributions: a mixture of logistics for continuous
// attributes and a categorical over class logits.
#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "cofs/rng.hpp"
#include "cofs/tensor.hpp"

namespace cofs {

// Scales are clamped to exp(log_scale) >= kScaleFloor.
inline constexpr double kScaleFloor = 1e-3;
inline const double kLogScaleFloor = std::log(kScaleFloor);

// Raw head output of one position is 3T numbers laid out as
// [weight logits (T) | means (T) | log scales (T)].
struct LogisticMixtureParams {
  std::vector<double> weight_logits;
  std::vector<double> means;
  std::vector<double> log_scales;

  std::size_t components() const { return means.size(); }
  static LogisticMixtureParams from_raw(std::span<const double> raw);
  // Mixture weights softmax(weight_logits).
  std::vector<double> weights() const;
  double scale(std::size_t i) const;
};

struct CategoricalParams {
  std::vector<double> logits;
};

// log of the logistic density with location mu and scale sigma at x.
double logistic_log_density(double x, double mu, double sigma);

double logistic_mixture_log_prob(double x, const LogisticMixtureParams& p);

// Picks a component from softmax(weight_logits / temperature), then draws
// mu + sigma * ln(u / (1 - u)). Temperature 0 returns logistic_mixture_mode.
double logistic_mixture_sample(const LogisticMixtureParams& p, Rng& rng, double temperature = 1.0);

// Mean of the highest-weight component (a cheap stand-in for the true mode).
double logistic_mixture_mode(const LogisticMixtureParams& p);

double categorical_log_prob(std::size_t id, const CategoricalParams& p);
// Inverse-CDF draw over softmax(logits / temperature); temperature 0 -> argmax
// (ties to the lowest id).
std::size_t categorical_sample(const CategoricalParams& p, Rng& rng, double temperature = 1.0);

// Differentiable sum over rows of -log p(targets[r]) for raw head outputs
// `raw` of shape [m x 3T].
Tensor logistic_mixture_nll_sum(const Tensor& raw, std::span<const double> targets);

}  // namespace cofs
