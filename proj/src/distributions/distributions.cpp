#include "cofs/distributions.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

namespace cofs {

namespace {

double log_sum_exp(std::span<const double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

std::vector<double> log_softmax(std::span<const double> logits) {
  const double lse = log_sum_exp(logits);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

double clamped_log_scale(double log_scale) { return std::max(log_scale, kLogScaleFloor); }

}  // namespace

LogisticMixtureParams LogisticMixtureParams::from_raw(std::span<const double> raw) {
  if (raw.empty() || raw.size() % 3 != 0) throw std::invalid_argument("mixture params: raw length must be 3T");
  const std::size_t t = raw.size() / 3;
  LogisticMixtureParams p;
  p.weight_logits.assign(raw.begin(), raw.begin() + static_cast<std::ptrdiff_t>(t));
  p.means.assign(raw.begin() + static_cast<std::ptrdiff_t>(t), raw.begin() + static_cast<std::ptrdiff_t>(2 * t));
  p.log_scales.assign(raw.begin() + static_cast<std::ptrdiff_t>(2 * t), raw.end());
  return p;
}

std::vector<double> LogisticMixtureParams::weights() const {
  std::vector<double> w = log_softmax(weight_logits);
  for (double& x : w) x = std::exp(x);
  return w;
}

double LogisticMixtureParams::scale(std::size_t i) const { return std::exp(clamped_log_scale(log_scales.at(i))); }

double logistic_log_density(double x, double mu, double sigma) {
  const double z = std::abs((x - mu) / sigma);
  return -z - std::log(sigma) - 2.0 * std::log1p(std::exp(-z));
}

double logistic_mixture_log_prob(double x, const LogisticMixtureParams& p) {
  const std::size_t t = p.components();
  if (t == 0 || p.weight_logits.size() != t || p.log_scales.size() != t) {
    throw std::invalid_argument("mixture params: inconsistent component counts");
  }
  const std::vector<double> lw = log_softmax(p.weight_logits);
  std::vector<double> terms(t);
  for (std::size_t i = 0; i < t; ++i) terms[i] = lw[i] + logistic_log_density(x, p.means[i], p.scale(i));
  return log_sum_exp(terms);
}

double logistic_mixture_mode(const LogisticMixtureParams& p) { return p.means.at(argmax(p.weight_logits)); }

double logistic_mixture_sample(const LogisticMixtureParams& p, Rng& rng, double temperature) {
  if (temperature <= 0.0) return logistic_mixture_mode(p);
  std::vector<double> scaled(p.weight_logits);
  for (double& l : scaled) l /= temperature;
  std::vector<double> w = log_softmax(scaled);
  for (double& x : w) x = std::exp(x);
  const std::size_t c = rng.discrete(w);
  const double u = rng.uniform_open();
  return p.means[c] + p.scale(c) * std::log(u / (1.0 - u));
}

double categorical_log_prob(std::size_t id, const CategoricalParams& p) {
  if (id >= p.logits.size()) {
    throw std::invalid_argument("categorical: id " + std::to_string(id) + " out of range " +
                                std::to_string(p.logits.size()));
  }
  return p.logits[id] - log_sum_exp(p.logits);
}

std::size_t categorical_sample(const CategoricalParams& p, Rng& rng, double temperature) {
  if (p.logits.empty()) throw std::invalid_argument("categorical: no classes");
  if (temperature <= 0.0) return argmax(p.logits);
  std::vector<double> scaled(p.logits);
  for (double& l : scaled) l /= temperature;
  std::vector<double> probs = log_softmax(scaled);
  for (double& x : probs) x = std::exp(x);
  return rng.discrete(probs);
}

Tensor logistic_mixture_nll_sum(const Tensor& raw, std::span<const double> targets) {
  if (raw.ndim() != 2 || raw.cols() == 0 || raw.cols() % 3 != 0) {
    throw std::invalid_argument("mixture nll: raw must be [m x 3T]");
  }
  const std::size_t m = raw.rows(), t = raw.cols() / 3, width = raw.cols();
  if (targets.size() != m) throw std::invalid_argument("mixture nll: one target per row required");

  // d(log p)/d(raw), saved for backward.
  std::vector<double> dlogp(m * width, 0.0);
  std::vector<double> terms(t), lw(t);
  double total = 0.0;
  auto rv = raw.values();
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = rv.data() + r * width;
    const double x = targets[r];
    const double wl_lse = log_sum_exp(std::span<const double>(row, t));
    for (std::size_t i = 0; i < t; ++i) {
      lw[i] = row[i] - wl_lse;
      const double sigma = std::exp(clamped_log_scale(row[2 * t + i]));
      terms[i] = lw[i] + logistic_log_density(x, row[t + i], sigma);
    }
    const double logp = log_sum_exp(terms);
    total -= logp;
    double* g = dlogp.data() + r * width;
    for (std::size_t i = 0; i < t; ++i) {
      const double resp = std::exp(terms[i] - logp);
      g[i] = resp - std::exp(lw[i]);
      const double ls = row[2 * t + i];
      const double sigma = std::exp(clamped_log_scale(ls));
      const double z = (x - row[t + i]) / sigma;
      const double th = std::tanh(0.5 * z);
      g[t + i] = resp * th / sigma;
      g[2 * t + i] = ls > kLogScaleFloor ? resp * (z * th - 1.0) : 0.0;
    }
  }
  Tensor out = make_result({1}, {total}, {raw});
  set_backward(out, [pr = raw.node_ptr(), dlogp = std::move(dlogp)](detail::Node& o) {
    auto& g = pr->ensure_grad();
    const double go = o.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= go * dlogp[i];
  });
  return out;
}

}  // namespace cofs
