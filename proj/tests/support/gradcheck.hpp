// Central finite-difference oracle for autograd tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "cofs/rng.hpp"
#include "cofs/tensor.hpp"

namespace cofs::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal(0.0, scale);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Turns a tensor-valued output into a scalar with fixed random weights so
// every output element influences the check.
inline Tensor project(const Tensor& out, std::uint64_t seed = 99) {
  Rng rng(seed);
  Tensor w = random_tensor(out.shape(), rng, 1.0, false);
  return reduce_sum(mul(out, w));
}

inline double relative_error(double analytic, double numeric, double floor = 1e-4) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// Compares backward() against (f(x + h) - f(x - h)) / 2h for each listed
// element of each input. `elements` == 0 checks everything.
inline GradcheckReport gradcheck(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double h = 1e-6,
                                 std::size_t elements = 0, std::uint64_t seed = 5) {
  for (auto& t : inputs) t.zero_grad();
  backward(f());
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    if (t.has_grad()) analytic.emplace_back(t.grad().begin(), t.grad().end());
    else analytic.emplace_back(t.numel(), 0.0);
  }

  GradcheckReport report;
  Rng pick(seed);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto values = inputs[i].mutable_values();
    std::vector<std::size_t> idx;
    if (elements == 0 || elements >= values.size()) {
      for (std::size_t k = 0; k < values.size(); ++k) idx.push_back(k);
    } else {
      for (std::size_t k = 0; k < elements; ++k) idx.push_back(pick.uniform_index(values.size()));
    }
    for (std::size_t k : idx) {
      const double orig = values[k];
      double fp, fm;
      {
        NoGradGuard ng;
        values[k] = orig + h;
        fp = f().item();
        values[k] = orig - h;
        fm = f().item();
        values[k] = orig;
      }
      const double numeric = (fp - fm) / (2.0 * h);
      report.max_rel_error = std::max(report.max_rel_error, relative_error(analytic[i][k], numeric));
      ++report.checked;
    }
  }
  return report;
}

}  // namespace cofs::testing
