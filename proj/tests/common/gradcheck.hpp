#pragma once

// Central finite-difference oracle used by the gradient suites. Lives in test
// code only; it must stay independent of the analytic backward passes it
// checks.

#include <cmath>
#include <functional>
#include <vector>

#include "offroad/ndarray.hpp"
#include "offroad/rng.hpp"

namespace gradcheck {

inline constexpr double kStep = 1e-5;

/// Guarded relative error: |a - b| / max(|a|, |b|, 1e-4). The floor keeps
/// finite-difference noise on near-zero gradients from registering as error.
inline double rel_error(double a, double b) {
  const double denom = std::max({std::fabs(a), std::fabs(b), 1e-4});
  return std::fabs(a - b) / denom;
}

/// Max guarded relative error between an analytic gradient and central
/// differences of `loss` with respect to the entries of `x`.
inline double max_rel_error(offroad::NdArray& x, const offroad::NdArray& analytic,
                            const std::function<double()>& loss) {
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + kStep;
    const double up = loss();
    x[i] = saved - kStep;
    const double down = loss();
    x[i] = saved;
    const double numeric = (up - down) / (2.0 * kStep);
    worst = std::max(worst, rel_error(analytic[i], numeric));
  }
  return worst;
}

inline offroad::NdArray random_array(std::vector<std::size_t> shape, offroad::Rng& rng,
                                     double scale = 1.0) {
  offroad::NdArray a(std::move(shape));
  for (double& v : a.values()) v = rng.uniform(-scale, scale);
  return a;
}

}  // namespace gradcheck
