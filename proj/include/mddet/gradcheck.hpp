#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace mddet {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t n_checked = 0;
};

// Central-difference check of an analytic gradient. Perturbs a random
// subsample of at least min(min_coords, dim) distinct coordinates and reports
// the max relative error with denominator max(|analytic|, |numeric|, 1e-8).
GradCheckReport finite_diff_check(const std::function<double(std::span<const double>)>& loss,
                                  std::span<const double> params,
                                  std::span<const double> analytic_grad,
                                  double epsilon,
                                  std::uint64_t seed = 0,
                                  std::size_t min_coords = 200);

}  // namespace mddet
