#include "mddet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "mddet/rng.hpp"

namespace mddet {

GradCheckReport finite_diff_check(const std::function<double(std::span<const double>)>& loss,
                                  std::span<const double> params,
                                  std::span<const double> analytic_grad,
                                  double epsilon,
                                  std::uint64_t seed,
                                  std::size_t min_coords) {
    if (params.size() != analytic_grad.size())
        throw std::invalid_argument("finite_diff_check: gradient length mismatch");
    if (epsilon <= 0.0) throw std::invalid_argument("finite_diff_check: epsilon must be positive");

    std::vector<std::size_t> coords(params.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (coords.size() > min_coords) {
        Rng rng(Rng::mix(seed, 0x6f1d3c5b));
        rng.shuffle(coords);
        coords.resize(min_coords);
        std::sort(coords.begin(), coords.end());
    }

    std::vector<double> work(params.begin(), params.end());
    GradCheckReport report;
    report.n_checked = coords.size();
    for (std::size_t i : coords) {
        const double saved = work[i];
        work[i] = saved + epsilon;
        const double up = loss(work);
        work[i] = saved - epsilon;
        const double down = loss(work);
        work[i] = saved;
        const double numeric = (up - down) / (2.0 * epsilon);
        const double analytic = analytic_grad[i];
        const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
        const double rel = std::abs(analytic - numeric) / denom;
        report.max_rel_err = std::max(report.max_rel_err, rel);
    }
    return report;
}

}  // namespace mddet
