#pragma once

#include "glcm.hpp"
#include "random.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace hrgsdp {

struct SimConfig {
    int K = 16;
    std::vector<double> c_values{5.0, 5.5, 6.0, 6.5, 7.0};
    double s = 10.0;
    int subjects_per_class = 20;
    std::optional<Eigen::Vector2d> skew;
    int points_per_surface = 10000;
    int total_min = 500;
    int total_max = 20000;
    std::uint64_t seed = 1;

    void validate() const;
};

// Probability surface over the K x K cells.
using RateSurface = Eigen::MatrixXd;

// Bivariate normal with mean (2 + c, 14 - c) and covariance s [[1, -0.7], [-0.7, 1]],
// or that mean plus a skew-normal SN(Sigma, alpha) draw when alpha is given.
Eigen::Vector2d latent_sample(double c, double s, const std::optional<Eigen::Vector2d>& alpha, Rng& rng);

// Point (x1, x2) lands in cell (round(x1), round(x2)), 1-based; points outside
// 1..K in either coordinate are dropped.
RateSurface empirical_rate_surface(const std::vector<Eigen::Vector2d>& points, int K = 16);

// 3 x 3 Gaussian kernel (sigma = 1 cell), renormalized at the borders, then
// rescaled to total mass 1.
RateSurface smooth_surface(const RateSurface& raw);

// counts = round(N p) with N uniform on {total_min, ..., total_max}.
CountMatrix scale_and_round(const RateSurface& surface, Rng& rng, int total_min = 500, int total_max = 20000);

struct SimCohort {
    std::vector<std::string> ids;
    std::vector<CountMatrix> counts;
    std::vector<int> labels;  // 1-based class index into c_values
};

// Subjects are generated class by class; subject k draws from its own stream
// keyed by (seed, k), so the cohort does not depend on generation order.
SimCohort generate_cohort(const SimConfig& cfg);

}  // namespace hrgsdp
