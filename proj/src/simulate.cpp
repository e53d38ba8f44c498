#include "simulate.hpp"

#include "error.hpp"

#include <Eigen/Cholesky>

#include <cmath>
#include <cstdio>

namespace hrgsdp {

namespace {

constexpr double kRho = -0.7;

Eigen::Matrix2d latent_cov(double s) {
    Eigen::Matrix2d S;
    S << 1.0, kRho, kRho, 1.0;
    return s * S;
}

}  // namespace

void SimConfig::validate() const {
    if (K < 2) throw usage_error("simulation grid needs K >= 2");
    if (c_values.empty()) throw usage_error("at least one class shift is required");
    if (!(s > 0.0)) throw usage_error("scale s must be positive");
    if (subjects_per_class < 1) throw usage_error("subjects_per_class must be at least 1");
    if (points_per_surface < 1) throw usage_error("points_per_surface must be at least 1");
    if (total_min < 1 || total_max < total_min) throw usage_error("total count range must satisfy 1 <= min <= max");
}

Eigen::Vector2d latent_sample(double c, double s, const std::optional<Eigen::Vector2d>& alpha, Rng& rng) {
    if (!(s > 0.0)) throw usage_error("scale s must be positive");
    const Eigen::Vector2d mu(2.0 + c, 14.0 - c);
    const Eigen::Matrix2d S = latent_cov(s);
    if (!alpha) {
        const Eigen::Matrix2d L = S.llt().matrixL();
        const Eigen::Vector2d e(std_normal(rng), std_normal(rng));
        return mu + L * e;
    }
    // (X0, X) jointly normal with Cov(X0, X) = delta; keeping X when X0 > 0 and
    // reflecting otherwise gives density 2 phi(z; S) Phi(alpha' z).
    const Eigen::Vector2d delta = S * *alpha / std::sqrt(1.0 + alpha->dot(S * *alpha));
    const Eigen::Matrix2d cond = S - delta * delta.transpose();
    const Eigen::Matrix2d L = cond.llt().matrixL();
    const double x0 = std_normal(rng);
    const Eigen::Vector2d e(std_normal(rng), std_normal(rng));
    const Eigen::Vector2d x = delta * x0 + L * e;
    return mu + (x0 > 0.0 ? x : Eigen::Vector2d(-x));
}

RateSurface empirical_rate_surface(const std::vector<Eigen::Vector2d>& points, int K) {
    if (points.empty()) throw usage_error("no points to bin");
    RateSurface p = RateSurface::Zero(K, K);
    long long kept = 0;
    for (const Eigen::Vector2d& x : points) {
        const double r = std::nearbyint(x[0]);
        const double c = std::nearbyint(x[1]);
        if (r < 1 || r > K || c < 1 || c > K) continue;
        p(static_cast<int>(r) - 1, static_cast<int>(c) - 1) += 1.0;
        ++kept;
    }
    if (kept == 0) throw data_error("all simulated points fall outside the grid");
    return p / static_cast<double>(kept);
}

RateSurface smooth_surface(const RateSurface& raw) {
    const Eigen::Index R = raw.rows(), C = raw.cols();
    if ((raw.array() < 0.0).any()) throw usage_error("rate surface has negative entries");
    double kernel[3][3];
    for (int a = -1; a <= 1; ++a)
        for (int b = -1; b <= 1; ++b) kernel[a + 1][b + 1] = std::exp(-0.5 * (a * a + b * b));
    RateSurface out = RateSurface::Zero(R, C);
    for (Eigen::Index i = 0; i < R; ++i) {
        for (Eigen::Index j = 0; j < C; ++j) {
            double acc = 0.0, weight = 0.0;
            for (int a = -1; a <= 1; ++a) {
                for (int b = -1; b <= 1; ++b) {
                    const Eigen::Index ii = i + a, jj = j + b;
                    if (ii < 0 || ii >= R || jj < 0 || jj >= C) continue;
                    acc += kernel[a + 1][b + 1] * raw(ii, jj);
                    weight += kernel[a + 1][b + 1];
                }
            }
            out(i, j) = acc / weight;
        }
    }
    const double total = out.sum();
    if (!(total > 0.0)) throw data_error("rate surface has no mass");
    return out / total;
}

CountMatrix scale_and_round(const RateSurface& surface, Rng& rng, int total_min, int total_max) {
    std::uniform_int_distribution<int> pick(total_min, total_max);
    const double N = pick(rng);
    CountMatrix counts(surface.rows(), surface.cols());
    for (Eigen::Index i = 0; i < surface.rows(); ++i)
        for (Eigen::Index j = 0; j < surface.cols(); ++j)
            counts(i, j) = static_cast<std::int64_t>(std::nearbyint(N * surface(i, j)));
    return counts;
}

SimCohort generate_cohort(const SimConfig& cfg) {
    cfg.validate();
    SimCohort cohort;
    const int n_class = static_cast<int>(cfg.c_values.size());
    std::vector<Eigen::Vector2d> points(cfg.points_per_surface);
    int k = 0;
    for (int cls = 0; cls < n_class; ++cls) {
        for (int m = 0; m < cfg.subjects_per_class; ++m, ++k) {
            Rng rng = make_stream(cfg.seed, {2, static_cast<std::uint64_t>(k)});
            for (auto& x : points) x = latent_sample(cfg.c_values[cls], cfg.s, cfg.skew, rng);
            const RateSurface surface = smooth_surface(empirical_rate_surface(points, cfg.K));
            char id[32];
            std::snprintf(id, sizeof id, "S%03d", k + 1);
            cohort.ids.emplace_back(id);
            cohort.counts.push_back(scale_and_round(surface, rng, cfg.total_min, cfg.total_max));
            cohort.labels.push_back(cls + 1);
        }
    }
    return cohort;
}

}  // namespace hrgsdp
