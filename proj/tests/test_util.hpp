#pragma once

#include "glcm.hpp"
#include "random.hpp"

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

namespace testutil {

// Asymptotic Kolmogorov survival function P(K > lambda).
inline double kolmogorov_q(double lambda) {
    if (lambda < 1e-3) return 1.0;
    double sum = 0.0;
    for (int k = 1; k <= 200; ++k) {
        const double term = 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
        sum += term;
        if (std::abs(term) < 1e-16) break;
    }
    return std::clamp(sum, 0.0, 1.0);
}

// One-sample KS test against a continuous CDF. Returns the p-value.
inline double ks_pvalue(std::vector<double> x, const std::function<double(double)>& cdf) {
    std::sort(x.begin(), x.end());
    const double n = static_cast<double>(x.size());
    double d = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double f = cdf(x[i]);
        d = std::max({d, (i + 1) / n - f, f - i / n});
    }
    const double sn = std::sqrt(n);
    return kolmogorov_q((sn + 0.12 + 0.11 / sn) * d);
}

inline double ks_two_sample_pvalue(std::vector<double> a, std::vector<double> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    std::size_t i = 0, j = 0;
    double d = 0.0;
    while (i < a.size() && j < b.size()) {
        const double v = std::min(a[i], b[j]);
        while (i < a.size() && a[i] <= v) ++i;
        while (j < b.size() && b[j] <= v) ++j;
        d = std::max(d, std::abs(i / na - j / nb));
    }
    const double ne = std::sqrt(na * nb / (na + nb));
    return kolmogorov_q((ne + 0.12 + 0.11 / ne) * d);
}

// Gauss-Hermite nodes and weights for weight exp(-x^2), by Golub-Welsch.
inline void gauss_hermite(int m, std::vector<double>& nodes, std::vector<double>& weights) {
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(m, m);
    for (int i = 1; i < m; ++i) J(i, i - 1) = J(i - 1, i) = std::sqrt(i / 2.0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
    nodes.resize(m);
    weights.resize(m);
    for (int i = 0; i < m; ++i) {
        nodes[i] = es.eigenvalues()[i];
        const double v = es.eigenvectors()(0, i);
        weights[i] = std::sqrt(M_PI) * v * v;
    }
}

// Counts every ordered pair of masked-in pixels at the given offset directly.
inline hrgsdp::CountMatrix brute_force_glcm(const Eigen::MatrixXi& levels, const hrgsdp::BoolMatrix* mask, int K,
                                            int offset = 1, bool diagonals = true) {
    hrgsdp::CountMatrix c = hrgsdp::CountMatrix::Zero(K, K);
    const auto R = levels.rows(), C = levels.cols();
    for (Eigen::Index r1 = 0; r1 < R; ++r1)
        for (Eigen::Index c1 = 0; c1 < C; ++c1)
            for (Eigen::Index r2 = 0; r2 < R; ++r2)
                for (Eigen::Index c2 = 0; c2 < C; ++c2) {
                    const auto dr = std::abs(r1 - r2), dc = std::abs(c1 - c2);
                    const bool straight = (dr == 0 && dc == offset) || (dr == offset && dc == 0);
                    const bool diag = diagonals && dr == offset && dc == offset;
                    if (!straight && !diag) continue;
                    if (mask && (!(*mask)(r1, c1) || !(*mask)(r2, c2))) continue;
                    ++c(levels(r1, c1), levels(r2, c2));
                }
    return c;
}

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() / ("hrgsdp_test_" + tag + "_" + std::to_string(::getpid()));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::string operator/(const std::string& name) const { return (path / name).string(); }
};

}  // namespace testutil
