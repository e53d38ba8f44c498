#include "spatial.hpp"

#include "error.hpp"

#include <Eigen/Eigenvalues>
#include <boost/math/special_functions/erf.hpp>

#include <cmath>
#include <limits>
#include <numbers>

namespace hrgsdp {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
// Below this standardized value erfc underflows toward the denormal range.
constexpr double kTailSwitch = -30.0;

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

double log_normal_pdf(double x) { return -0.5 * x * x - 0.5 * std::log(2.0 * std::numbers::pi); }

// Solve log Phi(x) = target for x <= start, where log Phi(start) >= target.
// log Phi is concave and increasing, so Newton iterates approach the root
// monotonically after the first step.
double log_cdf_inverse_newton(double target, double start) {
    double x = start;
    for (int it = 0; it < 100; ++it) {
        const double f = log_normal_cdf(x) - target;
        const double slope = std::exp(log_normal_pdf(x) - log_normal_cdf(x));
        const double step = f / slope;
        x -= step;
        if (std::abs(step) <= 1e-14 * std::max(1.0, std::abs(x))) break;
    }
    return x;
}

}  // namespace

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double log_normal_cdf(double x) {
    if (x == -kInf) return -kInf;
    if (x > kTailSwitch) return std::log(normal_cdf(x));
    // Mills-ratio asymptotic series; the truncation error is below 1e-12 at x = -30.
    const double r = 1.0 / (x * x);
    const double series = 1.0 - r * (1.0 - 3.0 * r * (1.0 - 5.0 * r * (1.0 - 7.0 * r)));
    return log_normal_pdf(x) - std::log(-x) + std::log(series);
}

double normal_quantile(double p) {
    if (p <= 0.0) return -kInf;
    if (p >= 1.0) return kInf;
    return -std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * p);
}

std::shared_ptr<const CarEigenCache> CarEigenCache::compute(const LatticeGraph& graph) {
    if ((graph.D.array() <= 0.0).any()) throw data_error("lattice has an isolated site");
    const Eigen::VectorXd inv_sqrt_d = graph.D.array().rsqrt();
    const Eigen::MatrixXd M = inv_sqrt_d.asDiagonal() * graph.W * inv_sqrt_d.asDiagonal();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(M, Eigen::EigenvaluesOnly);
    if (solver.info() != Eigen::Success) throw numerical_error("eigenvalue computation failed for lattice graph");
    auto cache = std::make_shared<CarEigenCache>();
    cache->lambda = solver.eigenvalues();
    cache->sum_log_d = graph.D.array().log().sum();
    return cache;
}

double CarEigenCache::logdet(double rho) const {
    return sum_log_d + (1.0 - rho * lambda.array()).log().sum();
}

CarPrecision car_precision(const LatticeGraph& graph, double rho, std::shared_ptr<const CarEigenCache> cache) {
    if (!(rho >= 0.0 && rho < 1.0)) throw usage_error("CAR smoothing parameter must lie in [0, 1)");
    if (!cache) cache = CarEigenCache::compute(graph);
    CarPrecision car;
    car.rho = rho;
    car.Q = -rho * graph.W;
    car.Q.diagonal() += graph.D;
    car.chol.compute(car.Q);
    if (car.chol.info() != Eigen::Success) throw numerical_error("Cholesky factorization of D - rho W failed");
    car.logdet_Q = cache->logdet(rho);
    car.eigen_cache = std::move(cache);
    return car;
}

Eigen::VectorXd sample_mvn_precision(const Eigen::VectorXd& mean, double precision_scale, const CarPrecision& car,
                                     Rng& rng) {
    if (!(precision_scale > 0.0)) throw usage_error("precision scale must be positive");
    Eigen::VectorXd z(mean.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = std_normal(rng);
    // Q = L L'; x = L'^{-1} z has covariance Q^{-1}.
    car.chol.matrixU().solveInPlace(z);
    return mean + z / std::sqrt(precision_scale);
}

CarSpectrum::CarSpectrum(const LatticeGraph& graph) : n_(graph.size()), K_(graph.K) {
    kronecker_ = graph.mode == LatticeMode::FullGrid;
    if (kronecker_) {
        W_ = Eigen::MatrixXd::Zero(K_, K_);
        for (int i = 0; i + 1 < K_; ++i) W_(i, i + 1) = W_(i + 1, i) = 1.0;
        D_ = W_.rowwise().sum();
    } else {
        W_ = graph.W;
        D_ = graph.D;
    }
    values_.resize(n_);
}

void CarSpectrum::set_rho(double rho) {
    if (rho == rho_) return;
    Eigen::MatrixXd Q = -rho * W_;
    Q.diagonal() += D_;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(Q);
    if (solver.info() != Eigen::Success) throw numerical_error("eigendecomposition of D - rho W failed");
    U_ = solver.eigenvectors();
    if (kronecker_) {
        const Eigen::VectorXd& v = solver.eigenvalues();
        for (int a = 0; a < K_; ++a)
            for (int b = 0; b < K_; ++b) values_[a * K_ + b] = v[a] + v[b];
    } else {
        values_ = solver.eigenvalues();
    }
    if ((values_.array() <= 0.0).any()) throw numerical_error("D - rho W is not positive definite");
    logdet_ = values_.array().log().sum();
    rho_ = rho;
}

void CarSpectrum::project(const Eigen::Ref<const Eigen::VectorXd>& v, Eigen::Ref<Eigen::VectorXd> out) const {
    if (kronecker_) {
        Eigen::Map<const RowMajorMatrix> V(v.data(), K_, K_);
        Eigen::Map<RowMajorMatrix> C(out.data(), K_, K_);
        C.noalias() = U_.transpose() * V * U_;
    } else {
        out.noalias() = U_.transpose() * v;
    }
}

void CarSpectrum::reconstruct(const Eigen::Ref<const Eigen::VectorXd>& c, Eigen::Ref<Eigen::VectorXd> out) const {
    if (kronecker_) {
        Eigen::Map<const RowMajorMatrix> C(c.data(), K_, K_);
        Eigen::Map<RowMajorMatrix> V(out.data(), K_, K_);
        V.noalias() = U_ * C * U_.transpose();
    } else {
        out.noalias() = U_ * c;
    }
}

double truncnorm_inverse_cdf(double mu, double sigma2, double lo, double hi, double u) {
    if (!(lo < hi)) throw usage_error("truncation interval must satisfy lo < hi");
    if (!(sigma2 > 0.0)) throw usage_error("variance must be positive");
    const double sd = std::sqrt(sigma2);
    double a = (lo - mu) / sd;
    double b = (hi - mu) / sd;
    // Work in the lower tail, where Phi keeps full relative precision.
    const bool flip = a > 0.0;
    if (flip) {
        const double t = a;
        a = -b;
        b = -t;
        u = 1.0 - u;
    }

    double x;
    if (b > kTailSwitch) {
        const double pa = normal_cdf(a);
        const double pb = normal_cdf(b);
        x = normal_quantile(pa + u * (pb - pa));
    } else {
        const double la = log_normal_cdf(a);
        const double lb = log_normal_cdf(b);
        const double ratio = std::exp(la - lb);
        const double target = lb + std::log(ratio + u * (1.0 - ratio));
        x = log_cdf_inverse_newton(target, b);
    }

    double y = mu + sd * (flip ? -x : x);
    if (!std::isfinite(y)) {
        // Nothing left to invert: fall back to the boundary nearest the mean.
        const bool use_lo = std::isfinite(lo) && (!std::isfinite(hi) || std::abs(lo - mu) < std::abs(hi - mu));
        const double boundary = use_lo ? lo : std::nextafter(hi, -kInf);
        log_warning("truncated-normal tail guard: interval [" + std::to_string(lo) + ", " + std::to_string(hi) +
                    ") has negligible mass under N(" + std::to_string(mu) + ", " + std::to_string(sigma2) + ")");
        y = boundary;
    }
    if (y < lo) y = lo;
    if (y >= hi) y = std::nextafter(hi, -kInf);
    return y;
}

std::pair<double, double> count_interval(long long z) {
    if (z < 0) throw data_error("counts must be nonnegative");
    if (z == 0) return {-kInf, 0.0};
    return {static_cast<double>(z - 1), static_cast<double>(z)};
}

long long round_latent(double y) {
    if (y < 0.0) return 0;
    return static_cast<long long>(std::floor(y)) + 1;
}

}  // namespace hrgsdp
