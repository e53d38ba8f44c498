#pragma once

#include "glcm.hpp"
#include "random.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <memory>
#include <utility>

namespace hrgsdp {

// Eigenvalues of D^{-1/2} W D^{-1/2} for one lattice. With them,
// log|D - rho W| = sum log D_i + sum log(1 - rho lambda_i) costs O(n) per rho.
struct CarEigenCache {
    Eigen::VectorXd lambda;
    double sum_log_d = 0.0;

    static std::shared_ptr<const CarEigenCache> compute(const LatticeGraph& graph);
    double logdet(double rho) const;
};

// Factored proper CAR precision D - rho W.
struct CarPrecision {
    double rho = 0.0;
    Eigen::MatrixXd Q;
    Eigen::LLT<Eigen::MatrixXd> chol;
    double logdet_Q = 0.0;
    std::shared_ptr<const CarEigenCache> eigen_cache;
};

CarPrecision car_precision(const LatticeGraph& graph, double rho,
                           std::shared_ptr<const CarEigenCache> cache = nullptr);

// Draw from N(mean, (precision_scale * Q)^{-1}).
Eigen::VectorXd sample_mvn_precision(const Eigen::VectorXd& mean, double precision_scale, const CarPrecision& car,
                                     Rng& rng);

// Orthonormal eigenbasis of D - rho W. For the full-grid lattice the matrix is
// a Kronecker sum of two path-graph precisions, so only a K x K problem is
// solved and projections cost O(K^3) instead of O(K^4).
class CarSpectrum {
public:
    explicit CarSpectrum(const LatticeGraph& graph);

    void set_rho(double rho);
    double rho() const { return rho_; }
    int size() const { return n_; }
    bool uses_kronecker() const { return kronecker_; }

    // Eigenvalues of D - rho W in coefficient order.
    const Eigen::VectorXd& eigenvalues() const { return values_; }
    double logdet() const { return logdet_; }

    // out = U' v
    void project(const Eigen::Ref<const Eigen::VectorXd>& v, Eigen::Ref<Eigen::VectorXd> out) const;
    // out = U c
    void reconstruct(const Eigen::Ref<const Eigen::VectorXd>& c, Eigen::Ref<Eigen::VectorXd> out) const;

private:
    int n_ = 0;
    int K_ = 0;
    bool kronecker_ = false;
    double rho_ = -1.0;
    Eigen::MatrixXd W_;       // full adjacency (dense path) or path-graph adjacency (Kronecker path)
    Eigen::VectorXd D_;
    Eigen::MatrixXd U_;
    Eigen::VectorXd values_;
    double logdet_ = 0.0;
};

double normal_cdf(double x);
double log_normal_cdf(double x);
double normal_quantile(double p);

// Phi^{-1}(Phi(lo) + u (Phi(hi) - Phi(lo))) on the N(mu, sigma2) scale, always
// inside [lo, hi). Deep-tail intervals are handled in log space.
double truncnorm_inverse_cdf(double mu, double sigma2, double lo, double hi, double u);

// Latent interval for a count: 0 -> (-inf, 0), z >= 1 -> [z - 1, z).
std::pair<double, double> count_interval(long long z);
long long round_latent(double y);

}  // namespace hrgsdp
