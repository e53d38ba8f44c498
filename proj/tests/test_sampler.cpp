#include "error.hpp"
#include "sampler.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <boost/math/distributions/chi_squared.hpp>

#include <Eigen/Cholesky>
#include <Eigen/LU>

#include <cmath>
#include <map>
#include <numbers>

using namespace hrgsdp;

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

Eigen::MatrixXd dense_q(const LatticeGraph& g, double rho) {
    Eigen::MatrixXd Q = -rho * g.W;
    Q.diagonal() += g.D;
    return Q;
}

double mvn_logpdf(const Eigen::VectorXd& x, const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov) {
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    const Eigen::MatrixXd L = llt.matrixL();
    const Eigen::VectorXd z = L.triangularView<Eigen::Lower>().solve(x - mean);
    return -0.5 * x.size() * kLog2Pi - L.diagonal().array().log().sum() - 0.5 * z.squaredNorm();
}

// Two sites joined by one edge.
LatticeGraph two_site_graph() {
    LatticeGraph g;
    g.K = 2;
    g.mode = LatticeMode::UniqueTriangle;
    g.sites = {{0, 0}, {1, 0}};
    g.W = Eigen::MatrixXd::Zero(2, 2);
    g.W(0, 1) = g.W(1, 0) = 1.0;
    g.D = Eigen::VectorXd::Ones(2);
    g.neighbors = {{1}, {0}};
    return g;
}

double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform_open(rng); }

// Random cohort with small counts, covariates [1, N_t] and gamma in [0.5, 1.5].
std::vector<Subject> random_cohort(int T, int n, Rng& rng) {
    std::vector<Subject> out(T);
    for (int t = 0; t < T; ++t) {
        Subject& s = out[t];
        s.id = "s" + std::to_string(t);
        s.z.resize(n);
        for (int i = 0; i < n; ++i) s.z[i] = static_cast<double>(rng() % 6);
        s.total = s.z.sum() + 1.0;
        s.gamma = uniform(rng, 0.5, 1.5);
        s.x.resize(2);
        s.x << 1.0, uniform(rng, -1.0, 1.0);
    }
    return out;
}

Hyperparams test_hyperparams(int p) {
    Hyperparams hp = Hyperparams::defaults(p);
    hp.Sigma_beta = 4.0 * Eigen::MatrixXd::Identity(p, p);
    hp.beta0 = Eigen::VectorXd::Constant(p, 0.3);
    hp.a_tau = 2.0;
    hp.b_tau = 1.5;
    hp.a_sigma = 3.0;
    hp.b_sigma = 0.5;
    hp.a_nu = 2.0;
    hp.b_nu = 1.5;
    return hp;
}

// Random state: latent y consistent with the counts, a few atoms, random scalars.
ModelState random_state(const ChainSampler& cs, int clusters, Rng& rng) {
    ModelState s = cs.init_state();
    const int T = cs.n_subjects(), n = cs.n_sites();
    for (int t = 0; t < T; ++t)
        for (int i = 0; i < n; ++i) {
            const auto [lo, hi] = count_interval(static_cast<long long>(cs.cohort()[t].z[i]));
            s.y(i, t) = std::isinf(lo) ? hi - 2.0 * uniform_open(rng) : uniform(rng, lo, hi);
        }
    s.atoms.clear();
    s.free_slots.clear();
    for (int j = 0; j < clusters; ++j) {
        Eigen::VectorXd theta(n);
        for (int i = 0; i < n; ++i) theta[i] = std_normal(rng);
        s.add_atom(theta);
    }
    for (int t = 0; t < T; ++t) {
        s.w[t] = t < clusters ? t : static_cast<int>(rng() % clusters);
        ++s.atoms[s.w[t]].size;
    }
    s.beta = Eigen::VectorXd(cs.n_covariates());
    for (Eigen::Index k = 0; k < s.beta.size(); ++k) s.beta[k] = uniform(rng, -0.5, 0.5);
    s.tau2 = uniform(rng, 0.5, 2.0);
    s.sigma2 = uniform(rng, 0.3, 1.5);
    s.rho = uniform(rng, 0.05, 0.9);
    s.nu = uniform(rng, 0.5, 2.0);
    return s;
}

Eigen::VectorXd residual_of(const ChainSampler& cs, const ModelState& s, int t) {
    return s.y.col(t).array() - cs.cohort()[t].x.dot(s.beta);
}

// log q0 by direct evaluation of the marginal N(r | 0, tau2 I + g^2 sigma2 Q^{-1}).
double dense_log_q0(const ChainSampler& cs, const ModelState& s, int t) {
    const double g = cs.cohort()[t].gamma;
    const int n = cs.n_sites();
    const Eigen::MatrixXd cov = s.tau2 * Eigen::MatrixXd::Identity(n, n) +
                                g * g * s.sigma2 * dense_q(cs.graph(), s.rho).inverse();
    return std::log(s.nu) + mvn_logpdf(residual_of(cs, s, t), Eigen::VectorXd::Zero(n), cov);
}

// log q0 by tensor Gauss-Hermite quadrature over theta ~ N(0, sigma2 Q^{-1}).
double quadrature_log_q0(const ChainSampler& cs, const ModelState& s, int t, int m) {
    std::vector<double> nodes, weights;
    testutil::gauss_hermite(m, nodes, weights);
    const int n = cs.n_sites();
    const Eigen::MatrixXd cov = s.sigma2 * dense_q(cs.graph(), s.rho).inverse();
    const Eigen::MatrixXd L = cov.llt().matrixL();
    const Eigen::VectorXd r = residual_of(cs, s, t);
    const double g = cs.cohort()[t].gamma;
    std::vector<int> idx(n, 0);
    long double sum = 0.0;
    Eigen::VectorXd x(n);
    while (true) {
        double w = 1.0;
        for (int i = 0; i < n; ++i) {
            x[i] = std::sqrt(2.0) * nodes[idx[i]];
            w *= weights[idx[i]];
        }
        const Eigen::VectorXd theta = L * x;
        const double ll = -0.5 * n * (kLog2Pi + std::log(s.tau2)) - 0.5 * (r - g * theta).squaredNorm() / s.tau2;
        sum += w * std::exp(ll);
        int k = 0;
        while (k < n && ++idx[k] == m) idx[k++] = 0;
        if (k == n) break;
    }
    return std::log(s.nu) + std::log(static_cast<double>(sum)) - 0.5 * n * std::log(std::numbers::pi);
}

// Cumulative distribution of an unnormalized log density tabulated on a fine grid.
struct GridCdf {
    std::vector<double> x, F;
    GridCdf(double lo, double hi, int m, const std::function<double(double)>& logf) {
        x.resize(m + 1);
        std::vector<double> lf(m + 1);
        for (int k = 0; k <= m; ++k) {
            x[k] = lo + (hi - lo) * k / m;
            lf[k] = logf(x[k]);
        }
        const double top = *std::max_element(lf.begin(), lf.end());
        F.assign(m + 1, 0.0);
        for (int k = 1; k <= m; ++k) {
            const double a = std::exp(lf[k - 1] - top), b = std::exp(lf[k] - top);
            F[k] = F[k - 1] + 0.5 * (a + b) * (x[k] - x[k - 1]);
        }
        for (double& v : F) v /= F.back();
    }
    double operator()(double v) const {
        if (v <= x.front()) return 0.0;
        if (v >= x.back()) return 1.0;
        const auto it = std::upper_bound(x.begin(), x.end(), v);
        const auto k = static_cast<std::size_t>(it - x.begin());
        const double f = (v - x[k - 1]) / (x[k] - x[k - 1]);
        return F[k - 1] + f * (F[k] - F[k - 1]);
    }
};

double chi2_pvalue(const std::vector<double>& probs, const std::vector<int>& counts) {
    double stat = 0.0, N = 0.0;
    for (int c : counts) N += c;
    int df = -1;
    for (std::size_t k = 0; k < probs.size(); ++k) {
        if (probs[k] <= 0.0) continue;
        const double e = N * probs[k];
        stat += (counts[k] - e) * (counts[k] - e) / e;
        ++df;
    }
    return boost::math::cdf(boost::math::complement(boost::math::chi_squared(df), stat));
}

}  // namespace

TEST_CASE("make_subjects scales gamma to mean one and builds covariates") {
    std::vector<Eigen::VectorXd> z(3, Eigen::VectorXd::Ones(3));
    const auto subj = make_subjects({"a", "b", "c"}, z, {100, 200, 300}, {true, true});
    CHECK(subj[0].gamma == doctest::Approx(0.5));
    CHECK(subj[2].gamma == doctest::Approx(1.5));
    CHECK(subj[1].x.size() == 2);
    CHECK(subj[1].x[0] == 1.0);
    CHECK(subj[1].x[1] == 200.0);
    const auto plain = make_subjects({"a", "b", "c"}, z, {100, 200, 300});
    CHECK(plain[0].x.size() == 1);
    CHECK(plain[0].x[0] == 100.0);
    CHECK_THROWS_AS(make_subjects({"a", "b", "c"}, z, {100, 0, 300}), Error);
    CHECK_THROWS_AS(make_subjects({"a", "b", "c"}, z, {1, 2, 3}, {false, false}), Error);
}

TEST_CASE("initial state: one cluster, latent midpoints, data-scaled starts") {
    Rng rng = make_stream(31, {});
    const LatticeGraph g = lattice_graph(2, LatticeMode::UniqueTriangle);
    auto cohort = random_cohort(5, g.size(), rng);
    cohort[0].z[0] = 0;
    cohort[0].z[1] = 4;
    Hyperparams hp = test_hyperparams(2);
    ChainSampler cs(cohort, g, hp);
    ModelState s = cs.init_state();
    CHECK(s.n_clusters() == 1);
    CHECK(s.y(0, 0) == -0.5);
    CHECK(s.y(1, 0) == 3.5);
    CHECK(s.tau2 == hp.tau2_init);
    CHECK(s.rho == 0.5);
    CHECK(s.nu == 1.0);
    cs.check_invariants(s);

    hp.tau2_init = 0.0;
    hp.sigma2_init = -1.0;
    hp.beta0.setZero();
    ChainSampler scaled(cohort, g, hp);
    const ModelState s2 = scaled.init_state();
    double m2 = 0.0;
    for (int t = 0; t < 5; ++t) m2 += s2.y.col(t).squaredNorm();
    CHECK(s2.tau2 == doctest::Approx(std::max(1.0, m2 / (3.0 * 5))));
}

TEST_CASE("new-cluster weight matches the Gaussian marginal and tensor quadrature") {
    Rng rng = make_stream(32, {});
    for (const LatticeGraph& g : {two_site_graph(), lattice_graph(2, LatticeMode::UniqueTriangle)}) {
        const int m = g.size() == 2 ? 120 : 70;
        for (int rep = 0; rep < 10; ++rep) {
            auto cohort = random_cohort(3, g.size(), rng);
            ChainSampler cs(cohort, g, test_hyperparams(2));
            ModelState s = random_state(cs, 2, rng);
            s.tau2 = uniform(rng, 0.5, 2.0);
            s.sigma2 = uniform(rng, 0.1, 1.0);
            s.rho = uniform(rng, 0.05, 0.8);
            // Keep residuals within |r| <= 2 so the quadrature is accurate.
            for (int t = 0; t < 3; ++t) {
                const double shift = cohort[t].x.dot(s.beta);
                for (int i = 0; i < g.size(); ++i) s.y(i, t) = shift + uniform(rng, -2.0, 2.0);
            }
            for (int t = 0; t < 3; ++t) {
                const double mine = cs.log_new_cluster_weight(s, t);
                const double quad = quadrature_log_q0(cs, s, t, m);
                CHECK(std::abs(std::exp(mine - quad) - 1.0) < 1e-6);
                CHECK(std::abs(mine - dense_log_q0(cs, s, t)) < 1e-10);
            }
        }
    }
    // Larger lattices, Kronecker path, dense oracle only.
    for (auto mode : {LatticeMode::FullGrid, LatticeMode::UniqueTriangle}) {
        const LatticeGraph g = lattice_graph(4, mode);
        auto cohort = random_cohort(4, g.size(), rng);
        ChainSampler cs(cohort, g, test_hyperparams(2));
        ModelState s = random_state(cs, 2, rng);
        for (int t = 0; t < 4; ++t) CHECK(std::abs(cs.log_new_cluster_weight(s, t) - dense_log_q0(cs, s, t)) < 1e-9);
    }
}

TEST_CASE("existing-cluster weight is the Gaussian likelihood") {
    Rng rng = make_stream(33, {});
    const LatticeGraph g = lattice_graph(3, LatticeMode::UniqueTriangle);
    auto cohort = random_cohort(4, g.size(), rng);
    ChainSampler cs(cohort, g, test_hyperparams(2));
    const ModelState s = random_state(cs, 2, rng);
    const int n = g.size();
    for (int t = 0; t < 4; ++t) {
        const Eigen::VectorXd theta = s.theta_of(t);
        const Eigen::VectorXd mean =
            Eigen::VectorXd::Constant(n, cohort[t].x.dot(s.beta)) + cohort[t].gamma * theta;
        const double oracle = mvn_logpdf(s.y.col(t), mean, s.tau2 * Eigen::MatrixXd::Identity(n, n));
        CHECK(std::abs(cs.log_existing_cluster_weight(s, t, theta) - oracle) < 1e-10);
    }
}

TEST_CASE("atom and new-atom conditionals match dense precision algebra") {
    Rng rng = make_stream(34, {});
    for (auto mode : {LatticeMode::FullGrid, LatticeMode::UniqueTriangle}) {
        const LatticeGraph g = lattice_graph(3, mode);
        const int n = g.size();
        auto cohort = random_cohort(6, n, rng);
        ChainSampler cs(cohort, g, test_hyperparams(2));
        const ModelState s = random_state(cs, 3, rng);
        const Eigen::MatrixXd Q = dense_q(g, s.rho);

        for (int slot : s.live_slots()) {
            Eigen::MatrixXd prec = Q / s.sigma2;
            Eigen::VectorXd b = Eigen::VectorXd::Zero(n);
            for (int t = 0; t < 6; ++t) {
                if (s.w[t] != slot) continue;
                prec.diagonal().array() += cohort[t].gamma * cohort[t].gamma / s.tau2;
                b += cohort[t].gamma * residual_of(cs, s, t) / s.tau2;
            }
            const Eigen::MatrixXd cov = prec.inverse();
            const GaussianConditional c = cs.atom_conditional(s, slot);
            CHECK((c.cov - cov).cwiseAbs().maxCoeff() < 1e-10);
            CHECK((c.mean - cov * b).cwiseAbs().maxCoeff() < 1e-10);
        }
        for (int t = 0; t < 6; ++t) {
            const double gm = cohort[t].gamma;
            Eigen::MatrixXd prec = Q / s.sigma2;
            prec.diagonal().array() += gm * gm / s.tau2;
            const Eigen::MatrixXd cov = prec.inverse();
            const GaussianConditional c = cs.new_atom_conditional(s, t);
            CHECK((c.cov - cov).cwiseAbs().maxCoeff() < 1e-10);
            CHECK((c.mean - cov * (gm * residual_of(cs, s, t) / s.tau2)).cwiseAbs().maxCoeff() < 1e-10);
        }
    }
}

TEST_CASE("beta conditional matches stacked least squares") {
    Rng rng = make_stream(35, {});
    const LatticeGraph g = lattice_graph(3, LatticeMode::UniqueTriangle);
    const int n = g.size(), T = 5;
    auto cohort = random_cohort(T, n, rng);
    const Hyperparams hp = test_hyperparams(2);
    ChainSampler cs(cohort, g, hp);
    const ModelState s = random_state(cs, 2, rng);

    // Stack every (subject, site) row: response y - gamma theta, design x_t.
    Eigen::MatrixXd X(n * T, 2);
    Eigen::VectorXd yv(n * T);
    for (int t = 0; t < T; ++t)
        for (int i = 0; i < n; ++i) {
            X.row(t * n + i) = cohort[t].x.transpose();
            yv[t * n + i] = s.y(i, t) - cohort[t].gamma * s.theta_of(t)[i];
        }
    const Eigen::MatrixXd Sinv = hp.Sigma_beta.inverse();
    const Eigen::MatrixXd cov = (Sinv + X.transpose() * X / s.tau2).inverse();
    const Eigen::VectorXd mean = cov * (Sinv * hp.beta0 + X.transpose() * yv / s.tau2);
    const GaussianConditional c = cs.beta_conditional(s);
    CHECK((c.cov - cov).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((c.mean - mean).cwiseAbs().maxCoeff() < 1e-10);

    // Draws from update_beta have that mean and covariance.
    const int N = 100000;
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(2);
    Eigen::MatrixXd sq = Eigen::MatrixXd::Zero(2, 2);
    ModelState w = s;
    for (int k = 0; k < N; ++k) {
        cs.update_beta(w, rng);
        sum += w.beta;
        sq += (w.beta - mean) * (w.beta - mean).transpose();
    }
    for (int k = 0; k < 2; ++k) {
        CHECK(std::abs(sum[k] / N - mean[k]) < 4.0 * std::sqrt(cov(k, k) / N));
        CHECK(std::abs(sq(k, k) / N - cov(k, k)) < 4.0 * cov(k, k) * std::sqrt(2.0 / N));
    }
    const double se01 = std::sqrt((cov(0, 0) * cov(1, 1) + cov(0, 1) * cov(0, 1)) / N);
    CHECK(std::abs(sq(0, 1) / N - cov(0, 1)) < 4.0 * se01);
}

TEST_CASE("variance conditionals and their inverse-gamma draws") {
    Rng rng = make_stream(36, {});
    const LatticeGraph g = lattice_graph(3, LatticeMode::FullGrid);
    const int n = g.size(), T = 6;
    auto cohort = random_cohort(T, n, rng);
    const Hyperparams hp = test_hyperparams(2);
    ChainSampler cs(cohort, g, hp);
    const ModelState s = random_state(cs, 3, rng);

    double ss = 0.0;
    for (int t = 0; t < T; ++t)
        ss += (residual_of(cs, s, t) - cohort[t].gamma * s.theta_of(t)).squaredNorm();
    const GammaParams tp = cs.tau2_conditional(s);
    CHECK(tp.shape == doctest::Approx(hp.a_tau + 0.5 * n * T));
    CHECK(tp.rate == doctest::Approx(hp.b_tau + 0.5 * ss).epsilon(1e-12));

    const Eigen::MatrixXd Q = dense_q(g, s.rho);
    double q = 0.0;
    for (int j : s.live_slots()) q += s.atoms[j].theta.dot(Q * s.atoms[j].theta);
    const GammaParams sp = cs.sigma2_conditional(s);
    CHECK(sp.shape == doctest::Approx(hp.a_sigma + 0.5 * n * 3));
    CHECK(sp.rate == doctest::Approx(hp.b_sigma + 0.5 * q).epsilon(1e-12));

    const int N = 100000;
    for (int which = 0; which < 2; ++which) {
        const GammaParams p = which == 0 ? tp : sp;
        const double mean = p.rate / (p.shape - 1.0);
        const double var = mean * mean / (p.shape - 2.0);
        ModelState w = s;
        double sum = 0.0;
        for (int k = 0; k < N; ++k) {
            if (which == 0) cs.update_tau2(w, rng);
            else cs.update_sigma2(w, rng);
            sum += which == 0 ? w.tau2 : w.sigma2;
        }
        CHECK(std::abs(sum / N - mean) < 4.0 * std::sqrt(var / N));
    }
}

TEST_CASE("latent update draws the truncated normal for each cell") {
    Rng rng = make_stream(37, {});
    const LatticeGraph g = lattice_graph(2, LatticeMode::UniqueTriangle);
    auto cohort = random_cohort(2, g.size(), rng);
    cohort[0].z << 0, 3, 1;
    ChainSampler cs(cohort, g, test_hyperparams(2));
    ModelState s = random_state(cs, 1, rng);
    s.atoms[s.w[0]].theta << 0.4, 1.2, -0.8;
    const double shift = cohort[0].x.dot(s.beta);
    Rng draws = make_stream(38, {});
    std::vector<std::vector<double>> x(3);
    for (int k = 0; k < 20000; ++k) {
        cs.update_latent_y(s, 0, draws);
        for (int i = 0; i < 3; ++i) x[i].push_back(s.y(i, 0));
    }
    for (int i = 0; i < 3; ++i) {
        const double mu = shift + cohort[0].gamma * s.atoms[s.w[0]].theta[i];
        const double sd = std::sqrt(s.tau2);
        const auto [lo, hi] = count_interval(static_cast<long long>(cohort[0].z[i]));
        const double Flo = normal_cdf((lo - mu) / sd), Fhi = normal_cdf((hi - mu) / sd);
        const auto cdf = [&](double v) { return (normal_cdf((v - mu) / sd) - Flo) / (Fhi - Flo); };
        CHECK(testutil::ks_pvalue(x[i], cdf) > 0.001);
    }
}

TEST_CASE("Polya urn reassignment follows the exact conditional") {
    Rng rng = make_stream(39, {});
    const LatticeGraph g = lattice_graph(2, LatticeMode::UniqueTriangle);
    const int n = g.size(), T = 7;
    auto cohort = random_cohort(T, n, rng);
    ChainSampler cs(cohort, g, test_hyperparams(2));
    ModelState s = random_state(cs, 3, rng);
    s.tau2 = 1.0;
    // Put subject 0 in a cluster with other members and place the atoms near its residual.
    const Eigen::VectorXd r = residual_of(cs, s, 0);
    const double gm = cohort[0].gamma;
    const std::vector<int> slots = s.live_slots();
    for (std::size_t k = 0; k < slots.size(); ++k) {
        Eigen::VectorXd d(n);
        for (int i = 0; i < n; ++i) d[i] = std_normal(rng);
        s.atoms[slots[k]].theta = (r + (0.3 + 0.4 * k) * d.normalized()) / gm;
    }
    REQUIRE(s.atoms[s.w[0]].size >= 2);

    // Oracle weights after removing subject 0.
    std::vector<double> logw;
    for (int slot : slots) {
        const int size = s.atoms[slot].size - (s.w[0] == slot ? 1 : 0);
        const Eigen::VectorXd mean = Eigen::VectorXd::Constant(n, cohort[0].x.dot(s.beta)) + gm * s.atoms[slot].theta;
        logw.push_back(std::log(static_cast<double>(size)) +
                       mvn_logpdf(s.y.col(0), mean, s.tau2 * Eigen::MatrixXd::Identity(n, n)));
    }
    // Pick nu so the new-cluster option has weight comparable to the rest.
    s.nu = 1.0;
    const double base = dense_log_q0(cs, s, 0);
    s.nu = std::exp(logw[0] - base);
    logw.push_back(dense_log_q0(cs, s, 0));
    const double top = *std::max_element(logw.begin(), logw.end());
    std::vector<double> p;
    double tot = 0.0;
    for (double v : logw) tot += std::exp(v - top);
    for (double v : logw) p.push_back(std::exp(v - top) / tot);

    const GaussianConditional h = cs.new_atom_conditional(s, 0);
    const int N = 60000;
    std::vector<int> counts(p.size(), 0);
    Eigen::VectorXd theta_sum = Eigen::VectorXd::Zero(n);
    int n_new = 0;
    for (int k = 0; k < N; ++k) {
        ModelState w = s;
        cs.polya_urn_step(w, 0, rng);
        const auto it = std::find(slots.begin(), slots.end(), w.w[0]);
        if (it != slots.end() && w.atoms[w.w[0]].theta == s.atoms[w.w[0]].theta) {
            ++counts[it - slots.begin()];
        } else {
            ++counts.back();
            theta_sum += w.theta_of(0);
            ++n_new;
        }
        cs.check_invariants(w);
    }
    CHECK(chi2_pvalue(p, counts) > 0.001);
    REQUIRE(n_new > 1000);
    // Fresh atoms come from h(theta | y_t, ...), computed here with dense algebra.
    Eigen::MatrixXd prec = dense_q(g, s.rho) / s.sigma2;
    prec.diagonal().array() += gm * gm / s.tau2;
    const Eigen::MatrixXd cov = prec.inverse();
    const Eigen::VectorXd mean = cov * (gm * r / s.tau2);
    CHECK((h.mean - mean).cwiseAbs().maxCoeff() < 1e-10);
    for (int i = 0; i < n; ++i) CHECK(std::abs(theta_sum[i] / n_new - mean[i]) < 4.0 * std::sqrt(cov(i, i) / n_new));
}

TEST_CASE("atom refresh draws from the dense posterior") {
    Rng rng = make_stream(40, {});
    const LatticeGraph g = lattice_graph(3, LatticeMode::FullGrid);
    const int n = g.size(), T = 5;
    auto cohort = random_cohort(T, n, rng);
    ChainSampler cs(cohort, g, test_hyperparams(2));
    const ModelState s = random_state(cs, 2, rng);
    const int slot = s.live_slots()[0];
    Eigen::MatrixXd prec = dense_q(g, s.rho) / s.sigma2;
    Eigen::VectorXd b = Eigen::VectorXd::Zero(n);
    for (int t = 0; t < T; ++t) {
        if (s.w[t] != slot) continue;
        prec.diagonal().array() += cohort[t].gamma * cohort[t].gamma / s.tau2;
        b += cohort[t].gamma * residual_of(cs, s, t) / s.tau2;
    }
    const Eigen::MatrixXd cov = prec.inverse();
    const Eigen::VectorXd mean = cov * b;
    const int N = 100000;
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(n), sq = Eigen::VectorXd::Zero(n);
    ModelState w = s;
    for (int k = 0; k < N; ++k) {
        cs.resample_atoms(w, rng);
        sum += w.atoms[slot].theta;
        sq += (w.atoms[slot].theta - mean).cwiseAbs2();
    }
    for (int i = 0; i < n; ++i) {
        CHECK(std::abs(sum[i] / N - mean[i]) < 4.0 * std::sqrt(cov(i, i) / N));
        CHECK(std::abs(sq[i] / N - cov(i, i)) < 4.0 * cov(i, i) * std::sqrt(2.0 / N));
    }
}

TEST_CASE("rho slice sampler targets the CAR likelihood in rho") {
    Rng rng = make_stream(41, {});
    const LatticeGraph g = lattice_graph(3, LatticeMode::FullGrid);
    auto cohort = random_cohort(4, g.size(), rng);
    ChainSampler cs(cohort, g, test_hyperparams(2));
    ModelState s = random_state(cs, 3, rng);
    s.sigma2 = 1.0;
    // Atoms from the CAR prior at rho = 0.6 keep the posterior away from the edges.
    const CarPrecision car = car_precision(g, 0.6);
    for (int j : s.live_slots()) s.atoms[j].theta = sample_mvn_precision(Eigen::VectorXd::Zero(g.size()), 1.0, car, rng);

    double wq = 0.0, dq = 0.0;
    for (int j : s.live_slots()) {
        wq += s.atoms[j].theta.dot(g.W * s.atoms[j].theta);
        dq += s.atoms[j].theta.dot(g.D.asDiagonal() * s.atoms[j].theta);
    }
    const auto oracle = [&](double rho) {
        const Eigen::MatrixXd L = dense_q(g, rho).llt().matrixL();
        return 3.0 * L.diagonal().array().log().sum() - (dq - rho * wq) / (2.0 * s.sigma2);
    };
    // rho_log_target agrees up to a constant.
    const double c0 = cs.rho_log_target(s, 0.5) - oracle(0.5);
    for (double rho : {0.05, 0.3, 0.77, 0.95}) CHECK(std::abs(cs.rho_log_target(s, rho) - oracle(rho) - c0) < 1e-9);

    const GridCdf cdf(1e-9, 1.0 - 1e-9, 4000, oracle);
    std::vector<double> draws;
    ModelState w = s;
    for (int k = 0; k < 100000; ++k) {
        cs.update_rho(w, rng);
        if (k % 10 == 9) draws.push_back(w.rho);
    }
    CHECK(testutil::ks_pvalue(draws, [&](double v) { return cdf(v); }) > 0.01);
}

TEST_CASE("concentration update targets p(nu | number of clusters)") {
    Rng rng = make_stream(42, {});
    const LatticeGraph g = lattice_graph(2, LatticeMode::UniqueTriangle);
    const int T = 10, k = 3;
    auto cohort = random_cohort(T, g.size(), rng);
    const Hyperparams hp = test_hyperparams(2);
    ChainSampler cs(cohort, g, hp);
    ModelState s = random_state(cs, k, rng);
    const auto oracle = [&](double nu) {
        return (hp.a_nu - 1.0) * std::log(nu) - hp.b_nu * nu + k * std::log(nu) + std::lgamma(nu) - std::lgamma(nu + T);
    };
    const GridCdf cdf(1e-9, 40.0, 200000, oracle);
    std::vector<double> draws;
    for (int it = 0; it < 100000; ++it) {
        cs.update_nu(s, rng);
        if (it % 10 == 9) draws.push_back(s.nu);
    }
    CHECK(testutil::ks_pvalue(draws, [&](double v) { return cdf(v); }) > 0.01);
}

TEST_CASE("partition posterior matches the dense marginal likelihood") {
    Rng rng = make_stream(43, {});
    const LatticeGraph g = lattice_graph(2, LatticeMode::UniqueTriangle);
    const int n = g.size(), T = 4;
    auto cohort = random_cohort(T, n, rng);
    ChainSampler cs(cohort, g, test_hyperparams(2));
    const ModelState s = random_state(cs, 2, rng);
    const Eigen::MatrixXd Sigma = s.sigma2 * dense_q(g, s.rho).inverse();
    const auto oracle = [&](const std::vector<int>& w) {
        double lp = 0.0;
        const int kmax = *std::max_element(w.begin(), w.end());
        for (int c = 0; c <= kmax; ++c) {
            std::vector<int> members;
            for (int t = 0; t < T; ++t)
                if (w[t] == c) members.push_back(t);
            if (members.empty()) continue;
            const int m = static_cast<int>(members.size());
            Eigen::MatrixXd cov = s.tau2 * Eigen::MatrixXd::Identity(m * n, m * n);
            Eigen::VectorXd r(m * n);
            for (int a = 0; a < m; ++a) {
                r.segment(a * n, n) = residual_of(cs, s, members[a]);
                for (int b = 0; b < m; ++b)
                    cov.block(a * n, b * n, n, n) += cohort[members[a]].gamma * cohort[members[b]].gamma * Sigma;
            }
            lp += std::log(s.nu) + std::lgamma(m) + mvn_logpdf(r, Eigen::VectorXd::Zero(m * n), cov);
        }
        return lp;
    };
    const std::vector<std::vector<int>> parts{{0, 0, 0, 0}, {0, 1, 0, 1}, {0, 1, 2, 3}, {0, 0, 1, 2}};
    const double c0 = cs.log_partition_posterior(s, parts[0]) - oracle(parts[0]);
    for (const auto& w : parts) CHECK(std::abs(cs.log_partition_posterior(s, w) - oracle(w) - c0) < 1e-9);
}

TEST_CASE("merge-split moves leave the partition posterior invariant") {
    Rng rng = make_stream(44, {});
    const LatticeGraph g = lattice_graph(2, LatticeMode::UniqueTriangle);
    const int T = 4;
    auto cohort = random_cohort(T, g.size(), rng);
    Hyperparams hp = test_hyperparams(2);
    hp.split_merge_moves = 1;
    ChainSampler cs(cohort, g, hp);
    ModelState s = random_state(cs, 1, rng);
    s.tau2 = 1.0;
    s.sigma2 = 1.0;
    s.nu = 1.0;
    for (int t = 0; t < T; ++t)
        for (int i = 0; i < g.size(); ++i) s.y(i, t) = cohort[t].x.dot(s.beta) + 1.5 * std_normal(rng);

    // All 15 set partitions of four subjects as restricted growth strings.
    std::vector<std::vector<int>> parts;
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b <= a + 1; ++b)
            for (int c = 0; c <= std::max(a, b) + 1; ++c) parts.push_back({0, a, b, c});
    REQUIRE(parts.size() == 15);
    std::map<std::vector<int>, int> index;
    std::vector<double> lp;
    for (const auto& w : parts) {
        index[w] = static_cast<int>(lp.size());
        lp.push_back(cs.log_partition_posterior(s, w));
    }
    const double top = *std::max_element(lp.begin(), lp.end());
    std::vector<double> p;
    double tot = 0.0;
    for (double v : lp) tot += std::exp(v - top);
    for (double v : lp) p.push_back(std::exp(v - top) / tot);
    REQUIRE(*std::max_element(p.begin(), p.end()) < 0.9);

    std::vector<int> counts(15, 0);
    const int N = 300000;
    for (int k = 0; k < N; ++k) {
        cs.split_merge_step(s, rng);
        std::vector<int> lab = s.canonical_labels();
        for (int& v : lab) --v;
        ++counts[index.at(lab)];
    }
    ModelState bookkeeping = s;
    bookkeeping.y = cs.init_state().y;
    cs.check_invariants(bookkeeping);
    double tv = 0.0;
    for (int k = 0; k < 15; ++k) tv += 0.5 * std::abs(counts[k] / static_cast<double>(N) - p[k]);
    CHECK(tv < 0.01);
}

TEST_CASE("chain is deterministic in the seed and keeps its invariants") {
    Rng rng = make_stream(45, {});
    const LatticeGraph g = lattice_graph(3, LatticeMode::UniqueTriangle);
    auto cohort = random_cohort(8, g.size(), rng);
    Hyperparams hp = test_hyperparams(2);
    hp.n_iter = 150;
    hp.n_burn = 50;
    hp.seed = 7;
    ChainOptions opts;
    opts.check_invariants = true;
    int seen = 0;
    opts.observer = [&](int iter, const ModelState& s) {
        ++seen;
        CHECK(iter == seen);
        for (int t = 0; t < 8; ++t)
            for (int i = 0; i < g.size(); ++i) REQUIRE(round_latent(s.y(i, t)) == static_cast<long long>(cohort[t].z[i]));
    };
    const ChainTrace a = run_chain(cohort, g, hp, opts);
    CHECK(seen == 150);
    const ChainTrace b = run_chain(cohort, g, hp);
    REQUIRE(a.records.size() == 100);
    REQUIRE(b.records.size() == 100);
    bool same = true;
    for (std::size_t k = 0; k < a.records.size(); ++k) {
        same = same && a.records[k].tau2 == b.records[k].tau2 && a.records[k].rho == b.records[k].rho &&
               a.records[k].labels == b.records[k].labels && a.records[k].beta == b.records[k].beta;
    }
    CHECK(same);
    CHECK(a.theta_sum == b.theta_sum);
    hp.seed = 8;
    const ChainTrace c = run_chain(cohort, g, hp);
    CHECK(c.records.back().tau2 != a.records.back().tau2);
}

TEST_CASE("broken states are caught") {
    Rng rng = make_stream(46, {});
    const LatticeGraph g = lattice_graph(2, LatticeMode::UniqueTriangle);
    auto cohort = random_cohort(3, g.size(), rng);
    ChainSampler cs(cohort, g, test_hyperparams(2));
    const ModelState good = random_state(cs, 2, rng);
    cs.check_invariants(good);
    ModelState bad = good;
    bad.y(0, 0) = 1e6;
    CHECK_THROWS_AS(cs.check_invariants(bad), Error);
    bad = good;
    ++bad.atoms[bad.w[0]].size;
    CHECK_THROWS_AS(cs.check_invariants(bad), Error);
    bad = good;
    bad.rho = 1.0;
    CHECK_THROWS_AS(cs.check_invariants(bad), Error);

    auto wrong = cohort;
    wrong[1].z[0] = 1.5;
    CHECK_THROWS_AS(ChainSampler(wrong, g, test_hyperparams(2)), Error);
    Hyperparams hp = test_hyperparams(2);
    hp.n_burn = hp.n_iter;
    CHECK_THROWS_AS(ChainSampler(cohort, g, hp), Error);
}

TEST_CASE("Geweke z is standard normal for white noise and large for drift") {
    Rng rng = make_stream(47, {});
    int outside = 0;
    const int reps = 400;
    for (int r = 0; r < reps; ++r) {
        std::vector<double> x(2000);
        for (double& v : x) v = std_normal(rng);
        if (std::abs(geweke_z(x)) > 1.96) ++outside;
    }
    // Batch means with 20 batches are slightly heavy-tailed; allow 2%..11%.
    CHECK(outside > reps * 0.02);
    CHECK(outside < reps * 0.11);
    std::vector<double> drift(2000);
    for (std::size_t i = 0; i < drift.size(); ++i) drift[i] = 0.002 * i + std_normal(rng);
    CHECK(std::abs(geweke_z(drift)) > 5.0);
    CHECK_THROWS_AS(geweke_z(std::vector<double>(99, 0.0)), Error);
}
