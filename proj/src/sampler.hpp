#pragma once

#include "glcm.hpp"
#include "random.hpp"
#include "spatial.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace hrgsdp {

struct Subject {
    std::string id;
    Eigen::VectorXd z;  // observed counts on the lattice, as reals
    Eigen::VectorXd x;  // covariates
    double gamma = 1.0;
    double total = 0.0;  // raw GLCM total N_t
};

struct CovariateOptions {
    bool intercept = false;
    bool include_total = true;
};

// Subjects from lattice count vectors. gamma_t = N_t / mean(N); the covariate
// row is an optional intercept followed by the raw total N_t.
std::vector<Subject> make_subjects(const std::vector<std::string>& ids, const std::vector<Eigen::VectorXd>& counts,
                                   const std::vector<double>& totals, const CovariateOptions& options = {});

struct Hyperparams {
    Eigen::VectorXd beta0;
    Eigen::MatrixXd Sigma_beta;
    double a_tau = 1e-4;
    double b_tau = 1e-4;
    double a_sigma = 1e-4;
    double b_sigma = 1e-4;
    double a_nu = 1.0;
    double b_nu = 1.0;
    // Starting values. Nonpositive means data-scaled: the pooled mean of
    // (y_t - x_t beta0)^2 for tau2 and of (y_t / gamma_t)^2 for sigma2.
    double tau2_init = 1.0;
    double sigma2_init = 1.0;
    // Merge-split proposals per sweep on the atom-marginalized partition;
    // negative means one per five subjects (rounded up), 0 disables them.
    int split_merge_moves = -1;
    int n_iter = 20000;
    int n_burn = 10000;
    std::uint64_t seed = 1;

    // Vague defaults for p covariates: beta0 = 0, Sigma_beta = 1e5 I.
    static Hyperparams defaults(int p);
    void validate(int p) const;
};

struct Atom {
    Eigen::VectorXd theta;
    int size = 0;
    bool live = false;
};

// One MCMC state. Latent vectors are stored column-wise: y.col(t) is y_t.
// Atom slots are recycled through a free list; slot numbers carry no meaning.
struct ModelState {
    Eigen::MatrixXd y;
    std::vector<int> w;
    std::vector<Atom> atoms;
    std::vector<int> free_slots;
    Eigen::VectorXd beta;
    double tau2 = 1.0;
    double sigma2 = 1.0;
    double rho = 0.5;
    double nu = 1.0;

    int n_clusters() const;
    const Eigen::VectorXd& theta_of(int t) const { return atoms[w[t]].theta; }
    std::vector<int> live_slots() const;
    // Labels 1..T* in order of first appearance over subjects.
    std::vector<int> canonical_labels() const;
    int add_atom(Eigen::VectorXd theta);
    void remove_member(int t);
};

// Multivariate normal given by precision-space quantities, used to expose the
// step (b) full conditionals to tests.
struct GaussianConditional {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

struct GammaParams {
    double shape = 0.0;
    double rate = 0.0;  // for variance updates: the inverse-gamma scale, i.e. the rate of 1/variance
};

class ChainSampler {
public:
    ChainSampler(std::vector<Subject> cohort, LatticeGraph graph, Hyperparams hp);

    int n_subjects() const { return static_cast<int>(cohort_.size()); }
    int n_sites() const { return graph_.size(); }
    int n_covariates() const { return static_cast<int>(cohort_.front().x.size()); }
    const std::vector<Subject>& cohort() const { return cohort_; }
    const LatticeGraph& graph() const { return graph_; }
    const Hyperparams& hyperparams() const { return hp_; }
    const CarEigenCache& eigen_cache() const { return *eigen_cache_; }

    ModelState init_state() const;

    void update_latent_y(ModelState& s, int t, Rng& rng) const;
    void polya_urn_step(ModelState& s, int t, Rng& rng);
    // Sequentially allocated merge-split proposals with atoms integrated out.
    // Atom values of touched clusters are stale until resample_atoms runs.
    void split_merge_step(ModelState& s, Rng& rng);
    void resample_atoms(ModelState& s, Rng& rng);
    void update_beta(ModelState& s, Rng& rng) const;
    void update_tau2(ModelState& s, Rng& rng) const;
    void update_sigma2(ModelState& s, Rng& rng) const;
    void update_rho(ModelState& s, Rng& rng) const;
    void update_nu(ModelState& s, Rng& rng) const;

    // Latent update, urn reassignment, merge-split, atom refresh, then beta,
    // tau2, sigma2, rho and nu. subject_rngs[t] is subject t's private stream.
    void sweep(ModelState& s, Rng& global_rng, std::vector<Rng>& subject_rngs);

    // Closed-form pieces of the full conditionals.
    double log_new_cluster_weight(const ModelState& s, int t);            // log q0
    double log_existing_cluster_weight(const ModelState& s, int t, const Eigen::VectorXd& theta) const;  // log q_j
    GaussianConditional new_atom_conditional(const ModelState& s, int t);  // h(theta | ...)
    GaussianConditional atom_conditional(const ModelState& s, int slot);   // step (b.2)
    GaussianConditional beta_conditional(const ModelState& s) const;
    GammaParams tau2_conditional(const ModelState& s) const;
    GammaParams sigma2_conditional(const ModelState& s) const;
    double rho_log_target(const ModelState& s, double rho) const;
    // Mixture weight p and gamma rate of the concentration update for a given eta.
    std::pair<double, double> nu_mixture(const ModelState& s, double eta) const;
    // log of the DP partition probability times the atom-marginalized
    // likelihood of every cluster, up to a constant independent of w.
    double log_partition_posterior(const ModelState& s, const std::vector<int>& w);

    // Throws if any ModelState invariant is broken.
    void check_invariants(const ModelState& s) const;

    // Residual r_t = y_t - x_t beta (scalar broadcast over sites).
    Eigen::VectorXd residual(const ModelState& s, int t) const;

private:
    struct ClusterStats {
        int count = 0;
        double g2 = 0.0;       // sum gamma_t^2
        double rr = 0.0;       // sum ||r_t||^2
        Eigen::VectorXd gr;    // sum gamma_t U' r_t
    };

    void sync_spectrum(double rho);
    // Projected residuals U' r_t for every subject, one column each.
    void project_residuals(const ModelState& s);
    void add_to(ClusterStats& c, int t) const;
    // Atom-marginalized log-likelihood of a cluster, optionally with subject
    // `extra` added. Uses prior_prec_, set by prepare_marginals.
    double log_marginal(const ClusterStats& c, int extra = -1) const;
    void prepare_marginals(const ModelState& s);

    std::vector<Subject> cohort_;
    LatticeGraph graph_;
    Hyperparams hp_;
    std::shared_ptr<const CarEigenCache> eigen_cache_;
    CarSpectrum spectrum_;
    std::vector<std::pair<double, double>> intervals_;  // per (site, subject), column-major like y
    Eigen::MatrixXd sigma_beta_inv_;
    Eigen::MatrixXd xtx_sum_;  // sum_t n x_t x_t'
    // scratch
    Eigen::VectorXd r_, rt_, coef_, draw_;
    Eigen::MatrixXd projected_;
    std::vector<double> resid_sq_;
    Eigen::ArrayXd prior_prec_;  // tau2 lambda_i / sigma2
    double marginal_tau2_ = 1.0;
};

struct IterationRecord {
    int iteration = 0;
    Eigen::VectorXd beta;
    double tau2 = 0.0;
    double sigma2 = 0.0;
    double rho = 0.0;
    double nu = 0.0;
    int n_clusters = 0;
    std::vector<int> labels;  // canonical, 1..T*
};

struct ChainTrace {
    int n_subjects = 0;
    int n_sites = 0;
    std::vector<IterationRecord> records;
    Eigen::MatrixXd theta_sum;  // n x T running sum of theta_{w_t}
};

struct ChainOptions {
    bool check_invariants = false;
    // Called after every completed sweep with the 1-based iteration index.
    std::function<void(int, const ModelState&)> observer;
};

ChainTrace run_chain(const std::vector<Subject>& cohort, const LatticeGraph& graph, const Hyperparams& hp,
                     const ChainOptions& options = {});

// Subject-private RNG stream, keyed by subject id so reordering subjects does
// not change which stream a subject sees.
Rng subject_stream(std::uint64_t seed, const std::string& id);

double geweke_z(const std::vector<double>& series, double frac_a = 0.1, double frac_b = 0.5);

}  // namespace hrgsdp
