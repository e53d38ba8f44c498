#include "sampler.hpp"

#include "error.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace hrgsdp {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;
// Log-weights this far below the maximum are treated as exactly zero.
constexpr double kLogWeightFloor = 700.0;

std::string state_dump(const ModelState& s) {
    std::ostringstream os;
    os << "tau2=" << s.tau2 << " sigma2=" << s.sigma2 << " rho=" << s.rho << " nu=" << s.nu
       << " clusters=" << s.n_clusters() << " beta=[";
    for (Eigen::Index k = 0; k < s.beta.size(); ++k) os << (k ? "," : "") << s.beta[k];
    os << "]";
    return os.str();
}

}  // namespace

std::vector<Subject> make_subjects(const std::vector<std::string>& ids, const std::vector<Eigen::VectorXd>& counts,
                                   const std::vector<double>& totals, const CovariateOptions& options) {
    if (counts.empty()) throw data_error("cohort is empty");
    if (ids.size() != counts.size() || totals.size() != counts.size()) throw data_error("cohort field lengths disagree");
    if (!options.intercept && !options.include_total) throw usage_error("at least one covariate column is required");
    double mean_total = 0.0;
    for (double n : totals) {
        if (!(n > 0.0)) throw data_error("every subject needs a positive total count");
        mean_total += n;
    }
    mean_total /= static_cast<double>(totals.size());

    std::vector<Subject> out(counts.size());
    for (std::size_t t = 0; t < counts.size(); ++t) {
        Subject& s = out[t];
        s.id = ids[t];
        s.z = counts[t];
        s.total = totals[t];
        s.gamma = totals[t] / mean_total;
        s.x.resize((options.intercept ? 1 : 0) + (options.include_total ? 1 : 0));
        int k = 0;
        if (options.intercept) s.x[k++] = 1.0;
        if (options.include_total) s.x[k++] = totals[t];
    }
    return out;
}

Hyperparams Hyperparams::defaults(int p) {
    Hyperparams hp;
    hp.beta0 = Eigen::VectorXd::Zero(p);
    hp.Sigma_beta = 1e5 * Eigen::MatrixXd::Identity(p, p);
    return hp;
}

void Hyperparams::validate(int p) const {
    if (beta0.size() != p) throw usage_error("beta0 length does not match the covariate count");
    if (Sigma_beta.rows() != p || Sigma_beta.cols() != p) throw usage_error("Sigma_beta has the wrong shape");
    Eigen::LLT<Eigen::MatrixXd> llt(Sigma_beta);
    if (llt.info() != Eigen::Success) throw usage_error("Sigma_beta must be positive definite");
    for (double v : {a_tau, b_tau, a_sigma, b_sigma, a_nu, b_nu}) {
        if (!(v > 0.0)) throw usage_error("all prior parameters must be positive");
    }
    if (n_iter < 1 || n_burn < 0 || n_burn >= n_iter) throw usage_error("need 0 <= n_burn < n_iter");
}

int ModelState::n_clusters() const {
    return static_cast<int>(std::count_if(atoms.begin(), atoms.end(), [](const Atom& a) { return a.live; }));
}

std::vector<int> ModelState::live_slots() const {
    std::vector<int> out;
    for (int j = 0; j < static_cast<int>(atoms.size()); ++j)
        if (atoms[j].live) out.push_back(j);
    return out;
}

std::vector<int> ModelState::canonical_labels() const {
    std::vector<int> map(atoms.size(), 0);
    std::vector<int> labels(w.size());
    int next = 0;
    for (std::size_t t = 0; t < w.size(); ++t) {
        if (map[w[t]] == 0) map[w[t]] = ++next;
        labels[t] = map[w[t]];
    }
    return labels;
}

int ModelState::add_atom(Eigen::VectorXd theta) {
    int slot;
    if (!free_slots.empty()) {
        slot = free_slots.back();
        free_slots.pop_back();
    } else {
        slot = static_cast<int>(atoms.size());
        atoms.emplace_back();
    }
    atoms[slot].theta = std::move(theta);
    atoms[slot].size = 0;
    atoms[slot].live = true;
    return slot;
}

void ModelState::remove_member(int t) {
    Atom& a = atoms[w[t]];
    if (--a.size == 0) {
        a.live = false;
        free_slots.push_back(w[t]);
    }
    w[t] = -1;
}

ChainSampler::ChainSampler(std::vector<Subject> cohort, LatticeGraph graph, Hyperparams hp)
    : cohort_(std::move(cohort)),
      graph_(std::move(graph)),
      hp_(std::move(hp)),
      eigen_cache_(CarEigenCache::compute(graph_)),
      spectrum_(graph_) {
    if (cohort_.empty()) throw data_error("cohort is empty");
    const int n = graph_.size();
    const auto p = cohort_.front().x.size();
    if (p == 0) throw data_error("subjects need at least one covariate");
    for (const Subject& s : cohort_) {
        if (s.z.size() != n) throw data_error("subject " + s.id + " has " + std::to_string(s.z.size()) +
                                              " sites but the lattice has " + std::to_string(n));
        if (s.x.size() != p) throw data_error("subject " + s.id + " has an inconsistent covariate count");
        if (!(s.gamma > 0.0)) throw data_error("subject " + s.id + " has a nonpositive scaling factor");
    }
    hp_.validate(static_cast<int>(p));

    intervals_.reserve(static_cast<std::size_t>(n) * cohort_.size());
    for (const Subject& s : cohort_) {
        for (int i = 0; i < n; ++i) {
            const double zi = s.z[i];
            if (zi < 0.0 || zi != std::floor(zi)) throw data_error("subject " + s.id + " has a non-integer or negative count");
            intervals_.push_back(count_interval(static_cast<long long>(zi)));
        }
    }
    sigma_beta_inv_ = hp_.Sigma_beta.llt().solve(Eigen::MatrixXd::Identity(p, p));
    xtx_sum_ = Eigen::MatrixXd::Zero(p, p);
    for (const Subject& s : cohort_) xtx_sum_ += static_cast<double>(n) * s.x * s.x.transpose();
    r_.resize(n);
    rt_.resize(n);
    coef_.resize(n);
    draw_.resize(n);
}

ModelState ChainSampler::init_state() const {
    const int n = n_sites();
    const int T = n_subjects();
    ModelState s;
    s.y.resize(n, T);
    for (int t = 0; t < T; ++t) {
        for (int i = 0; i < n; ++i) {
            const double z = cohort_[t].z[i];
            s.y(i, t) = z == 0.0 ? -0.5 : z - 0.5;
        }
    }
    const int slot = s.add_atom(Eigen::VectorXd::Zero(n));
    s.atoms[slot].size = T;
    s.w.assign(T, slot);
    s.beta = hp_.beta0;
    s.tau2 = hp_.tau2_init;
    // Either start can be data-scaled; literal unit starts can trap the chain
    // in a poor partition on count data with large magnitudes.
    if (hp_.tau2_init <= 0.0) {
        double m2 = 0.0;
        for (int t = 0; t < T; ++t) m2 += (s.y.col(t).array() - cohort_[t].x.dot(s.beta)).square().sum();
        s.tau2 = std::max(1.0, m2 / (static_cast<double>(n) * T));
    }
    if (hp_.sigma2_init > 0.0) {
        s.sigma2 = hp_.sigma2_init;
    } else {
        double m2 = 0.0;
        for (int t = 0; t < T; ++t) m2 += (s.y.col(t) / cohort_[t].gamma).squaredNorm();
        s.sigma2 = std::max(1.0, m2 / (static_cast<double>(n) * T));
    }
    s.rho = 0.5;
    s.nu = 1.0;
    return s;
}

Eigen::VectorXd ChainSampler::residual(const ModelState& s, int t) const {
    const double shift = cohort_[t].x.dot(s.beta);
    return s.y.col(t).array() - shift;
}

void ChainSampler::sync_spectrum(double rho) { spectrum_.set_rho(rho); }

void ChainSampler::update_latent_y(ModelState& s, int t, Rng& rng) const {
    const int n = n_sites();
    const Subject& subj = cohort_[t];
    const double shift = subj.x.dot(s.beta);
    const Eigen::VectorXd& theta = s.theta_of(t);
    const auto* iv = &intervals_[static_cast<std::size_t>(t) * n];
    for (int i = 0; i < n; ++i) {
        const double mu = shift + subj.gamma * theta[i];
        s.y(i, t) = truncnorm_inverse_cdf(mu, s.tau2, iv[i].first, iv[i].second, uniform_open(rng));
    }
}

double ChainSampler::log_existing_cluster_weight(const ModelState& s, int t, const Eigen::VectorXd& theta) const {
    const int n = n_sites();
    const double g = cohort_[t].gamma;
    const double shift = cohort_[t].x.dot(s.beta);
    const double ss = ((s.y.col(t).array() - shift) - g * theta.array()).square().sum();
    return -0.5 * n * (kLog2Pi + std::log(s.tau2)) - 0.5 * ss / s.tau2;
}

double ChainSampler::log_new_cluster_weight(const ModelState& s, int t) {
    sync_spectrum(s.rho);
    const int n = n_sites();
    const double g = cohort_[t].gamma;
    const double c = g * g / s.tau2;
    r_ = residual(s, t);
    spectrum_.project(r_, rt_);
    const Eigen::ArrayXd a = c + spectrum_.eigenvalues().array() / s.sigma2;
    const double rr = r_.squaredNorm();
    const double shrunk = (rt_.array().square() / a).sum();
    const double quad = (rr - c * shrunk) / s.tau2;
    return std::log(s.nu) + 0.5 * spectrum_.logdet() - 0.5 * a.log().sum() -
           0.5 * n * (kLog2Pi + std::log(s.sigma2 * s.tau2)) - 0.5 * quad;
}

GaussianConditional ChainSampler::new_atom_conditional(const ModelState& s, int t) {
    sync_spectrum(s.rho);
    const int n = n_sites();
    const double g = cohort_[t].gamma;
    const Eigen::ArrayXd a = g * g / s.tau2 + spectrum_.eigenvalues().array() / s.sigma2;
    r_ = residual(s, t);
    spectrum_.project(r_, rt_);
    coef_ = (g / s.tau2) * rt_.array() / a;
    GaussianConditional out;
    out.mean.resize(n);
    spectrum_.reconstruct(coef_, out.mean);
    Eigen::MatrixXd U(n, n);
    Eigen::VectorXd e = Eigen::VectorXd::Zero(n);
    for (int k = 0; k < n; ++k) {
        e.setZero();
        e[k] = 1.0;
        Eigen::VectorXd col(n);
        spectrum_.reconstruct(e, col);
        U.col(k) = col;
    }
    out.cov = U * a.inverse().matrix().asDiagonal() * U.transpose();
    return out;
}

GaussianConditional ChainSampler::atom_conditional(const ModelState& s, int slot) {
    sync_spectrum(s.rho);
    const int n = n_sites();
    double c = 0.0;
    Eigen::VectorXd b = Eigen::VectorXd::Zero(n);
    for (int t = 0; t < n_subjects(); ++t) {
        if (s.w[t] != slot) continue;
        const double g = cohort_[t].gamma;
        c += g * g / s.tau2;
        b += g * residual(s, t);
    }
    if (c == 0.0) throw numerical_error("internal invariant violated: atom without members");
    const Eigen::ArrayXd a = c + spectrum_.eigenvalues().array() / s.sigma2;
    spectrum_.project(b, rt_);
    coef_ = rt_.array() / (s.tau2 * a);
    GaussianConditional out;
    out.mean.resize(n);
    spectrum_.reconstruct(coef_, out.mean);
    Eigen::MatrixXd U(n, n);
    Eigen::VectorXd e(n);
    for (int k = 0; k < n; ++k) {
        e.setZero();
        e[k] = 1.0;
        Eigen::VectorXd col(n);
        spectrum_.reconstruct(e, col);
        U.col(k) = col;
    }
    out.cov = U * a.inverse().matrix().asDiagonal() * U.transpose();
    return out;
}

void ChainSampler::polya_urn_step(ModelState& s, int t, Rng& rng) {
    sync_spectrum(s.rho);
    s.remove_member(t);

    const int n = n_sites();
    const double g = cohort_[t].gamma;
    r_ = residual(s, t);
    const double rr = r_.squaredNorm();
    const double log_norm = -0.5 * n * (kLog2Pi + std::log(s.tau2));

    std::vector<int> slots = s.live_slots();
    std::vector<double> logw(slots.size() + 1);
    for (std::size_t k = 0; k < slots.size(); ++k) {
        const Atom& atom = s.atoms[slots[k]];
        const double ss = rr - 2.0 * g * r_.dot(atom.theta) + g * g * atom.theta.squaredNorm();
        logw[k] = std::log(static_cast<double>(atom.size)) + log_norm - 0.5 * ss / s.tau2;
    }

    spectrum_.project(r_, rt_);
    const double c = g * g / s.tau2;
    const Eigen::ArrayXd a = c + spectrum_.eigenvalues().array() / s.sigma2;
    const double quad = (rr - c * (rt_.array().square() / a).sum()) / s.tau2;
    logw.back() = std::log(s.nu) + 0.5 * spectrum_.logdet() - 0.5 * a.log().sum() -
                  0.5 * n * (kLog2Pi + std::log(s.sigma2 * s.tau2)) - 0.5 * quad;

    double top = -std::numeric_limits<double>::infinity();
    for (double v : logw) {
        if (std::isnan(v) || v == std::numeric_limits<double>::infinity()) {
            throw numerical_error("non-finite Polya urn log-weight for subject " + cohort_[t].id + " (" + state_dump(s) + ")");
        }
        top = std::max(top, v);
    }
    if (!std::isfinite(top)) {
        throw numerical_error("all Polya urn weights vanish for subject " + cohort_[t].id + " (" + state_dump(s) + ")");
    }
    double total = 0.0;
    for (double& v : logw) {
        v = (v < top - kLogWeightFloor) ? 0.0 : std::exp(v - top);
        total += v;
    }
    double u = uniform_open(rng) * total;
    std::size_t pick = 0;
    for (; pick + 1 < logw.size(); ++pick) {
        if (u < logw[pick]) break;
        u -= logw[pick];
    }
    // Rounding can leave u just past the last nonzero weight.
    while (logw[pick] == 0.0 && pick > 0) --pick;

    if (pick == slots.size()) {
        for (int i = 0; i < n; ++i) draw_[i] = std_normal(rng);
        coef_ = (g / s.tau2) * rt_.array() / a + draw_.array() / a.sqrt();
        Eigen::VectorXd theta(n);
        spectrum_.reconstruct(coef_, theta);
        const int slot = s.add_atom(std::move(theta));
        s.atoms[slot].size = 1;
        s.w[t] = slot;
    } else {
        s.w[t] = slots[pick];
        ++s.atoms[slots[pick]].size;
    }
}

void ChainSampler::resample_atoms(ModelState& s, Rng& rng) {
    sync_spectrum(s.rho);
    const int n = n_sites();
    const int T = n_subjects();
    std::vector<double> c(s.atoms.size(), 0.0);
    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(s.atoms.size()));
    for (int t = 0; t < T; ++t) {
        const double g = cohort_[t].gamma;
        const int j = s.w[t];
        c[j] += g * g / s.tau2;
        b.col(j) += g * residual(s, t);
    }
    for (int j : s.live_slots()) {
        if (c[j] == 0.0) throw numerical_error("internal invariant violated: live atom without members");
        const Eigen::ArrayXd a = c[j] + spectrum_.eigenvalues().array() / s.sigma2;
        spectrum_.project(b.col(j), rt_);
        for (int i = 0; i < n; ++i) draw_[i] = std_normal(rng);
        coef_ = rt_.array() / (s.tau2 * a) + draw_.array() / a.sqrt();
        spectrum_.reconstruct(coef_, s.atoms[j].theta);
    }
}

void ChainSampler::project_residuals(const ModelState& s) {
    const int T = n_subjects();
    projected_.resize(n_sites(), T);
    resid_sq_.resize(T);
    for (int t = 0; t < T; ++t) {
        r_ = residual(s, t);
        resid_sq_[t] = r_.squaredNorm();
        spectrum_.project(r_, projected_.col(t));
    }
}

void ChainSampler::add_to(ClusterStats& c, int t) const {
    const double g = cohort_[t].gamma;
    if (c.count == 0) c.gr = Eigen::VectorXd::Zero(n_sites());
    ++c.count;
    c.g2 += g * g;
    c.rr += resid_sq_[t];
    c.gr += g * projected_.col(t);
}

void ChainSampler::prepare_marginals(const ModelState& s) {
    sync_spectrum(s.rho);
    project_residuals(s);
    prior_prec_ = spectrum_.eigenvalues().array() * (s.tau2 / s.sigma2);
    marginal_tau2_ = s.tau2;
}

double ChainSampler::log_marginal(const ClusterStats& c, int extra) const {
    // Per eigen-coordinate i the members share theta_i ~ N(0, sigma2 / lambda_i),
    // so the cluster likelihood factorizes over coordinates.
    const double tau2 = marginal_tau2_;
    double count = c.count, g2 = c.g2, rr = c.rr;
    double quad;
    if (extra >= 0) {
        const double g = cohort_[extra].gamma;
        count += 1.0;
        g2 += g * g;
        rr += resid_sq_[extra];
        if (c.count == 0) quad = (g * projected_.col(extra).array()).square().cwiseQuotient(prior_prec_ + g2).sum();
        else quad = (c.gr.array() + g * projected_.col(extra).array()).square().cwiseQuotient(prior_prec_ + g2).sum();
    } else {
        quad = c.gr.array().square().cwiseQuotient(prior_prec_ + g2).sum();
    }
    const double n = n_sites();
    return -0.5 * count * n * (kLog2Pi + std::log(tau2)) - 0.5 * (1.0 + g2 / prior_prec_).log().sum() - 0.5 * rr / tau2 +
           0.5 / tau2 * quad;
}

double ChainSampler::log_partition_posterior(const ModelState& s, const std::vector<int>& w) {
    prepare_marginals(s);
    std::vector<ClusterStats> stats;
    std::vector<int> index;
    for (int t = 0; t < n_subjects(); ++t) {
        if (w[t] >= static_cast<int>(index.size())) index.resize(w[t] + 1, -1);
        if (index[w[t]] < 0) {
            index[w[t]] = static_cast<int>(stats.size());
            stats.emplace_back();
        }
        add_to(stats[index[w[t]]], t);
    }
    double lp = 0.0;
    for (const ClusterStats& c : stats) lp += std::log(s.nu) + std::lgamma(c.count) + log_marginal(c);
    return lp;
}

void ChainSampler::split_merge_step(ModelState& s, Rng& rng) {
    const int T = n_subjects();
    const int moves = hp_.split_merge_moves < 0 ? std::max(1, (T + 4) / 5) : hp_.split_merge_moves;
    if (moves == 0 || T < 2) return;
    prepare_marginals(s);

    std::vector<int> order;
    std::vector<int> to_b;
    for (int m = 0; m < moves; ++m) {
        std::uniform_int_distribution<int> pick(0, T - 1);
        const int i = pick(rng);
        int j = pick(rng);
        while (j == i) j = pick(rng);
        const int ci = s.w[i], cj = s.w[j];

        order.clear();
        for (int t = 0; t < T; ++t)
            if (t != i && t != j && (s.w[t] == ci || s.w[t] == cj)) order.push_back(t);
        std::shuffle(order.begin(), order.end(), rng);

        // Sequential allocation starting from {i} and {j}. For a split it draws the
        // launch partition; for a merge it replays the current one to get the
        // reverse proposal probability.
        const bool split = ci == cj;
        ClusterStats a, b, merged;
        add_to(a, i);
        add_to(b, j);
        add_to(merged, i);
        add_to(merged, j);
        double lm_a = log_marginal(a), lm_b = log_marginal(b);
        double log_q = 0.0;
        to_b.clear();
        for (int t : order) {
            const double lm_a2 = log_marginal(a, t);
            const double lm_b2 = log_marginal(b, t);
            const double la = std::log(static_cast<double>(a.count)) + lm_a2 - lm_a;
            const double lb = std::log(static_cast<double>(b.count)) + lm_b2 - lm_b;
            const double top = std::max(la, lb);
            const double log_norm = top + std::log(std::exp(la - top) + std::exp(lb - top));
            bool goes_b;
            if (split) goes_b = std::log(uniform_open(rng)) < lb - log_norm;
            else goes_b = s.w[t] == cj;
            log_q += (goes_b ? lb : la) - log_norm;
            if (goes_b) {
                add_to(b, t);
                lm_b = lm_b2;
                to_b.push_back(t);
            } else {
                add_to(a, t);
                lm_a = lm_a2;
            }
            add_to(merged, t);
        }

        const double log_split = std::log(s.nu) + std::lgamma(a.count) + std::lgamma(b.count) + lm_a + lm_b;
        const double log_merged = std::lgamma(merged.count) + log_marginal(merged);
        const double log_accept = split ? log_split - log_merged - log_q : log_merged - log_split + log_q;
        if (std::isnan(log_accept)) throw numerical_error("merge-split acceptance ratio is not a number");
        if (std::log(uniform_open(rng)) >= log_accept) continue;

        if (split) {
            const int slot = s.add_atom(Eigen::VectorXd::Zero(n_sites()));
            s.atoms[ci].size -= b.count;
            s.atoms[slot].size = b.count;
            s.w[j] = slot;
            for (int t : to_b) s.w[t] = slot;
        } else {
            for (int t = 0; t < T; ++t)
                if (s.w[t] == cj) s.w[t] = ci;
            s.atoms[ci].size += s.atoms[cj].size;
            s.atoms[cj].size = 0;
            s.atoms[cj].live = false;
            s.free_slots.push_back(cj);
        }
    }
}

GaussianConditional ChainSampler::beta_conditional(const ModelState& s) const {
    const auto p = s.beta.size();
    Eigen::VectorXd rhs = sigma_beta_inv_ * hp_.beta0;
    Eigen::VectorXd data = Eigen::VectorXd::Zero(p);
    for (int t = 0; t < n_subjects(); ++t) {
        const Subject& subj = cohort_[t];
        const double site_sum = (s.y.col(t) - subj.gamma * s.theta_of(t)).sum();
        data += subj.x * site_sum;
    }
    rhs += data / s.tau2;
    const Eigen::MatrixXd precision = sigma_beta_inv_ + xtx_sum_ / s.tau2;
    Eigen::LLT<Eigen::MatrixXd> llt(precision);
    if (llt.info() != Eigen::Success) throw numerical_error("beta posterior precision is not positive definite");
    GaussianConditional out;
    out.mean = llt.solve(rhs);
    out.cov = llt.solve(Eigen::MatrixXd::Identity(p, p));
    return out;
}

void ChainSampler::update_beta(ModelState& s, Rng& rng) const {
    const auto p = s.beta.size();
    Eigen::VectorXd rhs = sigma_beta_inv_ * hp_.beta0;
    Eigen::VectorXd data = Eigen::VectorXd::Zero(p);
    for (int t = 0; t < n_subjects(); ++t) {
        const Subject& subj = cohort_[t];
        data += subj.x * (s.y.col(t) - subj.gamma * s.theta_of(t)).sum();
    }
    rhs += data / s.tau2;
    const Eigen::MatrixXd precision = sigma_beta_inv_ + xtx_sum_ / s.tau2;
    Eigen::LLT<Eigen::MatrixXd> llt(precision);
    if (llt.info() != Eigen::Success) throw numerical_error("beta posterior precision is not positive definite");
    Eigen::VectorXd z(p);
    for (Eigen::Index k = 0; k < p; ++k) z[k] = std_normal(rng);
    llt.matrixU().solveInPlace(z);
    s.beta = llt.solve(rhs) + z;
}

GammaParams ChainSampler::tau2_conditional(const ModelState& s) const {
    double ss = 0.0;
    for (int t = 0; t < n_subjects(); ++t) {
        const Subject& subj = cohort_[t];
        const double shift = subj.x.dot(s.beta);
        ss += ((s.y.col(t).array() - shift) - subj.gamma * s.theta_of(t).array()).square().sum();
    }
    return {0.5 * n_subjects() * n_sites() + hp_.a_tau, hp_.b_tau + 0.5 * ss};
}

void ChainSampler::update_tau2(ModelState& s, Rng& rng) const {
    const GammaParams g = tau2_conditional(s);
    s.tau2 = inv_gamma(rng, g.shape, g.rate);
}

GammaParams ChainSampler::sigma2_conditional(const ModelState& s) const {
    double q = 0.0;
    int live = 0;
    for (const Atom& a : s.atoms) {
        if (!a.live) continue;
        q += graph_.car_quadratic(a.theta, s.rho);
        ++live;
    }
    return {0.5 * live * n_sites() + hp_.a_sigma, hp_.b_sigma + 0.5 * q};
}

void ChainSampler::update_sigma2(ModelState& s, Rng& rng) const {
    const GammaParams g = sigma2_conditional(s);
    s.sigma2 = inv_gamma(rng, g.shape, g.rate);
}

double ChainSampler::rho_log_target(const ModelState& s, double rho) const {
    if (!(rho > 0.0 && rho < 1.0)) return -std::numeric_limits<double>::infinity();
    double w_form = 0.0;
    int live = 0;
    for (const Atom& a : s.atoms) {
        if (!a.live) continue;
        w_form += graph_.w_quadratic(a.theta);
        ++live;
    }
    return 0.5 * live * (1.0 - rho * eigen_cache_->lambda.array()).log().sum() + rho * w_form / (2.0 * s.sigma2);
}

void ChainSampler::update_rho(ModelState& s, Rng& rng) const {
    // Univariate slice sampler with stepping out and shrinkage on (0, 1).
    double w_form = 0.0;
    int live = 0;
    for (const Atom& a : s.atoms) {
        if (!a.live) continue;
        w_form += graph_.w_quadratic(a.theta);
        ++live;
    }
    const Eigen::ArrayXd& lambda = eigen_cache_->lambda.array();
    auto logf = [&](double rho) {
        if (!(rho > 0.0 && rho < 1.0)) return -std::numeric_limits<double>::infinity();
        return 0.5 * live * (1.0 - rho * lambda).log().sum() + rho * w_form / (2.0 * s.sigma2);
    };

    constexpr double width = 0.25;
    constexpr int max_step_out = 8;
    constexpr int max_shrink = 100;
    const double x0 = s.rho;
    const double level = logf(x0) + std::log(uniform_open(rng));
    double left = x0 - width * uniform_open(rng);
    double right = left + width;
    int j = static_cast<int>(std::floor(max_step_out * uniform_open(rng)));
    int k = max_step_out - 1 - j;
    while (j-- > 0 && left > 0.0 && logf(left) > level) left -= width;
    while (k-- > 0 && right < 1.0 && logf(right) > level) right += width;
    left = std::max(left, 0.0);
    right = std::min(right, 1.0);

    for (int it = 0; it < max_shrink; ++it) {
        const double x1 = left + (right - left) * uniform_open(rng);
        if (logf(x1) > level) {
            s.rho = x1;
            return;
        }
        if (x1 < x0) left = x1;
        else right = x1;
    }
    log_warning("rho slice sampler bracket collapsed after " + std::to_string(max_shrink) + " shrink steps; keeping rho = " +
                std::to_string(x0));
}

std::pair<double, double> ChainSampler::nu_mixture(const ModelState& s, double eta) const {
    const double T = n_subjects();
    const double k = s.n_clusters();
    const double rate = hp_.b_nu - std::log(eta);
    const double odds_num = hp_.a_nu + k - 1.0;
    return {odds_num / (T * rate + odds_num), rate};
}

void ChainSampler::update_nu(ModelState& s, Rng& rng) const {
    const double eta = beta_draw(rng, s.nu + 1.0, n_subjects());
    const auto [p, rate] = nu_mixture(s, eta);
    const double k = s.n_clusters();
    const double shape = uniform_open(rng) < p ? hp_.a_nu + k : hp_.a_nu + k - 1.0;
    s.nu = gamma_rate(rng, shape, rate);
}

void ChainSampler::sweep(ModelState& s, Rng& global_rng, std::vector<Rng>& subject_rngs) {
    const int T = n_subjects();
    for (int t = 0; t < T; ++t) update_latent_y(s, t, subject_rngs[t]);
    for (int t = 0; t < T; ++t) polya_urn_step(s, t, subject_rngs[t]);
    split_merge_step(s, global_rng);
    resample_atoms(s, global_rng);
    update_beta(s, global_rng);
    update_tau2(s, global_rng);
    update_sigma2(s, global_rng);
    update_rho(s, global_rng);
    update_nu(s, global_rng);
}

void ChainSampler::check_invariants(const ModelState& s) const {
    const int T = n_subjects();
    const int n = n_sites();
    if (static_cast<int>(s.w.size()) != T) throw numerical_error("assignment vector has the wrong length");
    std::vector<int> sizes(s.atoms.size(), 0);
    for (int t = 0; t < T; ++t) {
        const int j = s.w[t];
        if (j < 0 || j >= static_cast<int>(s.atoms.size()) || !s.atoms[j].live) {
            throw numerical_error("subject " + cohort_[t].id + " points at a dead atom");
        }
        ++sizes[j];
    }
    int total = 0;
    for (std::size_t j = 0; j < s.atoms.size(); ++j) {
        if (s.atoms[j].live && (s.atoms[j].size < 1 || s.atoms[j].size != sizes[j])) {
            throw numerical_error("atom size bookkeeping is inconsistent");
        }
        if (!s.atoms[j].live && sizes[j] != 0) throw numerical_error("dead atom has members");
        total += s.atoms[j].live ? s.atoms[j].size : 0;
    }
    if (total != T) throw numerical_error("cluster sizes do not sum to the cohort size");
    for (int t = 0; t < T; ++t) {
        for (int i = 0; i < n; ++i) {
            if (round_latent(s.y(i, t)) != static_cast<long long>(cohort_[t].z[i])) {
                throw numerical_error("latent value leaves its count interval (subject " + cohort_[t].id + ", site " +
                                      std::to_string(i) + ")");
            }
        }
    }
    if (!(s.tau2 > 0.0 && s.sigma2 > 0.0 && s.nu > 0.0 && s.rho > 0.0 && s.rho < 1.0)) {
        throw numerical_error("scalar parameter left its support (" + state_dump(s) + ")");
    }
}

Rng subject_stream(std::uint64_t seed, const std::string& id) { return make_stream(seed, {1, fnv1a(id)}); }

ChainTrace run_chain(const std::vector<Subject>& cohort, const LatticeGraph& graph, const Hyperparams& hp,
                     const ChainOptions& options) {
    ChainSampler sampler(cohort, graph, hp);
    ModelState state = sampler.init_state();
    Rng global = make_stream(hp.seed, {0});
    std::vector<Rng> subject_rngs;
    subject_rngs.reserve(cohort.size());
    for (const Subject& s : cohort) subject_rngs.push_back(subject_stream(hp.seed, s.id));

    ChainTrace trace;
    trace.n_subjects = sampler.n_subjects();
    trace.n_sites = sampler.n_sites();
    trace.theta_sum = Eigen::MatrixXd::Zero(trace.n_sites, trace.n_subjects);
    trace.records.reserve(static_cast<std::size_t>(hp.n_iter - hp.n_burn));

    for (int iter = 1; iter <= hp.n_iter; ++iter) {
        try {
            sampler.sweep(state, global, subject_rngs);
            if (options.check_invariants) sampler.check_invariants(state);
        } catch (const Error& e) {
            throw Error(e.kind(), "iteration " + std::to_string(iter) + ": " + e.what() + " [" + state_dump(state) + "]");
        }
        if (options.observer) options.observer(iter, state);
        if (iter <= hp.n_burn) continue;
        IterationRecord rec;
        rec.iteration = iter;
        rec.beta = state.beta;
        rec.tau2 = state.tau2;
        rec.sigma2 = state.sigma2;
        rec.rho = state.rho;
        rec.nu = state.nu;
        rec.n_clusters = state.n_clusters();
        rec.labels = state.canonical_labels();
        trace.records.push_back(std::move(rec));
        for (int t = 0; t < trace.n_subjects; ++t) trace.theta_sum.col(t) += state.theta_of(t);
    }
    return trace;
}

double geweke_z(const std::vector<double>& series, double frac_a, double frac_b) {
    constexpr int kBatches = 20;
    constexpr double kVarianceFloor = 1e-12;
    if (series.size() < 100) throw usage_error("Geweke diagnostic needs at least 100 draws");
    if (!(frac_a > 0.0 && frac_b > 0.0 && frac_a + frac_b <= 1.0)) throw usage_error("invalid Geweke window fractions");
    const std::size_t N = series.size();
    const auto n_a = static_cast<std::size_t>(std::floor(frac_a * static_cast<double>(N)));
    const auto n_b = static_cast<std::size_t>(std::floor(frac_b * static_cast<double>(N)));

    // Mean and batch-means estimate of Var(mean) for one window.
    auto window = [&](std::size_t begin, std::size_t len) {
        double mean = 0.0;
        for (std::size_t i = begin; i < begin + len; ++i) mean += series[i];
        mean /= static_cast<double>(len);
        const std::size_t nb = std::min<std::size_t>(kBatches, len);
        const std::size_t bs = len / nb;
        std::vector<double> bm(nb, 0.0);
        for (std::size_t b = 0; b < nb; ++b) {
            for (std::size_t i = 0; i < bs; ++i) bm[b] += series[begin + b * bs + i];
            bm[b] /= static_cast<double>(bs);
        }
        double bmean = 0.0;
        for (double v : bm) bmean += v;
        bmean /= static_cast<double>(nb);
        double var = 0.0;
        for (double v : bm) var += (v - bmean) * (v - bmean);
        var /= static_cast<double>(nb - 1);
        return std::pair<double, double>{mean, var / static_cast<double>(nb)};
    };
    const auto [mean_a, var_a] = window(0, n_a);
    const auto [mean_b, var_b] = window(N - n_b, n_b);
    return (mean_a - mean_b) / std::sqrt(std::max(var_a + var_b, kVarianceFloor));
}

}  // namespace hrgsdp
