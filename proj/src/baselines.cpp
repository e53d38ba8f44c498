#include "baselines.hpp"

#include "error.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>

namespace hrgsdp {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_rank(const Eigen::MatrixXd& X, int g) {
    if (g < 1 || g > X.rows()) {
        throw usage_error("cluster count " + std::to_string(g) + " is invalid for " + std::to_string(X.rows()) +
                          " subjects");
    }
}

Partition relabel(const std::vector<int>& raw) {
    Partition p;
    p.labels.resize(raw.size());
    std::map<int, int> seen;
    for (std::size_t i = 0; i < raw.size(); ++i) {
        auto [it, fresh] = seen.emplace(raw[i], static_cast<int>(seen.size()) + 1);
        p.labels[i] = it->second;
    }
    p.g = static_cast<int>(seen.size());
    return p;
}

struct LloydRun {
    std::vector<int> assign;
    Eigen::MatrixXd centers;
    double within_ss = 0.0;
};

LloydRun lloyd(const Eigen::MatrixXd& X, int g, Rng& rng, int max_iter) {
    const Eigen::Index N = X.rows();
    std::vector<int> idx(N);
    std::iota(idx.begin(), idx.end(), 0);
    // Partial Fisher-Yates for g distinct starting rows.
    for (int k = 0; k < g; ++k) {
        std::uniform_int_distribution<Eigen::Index> pick(k, N - 1);
        std::swap(idx[k], idx[pick(rng)]);
    }
    LloydRun run;
    run.centers.resize(g, X.cols());
    for (int k = 0; k < g; ++k) run.centers.row(k) = X.row(idx[k]);
    run.assign.assign(N, -1);

    for (int it = 0; it < max_iter; ++it) {
        bool changed = false;
        for (Eigen::Index i = 0; i < N; ++i) {
            int best = 0;
            double bd = std::numeric_limits<double>::infinity();
            for (int k = 0; k < g; ++k) {
                const double d = (X.row(i) - run.centers.row(k)).squaredNorm();
                if (d < bd) {
                    bd = d;
                    best = k;
                }
            }
            if (run.assign[i] != best) {
                run.assign[i] = best;
                changed = true;
            }
        }
        if (!changed) break;
        Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(g, X.cols());
        std::vector<int> counts(g, 0);
        for (Eigen::Index i = 0; i < N; ++i) {
            sums.row(run.assign[i]) += X.row(i);
            ++counts[run.assign[i]];
        }
        for (int k = 0; k < g; ++k) {
            if (counts[k] > 0) {
                run.centers.row(k) = sums.row(k) / counts[k];
                continue;
            }
            // Empty cluster: move its center onto the point farthest from its own center.
            Eigen::Index far = 0;
            double fd = -1.0;
            for (Eigen::Index i = 0; i < N; ++i) {
                const double d = (X.row(i) - run.centers.row(run.assign[i])).squaredNorm();
                if (d > fd) {
                    fd = d;
                    far = i;
                }
            }
            run.centers.row(k) = X.row(far);
            run.assign[far] = k;
        }
    }
    run.within_ss = 0.0;
    for (Eigen::Index i = 0; i < N; ++i) run.within_ss += (X.row(i) - run.centers.row(run.assign[i])).squaredNorm();
    return run;
}

// log N(x; mean, L L') with L the Cholesky factor.
double log_mvn(const Eigen::VectorXd& x, const Eigen::VectorXd& mean, const Eigen::LLT<Eigen::MatrixXd>& llt) {
    const Eigen::VectorXd z = llt.matrixL().solve(x - mean);
    const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    return -0.5 * (static_cast<double>(x.size()) * std::log(2.0 * std::numbers::pi) + logdet + z.squaredNorm());
}

double log_sum_exp(const Eigen::VectorXd& v) {
    const double m = v.maxCoeff();
    if (!std::isfinite(m)) return m;
    return m + std::log((v.array() - m).exp().sum());
}

}  // namespace

Eigen::Matrix<double, 5, 1> FeatureVector::as_vector() const {
    Eigen::Matrix<double, 5, 1> v;
    v << contrast, correlation, homogeneity, energy, entropy;
    return v;
}

FeatureVector haralick_features(const CountMatrix& counts) {
    const double total = static_cast<double>(counts.sum());
    if (!(total > 0.0)) throw data_error("GLCM has zero total count");
    if ((counts.array() < 0).any()) throw data_error("GLCM has negative counts");
    const Eigen::MatrixXd p = counts.cast<double>() / total;
    const Eigen::Index R = p.rows(), C = p.cols();

    double mu_l = 0.0, mu_h = 0.0;
    for (Eigen::Index l = 0; l < R; ++l)
        for (Eigen::Index h = 0; h < C; ++h) {
            mu_l += (l + 1) * p(l, h);
            mu_h += (h + 1) * p(l, h);
        }
    double var_l = 0.0, var_h = 0.0, cov = 0.0;
    FeatureVector f;
    for (Eigen::Index l = 0; l < R; ++l) {
        for (Eigen::Index h = 0; h < C; ++h) {
            const double v = p(l, h);
            const double dl = (l + 1) - mu_l, dh = (h + 1) - mu_h;
            var_l += dl * dl * v;
            var_h += dh * dh * v;
            cov += dl * dh * v;
            f.contrast += static_cast<double>((l - h) * (l - h)) * v;
            f.homogeneity += v / (1.0 + static_cast<double>(std::abs(l - h)));
            f.energy += v * v;
            if (v > 0.0) f.entropy -= v * std::log(v);
        }
    }
    f.correlation = (var_l > 0.0 && var_h > 0.0) ? cov / std::sqrt(var_l * var_h) : kNaN;
    return f;
}

Eigen::MatrixXd prepare_features(const std::vector<FeatureVector>& features, bool standardize) {
    if (features.empty()) throw data_error("no feature vectors");
    Eigen::MatrixXd X(features.size(), 5);
    for (std::size_t i = 0; i < features.size(); ++i) X.row(i) = features[i].as_vector().transpose();
    for (Eigen::Index j = 0; j < X.cols(); ++j) {
        std::vector<double> ok;
        for (Eigen::Index i = 0; i < X.rows(); ++i)
            if (!std::isnan(X(i, j))) ok.push_back(X(i, j));
        double median = 0.0;
        if (!ok.empty()) {
            std::sort(ok.begin(), ok.end());
            const std::size_t m = ok.size() / 2;
            median = ok.size() % 2 ? ok[m] : 0.5 * (ok[m - 1] + ok[m]);
        }
        for (Eigen::Index i = 0; i < X.rows(); ++i)
            if (std::isnan(X(i, j))) X(i, j) = median;
    }
    if (!standardize) return X;
    for (Eigen::Index j = 0; j < X.cols(); ++j) {
        const double mean = X.col(j).mean();
        X.col(j).array() -= mean;
        const double sd = X.rows() > 1 ? std::sqrt(X.col(j).squaredNorm() / static_cast<double>(X.rows() - 1)) : 0.0;
        if (sd > 0.0) X.col(j) /= sd;
        else X.col(j).setZero();
    }
    return X;
}

KMeansResult kmeans(const Eigen::MatrixXd& X, int g, Rng& rng, int restarts, int max_iter) {
    check_rank(X, g);
    if (restarts < 1) throw usage_error("k-means needs at least one restart");
    KMeansResult out;
    out.within_ss = std::numeric_limits<double>::infinity();
    for (int r = 0; r < restarts; ++r) {
        LloydRun run = lloyd(X, g, rng, max_iter);
        out.restart_within_ss.push_back(run.within_ss);
        if (run.within_ss < out.within_ss) {
            out.within_ss = run.within_ss;
            out.partition = relabel(run.assign);
            // Row k - 1 of the centers belongs to label k.
            out.centers = run.centers;
            for (std::size_t i = 0; i < run.assign.size(); ++i)
                out.centers.row(out.partition.labels[i] - 1) = run.centers.row(run.assign[i]);
        }
    }
    return out;
}

double gmm_log_likelihood(const Eigen::MatrixXd& X, const std::vector<double>& weights,
                          const std::vector<Eigen::VectorXd>& means, const std::vector<Eigen::MatrixXd>& covariances) {
    const int g = static_cast<int>(weights.size());
    std::vector<Eigen::LLT<Eigen::MatrixXd>> llt;
    for (int k = 0; k < g; ++k) {
        llt.emplace_back(covariances[k]);
        if (llt.back().info() != Eigen::Success) throw numerical_error("mixture covariance is not positive definite");
    }
    double ll = 0.0;
    Eigen::VectorXd comp(g);
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        const Eigen::VectorXd x = X.row(i).transpose();
        for (int k = 0; k < g; ++k) comp[k] = std::log(weights[k]) + log_mvn(x, means[k], llt[k]);
        ll += log_sum_exp(comp);
    }
    return ll;
}

GmmResult gmm(const Eigen::MatrixXd& X, int g, Rng& rng, int restarts, int max_iter, double reg, double tol) {
    check_rank(X, g);
    if (restarts < 1) throw usage_error("mixture fitting needs at least one restart");
    const Eigen::Index N = X.rows();
    GmmResult best;
    best.log_likelihood = -std::numeric_limits<double>::infinity();
    bool have_best = false;

    for (int r = 0; r < restarts; ++r) {
        const LloydRun init = lloyd(X, g, rng, 300);
        Eigen::MatrixXd resp = Eigen::MatrixXd::Zero(N, g);
        for (Eigen::Index i = 0; i < N; ++i) resp(i, init.assign[i]) = 1.0;

        std::vector<double> w(g);
        std::vector<Eigen::VectorXd> mu(g);
        std::vector<Eigen::MatrixXd> cov(g);
        std::vector<double> history;
        bool converged = false;
        double ll = -std::numeric_limits<double>::infinity();
        for (int it = 0; it < max_iter; ++it) {
            // M step
            for (int k = 0; k < g; ++k) {
                const double nk = std::max(resp.col(k).sum(), 1e-12);
                w[k] = nk / static_cast<double>(N);
                mu[k] = (X.transpose() * resp.col(k)) / nk;
                const Eigen::MatrixXd centered = X.rowwise() - mu[k].transpose();
                cov[k] = (centered.transpose() * resp.col(k).asDiagonal() * centered) / nk;
                cov[k].diagonal().array() += reg;
            }
            // E step, which also yields the log-likelihood of the current parameters.
            std::vector<Eigen::LLT<Eigen::MatrixXd>> llt;
            for (int k = 0; k < g; ++k) llt.emplace_back(cov[k]);
            double next = 0.0;
            Eigen::VectorXd comp(g);
            for (Eigen::Index i = 0; i < N; ++i) {
                const Eigen::VectorXd x = X.row(i).transpose();
                for (int k = 0; k < g; ++k) comp[k] = std::log(w[k]) + log_mvn(x, mu[k], llt[k]);
                const double lse = log_sum_exp(comp);
                next += lse;
                resp.row(i) = (comp.array() - lse).exp().transpose();
            }
            history.push_back(next);
            const bool done = std::abs(next - ll) <= tol * std::max(1.0, std::abs(next));
            ll = next;
            if (done) {
                converged = true;
                break;
            }
        }
        if (!std::isfinite(ll)) continue;
        if (!have_best || ll > best.log_likelihood) {
            have_best = true;
            best.log_likelihood = ll;
            best.weights = w;
            best.means = mu;
            best.covariances = cov;
            best.ll_history = history;
            best.converged = converged;
            std::vector<int> hard(N);
            for (Eigen::Index i = 0; i < N; ++i) resp.row(i).maxCoeff(&hard[i]);
            best.partition = relabel(hard);
        }
    }
    if (!have_best) throw numerical_error("every mixture restart produced a non-finite likelihood");
    if (!best.converged) {
        log_warning("EM did not converge within " + std::to_string(max_iter) +
                    " iterations; keeping the best-likelihood state");
    }
    return best;
}

Partition feature_kmeans(const std::vector<FeatureVector>& features, int g, Rng& rng, bool standardize) {
    return kmeans(prepare_features(features, standardize), g, rng).partition;
}

Partition feature_hclust(const std::vector<FeatureVector>& features, int g, bool standardize) {
    const Eigen::MatrixXd X = prepare_features(features, standardize);
    check_rank(X, g);
    if (X.rows() == 1) return relabel({0});
    return cut(ward_cluster(dissimilarity(X)), g);
}

Partition feature_gmm(const std::vector<FeatureVector>& features, int g, Rng& rng, bool standardize) {
    return gmm(prepare_features(features, standardize), g, rng).partition;
}

MatchingMatrix matching_matrix(const std::vector<int>& true_labels, const std::vector<int>& pred_labels) {
    if (true_labels.size() != pred_labels.size()) throw usage_error("label vectors differ in length");
    if (true_labels.empty()) throw usage_error("label vectors are empty");
    MatchingMatrix m;
    std::map<int, int> rows, cols;
    for (int v : true_labels) rows.emplace(v, 0);
    for (int v : pred_labels) cols.emplace(v, 0);
    for (auto& [v, i] : rows) {
        i = static_cast<int>(m.row_labels.size());
        m.row_labels.push_back(v);
    }
    for (auto& [v, j] : cols) {
        j = static_cast<int>(m.col_labels.size());
        m.col_labels.push_back(v);
    }
    m.counts = Eigen::MatrixXi::Zero(static_cast<int>(rows.size()), static_cast<int>(cols.size()));
    for (std::size_t t = 0; t < true_labels.size(); ++t) ++m.counts(rows[true_labels[t]], cols[pred_labels[t]]);
    m.N = static_cast<int>(true_labels.size());
    return m;
}

MatchingMatrix matching_matrix_from_counts(const Eigen::MatrixXi& counts) {
    if ((counts.array() < 0).any()) throw usage_error("matching matrix has negative entries");
    MatchingMatrix m;
    m.counts = counts;
    m.N = counts.sum();
    for (int i = 0; i < counts.rows(); ++i) m.row_labels.push_back(i + 1);
    for (int j = 0; j < counts.cols(); ++j) m.col_labels.push_back(j + 1);
    return m;
}

double misassignment_rate(const MatchingMatrix& m) {
    if (m.N <= 0) throw usage_error("matching matrix is empty");
    long long errors = 0;
    for (int j = 0; j < m.counts.cols(); ++j) errors += m.counts.col(j).sum() - m.counts.col(j).maxCoeff();
    return static_cast<double>(errors) / m.N;
}

double pearson_chi2(const MatchingMatrix& m) {
    if (m.N <= 0) throw usage_error("matching matrix is empty");
    std::vector<int> keep;
    for (int j = 0; j < m.counts.cols(); ++j)
        if (m.counts.col(j).sum() > 0) keep.push_back(j);
    const Eigen::VectorXd rows = m.counts.cast<double>().rowwise().sum();
    if (keep.empty() || (rows.array() <= 0.0).any()) throw usage_error("matching matrix has an empty true class");
    const double N = m.N;
    double chi2 = 0.0;
    for (int j : keep) {
        const double col = m.counts.col(j).sum();
        for (int i = 0; i < m.counts.rows(); ++i) {
            const double E = rows[i] * col / N;
            const double d = m.counts(i, j) - E;
            chi2 += d * d / E;
        }
    }
    return chi2;
}

}  // namespace hrgsdp
