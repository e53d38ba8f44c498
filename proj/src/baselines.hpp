#pragma once

#include "cluster.hpp"
#include "glcm.hpp"
#include "random.hpp"

#include <Eigen/Core>

#include <vector>

namespace hrgsdp {

struct FeatureVector {
    double contrast = 0.0;
    double correlation = 0.0;  // NaN when a marginal has zero variance
    double homogeneity = 0.0;
    double energy = 0.0;
    double entropy = 0.0;

    Eigen::Matrix<double, 5, 1> as_vector() const;
};

FeatureVector haralick_features(const CountMatrix& counts);

// Rows are subjects. NaN entries are replaced by the column median, then each
// column is centered and scaled to unit sample variance (constant columns become 0).
Eigen::MatrixXd prepare_features(const std::vector<FeatureVector>& features, bool standardize = true);

struct KMeansResult {
    Partition partition;
    Eigen::MatrixXd centers;  // row k - 1 is the center of label k
    double within_ss = 0.0;
    std::vector<double> restart_within_ss;
};

// Lloyd's algorithm from random distinct starting rows, best of `restarts`.
KMeansResult kmeans(const Eigen::MatrixXd& X, int g, Rng& rng, int restarts = 20, int max_iter = 300);

struct GmmResult {
    Partition partition;
    double log_likelihood = 0.0;
    std::vector<double> weights;
    std::vector<Eigen::VectorXd> means;
    std::vector<Eigen::MatrixXd> covariances;
    std::vector<double> ll_history;  // EM trace of the winning restart
    bool converged = true;
};

// Full-covariance EM, each restart seeded from a single k-means run.
GmmResult gmm(const Eigen::MatrixXd& X, int g, Rng& rng, int restarts = 10, int max_iter = 500, double reg = 1e-6,
              double tol = 1e-8);

// Mixture log-likelihood of X under the given parameters.
double gmm_log_likelihood(const Eigen::MatrixXd& X, const std::vector<double>& weights,
                          const std::vector<Eigen::VectorXd>& means, const std::vector<Eigen::MatrixXd>& covariances);

Partition feature_kmeans(const std::vector<FeatureVector>& features, int g, Rng& rng, bool standardize = true);
Partition feature_hclust(const std::vector<FeatureVector>& features, int g, bool standardize = true);
Partition feature_gmm(const std::vector<FeatureVector>& features, int g, Rng& rng, bool standardize = true);

struct MatchingMatrix {
    Eigen::MatrixXi counts;  // true class x predicted cluster
    int N = 0;
    std::vector<int> row_labels;
    std::vector<int> col_labels;
};

MatchingMatrix matching_matrix(const std::vector<int>& true_labels, const std::vector<int>& pred_labels);
MatchingMatrix matching_matrix_from_counts(const Eigen::MatrixXi& counts);

double misassignment_rate(const MatchingMatrix& m);
double pearson_chi2(const MatchingMatrix& m);

}  // namespace hrgsdp
