#pragma once

#include "sampler.hpp"

#include <Eigen/Core>

#include <vector>

namespace hrgsdp {

// One agglomeration step. Ids follow the usual merge-list convention: leaves
// are 0..T-1 and the cluster created by step k gets id T + k.
struct Merge {
    int a = 0;
    int b = 0;
    double height = 0.0;
    int size = 0;
};

struct Dendrogram {
    int n_leaves = 0;
    std::vector<Merge> merges;
    std::vector<int> leaf_order;
};

struct Partition {
    std::vector<int> labels;  // 1..g, numbered by first appearance
    int g = 0;
};

// T x n matrix of per-subject posterior means of the assigned atom.
Eigen::MatrixXd posterior_mean_surfaces(const ChainTrace& trace);

// Pairwise squared Euclidean distances between rows.
Eigen::MatrixXd dissimilarity(const Eigen::MatrixXd& surfaces);

// Ward agglomeration through the Lance-Williams recurrence on d. Ties go to the
// lexicographically smallest pair of active cluster indices, where a merged
// cluster keeps the smaller index of its two parts.
Dendrogram ward_cluster(const Eigen::MatrixXd& d);

Partition cut(const Dendrogram& dend, int g);

// Sum over clusters of squared distances to the cluster mean.
double within_dispersion(const Eigen::MatrixXd& surfaces, const Partition& partition);

struct KlReport {
    int rank = 0;
    std::vector<double> W;     // W[g] for g = 1..g_max+1 (index 0 unused)
    std::vector<double> diff;  // DIFF(g) for g = 2..g_max+1
    std::vector<double> kl;    // KL(g) for g = 2..g_max
};

// W_g at or below 1e-12 W_1 counts as exactly zero.
KlReport krzanowski_lai(const Eigen::MatrixXd& surfaces, const Dendrogram& dend, int g_max);
int krzanowski_lai_rank(const Eigen::MatrixXd& surfaces, const Dendrogram& dend, int g_max);

}  // namespace hrgsdp
