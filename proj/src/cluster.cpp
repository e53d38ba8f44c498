#include "cluster.hpp"

#include "error.hpp"

#include <cmath>
#include <limits>
#include <numeric>

namespace hrgsdp {

namespace {

constexpr double kDispersionFloor = 1e-12;

}  // namespace

Eigen::MatrixXd posterior_mean_surfaces(const ChainTrace& trace) {
    if (trace.records.empty()) throw data_error("trace has no post-burn-in iterations");
    return trace.theta_sum.transpose() / static_cast<double>(trace.records.size());
}

Eigen::MatrixXd dissimilarity(const Eigen::MatrixXd& surfaces) {
    const Eigen::Index T = surfaces.rows();
    if (T < 2) throw usage_error("dissimilarity needs at least two subjects");
    Eigen::MatrixXd d = Eigen::MatrixXd::Zero(T, T);
    for (Eigen::Index u = 0; u < T; ++u) {
        for (Eigen::Index v = u + 1; v < T; ++v) {
            d(u, v) = d(v, u) = (surfaces.row(u) - surfaces.row(v)).squaredNorm();
        }
    }
    return d;
}

Dendrogram ward_cluster(const Eigen::MatrixXd& d) {
    const int T = static_cast<int>(d.rows());
    if (T < 1 || d.cols() != T) throw usage_error("dissimilarity matrix must be square and nonempty");
    Eigen::MatrixXd dist = d;
    std::vector<int> size(T, 1);
    std::vector<int> id(T);
    std::iota(id.begin(), id.end(), 0);
    std::vector<bool> active(T, true);
    std::vector<std::vector<int>> members(T);
    for (int i = 0; i < T; ++i) members[i] = {i};

    Dendrogram dend;
    dend.n_leaves = T;
    for (int step = 0; step + 1 < T; ++step) {
        int bi = -1, bj = -1;
        double best = std::numeric_limits<double>::infinity();
        for (int i = 0; i < T; ++i) {
            if (!active[i]) continue;
            for (int j = i + 1; j < T; ++j) {
                if (active[j] && dist(i, j) < best) {
                    best = dist(i, j);
                    bi = i;
                    bj = j;
                }
            }
        }
        if (bi < 0) throw numerical_error("Ward agglomeration found no finite merge distance");

        const double ni = size[bi], nj = size[bj];
        for (int k = 0; k < T; ++k) {
            if (!active[k] || k == bi || k == bj) continue;
            const double nk = size[k];
            const double v = ((ni + nk) * dist(k, bi) + (nj + nk) * dist(k, bj) - nk * dist(bi, bj)) / (ni + nj + nk);
            dist(k, bi) = dist(bi, k) = v;
        }
        dend.merges.push_back({std::min(id[bi], id[bj]), std::max(id[bi], id[bj]), best, size[bi] + size[bj]});
        size[bi] += size[bj];
        id[bi] = T + step;
        active[bj] = false;
        members[bi].insert(members[bi].end(), members[bj].begin(), members[bj].end());
        members[bj].clear();
    }
    for (int i = 0; i < T; ++i) {
        if (active[i]) dend.leaf_order = members[i];
    }
    return dend;
}

Partition cut(const Dendrogram& dend, int g) {
    const int T = dend.n_leaves;
    if (g < 1 || g > T) throw usage_error("cluster count must lie in 1.." + std::to_string(T));
    // Union-find over leaves, replaying the first T - g merges.
    std::vector<int> parent(T);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](int x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    };
    std::vector<int> rep(2 * T - 1, -1);  // merge-list id -> a leaf in that cluster
    for (int i = 0; i < T; ++i) rep[i] = i;
    for (int k = 0; k < T - g; ++k) {
        const Merge& m = dend.merges[k];
        const int ra = find(rep[m.a]);
        const int rb = find(rep[m.b]);
        parent[std::max(ra, rb)] = std::min(ra, rb);
        rep[T + k] = std::min(ra, rb);
    }
    Partition p;
    p.labels.resize(T);
    std::vector<int> label_of(T, 0);
    for (int i = 0; i < T; ++i) {
        const int r = find(i);
        if (label_of[r] == 0) label_of[r] = ++p.g;
        p.labels[i] = label_of[r];
    }
    return p;
}

double within_dispersion(const Eigen::MatrixXd& surfaces, const Partition& partition) {
    if (static_cast<Eigen::Index>(partition.labels.size()) != surfaces.rows()) {
        throw usage_error("partition length does not match the number of subjects");
    }
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(partition.g, surfaces.cols());
    std::vector<int> counts(partition.g, 0);
    for (Eigen::Index t = 0; t < surfaces.rows(); ++t) {
        sums.row(partition.labels[t] - 1) += surfaces.row(t);
        ++counts[partition.labels[t] - 1];
    }
    double w = 0.0;
    for (Eigen::Index t = 0; t < surfaces.rows(); ++t) {
        const int c = partition.labels[t] - 1;
        w += (surfaces.row(t) - sums.row(c) / counts[c]).squaredNorm();
    }
    return w;
}

KlReport krzanowski_lai(const Eigen::MatrixXd& surfaces, const Dendrogram& dend, int g_max) {
    const int T = dend.n_leaves;
    if (g_max < 2 || g_max > T - 1) {
        throw usage_error("g_max must lie in 2.." + std::to_string(T - 1) + " for " + std::to_string(T) + " subjects");
    }
    const double expo = 2.0 / static_cast<double>(surfaces.cols());
    KlReport r;
    r.W.assign(g_max + 2, 0.0);
    for (int g = 1; g <= g_max + 1; ++g) r.W[g] = within_dispersion(surfaces, cut(dend, g));
    // Clusters whose members share one surface leave only round-off in W; left
    // as is, ratios of that noise would dominate the criterion.
    const double floor = kDispersionFloor * r.W[1];
    for (int g = 2; g <= g_max + 1; ++g)
        if (r.W[g] <= floor) r.W[g] = 0.0;
    for (int g = 2; g <= g_max + 1; ++g) {
        r.diff.push_back(std::pow(g - 1.0, expo) * r.W[g - 1] - std::pow(static_cast<double>(g), expo) * r.W[g]);
    }
    double best = -1.0;
    for (int g = 2; g <= g_max; ++g) {
        const double num = std::abs(r.diff[g - 2]);
        const double den = std::abs(r.diff[g - 1]);
        double kl;
        if (den == 0.0) kl = num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
        else kl = num / den;
        r.kl.push_back(kl);
        if (kl > best) {
            best = kl;
            r.rank = g;
        }
    }
    return r;
}

int krzanowski_lai_rank(const Eigen::MatrixXd& surfaces, const Dendrogram& dend, int g_max) {
    return krzanowski_lai(surfaces, dend, g_max).rank;
}

}  // namespace hrgsdp
