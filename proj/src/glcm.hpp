#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace hrgsdp {

using CountMatrix = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;
using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

struct GrayImage {
    Eigen::MatrixXd pixels;
    std::optional<BoolMatrix> mask;

    bool masked_in(Eigen::Index r, Eigen::Index c) const { return !mask || (*mask)(r, c); }
    // Throws a data error when dimensions disagree or fewer than two pixels are in the ROI.
    void validate() const;
};

// Gray-level cut values. edges[0] = -inf and edges[K] = +inf, so the outer
// bins absorb everything below the low quantile and above the high quantile.
struct BinSpec {
    int K = 0;
    std::vector<double> edges;
    double lo_q = 0.025;
    double hi_q = 0.975;

    // 1-based gray level of an intensity.
    int bin(double value) const;
};

struct Glcm {
    int K = 0;
    CountMatrix counts;
    std::int64_t total = 0;

    static Glcm from_counts(CountMatrix counts);
};

enum class LatticeMode { UniqueTriangle, FullGrid };

struct Site {
    int row = 0;  // 0-based gray level l
    int col = 0;  // 0-based gray level h
};

// Rook-adjacency graph over the cells of a K x K co-occurrence lattice.
struct LatticeGraph {
    int K = 0;
    LatticeMode mode = LatticeMode::FullGrid;
    std::vector<Site> sites;
    Eigen::MatrixXd W;
    Eigen::VectorXd D;
    // Sparse copy of W as neighbor lists, for O(edges) quadratic forms.
    std::vector<std::vector<int>> neighbors;

    int size() const { return static_cast<int>(sites.size()); }
    // Site index of cell (l, h), or -1 when the cell is not part of the lattice.
    int index_of(int row, int col) const;
    // x' W x through the neighbor lists.
    double w_quadratic(const Eigen::Ref<const Eigen::VectorXd>& x) const;
    // x' D x - rho x' W x.
    double car_quadratic(const Eigen::Ref<const Eigen::VectorXd>& x, double rho) const;
};

struct GlcmOptions {
    int offset = 1;
    // 8: horizontal, vertical and both diagonals. 4: horizontal and vertical only.
    int neighborhood = 8;
};

BinSpec quantile_bins(std::span<const double> pixel_sample, int K, double lo_q = 0.025, double hi_q = 0.975);

Glcm build_glcm(const GrayImage& image, const BinSpec& bins, const GlcmOptions& options = {});

LatticeGraph lattice_graph(int K, LatticeMode mode);

std::pair<Eigen::VectorXd, LatticeGraph> vectorize(const Glcm& glcm, LatticeMode mode);
// Same for a raw count matrix; the triangle mode requires a symmetric matrix.
std::pair<Eigen::VectorXd, LatticeGraph> vectorize(const CountMatrix& counts, LatticeMode mode);
// Inverse of vectorize for symmetric (triangle) or arbitrary (full grid) matrices.
CountMatrix devectorize(const Eigen::VectorXd& z, const LatticeGraph& graph);

const char* lattice_mode_name(LatticeMode mode);
LatticeMode parse_lattice_mode(const std::string& name);

}  // namespace hrgsdp
