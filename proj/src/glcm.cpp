#include "glcm.hpp"

#include "error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace hrgsdp {

namespace {

// Linear-interpolation sample quantile of a sorted sample (the "type 7" rule).
double sorted_quantile(std::span<const double> sorted, double p) {
    const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace

void GrayImage::validate() const {
    if (pixels.size() == 0) throw data_error("image is empty");
    if (mask && (mask->rows() != pixels.rows() || mask->cols() != pixels.cols())) {
        throw data_error("mask shape does not match image shape");
    }
    const Eigen::Index inside = mask ? mask->count() : pixels.size();
    if (inside < 2) throw data_error("fewer than two pixels inside the region of interest");
}

int BinSpec::bin(double value) const {
    // edges[1..K-1] are the interior cuts; bin k covers [edges[k-1], edges[k]).
    const auto first = edges.begin() + 1;
    const auto last = edges.end() - 1;
    return static_cast<int>(std::upper_bound(first, last, value) - first) + 1;
}

Glcm Glcm::from_counts(CountMatrix counts) {
    if (counts.rows() != counts.cols() || counts.rows() < 2) throw data_error("GLCM must be square with K >= 2");
    if ((counts.array() < 0).any()) throw data_error("GLCM counts must be nonnegative");
    Glcm g;
    g.K = static_cast<int>(counts.rows());
    g.total = counts.sum();
    g.counts = std::move(counts);
    return g;
}

BinSpec quantile_bins(std::span<const double> pixel_sample, int K, double lo_q, double hi_q) {
    if (pixel_sample.empty()) throw data_error("empty intensity sample");
    if (K < 2) throw usage_error("gray-level count K must be at least 2");
    if (!(lo_q >= 0.0 && lo_q < hi_q && hi_q <= 1.0)) throw usage_error("clipping quantiles must satisfy 0 <= lo < hi <= 1");

    std::vector<double> sorted(pixel_sample.begin(), pixel_sample.end());
    std::sort(sorted.begin(), sorted.end());
    const double q_lo = sorted_quantile(sorted, lo_q);
    const double q_hi = sorted_quantile(sorted, hi_q);
    if (!(q_hi > q_lo)) throw data_error("degenerate intensity range");

    const auto first = std::lower_bound(sorted.begin(), sorted.end(), q_lo);
    const auto last = std::upper_bound(sorted.begin(), sorted.end(), q_hi);
    const std::span<const double> window(first, last);
    if (window.size() < 2 || !(window.back() > window.front())) throw data_error("degenerate intensity range");

    BinSpec spec;
    spec.K = K;
    spec.lo_q = lo_q;
    spec.hi_q = hi_q;
    spec.edges.assign(static_cast<std::size_t>(K) + 1, 0.0);
    spec.edges.front() = -std::numeric_limits<double>::infinity();
    spec.edges.back() = std::numeric_limits<double>::infinity();
    for (int k = 1; k < K; ++k) {
        spec.edges[k] = sorted_quantile(window, static_cast<double>(k) / K);
        if (k > 1 && !(spec.edges[k] > spec.edges[k - 1])) {
            throw data_error("tied gray-level cut values; the intensity sample has too few distinct values for K = " +
                             std::to_string(K));
        }
    }
    return spec;
}

Glcm build_glcm(const GrayImage& image, const BinSpec& bins, const GlcmOptions& options) {
    image.validate();
    if (bins.K < 2 || bins.edges.size() != static_cast<std::size_t>(bins.K) + 1) throw usage_error("invalid bin specification");
    if (options.offset < 1) throw usage_error("offset must be at least 1");
    if (options.neighborhood != 4 && options.neighborhood != 8) throw usage_error("neighborhood must be 4 or 8");

    const Eigen::Index rows = image.pixels.rows();
    const Eigen::Index cols = image.pixels.cols();
    Eigen::MatrixXi level(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) level(r, c) = bins.bin(image.pixels(r, c)) - 1;

    static constexpr int kDirs[8][2] = {{0, 1}, {0, -1}, {1, 0}, {-1, 0}, {1, 1}, {-1, -1}, {1, -1}, {-1, 1}};
    const int n_dirs = options.neighborhood;
    const int d = options.offset;

    CountMatrix counts = CountMatrix::Zero(bins.K, bins.K);
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) {
            if (!image.masked_in(r, c)) continue;
            for (int k = 0; k < n_dirs; ++k) {
                const Eigen::Index rr = r + kDirs[k][0] * d;
                const Eigen::Index cc = c + kDirs[k][1] * d;
                if (rr < 0 || cc < 0 || rr >= rows || cc >= cols || !image.masked_in(rr, cc)) continue;
                ++counts(level(r, c), level(rr, cc));
            }
        }
    }
    Glcm g = Glcm::from_counts(std::move(counts));
    if (g.total == 0) throw data_error("no co-occurrences: no adjacent pair of pixels inside the region of interest");
    return g;
}

int LatticeGraph::index_of(int row, int col) const {
    if (row < 0 || col < 0 || row >= K || col >= K) return -1;
    if (mode == LatticeMode::FullGrid) return row * K + col;
    if (col > row) return -1;
    return row * (row + 1) / 2 + col;
}

double LatticeGraph::w_quadratic(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    double acc = 0.0;
    for (int i = 0; i < size(); ++i) {
        double s = 0.0;
        for (int j : neighbors[i]) s += x[j];
        acc += x[i] * s;
    }
    return acc;
}

double LatticeGraph::car_quadratic(const Eigen::Ref<const Eigen::VectorXd>& x, double rho) const {
    return (D.array() * x.array().square()).sum() - rho * w_quadratic(x);
}

LatticeGraph lattice_graph(int K, LatticeMode mode) {
    if (K < 2) throw usage_error("lattice requires K >= 2");
    LatticeGraph g;
    g.K = K;
    g.mode = mode;
    for (int l = 0; l < K; ++l) {
        const int h_end = mode == LatticeMode::FullGrid ? K : l + 1;
        for (int h = 0; h < h_end; ++h) g.sites.push_back({l, h});
    }
    const int n = g.size();
    g.W = Eigen::MatrixXd::Zero(n, n);
    g.neighbors.assign(n, {});
    static constexpr int kRook[4][2] = {{-1, 0}, {0, -1}, {0, 1}, {1, 0}};
    for (int i = 0; i < n; ++i) {
        for (const auto& step : kRook) {
            const int j = g.index_of(g.sites[i].row + step[0], g.sites[i].col + step[1]);
            if (j < 0) continue;
            g.W(i, j) = 1.0;
            g.neighbors[i].push_back(j);
        }
        std::sort(g.neighbors[i].begin(), g.neighbors[i].end());
    }
    g.D = g.W.rowwise().sum();
    return g;
}

std::pair<Eigen::VectorXd, LatticeGraph> vectorize(const CountMatrix& counts, LatticeMode mode) {
    if (counts.rows() != counts.cols() || counts.rows() < 2) throw data_error("count matrix must be square with K >= 2");
    if (mode == LatticeMode::UniqueTriangle && counts != counts.transpose()) {
        throw data_error("unique-triangle vectorization requires a symmetric count matrix");
    }
    LatticeGraph graph = lattice_graph(static_cast<int>(counts.rows()), mode);
    Eigen::VectorXd z(graph.size());
    for (int i = 0; i < graph.size(); ++i) z[i] = static_cast<double>(counts(graph.sites[i].row, graph.sites[i].col));
    return {std::move(z), std::move(graph)};
}

std::pair<Eigen::VectorXd, LatticeGraph> vectorize(const Glcm& glcm, LatticeMode mode) {
    return vectorize(glcm.counts, mode);
}

CountMatrix devectorize(const Eigen::VectorXd& z, const LatticeGraph& graph) {
    if (z.size() != graph.size()) throw usage_error("vector length does not match lattice size");
    CountMatrix m = CountMatrix::Zero(graph.K, graph.K);
    for (int i = 0; i < graph.size(); ++i) {
        const auto v = static_cast<std::int64_t>(std::llround(z[i]));
        m(graph.sites[i].row, graph.sites[i].col) = v;
        if (graph.mode == LatticeMode::UniqueTriangle) m(graph.sites[i].col, graph.sites[i].row) = v;
    }
    return m;
}

const char* lattice_mode_name(LatticeMode mode) {
    return mode == LatticeMode::FullGrid ? "full_grid" : "unique_triangle";
}

LatticeMode parse_lattice_mode(const std::string& name) {
    if (name == "full_grid") return LatticeMode::FullGrid;
    if (name == "unique_triangle") return LatticeMode::UniqueTriangle;
    throw usage_error("unknown lattice mode '" + name + "' (expected full_grid or unique_triangle)");
}

}  // namespace hrgsdp
