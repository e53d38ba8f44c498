#include "pipeline.hpp"

#include "error.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_map>

namespace hrgsdp {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

const std::vector<ConfigKey> kKeys = {
    {"profile", "full", "preset for chain length and simulation scale: full or desk"},
    {"seed", "1", "master RNG seed; recorded in every artifact"},
    {"threads", "0", "worker threads for replicate studies (0 = all cores)"},
    {"lattice", "auto", "lattice mode: unique_triangle, full_grid, or auto (triangle iff all matrices symmetric)"},
    {"intercept", "false", "prepend an intercept to the covariate row"},
    {"include_total", "true", "include the GLCM total N_t as a covariate"},
    {"n_iter", "20000", "MCMC iterations"},
    {"n_burn", "10000", "burn-in iterations discarded before summaries"},
    {"beta0", "0", "prior mean of every regression coefficient"},
    {"sigma_beta", "100000", "prior variance of every regression coefficient"},
    {"a_tau", "0.0001", "inverse-gamma shape for tau2"},
    {"b_tau", "0.0001", "inverse-gamma scale for tau2"},
    {"a_sigma", "0.0001", "inverse-gamma shape for sigma2"},
    {"b_sigma", "0.0001", "inverse-gamma scale for sigma2"},
    {"a_nu", "1", "gamma shape for the DP concentration"},
    {"b_nu", "1", "gamma rate for the DP concentration"},
    {"tau2_init", "1", "starting tau2 (<= 0: scaled from the data)"},
    {"sigma2_init", "1", "starting sigma2 (<= 0: scaled from the data)"},
    {"split_merge_moves", "-1", "merge-split proposals per sweep (-1: one per five subjects, 0: off)"},
    {"check_invariants", "false", "verify rounding and partition invariants after every sweep"},
    {"g", "0", "fixed number of clusters for cluster (0: Krzanowski-Lai choice)"},
    {"g_max", "10", "largest rank considered by Krzanowski-Lai (capped at T-1)"},
    {"surfaces_format", "bin", "posterior-mean surface file format: bin or tsv"},
    {"glcm.K", "16", "gray levels for build-glcm"},
    {"glcm.lo_q", "0.025", "lower clipping quantile of pooled intensities"},
    {"glcm.hi_q", "0.975", "upper clipping quantile of pooled intensities"},
    {"glcm.offset", "1", "pixel offset for co-occurrence"},
    {"glcm.neighborhood", "8", "co-occurrence directions: 8 (with diagonals) or 4"},
    {"sim.K", "16", "simulated GLCM size"},
    {"sim.c_values", "5,5.5,6,6.5,7", "class shifts c; one class per value"},
    {"sim.s", "10", "latent covariance scale s for simulate"},
    {"sim.skew", "none", "skew-normal shape a1,a2 (none: bivariate normal)"},
    {"sim.subjects_per_class", "20", "subjects per simulated class"},
    {"sim.points", "10000", "latent points per simulated surface"},
    {"sim.total_min", "500", "smallest simulated GLCM total"},
    {"sim.total_max", "20000", "largest simulated GLCM total"},
    {"replicates", "100", "replicates for simulate and replicate"},
    {"replicate.s_values", "10,15,17", "noise scales s swept by replicate"},
    {"replicate.methods", "hrgsdp,hc,km,gmm", "methods scored by replicate"},
    {"baseline.standardize", "true", "standardize Haralick features before baseline clustering"},
};

const std::map<std::string, std::map<std::string, std::string>> kProfiles = {
    {"full", {}},
    {"desk",
     {{"n_iter", "4000"}, {"n_burn", "2000"}, {"sim.subjects_per_class", "10"}, {"sim.points", "4000"}, {"replicates", "10"}}},
};

const ConfigKey* find_key(const std::string& key) {
    for (const auto& k : kKeys)
        if (key == k.name) return &k;
    return nullptr;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    std::stringstream ss(s);
    while (std::getline(ss, cur, ',')) {
        cur = trim(cur);
        if (!cur.empty()) out.push_back(cur);
    }
    return out;
}

// Config values are user input, so parse failures are usage errors.
template <class F>
auto as_usage(const std::string& key, F&& f) {
    try {
        return f();
    } catch (const Error& e) {
        throw usage_error("config key '" + key + "': " + e.what());
    }
}

bool is_symmetric(const CountMatrix& m) { return m.rows() == m.cols() && m == m.transpose(); }

std::string fmt_s(double s) { return format_double(s); }

std::vector<std::pair<std::string, int>> read_labels(const std::string& path) {
    const Table t = read_table(path);
    if (t.header.size() < 2) throw data_error(path + ": expected subject id and label columns");
    // A column named label or cluster wins, so a cohort manifest serves as truth.
    std::size_t col = 1;
    for (std::size_t j = 1; j < t.header.size(); ++j)
        if (t.header[j] == "label" || t.header[j] == "cluster") col = j;
    std::vector<std::pair<std::string, int>> out;
    for (const auto& r : t.rows) out.emplace_back(r[0], static_cast<int>(parse_int(r[col], path)));
    return out;
}

void write_partition(const std::string& path, const ArtifactStamp& stamp, const std::vector<std::string>& ids,
                     const Partition& p) {
    Table t;
    t.header = {"subject_id", "cluster"};
    for (std::size_t i = 0; i < ids.size(); ++i) t.rows.push_back({ids[i], std::to_string(p.labels[i])});
    write_table(path, stamp, t);
}

void write_metrics(const std::string& path, const ArtifactStamp& stamp, const Metrics& m) {
    Table t;
    t.header = {"metric", "value"};
    t.rows.push_back({"n_subjects", std::to_string(m.matching.N)});
    t.rows.push_back({"misassignment", format_double(m.misassignment)});
    t.rows.push_back({"chi2", format_double(m.chi2)});
    write_table(path, stamp, t);

    std::ofstream out(path.substr(0, path.size() - 4) + "_matching.tsv");
    if (!out) throw data_error("cannot write matching matrix next to " + path);
    out << stamp.comment() << "\n# rows: true class, columns: predicted cluster\nclass";
    for (int c : m.matching.col_labels) out << "\t" << c;
    out << '\n';
    for (Eigen::Index i = 0; i < m.matching.counts.rows(); ++i) {
        out << m.matching.row_labels[i];
        for (Eigen::Index j = 0; j < m.matching.counts.cols(); ++j) out << "\t" << m.matching.counts(i, j);
        out << '\n';
    }
}

std::vector<double> feature_column(const std::vector<IterationRecord>& recs, double IterationRecord::*field) {
    std::vector<double> v;
    v.reserve(recs.size());
    for (const auto& r : recs) v.push_back(r.*field);
    return v;
}

double safe_geweke(const std::vector<double>& series) {
    if (series.size() < 100) return kNaN;
    try {
        return geweke_z(series);
    } catch (const Error&) {
        return kNaN;
    }
}

double mean_of(const std::vector<double>& v) {
    return v.empty() ? kNaN : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sd_of(const std::vector<double>& v) {
    if (v.size() < 2) return kNaN;
    const double m = mean_of(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

std::string fmt_or_na(double v) { return std::isnan(v) ? "NA" : format_double(v); }

}  // namespace

const std::vector<ConfigKey>& config_keys() { return kKeys; }

void Config::set(const std::string& key, const std::string& value) {
    if (!find_key(key)) throw usage_error("unknown config key '" + key + "'");
    const std::string v = trim(value);
    if (key == "profile" && !kProfiles.count(v)) throw usage_error("unknown profile '" + v + "' (expected full or desk)");
    explicit_[key] = v;
}

void Config::set_assignment(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw usage_error("expected key=value, got '" + assignment + "'");
    set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

void Config::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw usage_error("cannot open config file " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        try {
            set_assignment(line);
        } catch (const Error& e) {
            throw usage_error(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

std::string Config::get(const std::string& key) const {
    const ConfigKey* k = find_key(key);
    if (!k) throw usage_error("unknown config key '" + key + "'");
    if (auto it = explicit_.find(key); it != explicit_.end()) return it->second;
    if (key != "profile") {
        const auto& prof = kProfiles.at(get("profile"));
        if (auto it = prof.find(key); it != prof.end()) return it->second;
    }
    return k->default_value;
}

long long Config::get_int(const std::string& key) const {
    return as_usage(key, [&] { return parse_int(get(key), key); });
}

double Config::get_double(const std::string& key) const {
    return as_usage(key, [&] {
        const double v = parse_double(get(key), key);
        if (std::isnan(v)) throw usage_error("value is not a number");
        return v;
    });
}

bool Config::get_bool(const std::string& key) const {
    const std::string v = get(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw usage_error("config key '" + key + "': expected true or false, got '" + v + "'");
}

std::vector<double> Config::get_list(const std::string& key) const {
    return as_usage(key, [&] {
        std::vector<double> out;
        for (const auto& w : split_commas(get(key))) out.push_back(parse_double(w, key));
        return out;
    });
}

std::vector<std::string> Config::get_words(const std::string& key) const { return split_commas(get(key)); }

std::uint64_t Config::seed() const {
    const long long s = get_int("seed");
    if (s < 0) throw usage_error("seed must be nonnegative");
    return static_cast<std::uint64_t>(s);
}

std::uint64_t Config::hash() const {
    std::string canon;
    for (const auto& k : kKeys) {
        if (std::string(k.name) == "threads") continue;
        canon += k.name;
        canon += '=';
        canon += get(k.name);
        canon += '\n';
    }
    return fnv1a(canon);
}

std::string Config::dump() const {
    std::vector<std::string> names;
    for (const auto& k : kKeys) names.emplace_back(k.name);
    std::sort(names.begin(), names.end());
    std::string out;
    for (const auto& n : names) out += n + " = " + get(n) + "\n";
    return out;
}

Hyperparams hyperparams_from(const Config& cfg, int n_covariates) {
    Hyperparams hp = Hyperparams::defaults(n_covariates);
    hp.beta0 = Eigen::VectorXd::Constant(n_covariates, cfg.get_double("beta0"));
    hp.Sigma_beta = cfg.get_double("sigma_beta") * Eigen::MatrixXd::Identity(n_covariates, n_covariates);
    hp.a_tau = cfg.get_double("a_tau");
    hp.b_tau = cfg.get_double("b_tau");
    hp.a_sigma = cfg.get_double("a_sigma");
    hp.b_sigma = cfg.get_double("b_sigma");
    hp.a_nu = cfg.get_double("a_nu");
    hp.b_nu = cfg.get_double("b_nu");
    hp.tau2_init = cfg.get_double("tau2_init");
    hp.sigma2_init = cfg.get_double("sigma2_init");
    hp.split_merge_moves = static_cast<int>(cfg.get_int("split_merge_moves"));
    hp.n_iter = static_cast<int>(cfg.get_int("n_iter"));
    hp.n_burn = static_cast<int>(cfg.get_int("n_burn"));
    hp.seed = cfg.seed();
    hp.validate(n_covariates);
    return hp;
}

SimConfig sim_config_from(const Config& cfg) {
    SimConfig sc;
    sc.K = static_cast<int>(cfg.get_int("sim.K"));
    sc.c_values = cfg.get_list("sim.c_values");
    sc.s = cfg.get_double("sim.s");
    const std::string skew = cfg.get("sim.skew");
    if (skew != "none" && !skew.empty()) {
        const auto a = cfg.get_list("sim.skew");
        if (a.size() != 2) throw usage_error("sim.skew needs two comma-separated values");
        sc.skew = Eigen::Vector2d(a[0], a[1]);
    }
    sc.subjects_per_class = static_cast<int>(cfg.get_int("sim.subjects_per_class"));
    sc.points_per_surface = static_cast<int>(cfg.get_int("sim.points"));
    sc.total_min = static_cast<int>(cfg.get_int("sim.total_min"));
    sc.total_max = static_cast<int>(cfg.get_int("sim.total_max"));
    sc.seed = cfg.seed();
    sc.validate();
    return sc;
}

ChainOptions chain_options_from(const Config& cfg) {
    ChainOptions o;
    o.check_invariants = cfg.get_bool("check_invariants");
    return o;
}

Cohort make_cohort(const Config& cfg, std::vector<std::string> ids, std::vector<CountMatrix> counts,
                   std::vector<int> labels, const std::vector<std::vector<double>>& extra_covariates) {
    if (ids.empty()) throw data_error("cohort is empty");
    if (ids.size() != counts.size()) throw usage_error("ids and count matrices differ in length");
    if (!labels.empty() && labels.size() != ids.size()) throw usage_error("labels and ids differ in length");
    std::set<std::string> seen;
    for (const auto& id : ids)
        if (!seen.insert(id).second) throw data_error("duplicate subject id '" + id + "'");
    const Eigen::Index K = counts.front().rows();
    for (std::size_t t = 0; t < counts.size(); ++t) {
        if (counts[t].rows() != K || counts[t].cols() != K) {
            throw data_error("subject '" + ids[t] + "' has a " + std::to_string(counts[t].rows()) + "x" +
                             std::to_string(counts[t].cols()) + " matrix, expected " + std::to_string(K) + "x" +
                             std::to_string(K));
        }
    }

    const std::string lattice = cfg.get("lattice");
    LatticeMode mode;
    if (lattice == "auto") {
        mode = std::all_of(counts.begin(), counts.end(), is_symmetric) ? LatticeMode::UniqueTriangle : LatticeMode::FullGrid;
    } else {
        mode = as_usage("lattice", [&] { return parse_lattice_mode(lattice); });
    }

    std::vector<Eigen::VectorXd> z;
    std::vector<double> totals;
    Cohort c;
    for (std::size_t t = 0; t < counts.size(); ++t) {
        auto [vec, graph] = vectorize(counts[t], mode);
        if (t == 0) c.graph = std::move(graph);
        totals.push_back(static_cast<double>(counts[t].sum()));
        if (!(totals.back() > 0.0)) throw data_error("subject '" + ids[t] + "' has an all-zero matrix");
        z.push_back(std::move(vec));
    }
    CovariateOptions copt;
    copt.intercept = cfg.get_bool("intercept");
    copt.include_total = cfg.get_bool("include_total");
    c.subjects = make_subjects(ids, z, totals, copt);
    if (!extra_covariates.empty()) {
        for (std::size_t t = 0; t < c.subjects.size(); ++t) {
            Eigen::VectorXd& x = c.subjects[t].x;
            const auto& extra = extra_covariates.at(t);
            const Eigen::Index p0 = x.size();
            x.conservativeResize(p0 + static_cast<Eigen::Index>(extra.size()));
            for (std::size_t j = 0; j < extra.size(); ++j) x[p0 + static_cast<Eigen::Index>(j)] = extra[j];
        }
    }
    if (c.subjects.front().x.size() == 0) throw usage_error("no covariates: enable intercept or include_total");
    c.ids = std::move(ids);
    c.counts = std::move(counts);
    c.labels = std::move(labels);
    return c;
}

Cohort load_cohort(const Config& cfg, const std::string& manifest_path) {
    const Table t = read_table(manifest_path);
    const int id_col = t.require("subject_id", manifest_path);
    const int path_col = t.require("path", manifest_path);
    const int label_col = t.find("label");
    std::vector<int> extra_cols;
    for (int i = 0; i < static_cast<int>(t.header.size()); ++i)
        if (i != id_col && i != path_col && i != label_col) extra_cols.push_back(i);

    std::vector<std::string> ids;
    std::vector<CountMatrix> counts;
    std::vector<int> labels;
    std::vector<std::vector<double>> extra;
    for (const auto& r : t.rows) {
        ids.push_back(r[id_col]);
        const std::string p = resolve_path(manifest_path, r[path_col]);
        if (!std::filesystem::exists(p)) throw data_error("subject '" + r[id_col] + "': missing file " + p);
        counts.push_back(read_count_matrix(p));
        if (label_col >= 0) labels.push_back(static_cast<int>(parse_int(r[label_col], manifest_path + " label")));
        std::vector<double> x;
        for (int c : extra_cols) {
            x.push_back(parse_double(r[c], manifest_path + " column " + t.header[c]));
            if (std::isnan(x.back())) throw data_error(manifest_path + ": missing covariate " + t.header[c]);
        }
        extra.push_back(std::move(x));
    }
    if (extra_cols.empty()) extra.clear();
    return make_cohort(cfg, std::move(ids), std::move(counts), std::move(labels), extra);
}

BinSpec read_bins(const std::string& path) {
    const Table t = read_table(path);
    const int c = t.require("edge", path);
    BinSpec b;
    for (const auto& r : t.rows) b.edges.push_back(parse_double(r[c], path));
    if (b.edges.size() < 3) throw data_error(path + ": need at least three edges");
    b.K = static_cast<int>(b.edges.size()) - 1;
    for (std::size_t i = 1; i < b.edges.size(); ++i)
        if (!(b.edges[i] > b.edges[i - 1])) throw data_error(path + ": edges must increase");
    return b;
}

void build_glcm_command(const Config& cfg, const std::string& image_manifest, const std::string& out_dir,
                        const std::string& bins_path) {
    const Table t = read_table(image_manifest);
    const int id_col = t.require("subject_id", image_manifest);
    const int img_col = t.require("image", image_manifest);
    const int mask_col = t.find("mask");
    const int label_col = t.find("label");

    std::vector<std::string> ids;
    std::vector<GrayImage> images;
    std::set<std::string> seen;
    for (const auto& r : t.rows) {
        if (!seen.insert(r[id_col]).second) throw data_error("duplicate subject id '" + r[id_col] + "'");
        GrayImage img;
        img.pixels = read_real_matrix(resolve_path(image_manifest, r[img_col]));
        if (mask_col >= 0 && r[mask_col] != "-" && !r[mask_col].empty()) {
            img.mask = read_mask(resolve_path(image_manifest, r[mask_col]));
        }
        img.validate();
        ids.push_back(r[id_col]);
        images.push_back(std::move(img));
    }
    if (images.empty()) throw data_error(image_manifest + ": no images");

    BinSpec bins;
    if (!bins_path.empty()) {
        bins = read_bins(bins_path);
    } else {
        std::vector<double> pooled;
        for (const auto& img : images)
            for (Eigen::Index i = 0; i < img.pixels.rows(); ++i)
                for (Eigen::Index j = 0; j < img.pixels.cols(); ++j)
                    if (img.masked_in(i, j)) pooled.push_back(img.pixels(i, j));
        bins = quantile_bins(pooled, static_cast<int>(cfg.get_int("glcm.K")), cfg.get_double("glcm.lo_q"),
                             cfg.get_double("glcm.hi_q"));
    }
    GlcmOptions opt;
    opt.offset = static_cast<int>(cfg.get_int("glcm.offset"));
    opt.neighborhood = static_cast<int>(cfg.get_int("glcm.neighborhood"));

    ensure_directory(out_dir);
    const ArtifactStamp stamp = cfg.stamp();
    Table bt;
    bt.header = {"index", "edge"};
    for (std::size_t i = 0; i < bins.edges.size(); ++i) bt.rows.push_back({std::to_string(i), format_double(bins.edges[i])});
    write_table(join_path(out_dir, "bins.tsv"), stamp, bt);

    Table mt;
    mt.header = {"subject_id", "path"};
    if (label_col >= 0) mt.header.push_back("label");
    for (std::size_t k = 0; k < images.size(); ++k) {
        const Glcm g = build_glcm(images[k], bins, opt);
        const std::string name = ids[k] + ".glcm.tsv";
        write_count_matrix(join_path(out_dir, name), g.counts, stamp);
        mt.rows.push_back({ids[k], name});
        if (label_col >= 0) mt.rows.back().push_back(t.rows[k][label_col]);
    }
    write_table(join_path(out_dir, "manifest.tsv"), stamp, mt);
}

FitSummary fit_command(const Config& cfg, const std::string& manifest_path, const std::string& out_dir) {
    const Cohort cohort = load_cohort(cfg, manifest_path);
    const int p = static_cast<int>(cohort.subjects.front().x.size());
    const Hyperparams hp = hyperparams_from(cfg, p);
    ChainOptions opt = chain_options_from(cfg);
    const int step = std::max(1, hp.n_iter / 10);
    opt.observer = [&](int iter, const ModelState& s) {
        if (iter % step == 0 || iter == hp.n_iter) {
            log_info("iteration " + std::to_string(iter) + "/" + std::to_string(hp.n_iter) + ", " +
                     std::to_string(s.n_clusters()) + " clusters");
        }
    };
    const ChainTrace trace = run_chain(cohort.subjects, cohort.graph, hp, opt);

    ensure_directory(out_dir);
    const ArtifactStamp stamp = cfg.stamp();

    Table tt;
    tt.header = {"iteration"};
    for (int j = 0; j < p; ++j) tt.header.push_back("beta_" + std::to_string(j + 1));
    for (const char* h : {"tau2", "sigma2", "rho", "nu", "n_clusters"}) tt.header.emplace_back(h);
    for (const auto& r : trace.records) {
        std::vector<std::string> row{std::to_string(r.iteration)};
        for (int j = 0; j < p; ++j) row.push_back(format_double(r.beta[j]));
        for (double v : {r.tau2, r.sigma2, r.rho, r.nu}) row.push_back(format_double(v));
        row.push_back(std::to_string(r.n_clusters));
        tt.rows.push_back(std::move(row));
    }
    write_table(join_path(out_dir, "trace.tsv"), stamp, tt);

    const Eigen::MatrixXd surfaces = posterior_mean_surfaces(trace);
    const std::string fmt = cfg.get("surfaces_format");
    if (fmt == "bin") write_surfaces_bin(join_path(out_dir, "surfaces.bin"), surfaces, stamp);
    else if (fmt == "tsv") write_surfaces_tsv(join_path(out_dir, "surfaces.tsv"), cohort.ids, surfaces, stamp);
    else throw usage_error("surfaces_format must be bin or tsv");

    Table st;
    st.header = {"subject_id", "total", "gamma"};
    if (!cohort.labels.empty()) st.header.push_back("label");
    for (std::size_t t = 0; t < cohort.subjects.size(); ++t) {
        const Subject& s = cohort.subjects[t];
        st.rows.push_back({s.id, format_double(s.total), format_double(s.gamma)});
        if (!cohort.labels.empty()) st.rows.back().push_back(std::to_string(cohort.labels[t]));
    }
    write_table(join_path(out_dir, "subjects.tsv"), stamp, st);

    FitSummary sum;
    sum.n_subjects = trace.n_subjects;
    sum.n_sites = trace.n_sites;
    sum.iterations = hp.n_iter;
    std::vector<double> k;
    for (const auto& r : trace.records) k.push_back(r.n_clusters);
    sum.mean_clusters = mean_of(k);
    for (int j = 0; j < p; ++j) {
        std::vector<double> b;
        for (const auto& r : trace.records) b.push_back(r.beta[j]);
        sum.geweke["beta_" + std::to_string(j + 1)] = safe_geweke(b);
    }
    sum.geweke["tau2"] = safe_geweke(feature_column(trace.records, &IterationRecord::tau2));
    sum.geweke["sigma2"] = safe_geweke(feature_column(trace.records, &IterationRecord::sigma2));
    sum.geweke["rho"] = safe_geweke(feature_column(trace.records, &IterationRecord::rho));
    sum.geweke["nu"] = safe_geweke(feature_column(trace.records, &IterationRecord::nu));

    std::ofstream man(join_path(out_dir, "run_manifest.txt"));
    if (!man) throw data_error("cannot write run manifest in " + out_dir);
    man << stamp.comment() << '\n';
    man << "[run]\n";
    man << "subjects = " << sum.n_subjects << "\nsites = " << sum.n_sites << "\nlattice = "
        << lattice_mode_name(cohort.graph.mode) << "\ncovariates = " << p << "\nn_iter = " << hp.n_iter
        << "\nn_burn = " << hp.n_burn << "\nseed = " << hp.seed << "\nmean_clusters = " << format_double(sum.mean_clusters)
        << "\n[config]\n"
        << cfg.dump() << "[geweke_z]\n";
    for (const auto& [name, z] : sum.geweke) man << name << " = " << fmt_or_na(z) << '\n';
    return sum;
}

ClusterResult cluster_surfaces(const Eigen::MatrixXd& surfaces, int g_fixed, int g_max) {
    const int T = static_cast<int>(surfaces.rows());
    if (T < 2) throw data_error("clustering needs at least two subjects");
    ClusterResult res;
    res.dendrogram = ward_cluster(dissimilarity(surfaces));
    int g = g_fixed;
    if (g <= 0) {
        const int cap = std::min(g_max, T - 1);
        if (cap < 2) throw usage_error("Krzanowski-Lai needs at least three subjects; set g instead");
        res.kl = krzanowski_lai(surfaces, res.dendrogram, cap);
        g = res.kl->rank;
    }
    res.partition = cut(res.dendrogram, g);
    return res;
}

ClusterResult cluster_command(const Config& cfg, const std::string& fit_dir, const std::string& out_dir) {
    const std::string subjects_path = join_path(fit_dir, "subjects.tsv");
    const Table st = read_table(subjects_path);
    const int id_col = st.require("subject_id", subjects_path);
    const int label_col = st.find("label");

    Eigen::MatrixXd surfaces;
    const std::string bin = join_path(fit_dir, "surfaces.bin");
    const std::string tsv = join_path(fit_dir, "surfaces.tsv");
    if (std::filesystem::exists(bin)) surfaces = read_surfaces_bin(bin);
    else if (std::filesystem::exists(tsv)) surfaces = read_surfaces_tsv(tsv);
    else throw data_error(fit_dir + ": no surfaces.bin or surfaces.tsv");
    if (surfaces.rows() != static_cast<Eigen::Index>(st.rows.size())) {
        throw data_error(fit_dir + ": surfaces and subjects.tsv disagree on the number of subjects");
    }

    ClusterResult res =
        cluster_surfaces(surfaces, static_cast<int>(cfg.get_int("g")), static_cast<int>(cfg.get_int("g_max")));
    for (const auto& r : st.rows) {
        res.ids.push_back(r[id_col]);
        if (label_col >= 0) res.true_labels.push_back(static_cast<int>(parse_int(r[label_col], subjects_path)));
    }

    ensure_directory(out_dir);
    const ArtifactStamp stamp = cfg.stamp();
    write_partition(join_path(out_dir, "partition.tsv"), stamp, res.ids, res.partition);

    Table dt;
    dt.header = {"step", "a", "b", "height", "size"};
    for (std::size_t k = 0; k < res.dendrogram.merges.size(); ++k) {
        const Merge& m = res.dendrogram.merges[k];
        dt.rows.push_back(
            {std::to_string(k + 1), std::to_string(m.a), std::to_string(m.b), format_double(m.height), std::to_string(m.size)});
    }
    write_table(join_path(out_dir, "dendrogram.tsv"), stamp, dt);

    Table kt;
    kt.header = {"g", "W", "DIFF", "KL", "chosen"};
    if (res.kl) {
        const KlReport& kl = *res.kl;
        const int gmax = static_cast<int>(kl.kl.size()) + 1;
        for (int g = 1; g <= gmax + 1; ++g) {
            const std::string diff = g >= 2 ? format_double(kl.diff[g - 2]) : "NA";
            const std::string k = (g >= 2 && g <= gmax) ? format_double(kl.kl[g - 2]) : "NA";
            kt.rows.push_back({std::to_string(g), format_double(kl.W[g]), diff, k, g == kl.rank ? "1" : "0"});
        }
    } else {
        kt.rows.push_back({std::to_string(res.partition.g), "NA", "NA", "NA", "1"});
    }
    write_table(join_path(out_dir, "kl_report.tsv"), stamp, kt);

    if (!res.true_labels.empty()) {
        write_metrics(join_path(out_dir, "metrics.tsv"), stamp, compute_metrics(res.true_labels, res.partition.labels));
    }
    return res;
}

void simulate_command(const Config& cfg, const std::string& out_dir) {
    SimConfig base = sim_config_from(cfg);
    const long long reps = cfg.get_int("replicates");
    if (reps < 1) throw usage_error("replicates must be at least 1");
    ensure_directory(out_dir);
    const ArtifactStamp stamp = cfg.stamp();
    for (long long r = 1; r <= reps; ++r) {
        SimConfig sc = base;
        sc.seed = make_stream(cfg.seed(), {3, static_cast<std::uint64_t>(r)})();
        const SimCohort sim = generate_cohort(sc);
        char name[32];
        std::snprintf(name, sizeof name, "rep_%03lld", r);
        const std::string dir = join_path(out_dir, name);
        ensure_directory(dir);
        Table mt;
        mt.header = {"subject_id", "path", "label"};
        for (std::size_t k = 0; k < sim.ids.size(); ++k) {
            const std::string file = sim.ids[k] + ".glcm.tsv";
            write_count_matrix(join_path(dir, file), sim.counts[k], stamp);
            mt.rows.push_back({sim.ids[k], file, std::to_string(sim.labels[k])});
        }
        write_table(join_path(dir, "manifest.tsv"), ArtifactStamp{stamp.config_hash, sc.seed}, mt);
    }
}

Metrics compute_metrics(const std::vector<int>& true_labels, const std::vector<int>& pred_labels) {
    Metrics m;
    m.matching = matching_matrix(true_labels, pred_labels);
    m.misassignment = misassignment_rate(m.matching);
    m.chi2 = pearson_chi2(m.matching);
    return m;
}

BaselineMethod parse_baseline_method(const std::string& name) {
    if (name == "hc") return BaselineMethod::HC;
    if (name == "km") return BaselineMethod::KM;
    if (name == "gmm") return BaselineMethod::GMM;
    throw usage_error("unknown baseline method '" + name + "' (expected hc, km or gmm)");
}

const char* baseline_method_name(BaselineMethod m) {
    switch (m) {
        case BaselineMethod::HC: return "hc";
        case BaselineMethod::KM: return "km";
        case BaselineMethod::GMM: return "gmm";
    }
    return "?";
}

Partition run_baseline(const Config& cfg, BaselineMethod method, const std::vector<CountMatrix>& counts, int g, Rng& rng) {
    std::vector<FeatureVector> f;
    f.reserve(counts.size());
    for (const auto& c : counts) f.push_back(haralick_features(c));
    const bool standardize = cfg.get_bool("baseline.standardize");
    switch (method) {
        case BaselineMethod::HC: return feature_hclust(f, g, standardize);
        case BaselineMethod::KM: return feature_kmeans(f, g, rng, standardize);
        case BaselineMethod::GMM: return feature_gmm(f, g, rng, standardize);
    }
    throw usage_error("unknown baseline method");
}

Partition baseline_command(const Config& cfg, const std::string& manifest_path, BaselineMethod method, int g,
                           const std::string& out_dir) {
    const Cohort cohort = load_cohort(cfg, manifest_path);
    Rng rng = make_stream(cfg.seed(), {5, static_cast<std::uint64_t>(method)});
    const Partition p = run_baseline(cfg, method, cohort.counts, g, rng);
    ensure_directory(out_dir);
    const ArtifactStamp stamp = cfg.stamp();
    write_partition(join_path(out_dir, "partition.tsv"), stamp, cohort.ids, p);
    if (!cohort.labels.empty()) write_metrics(join_path(out_dir, "metrics.tsv"), stamp, compute_metrics(cohort.labels, p.labels));
    return p;
}

Metrics evaluate_command(const Config& cfg, const std::string& true_path, const std::string& pred_path,
                         const std::string& out_path) {
    const auto truth = read_labels(true_path);
    const auto pred = read_labels(pred_path);
    std::unordered_map<std::string, int> pred_of;
    for (const auto& [id, l] : pred)
        if (!pred_of.emplace(id, l).second) throw data_error(pred_path + ": duplicate subject id '" + id + "'");
    if (truth.size() != pred.size()) throw data_error("label files cover different numbers of subjects");
    std::vector<int> a, b;
    for (const auto& [id, l] : truth) {
        const auto it = pred_of.find(id);
        if (it == pred_of.end()) throw data_error(pred_path + ": no label for subject '" + id + "'");
        a.push_back(l);
        b.push_back(it->second);
    }
    const Metrics m = compute_metrics(a, b);
    if (!out_path.empty()) write_metrics(out_path, cfg.stamp(), m);
    return m;
}

std::vector<SummaryRow> summarize(const std::vector<ReplicateRow>& rows) {
    std::vector<std::pair<std::string, double>> keys;
    for (const auto& r : rows) {
        const auto k = std::make_pair(r.method, r.s);
        if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
    }
    std::vector<SummaryRow> out;
    for (const auto& [method, s] : keys) {
        std::vector<double> mis, chi;
        for (const auto& r : rows) {
            if (r.method == method && r.s == s) {
                mis.push_back(r.misassignment);
                chi.push_back(r.chi2);
            }
        }
        out.push_back({method, s, static_cast<int>(mis.size()), mean_of(mis), sd_of(mis), mean_of(chi), sd_of(chi)});
    }
    return out;
}

ReplicateStudy replicate_command(const Config& cfg, const std::string& out_dir) {
    const SimConfig base = sim_config_from(cfg);
    const std::vector<double> s_values = cfg.get_list("replicate.s_values");
    if (s_values.empty()) throw usage_error("replicate.s_values is empty");
    const long long reps = cfg.get_int("replicates");
    if (reps < 1) throw usage_error("replicates must be at least 1");
    const std::vector<std::string> methods = cfg.get_words("replicate.methods");
    for (const auto& m : methods)
        if (m != "hrgsdp") parse_baseline_method(m);
    const int g_true = static_cast<int>(base.c_values.size());

    struct Job {
        int si;
        int rep;
    };
    std::vector<Job> jobs;
    for (int si = 0; si < static_cast<int>(s_values.size()); ++si)
        for (int r = 1; r <= reps; ++r) jobs.push_back({si, r});

    std::vector<std::vector<ReplicateRow>> rows(jobs.size());
    std::vector<std::vector<ReplicateFailure>> fails(jobs.size());
    std::atomic<std::size_t> next{0};
    std::atomic<int> done{0};

    auto work = [&] {
        for (std::size_t j; (j = next.fetch_add(1)) < jobs.size();) {
            const Job job = jobs[j];
            const double s = s_values[job.si];
            const auto key = [&](std::uint64_t tag) {
                return make_stream(cfg.seed(), {tag, static_cast<std::uint64_t>(job.si), static_cast<std::uint64_t>(job.rep)})();
            };
            SimCohort sim;
            try {
                SimConfig sc = base;
                sc.s = s;
                sc.seed = key(3);
                sim = generate_cohort(sc);
            } catch (const Error& e) {
                for (const auto& m : methods) fails[j].push_back({m, s, job.rep, std::string("simulation: ") + e.what()});
                continue;
            }
            for (const auto& m : methods) {
                try {
                    ReplicateRow row{m, s, job.rep, 0.0, 0.0, -1};
                    std::vector<int> pred;
                    if (m == "hrgsdp") {
                        const Cohort c = make_cohort(cfg, sim.ids, sim.counts, sim.labels);
                        Hyperparams hp = hyperparams_from(cfg, static_cast<int>(c.subjects.front().x.size()));
                        hp.seed = key(4);
                        const ChainTrace trace = run_chain(c.subjects, c.graph, hp, chain_options_from(cfg));
                        const ClusterResult cr = cluster_surfaces(posterior_mean_surfaces(trace), 0,
                                                                  static_cast<int>(cfg.get_int("g_max")));
                        pred = cr.partition.labels;
                        row.kl_rank = cr.partition.g;
                    } else {
                        Rng rng = make_stream(cfg.seed(), {5, static_cast<std::uint64_t>(job.si),
                                                           static_cast<std::uint64_t>(job.rep), fnv1a(m)});
                        pred = run_baseline(cfg, parse_baseline_method(m), sim.counts, g_true, rng).labels;
                    }
                    const Metrics met = compute_metrics(sim.labels, pred);
                    row.misassignment = met.misassignment;
                    row.chi2 = met.chi2;
                    rows[j].push_back(row);
                } catch (const Error& e) {
                    fails[j].push_back({m, s, job.rep, e.what()});
                }
            }
            const int d = ++done;
            log_info("replicate " + std::to_string(d) + "/" + std::to_string(jobs.size()) + " done (s=" + fmt_s(s) +
                     ", replicate " + std::to_string(job.rep) + ")");
        }
    };

    long long threads = cfg.get_int("threads");
    if (threads <= 0) threads = std::max(1u, std::thread::hardware_concurrency());
    threads = std::min<long long>(threads, static_cast<long long>(jobs.size()));
    std::vector<std::thread> pool;
    for (long long i = 1; i < threads; ++i) pool.emplace_back(work);
    work();
    for (auto& th : pool) th.join();

    ReplicateStudy study;
    // Merge in (method, s, replicate) order so output does not depend on scheduling.
    for (const auto& m : methods) {
        for (std::size_t j = 0; j < jobs.size(); ++j) {
            for (const auto& r : rows[j])
                if (r.method == m) study.rows.push_back(r);
            for (const auto& f : fails[j])
                if (f.method == m) study.failures.push_back(f);
        }
    }
    study.summary = summarize(study.rows);
    for (const auto& f : study.failures) {
        log_warning("replicate failed: " + f.method + " s=" + fmt_s(f.s) + " replicate " + std::to_string(f.replicate) +
                    ": " + f.message);
    }

    if (!out_dir.empty()) {
        ensure_directory(out_dir);
        const ArtifactStamp stamp = cfg.stamp();
        Table rt;
        rt.header = {"method", "s", "replicate", "misassignment", "chi2", "kl_rank"};
        for (const auto& r : study.rows) {
            rt.rows.push_back({r.method, fmt_s(r.s), std::to_string(r.replicate), format_double(r.misassignment),
                               format_double(r.chi2), r.kl_rank < 0 ? "NA" : std::to_string(r.kl_rank)});
        }
        write_table(join_path(out_dir, "results.tsv"), stamp, rt);
        Table su;
        su.header = {"method", "s", "n", "mean_misassignment", "sd_misassignment", "mean_chi2", "sd_chi2"};
        for (const auto& r : study.summary) {
            su.rows.push_back({r.method, fmt_s(r.s), std::to_string(r.n), fmt_or_na(r.mean_mis), fmt_or_na(r.sd_mis),
                               fmt_or_na(r.mean_chi2), fmt_or_na(r.sd_chi2)});
        }
        write_table(join_path(out_dir, "summary.tsv"), stamp, su);
        Table ft;
        ft.header = {"method", "s", "replicate", "error"};
        for (const auto& f : study.failures) ft.rows.push_back({f.method, fmt_s(f.s), std::to_string(f.replicate), f.message});
        write_table(join_path(out_dir, "failures.tsv"), stamp, ft);
    }
    return study;
}

CrossTab cross_tabulate(const std::vector<int>& rows, const std::vector<int>& cols, const std::vector<int>& flags) {
    if (rows.size() != cols.size()) throw usage_error("partitions differ in length");
    if (!flags.empty() && flags.size() != rows.size()) throw usage_error("flags differ in length from the partitions");
    if (rows.empty()) throw data_error("nothing to tabulate");
    CrossTab ct;
    ct.row_clusters = rows;
    ct.col_clusters = cols;
    for (auto* v : {&ct.row_clusters, &ct.col_clusters}) {
        std::sort(v->begin(), v->end());
        v->erase(std::unique(v->begin(), v->end()), v->end());
    }
    const auto index = [](const std::vector<int>& levels, int v) {
        return static_cast<int>(std::lower_bound(levels.begin(), levels.end(), v) - levels.begin());
    };
    ct.counts = Eigen::MatrixXi::Zero(ct.row_clusters.size(), ct.col_clusters.size());
    ct.positives = ct.counts;
    ct.has_flags = !flags.empty();
    for (std::size_t t = 0; t < rows.size(); ++t) {
        const int i = index(ct.row_clusters, rows[t]), j = index(ct.col_clusters, cols[t]);
        ++ct.counts(i, j);
        if (ct.has_flags && flags[t] != 0) ++ct.positives(i, j);
    }
    if (ct.has_flags) {
        // Cells with a positive majority are flagged positive; ties count as negative.
        long long discordant = 0;
        for (Eigen::Index i = 0; i < ct.counts.rows(); ++i) {
            for (Eigen::Index j = 0; j < ct.counts.cols(); ++j) {
                const int n = ct.counts(i, j), pos = ct.positives(i, j);
                discordant += 2 * pos > n ? n - pos : pos;
            }
        }
        ct.discordance = static_cast<double>(discordant) / static_cast<double>(rows.size());
    }
    return ct;
}

CrossTab crosstab_command(const Config& cfg, const std::string& row_partition, const std::string& col_partition,
                          const std::string& flags_path, const std::string& out_prefix) {
    const auto a = read_labels(row_partition);
    const auto b = read_labels(col_partition);
    std::unordered_map<std::string, int> col_of, flag_of;
    for (const auto& [id, l] : b) col_of[id] = l;
    if (!flags_path.empty())
        for (const auto& [id, l] : read_labels(flags_path)) flag_of[id] = l;
    std::vector<int> rows, cols, flags;
    for (const auto& [id, l] : a) {
        const auto it = col_of.find(id);
        if (it == col_of.end()) throw data_error(col_partition + ": no cluster for subject '" + id + "'");
        rows.push_back(l);
        cols.push_back(it->second);
        if (!flags_path.empty()) {
            const auto f = flag_of.find(id);
            if (f == flag_of.end()) throw data_error(flags_path + ": no flag for subject '" + id + "'");
            flags.push_back(f->second);
        }
    }
    if (b.size() != a.size()) throw data_error("partitions cover different subjects");
    const CrossTab ct = cross_tabulate(rows, cols, flags);

    if (!out_prefix.empty()) {
        const ArtifactStamp stamp = cfg.stamp();
        Table lt;
        lt.header = {"row_cluster", "col_cluster", "count", "positives"};
        for (std::size_t i = 0; i < ct.row_clusters.size(); ++i)
            for (std::size_t j = 0; j < ct.col_clusters.size(); ++j)
                lt.rows.push_back({std::to_string(ct.row_clusters[i]), std::to_string(ct.col_clusters[j]),
                                   std::to_string(ct.counts(i, j)), ct.has_flags ? std::to_string(ct.positives(i, j)) : "NA"});
        write_table(out_prefix + ".tsv", stamp, lt);

        std::ofstream out(out_prefix + ".txt");
        if (!out) throw data_error("cannot write " + out_prefix + ".txt");
        out << stamp.comment() << '\n';
        out << "rows: " << row_partition << "\ncolumns: " << col_partition << '\n';
        if (ct.has_flags) out << "cell: count(positives)\n";
        out << "\t";
        for (int c : ct.col_clusters) out << "\tcluster " << c;
        out << '\n';
        for (std::size_t i = 0; i < ct.row_clusters.size(); ++i) {
            out << (i == 0 ? "rows" : "") << "\tcluster " << ct.row_clusters[i];
            for (std::size_t j = 0; j < ct.col_clusters.size(); ++j) {
                out << '\t' << ct.counts(i, j);
                if (ct.has_flags) out << '(' << ct.positives(i, j) << ')';
            }
            out << '\n';
        }
        if (ct.has_flags) out << "discordant fraction: " << format_double(ct.discordance) << '\n';
    }
    return ct;
}

}  // namespace hrgsdp
