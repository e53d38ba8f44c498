#pragma once

#include "baselines.hpp"
#include "cluster.hpp"
#include "glcm.hpp"
#include "io.hpp"
#include "sampler.hpp"
#include "simulate.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace hrgsdp {

struct ConfigKey {
    const char* name;
    const char* default_value;
    const char* help;
};

// Every recognized key with its built-in default and a one-line description.
const std::vector<ConfigKey>& config_keys();

// Flat key/value run configuration. A value resolves to the explicit setting
// if any, else the active profile's value, else the built-in default.
class Config {
public:
    void set(const std::string& key, const std::string& value);
    // "key=value"
    void set_assignment(const std::string& assignment);
    // Lines of "key = value"; '#' starts a comment.
    void load_file(const std::string& path);

    std::string get(const std::string& key) const;
    bool is_set(const std::string& key) const { return explicit_.count(key) > 0; }
    long long get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::vector<double> get_list(const std::string& key) const;
    std::vector<std::string> get_words(const std::string& key) const;

    std::uint64_t seed() const;
    // Hash of every resolved value that can affect results (threads excluded).
    std::uint64_t hash() const;
    ArtifactStamp stamp() const { return {hash(), seed()}; }
    // Resolved "key = value" lines, in key order.
    std::string dump() const;

private:
    std::map<std::string, std::string> explicit_;
};

Hyperparams hyperparams_from(const Config& cfg, int n_covariates);
SimConfig sim_config_from(const Config& cfg);
ChainOptions chain_options_from(const Config& cfg);

struct Cohort {
    std::vector<std::string> ids;
    std::vector<CountMatrix> counts;
    std::vector<int> labels;  // empty when the manifest has no label column
    std::vector<Subject> subjects;
    LatticeGraph graph;
};

// Builds subjects from count matrices. Lattice "auto" picks the unique
// triangle when every matrix is symmetric and the full grid otherwise.
Cohort make_cohort(const Config& cfg, std::vector<std::string> ids, std::vector<CountMatrix> counts,
                   std::vector<int> labels, const std::vector<std::vector<double>>& extra_covariates = {});

// Manifest: tab-separated with columns subject_id and path, an optional label
// column, and any further columns read as numeric covariates.
Cohort load_cohort(const Config& cfg, const std::string& manifest_path);

// Image manifest: subject_id, image, optional mask ("-" for none), optional
// label. Writes one count-matrix file per subject, bins.tsv and manifest.tsv.
// With bins_path set, those bin edges are reused instead of pooled quantiles.
void build_glcm_command(const Config& cfg, const std::string& image_manifest, const std::string& out_dir,
                        const std::string& bins_path = "");
BinSpec read_bins(const std::string& path);

struct FitSummary {
    int n_subjects = 0;
    int n_sites = 0;
    int iterations = 0;
    double mean_clusters = 0.0;
    std::map<std::string, double> geweke;  // NaN when the chain is too short
};

// Writes trace.tsv, surfaces.bin or surfaces.tsv, subjects.tsv and run_manifest.txt.
FitSummary fit_command(const Config& cfg, const std::string& manifest_path, const std::string& out_dir);

struct ClusterResult {
    std::vector<std::string> ids;
    Partition partition;
    Dendrogram dendrogram;
    std::optional<KlReport> kl;  // absent when the cluster count was fixed
    std::vector<int> true_labels;
};

ClusterResult cluster_surfaces(const Eigen::MatrixXd& surfaces, int g_fixed, int g_max);

// Reads a fit directory and writes partition.tsv, dendrogram.tsv, kl_report.tsv
// and, when subjects carry labels, metrics.tsv.
ClusterResult cluster_command(const Config& cfg, const std::string& fit_dir, const std::string& out_dir);

// One directory per replicate with per-subject count files and manifest.tsv.
void simulate_command(const Config& cfg, const std::string& out_dir);

struct Metrics {
    double misassignment = 0.0;
    double chi2 = 0.0;
    MatchingMatrix matching;
};

Metrics compute_metrics(const std::vector<int>& true_labels, const std::vector<int>& pred_labels);

enum class BaselineMethod { HC, KM, GMM };
BaselineMethod parse_baseline_method(const std::string& name);
const char* baseline_method_name(BaselineMethod m);

Partition run_baseline(const Config& cfg, BaselineMethod method, const std::vector<CountMatrix>& counts, int g, Rng& rng);

// partition.tsv plus metrics.tsv when the manifest has labels.
Partition baseline_command(const Config& cfg, const std::string& manifest_path, BaselineMethod method, int g,
                           const std::string& out_dir);

// Joins two (subject_id, label) files on subject id and writes metrics.tsv.
Metrics evaluate_command(const Config& cfg, const std::string& true_path, const std::string& pred_path,
                         const std::string& out_path);

struct ReplicateRow {
    std::string method;
    double s = 0.0;
    int replicate = 0;
    double misassignment = 0.0;
    double chi2 = 0.0;
    int kl_rank = -1;  // -1 for baselines
};

struct SummaryRow {
    std::string method;
    double s = 0.0;
    int n = 0;
    double mean_mis = 0.0;
    double sd_mis = 0.0;
    double mean_chi2 = 0.0;
    double sd_chi2 = 0.0;
};

struct ReplicateFailure {
    std::string method;
    double s = 0.0;
    int replicate = 0;
    std::string message;
};

struct ReplicateStudy {
    std::vector<ReplicateRow> rows;
    std::vector<SummaryRow> summary;
    std::vector<ReplicateFailure> failures;
};

std::vector<SummaryRow> summarize(const std::vector<ReplicateRow>& rows);

// Simulate, fit, cluster and score every (s, replicate); out_dir may be empty
// to skip writing results.tsv, summary.tsv and failures.tsv.
ReplicateStudy replicate_command(const Config& cfg, const std::string& out_dir);

struct CrossTab {
    std::vector<int> row_clusters;
    std::vector<int> col_clusters;
    Eigen::MatrixXi counts;
    Eigen::MatrixXi positives;  // subjects with a positive flag, per cell
    bool has_flags = false;
    double discordance = 0.0;   // fraction opposite to their cell's majority flag
};

CrossTab cross_tabulate(const std::vector<int>& rows, const std::vector<int>& cols, const std::vector<int>& flags);

// Two-way table of two partitions over shared subject ids; flags_path (optional)
// holds (subject_id, 0/1). Writes a long table and a formatted text table.
CrossTab crosstab_command(const Config& cfg, const std::string& row_partition, const std::string& col_partition,
                          const std::string& flags_path, const std::string& out_prefix);

}  // namespace hrgsdp
