#pragma once

#include "glcm.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <string>
#include <vector>

namespace hrgsdp {

// Provenance line carried by every artifact.
struct ArtifactStamp {
    std::uint64_t config_hash = 0;
    std::uint64_t seed = 0;

    // "# config_hash=<16 hex digits> seed=<n>"
    std::string comment() const;
};

// Shortest text that parses back to the same double.
std::string format_double(double v);

// Delimited real matrix: whitespace, tab or comma separated; '#' lines and
// blank lines are skipped. All rows must have the same length.
Eigen::MatrixXd read_real_matrix(const std::string& path);
BoolMatrix read_mask(const std::string& path);

// Count matrix file: stamp comment, a line holding K, then K rows of integers.
void write_count_matrix(const std::string& path, const CountMatrix& counts, const ArtifactStamp& stamp);
CountMatrix read_count_matrix(const std::string& path);

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    // Column index, or -1.
    int find(const std::string& name) const;
    int require(const std::string& name, const std::string& path) const;
};

// Tab-separated text with a header line; '#' lines are skipped.
Table read_table(const std::string& path);
void write_table(const std::string& path, const ArtifactStamp& stamp, const Table& table);

// Binary posterior-mean surfaces, little-endian:
//   char[4] "HRGS", u32 version (1), u32 T, u32 n, u64 config_hash, u64 seed,
//   then T * n float64 values, subject-major.
void write_surfaces_bin(const std::string& path, const Eigen::MatrixXd& surfaces, const ArtifactStamp& stamp);
Eigen::MatrixXd read_surfaces_bin(const std::string& path, ArtifactStamp* stamp = nullptr);

// Text form: subject_id followed by the n values of each row.
void write_surfaces_tsv(const std::string& path, const std::vector<std::string>& ids, const Eigen::MatrixXd& surfaces,
                        const ArtifactStamp& stamp);
Eigen::MatrixXd read_surfaces_tsv(const std::string& path, std::vector<std::string>* ids = nullptr);

// Relative paths in manifests resolve against the manifest's directory.
std::string resolve_path(const std::string& base_file, const std::string& path);
void ensure_directory(const std::string& dir);
std::string join_path(const std::string& dir, const std::string& name);

double parse_double(const std::string& text, const std::string& what);
long long parse_int(const std::string& text, const std::string& what);

}  // namespace hrgsdp
