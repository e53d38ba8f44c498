#include "io.hpp"

#include "error.hpp"

#include <bit>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

namespace hrgsdp {

namespace fs = std::filesystem;

namespace {

static_assert(std::endian::native == std::endian::little, "binary surfaces assume a little-endian host");

std::ifstream open_in(const std::string& path, bool binary = false) {
    std::ifstream in(path, binary ? std::ios::binary : std::ios::in);
    if (!in) throw data_error("cannot open " + path);
    return in;
}

std::ofstream open_out(const std::string& path, bool binary = false) {
    std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
    if (!out) throw data_error("cannot write " + path);
    return out;
}

bool skip_line(const std::string& line) {
    const auto p = line.find_first_not_of(" \t\r");
    return p == std::string::npos || line[p] == '#';
}

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool in_field = false;
    for (char ch : line) {
        if (ch == ' ' || ch == '\t' || ch == ',' || ch == '\r') {
            if (in_field) out.push_back(cur);
            cur.clear();
            in_field = false;
        } else {
            cur.push_back(ch);
            in_field = true;
        }
    }
    if (in_field) out.push_back(cur);
    return out;
}

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == '\r') continue;
        if (ch == '\t') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

template <class T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& in, const std::string& path) {
    T v;
    if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw data_error(path + ": truncated surfaces file");
    return v;
}

}  // namespace

std::string ArtifactStamp::comment() const {
    char buf[96];
    std::snprintf(buf, sizeof buf, "# config_hash=%016llx seed=%llu", static_cast<unsigned long long>(config_hash),
                  static_cast<unsigned long long>(seed));
    return buf;
}

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

double parse_double(const std::string& text, const std::string& what) {
    if (text == "nan" || text == "NaN" || text == "NA") return std::numeric_limits<double>::quiet_NaN();
    double v = 0.0;
    const char* end = text.data() + text.size();
    const auto res = std::from_chars(text.data(), end, v);
    if (text.empty() || res.ec != std::errc() || res.ptr != end) throw data_error(what + ": not a number: '" + text + "'");
    return v;
}

long long parse_int(const std::string& text, const std::string& what) {
    long long v = 0;
    const char* end = text.data() + text.size();
    const auto res = std::from_chars(text.data(), end, v);
    if (text.empty() || res.ec != std::errc() || res.ptr != end) {
        throw data_error(what + ": not an integer: '" + text + "'");
    }
    return v;
}

Eigen::MatrixXd read_real_matrix(const std::string& path) {
    std::ifstream in = open_in(path);
    std::vector<std::vector<double>> rows;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (skip_line(line)) continue;
        std::vector<double> row;
        for (const auto& f : split_fields(line)) row.push_back(parse_double(f, path + ":" + std::to_string(lineno)));
        if (!rows.empty() && row.size() != rows.front().size()) {
            throw data_error(path + ":" + std::to_string(lineno) + ": ragged matrix row");
        }
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw data_error(path + ": empty matrix");
    Eigen::MatrixXd m(rows.size(), rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows[i].size(); ++j) m(i, j) = rows[i][j];
    return m;
}

BoolMatrix read_mask(const std::string& path) {
    const Eigen::MatrixXd m = read_real_matrix(path);
    if (((m.array() != 0.0) && (m.array() != 1.0)).any()) throw data_error(path + ": mask entries must be 0 or 1");
    return m.array() != 0.0;
}

void write_count_matrix(const std::string& path, const CountMatrix& counts, const ArtifactStamp& stamp) {
    std::ofstream out = open_out(path);
    out << stamp.comment() << '\n' << counts.rows() << '\n';
    for (Eigen::Index i = 0; i < counts.rows(); ++i) {
        for (Eigen::Index j = 0; j < counts.cols(); ++j) out << (j ? "\t" : "") << counts(i, j);
        out << '\n';
    }
    if (!out) throw data_error("failed writing " + path);
}

CountMatrix read_count_matrix(const std::string& path) {
    std::ifstream in = open_in(path);
    std::string line;
    long long K = -1;
    std::vector<std::vector<std::int64_t>> rows;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (skip_line(line)) continue;
        const auto fields = split_fields(line);
        const std::string where = path + ":" + std::to_string(lineno);
        if (K < 0) {
            if (fields.size() != 1) throw data_error(where + ": expected the matrix size K on its own line");
            K = parse_int(fields[0], where);
            if (K < 2) throw data_error(where + ": K must be at least 2");
            continue;
        }
        if (static_cast<long long>(fields.size()) != K) throw data_error(where + ": expected " + std::to_string(K) + " counts");
        std::vector<std::int64_t> row;
        for (const auto& f : fields) {
            const long long v = parse_int(f, where);
            if (v < 0) throw data_error(where + ": negative count");
            row.push_back(v);
        }
        rows.push_back(std::move(row));
    }
    if (K < 0) throw data_error(path + ": empty count matrix file");
    if (static_cast<long long>(rows.size()) != K) {
        throw data_error(path + ": expected " + std::to_string(K) + " rows, found " + std::to_string(rows.size()));
    }
    CountMatrix counts(K, K);
    for (long long i = 0; i < K; ++i)
        for (long long j = 0; j < K; ++j) counts(i, j) = rows[i][j];
    return counts;
}

int Table::find(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == name) return static_cast<int>(i);
    return -1;
}

int Table::require(const std::string& name, const std::string& path) const {
    const int i = find(name);
    if (i < 0) throw data_error(path + ": missing column '" + name + "'");
    return i;
}

Table read_table(const std::string& path) {
    std::ifstream in = open_in(path);
    Table t;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (skip_line(line)) continue;
        auto fields = split_tabs(line);
        if (t.header.empty()) {
            t.header = std::move(fields);
            continue;
        }
        if (fields.size() != t.header.size()) {
            throw data_error(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(t.header.size()) +
                             " tab-separated fields");
        }
        t.rows.push_back(std::move(fields));
    }
    if (t.header.empty()) throw data_error(path + ": missing header line");
    return t;
}

void write_table(const std::string& path, const ArtifactStamp& stamp, const Table& table) {
    std::ofstream out = open_out(path);
    out << stamp.comment() << '\n';
    auto emit = [&](const std::vector<std::string>& fields) {
        for (std::size_t i = 0; i < fields.size(); ++i) out << (i ? "\t" : "") << fields[i];
        out << '\n';
    };
    emit(table.header);
    for (const auto& r : table.rows) emit(r);
    if (!out) throw data_error("failed writing " + path);
}

void write_surfaces_bin(const std::string& path, const Eigen::MatrixXd& surfaces, const ArtifactStamp& stamp) {
    std::ofstream out = open_out(path, true);
    out.write("HRGS", 4);
    put<std::uint32_t>(out, 1);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(surfaces.rows()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(surfaces.cols()));
    put<std::uint64_t>(out, stamp.config_hash);
    put<std::uint64_t>(out, stamp.seed);
    for (Eigen::Index t = 0; t < surfaces.rows(); ++t)
        for (Eigen::Index i = 0; i < surfaces.cols(); ++i) put<double>(out, surfaces(t, i));
    if (!out) throw data_error("failed writing " + path);
}

Eigen::MatrixXd read_surfaces_bin(const std::string& path, ArtifactStamp* stamp) {
    std::ifstream in = open_in(path, true);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "HRGS", 4) != 0) throw data_error(path + ": not a surfaces file");
    if (get<std::uint32_t>(in, path) != 1) throw data_error(path + ": unsupported surfaces version");
    const std::uint32_t T = get<std::uint32_t>(in, path);
    const std::uint32_t n = get<std::uint32_t>(in, path);
    ArtifactStamp s;
    s.config_hash = get<std::uint64_t>(in, path);
    s.seed = get<std::uint64_t>(in, path);
    if (stamp) *stamp = s;
    Eigen::MatrixXd m(T, n);
    for (std::uint32_t t = 0; t < T; ++t)
        for (std::uint32_t i = 0; i < n; ++i) m(t, i) = get<double>(in, path);
    return m;
}

void write_surfaces_tsv(const std::string& path, const std::vector<std::string>& ids, const Eigen::MatrixXd& surfaces,
                        const ArtifactStamp& stamp) {
    Table t;
    t.header.push_back("subject_id");
    for (Eigen::Index i = 0; i < surfaces.cols(); ++i) t.header.push_back("site_" + std::to_string(i + 1));
    for (Eigen::Index r = 0; r < surfaces.rows(); ++r) {
        std::vector<std::string> row{ids.at(r)};
        for (Eigen::Index i = 0; i < surfaces.cols(); ++i) row.push_back(format_double(surfaces(r, i)));
        t.rows.push_back(std::move(row));
    }
    write_table(path, stamp, t);
}

Eigen::MatrixXd read_surfaces_tsv(const std::string& path, std::vector<std::string>* ids) {
    const Table t = read_table(path);
    if (t.header.size() < 2) throw data_error(path + ": no surface columns");
    Eigen::MatrixXd m(t.rows.size(), t.header.size() - 1);
    if (ids) ids->clear();
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        if (ids) ids->push_back(t.rows[r][0]);
        for (std::size_t i = 1; i < t.header.size(); ++i) m(r, i - 1) = parse_double(t.rows[r][i], path);
    }
    return m;
}

std::string resolve_path(const std::string& base_file, const std::string& path) {
    const fs::path p(path);
    if (p.is_absolute()) return path;
    return (fs::path(base_file).parent_path() / p).string();
}

void ensure_directory(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw data_error("cannot create directory " + dir);
}

std::string join_path(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

}  // namespace hrgsdp
