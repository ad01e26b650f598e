#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ntklab/matrix.hpp"
#include "ntklab/network.hpp"

namespace ntklab {

// %.17g round-trips IEEE doubles exactly, which keeps every text artifact
// (traces, datasets) byte-stable across reruns and lossless to re-read.
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline double parse_double(const std::string& s) {
    const char* begin = s.c_str();
    char* end = nullptr;
    const double v = std::strtod(begin, &end);
    while (end && *end == ' ') ++end;
    if (end == begin || (end && *end != '\0'))
        throw ConfigError("parse_double: '" + s + "' is not a number");
    return v;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    fields.push_back(cur);
    return fields;
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw NumericalError("write_text_file: cannot open " + path);
    os.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!os) throw NumericalError("write_text_file: write failed for " + path);
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw NumericalError("read_text_file: cannot open " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

// Binary matrix container sharing the checkpoint encoding: magic "NTKM",
// u32 version, u64 rows, u64 cols, row-major f64 payload, all little-endian.
inline void save_matrix(const std::string& path, const Matrix& m) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw NumericalError("save_matrix: cannot open " + path);
    os.write("NTKM", 4);
    detail::put_u32(os, 1);
    detail::put_u64(os, m.rows());
    detail::put_u64(os, m.cols());
    for (double v : m.data()) detail::put_f64(os, v);
    if (!os) throw NumericalError("save_matrix: write failed for " + path);
}

inline Matrix load_matrix(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw NumericalError("load_matrix: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "NTKM", 4) != 0)
        throw ConfigError("load_matrix: " + path + " is not a matrix file (bad magic)");
    const std::uint32_t version = detail::get_u32(is);
    if (version != 1)
        throw ConfigError("load_matrix: unsupported version " + std::to_string(version));
    const std::uint64_t rows = detail::get_u64(is);
    const std::uint64_t cols = detail::get_u64(is);
    Matrix m(rows, cols);
    for (double& v : m.data()) v = detail::get_f64(is);
    return m;
}

}  // namespace ntklab
