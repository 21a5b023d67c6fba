// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "pgdpo/errors.hpp"

namespace pgdpo::io {

/// Shortest text that parses back to the same double.
inline std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// Writes to a sibling temporary file, then renames it over `path`, so readers
/// never observe a partially written file.
inline void write_atomic(const std::filesystem::path& path, std::string_view contents) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        out.flush();
        if (!out) {
            out.close();
            std::error_code ec;
            fs::remove(tmp, ec);
            throw std::runtime_error("failed writing " + tmp.string());
        }
    }
    fs::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Comma-separated rows with full-precision numbers.
class CsvBuilder {
public:
    explicit CsvBuilder(const std::vector<std::string>& header) {
        for (std::size_t i = 0; i < header.size(); ++i) text_ += (i ? "," : "") + header[i];
        text_ += '\n';
    }

    CsvBuilder& row(std::initializer_list<double> values) {
        bool first = true;
        for (double v : values) {
            if (!first) text_ += ',';
            text_ += fmt_double(v);
            first = false;
        }
        text_ += '\n';
        return *this;
    }

    const std::string& str() const { return text_; }

private:
    std::string text_;
};

}  // namespace pgdpo::io
