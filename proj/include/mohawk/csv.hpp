#pragma once

#include <charconv>
#include <fstream>
#include <string>
#include <vector>

#include "mohawk/common.hpp"

namespace mohawk::io {

// 17 significant digits, locale-independent: doubles survive a print/parse
// round trip and reruns produce byte-identical files.
inline std::string csv_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
    return std::string(buf, res.ptr);
}

inline std::string csv_int(i64 v) { return std::to_string(v); }

class CsvWriter {
public:
    explicit CsvWriter(std::vector<std::string> header) : cols_(header.size()) {
        append_row(header);
    }

    void append_row(const std::vector<std::string>& cells) {
        check(cells.size() == cols_, "csv: wrong column count");
        for (size_t i = 0; i < cells.size(); ++i) {
            if (i) text_ += ',';
            text_ += cells[i];
        }
        text_ += '\n';
        ++rows_;
    }

    const std::string& text() const { return text_; }
    size_t data_rows() const { return rows_ - 1; }

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("csv: cannot open for writing: " + path);
        os.write(text_.data(), static_cast<std::streamsize>(text_.size()));
        if (!os) throw IoError("csv: write failed: " + path);
    }

private:
    size_t cols_;
    size_t rows_ = 0;
    std::string text_;
};

}  // namespace mohawk::io
