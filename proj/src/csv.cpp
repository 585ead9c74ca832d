#include "cryoar/csv.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "cryoar/error.hpp"

namespace cryoar::csv {

namespace {

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) {
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
        while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
        out.push_back(cell);
    }
    return out;
}

double parse(const std::string& text, const std::filesystem::path& path, std::size_t line_no) {
    double value = 0.0;
    const char* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (ec != std::errc() || ptr != end)
        throw IoError(path.string() + ":" + std::to_string(line_no) + ": not a number: '" + text + "'");
    return value;
}

}  // namespace

Table read(const std::filesystem::path& path, const std::vector<std::string>& expected_header) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    Table table;
    std::string line;
    if (!std::getline(in, line)) throw IoError(path.string() + ": empty file");
    table.header = split(line);
    if (!expected_header.empty() && table.header != expected_header)
        throw IoError(path.string() + ": unexpected CSV header '" + line + "'");
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto cells = split(line);
        if (cells.size() != table.header.size())
            throw IoError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                          std::to_string(table.header.size()) + " columns, got " +
                          std::to_string(cells.size()));
        std::vector<double> row;
        row.reserve(cells.size());
        for (const auto& c : cells) row.push_back(parse(c, path, line_no));
        table.rows.push_back(std::move(row));
    }
    return table;
}

std::string format_double(double value) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
    return std::string(buf, ptr);
}

void write(const std::filesystem::path& path, const std::vector<std::string>& header,
           const std::vector<std::vector<double>>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
    out << '\n';
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << format_double(row[i]);
        out << '\n';
    }
    if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace cryoar::csv
