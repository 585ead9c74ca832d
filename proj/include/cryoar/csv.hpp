#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace cryoar::csv {

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;
};

// Numeric CSV with a single header row. Throws IoError on unreadable files
// and on rows whose column count disagrees with the header.
Table read(const std::filesystem::path& path, const std::vector<std::string>& expected_header);

void write(const std::filesystem::path& path, const std::vector<std::string>& header,
           const std::vector<std::vector<double>>& rows);

// Shortest decimal text that parses back to the same double.
std::string format_double(double value);

}  // namespace cryoar::csv
