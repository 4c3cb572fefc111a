// SPDX-License-Identifier: Apache-2.0
#include <fstream>
#include <sstream>

#include "lopt/cli.hpp"

namespace lopt::cli {

namespace {

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

} // namespace

std::size_t CsvTable::column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == name) return i;
    throw Error(ErrorCode::SchemaMismatch, "missing column '" + name + "'");
}

CsvTable read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
    CsvTable table;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto cells = split(line);
        if (table.header.empty()) {
            table.header = std::move(cells);
            continue;
        }
        require(cells.size() == table.header.size(), ErrorCode::SchemaMismatch,
                path.string() + ": row " + std::to_string(table.rows.size() + 1) + " has " +
                    std::to_string(cells.size()) + " cells, header has " + std::to_string(table.header.size()));
        table.rows.push_back(std::move(cells));
    }
    require(!table.header.empty(), ErrorCode::SchemaMismatch, path.string() + " is empty");
    return table;
}

void write_csv(const std::filesystem::path& path, const CsvTable& table) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    auto row = [&](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
        out << '\n';
    };
    row(table.header);
    for (const auto& r : table.rows) row(r);
    if (!out) throw Error(ErrorCode::Io, "short write to " + path.string());
}

} // namespace lopt::cli
