#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mst {

// Every failure surfaced by the library carries a short machine-readable
// kind ("validation", "format", "io", "shape", "precondition", ...) so the
// CLI can emit structured errors.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message)
        : std::runtime_error(message), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

// Fixed-precision decimal formatting ("%.*f"), independent of locale.
std::string format_fixed(double value, int decimals);

// Shortest representation that round-trips a double.
std::string format_exact(double value);

struct CsvRow {
    std::size_t line = 0;  // 1-based line number in the source file
    std::vector<std::string> cells;
};

struct CsvTable {
    std::vector<std::string> header;
    std::vector<CsvRow> rows;

    // Index of a header column, or -1.
    int column(std::string_view name) const;
};

// Reads a comma-separated file with optional double-quoted cells. Lines
// starting with '#' and blank lines are skipped.
CsvTable read_csv(const std::filesystem::path& path);
std::string csv_escape(std::string_view cell);

std::vector<std::string> split(std::string_view text, char sep);
std::string trim(std::string_view text);

}  // namespace mst
