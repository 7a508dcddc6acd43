#pragma once

// Helpers shared by the harness translation units.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "shepherd/harness.hpp"

namespace shepherd::harness::detail {

/// Full-precision scientific text of a double (17 significant digits).
std::string sci(double v);

/// Writes a CSV row (LF terminated).
void csv_row(std::ostream& out, const std::vector<std::string>& cells);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
  int column(const std::string& name) const;  // -1 when absent
};

/// Numeric CSV with one header line. Throws Error on malformed input.
CsvTable read_csv(const fs::path& path);

/// Opens `path` for writing (creating parent directories) or throws.
std::ofstream open_output(const fs::path& path, bool binary = false);

void put_u32(std::ostream& out, std::uint32_t v);
void put_u64(std::ostream& out, std::uint64_t v);
void put_f64(std::ostream& out, double v);
std::uint32_t get_u32(std::istream& in);
std::uint64_t get_u64(std::istream& in);
double get_f64(std::istream& in);
void put_f64s(std::ostream& out, const std::vector<double>& v);
void get_f64s(std::istream& in, std::vector<double>& v);

}  // namespace shepherd::harness::detail
