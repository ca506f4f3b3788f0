#pragma once

// Minimal CSV writing/reading with fixed, locale-independent formatting so
// identical runs produce byte-identical files.

#include "calcurve/net.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace calcurve {

/// Shortest round-trip decimal representation of a double, '.' decimal point.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  // Prefer the shortest representation that still round-trips.
  for (int prec = 1; prec < 17; ++prec) {
    char probe[40];
    std::snprintf(probe, sizeof(probe), "%.*g", prec, v);
    double back = 0;
    std::sscanf(probe, "%lf", &back);
    if (back == v || (std::isnan(back) && std::isnan(v))) return probe;
  }
  return buf;
}

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::string& schema_line, const std::string& header)
      : out_(path) {
    if (!out_) throw std::runtime_error("cannot open " + path + " for writing");
    out_ << "# " << schema_line << "\n" << header << "\n";
  }

  void row(const std::vector<std::string>& cells) {
    for (size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << cells[i];
    }
    out_ << '\n';
  }

  void comment(const std::string& text) { out_ << "# " << text << "\n"; }
  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
};

struct CsvTable {
  std::string schema;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  Index column(const std::string& name) const {
    for (size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<Index>(i);
    throw std::runtime_error("csv: no column named " + name);
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  cells.push_back(cur);
  return cells;
}

/// Reads a schema-tagged CSV, rejecting files whose schema line does not
/// match `expected_schema` (empty accepts anything). Trailing comment lines
/// are ignored.
inline CsvTable read_csv(const std::string& path, const std::string& expected_schema = "") {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  CsvTable table;
  std::string line;
  if (!std::getline(in, line) || line.rfind("# ", 0) != 0)
    throw std::runtime_error("csv: missing schema line in " + path);
  table.schema = line.substr(2);
  if (!expected_schema.empty() && table.schema != expected_schema)
    throw std::runtime_error("csv: unsupported schema '" + table.schema + "' in " + path +
                             "' (expected '" + expected_schema + "')");
  if (!std::getline(in, line)) throw std::runtime_error("csv: missing header in " + path);
  table.header = split_csv_line(line);
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    table.rows.push_back(split_csv_line(line));
  }
  return table;
}

}  // namespace calcurve
