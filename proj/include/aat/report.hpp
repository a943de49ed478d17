#pragma once

// CSV tables and small dependency-free SVG charts. Every file carries the
// config hash it came from (a leading comment line in CSV, an XML comment
// in SVG).

#include <string>
#include <vector>

namespace aat::report {

struct Series {
  std::string name;
  std::vector<double> y;  // plotted against 0..n-1
};

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

std::string format_number(double x);

std::string to_csv(const Table& table, const std::string& config_hash);
/// Column-per-series table of equal or ragged curves (blank cells pad).
Table series_table(const std::vector<Series>& series, const std::string& index_name = "step");

/// Line chart of one or more curves.
std::string line_chart_svg(const std::string& title, const std::vector<Series>& series, const std::string& config_hash);
/// Grouped bars: one group per label, one bar per series (series[i].y[label]).
std::string bar_chart_svg(const std::string& title, const std::vector<std::string>& labels,
                          const std::vector<Series>& series, const std::string& config_hash);

/// Writes text, creating parent directories. Throws DataError on failure.
void write_text(const std::string& path, const std::string& text);

}  // namespace aat::report
