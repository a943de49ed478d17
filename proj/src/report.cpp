#include "aat/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "aat/errors.hpp"

namespace aat::report {

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string csv_cell(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

// Chart frame shared by both chart kinds.
constexpr double kW = 640, kH = 400, kLeft = 70, kRight = 160, kTop = 40, kBottom = 50;

std::string header(const std::string& title, const std::string& hash) {
  std::ostringstream s;
  s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<!-- config_hash: " << hash << " -->\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << kW / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title) << "</text>\n";
  return s.str();
}

void y_axis(std::ostringstream& s, double lo, double hi) {
  const double plot_h = kH - kTop - kBottom;
  s << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kH - kBottom
    << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = lo + (hi - lo) * k / 4.0;
    const double y = kH - kBottom - plot_h * k / 4.0;
    s << "<text x=\"" << kLeft - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << format_number(v) << "</text>\n";
    s << "<line x1=\"" << kLeft << "\" y1=\"" << y << "\" x2=\"" << kW - kRight << "\" y2=\"" << y
      << "\" stroke=\"#ddd\"/>\n";
  }
}

void legend(std::ostringstream& s, const std::vector<Series>& series) {
  for (std::size_t i = 0; i < series.size(); ++i) {
    const double y = kTop + 10 + 18.0 * static_cast<double>(i);
    s << "<rect x=\"" << kW - kRight + 12 << "\" y=\"" << y - 9 << "\" width=\"12\" height=\"12\" fill=\""
      << kPalette[i % 6] << "\"/>\n";
    s << "<text x=\"" << kW - kRight + 30 << "\" y=\"" << y + 1 << "\">" << escape(series[i].name) << "</text>\n";
  }
}

}  // namespace

std::string format_number(double x) {
  if (!std::isfinite(x)) return std::isnan(x) ? "nan" : (x > 0 ? "inf" : "-inf");
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", x);
  return buf;
}

std::string to_csv(const Table& table, const std::string& config_hash) {
  std::ostringstream s;
  s << "# config_hash=" << config_hash << "\n";
  for (std::size_t i = 0; i < table.header.size(); ++i) s << (i ? "," : "") << csv_cell(table.header[i]);
  s << "\n";
  for (const auto& row : table.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) s << (i ? "," : "") << csv_cell(row[i]);
    s << "\n";
  }
  return s.str();
}

Table series_table(const std::vector<Series>& series, const std::string& index_name) {
  Table t;
  t.header.push_back(index_name);
  std::size_t n = 0;
  for (const auto& s : series) {
    t.header.push_back(s.name);
    n = std::max(n, s.y.size());
  }
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::string> row{std::to_string(i)};
    for (const auto& s : series) row.push_back(i < s.y.size() ? format_number(s.y[i]) : "");
    t.rows.push_back(std::move(row));
  }
  return t;
}

std::string line_chart_svg(const std::string& title, const std::vector<Series>& series, const std::string& config_hash) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  std::size_t n = 1;
  for (const auto& s : series) {
    for (double v : s.y) {
      if (!std::isfinite(v)) continue;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    n = std::max(n, s.y.size());
  }
  if (!std::isfinite(lo)) lo = 0.0, hi = 1.0;
  if (hi - lo < 1e-12) hi = lo + 1.0;
  std::ostringstream s;
  s << header(title, config_hash);
  y_axis(s, lo, hi);
  const double plot_w = kW - kLeft - kRight;
  const double plot_h = kH - kTop - kBottom;
  s << "<line x1=\"" << kLeft << "\" y1=\"" << kH - kBottom << "\" x2=\"" << kW - kRight << "\" y2=\"" << kH - kBottom
    << "\" stroke=\"black\"/>\n";
  s << "<text x=\"" << kLeft << "\" y=\"" << kH - kBottom + 18 << "\">0</text>\n";
  s << "<text x=\"" << kW - kRight << "\" y=\"" << kH - kBottom + 18 << "\" text-anchor=\"end\">" << n - 1 << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    s << "<polyline fill=\"none\" stroke-width=\"1.5\" stroke=\"" << kPalette[i % 6] << "\" points=\"";
    for (std::size_t k = 0; k < series[i].y.size(); ++k) {
      const double v = series[i].y[k];
      if (!std::isfinite(v)) continue;
      const double x = kLeft + (n > 1 ? plot_w * static_cast<double>(k) / static_cast<double>(n - 1) : 0.0);
      const double y = kH - kBottom - plot_h * (v - lo) / (hi - lo);
      s << format_number(x) << "," << format_number(y) << " ";
    }
    s << "\"/>\n";
  }
  legend(s, series);
  s << "</svg>\n";
  return s.str();
}

std::string bar_chart_svg(const std::string& title, const std::vector<std::string>& labels,
                          const std::vector<Series>& series, const std::string& config_hash) {
  double hi = 0.0;
  double lo = 0.0;
  for (const auto& s : series) {
    for (double v : s.y) {
      if (!std::isfinite(v)) continue;
      hi = std::max(hi, v);
      lo = std::min(lo, v);
    }
  }
  if (hi - lo < 1e-12) hi = lo + 1.0;
  std::ostringstream s;
  s << header(title, config_hash);
  y_axis(s, lo, hi);
  const double plot_w = kW - kLeft - kRight;
  const double plot_h = kH - kTop - kBottom;
  const double zero_y = kH - kBottom - plot_h * (0.0 - lo) / (hi - lo);
  s << "<line x1=\"" << kLeft << "\" y1=\"" << zero_y << "\" x2=\"" << kW - kRight << "\" y2=\"" << zero_y
    << "\" stroke=\"black\"/>\n";
  const double group_w = labels.empty() ? plot_w : plot_w / static_cast<double>(labels.size());
  const double bar_w = group_w * 0.8 / static_cast<double>(std::max<std::size_t>(1, series.size()));
  for (std::size_t g = 0; g < labels.size(); ++g) {
    const double gx = kLeft + group_w * static_cast<double>(g) + group_w * 0.1;
    for (std::size_t i = 0; i < series.size(); ++i) {
      if (g >= series[i].y.size() || !std::isfinite(series[i].y[g])) continue;
      const double v = series[i].y[g];
      const double y = kH - kBottom - plot_h * (v - lo) / (hi - lo);
      s << "<rect x=\"" << format_number(gx + bar_w * static_cast<double>(i)) << "\" y=\""
        << format_number(std::min(y, zero_y)) << "\" width=\"" << format_number(bar_w) << "\" height=\""
        << format_number(std::abs(zero_y - y)) << "\" fill=\"" << kPalette[i % 6] << "\"/>\n";
    }
    s << "<text x=\"" << format_number(gx + group_w * 0.4) << "\" y=\"" << kH - kBottom + 18
      << "\" text-anchor=\"middle\">" << escape(labels[g]) << "</text>\n";
  }
  legend(s, series);
  s << "</svg>\n";
  return s.str();
}

void write_text(const std::string& path, const std::string& text) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << text;
  if (!out) throw DataError("write failed for " + path);
}

}  // namespace aat::report
