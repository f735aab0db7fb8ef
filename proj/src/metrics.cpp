#include "rxf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "rxf/error.hpp"

namespace rxf {

int CsvTable::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  return it == header.end() ? -1 : static_cast<int>(it - header.begin());
}

void CsvTable::add_row(std::vector<std::string> row) {
  if (row.size() != header.size()) throw std::invalid_argument("csv row width does not match the header");
  rows.push_back(std::move(row));
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

namespace {

std::string join(const std::vector<std::string>& cells) {
  std::string s;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) s += ',';
    s += cells[i];
  }
  return s;
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string xml_escape(const std::string& s) {
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

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace

void write_csv(const std::filesystem::path& path, const CsvTable& table) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << join(table.header) << '\n';
  for (const auto& r : table.rows) out << join(r) << '\n';
}

void append_csv(const std::filesystem::path& path, const CsvTable& table) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw DataError("cannot write " + path.string());
  if (fresh) out << join(table.header) << '\n';
  for (const auto& r : table.rows) out << join(r) << '\n';
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  CsvTable t;
  std::string line;
  if (!std::getline(in, line) || line.empty()) throw DataError(path.string() + ": empty CSV");
  t.header = split_line(line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cells = split_line(line);
    if (cells.size() != t.header.size()) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(t.header.size()) +
                      " fields, found " + std::to_string(cells.size()));
    }
    t.rows.push_back(std::move(cells));
  }
  return t;
}

const std::vector<std::string>& epoch_metrics_header() {
  static const std::vector<std::string> h = {"run_id",   "phase",    "epoch",     "lr",      "clean_loss",
                                             "adv_loss", "fdm_penalty", "clean_acc", "adv_acc", "feature_distance",
                                             "seconds"};
  return h;
}

std::string render_svg_plot(const CsvTable& table, const std::string& x_column, const std::vector<PlotSeries>& ys,
                            const std::string& title, const std::string& group_column) {
  const int xc = table.column(x_column);
  if (xc < 0) throw DataError("plot: missing column " + x_column);
  const int gc = group_column.empty() ? -1 : table.column(group_column);
  if (!group_column.empty() && gc < 0) throw DataError("plot: missing column " + group_column);

  struct Line {
    std::string label;
    std::vector<std::pair<double, double>> pts;
  };
  std::vector<Line> lines;
  std::map<std::string, std::size_t> index;
  double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
  for (const auto& s : ys) {
    const int yc = table.column(s.column);
    if (yc < 0) throw DataError("plot: missing column " + s.column);
    for (const auto& row : table.rows) {
      const std::string label = gc >= 0 ? row[gc] + " " + s.label : s.label;
      auto [it, fresh] = index.emplace(label, lines.size());
      if (fresh) lines.push_back({label, {}});
      const double x = std::strtod(row[xc].c_str(), nullptr);
      const double y = std::strtod(row[yc].c_str(), nullptr);
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      lines[it->second].pts.emplace_back(x, y);
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  }
  if (!std::isfinite(xmin)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (xmax == xmin) xmax = xmin + 1;
  ymin = std::min(ymin, 0.0);
  if (ymax <= ymin) ymax = ymin + 1;

  const double W = 640, H = 400, L = 60, R = 170, T = 40, B = 50;
  const double pw = W - L - R, ph = H - T - B;
  auto sx = [&](double x) { return L + (x - xmin) / (xmax - xmin) * pw; };
  auto sy = [&](double y) { return T + ph - (y - ymin) / (ymax - ymin) * ph; };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << num(W / 2) << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(title) << "</text>\n";
  o << "<line x1=\"" << L << "\" y1=\"" << T + ph << "\" x2=\"" << L + pw << "\" y2=\"" << T + ph << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << T + ph << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = xmin + (xmax - xmin) * i / 4, yv = ymin + (ymax - ymin) * i / 4;
    o << "<text x=\"" << num(sx(xv)) << "\" y=\"" << num(T + ph + 16) << "\" text-anchor=\"middle\">" << fmt(xv).substr(0, 6) << "</text>\n";
    o << "<text x=\"" << num(L - 6) << "\" y=\"" << num(sy(yv) + 4) << "\" text-anchor=\"end\">" << fmt(yv).substr(0, 5) << "</text>\n";
    o << "<line x1=\"" << L << "\" y1=\"" << num(sy(yv)) << "\" x2=\"" << L + pw << "\" y2=\"" << num(sy(yv)) << "\" stroke=\"#dddddd\"/>\n";
  }
  o << "<text x=\"" << num(L + pw / 2) << "\" y=\"" << num(H - 10) << "\" text-anchor=\"middle\">" << xml_escape(x_column) << "</text>\n";
  for (std::size_t li = 0; li < lines.size(); ++li) {
    auto pts = lines[li].pts;
    std::stable_sort(pts.begin(), pts.end(), [](auto& a, auto& b) { return a.first < b.first; });
    const char* color = colors[li % 8];
    o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < pts.size(); ++i) o << (i ? " " : "") << num(sx(pts[i].first)) << "," << num(sy(pts[i].second));
    o << "\"/>\n";
    for (const auto& p : pts) o << "<circle cx=\"" << num(sx(p.first)) << "\" cy=\"" << num(sy(p.second)) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    const double ly = T + 10 + 18.0 * li;
    o << "<line x1=\"" << num(W - R + 10) << "\" y1=\"" << num(ly) << "\" x2=\"" << num(W - R + 30) << "\" y2=\"" << num(ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << num(W - R + 36) << "\" y=\"" << num(ly + 4) << "\">" << xml_escape(lines[li].label) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace rxf
