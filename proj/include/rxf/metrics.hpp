#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace rxf {

/// Plain CSV: comma separated, no quoting (fields never contain commas).
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Column index by name, or -1.
  int column(const std::string& name) const;
  void add_row(std::vector<std::string> row);
};

/// Fixed, locale-independent number formatting ("nan" for NaN).
std::string fmt(double v);

void write_csv(const std::filesystem::path& path, const CsvTable& table);
/// Appends rows, writing the header first when the file is new or empty.
void append_csv(const std::filesystem::path& path, const CsvTable& table);
/// Throws DataError on ragged rows or an empty file.
CsvTable read_csv(const std::filesystem::path& path);

/// Header of the per-epoch training metrics file.
const std::vector<std::string>& epoch_metrics_header();

struct PlotSeries {
  std::string column;
  std::string label;
};

/// Line plot of the y columns against the x column (numeric). Output depends
/// only on the table contents, so regenerating from the same CSV is
/// byte-identical. Rows are grouped by `group_column` when non-empty (one line
/// per group and series).
std::string render_svg_plot(const CsvTable& table, const std::string& x_column, const std::vector<PlotSeries>& ys,
                            const std::string& title, const std::string& group_column = "");

}  // namespace rxf
