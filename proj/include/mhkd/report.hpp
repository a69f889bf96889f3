#pragma once

// Run outputs: the per-epoch metrics.csv and per-step steps.csv logs, the
// cross-seed summary, and the report command's SVG curves and markdown table.
//
// metrics.csv columns, in order:
//   epoch, lr, train_loss, l_kd, l_ohkd_head{u}..., head{u}_acc..., test_acc
// where u runs over the configured head units. l_kd is empty for supervised
// runs; head columns are absent when there are no heads.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mhkd/train.hpp"

namespace mhkd {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  // Index of `name` in the header, if present.
  std::optional<std::size_t> find(const std::string& name) const;
  // Numeric column; empty cells become NaN. Throws DataError if absent.
  std::vector<double> numbers(const std::string& name) const;
};

CsvTable read_csv(const std::filesystem::path& file);

// Shortest text that parses back to the same double.
std::string format_number(double v);

std::vector<std::string> metrics_header(std::span<const int> head_units);
void write_metrics_csv(const std::filesystem::path& file, const TrainHistory& history,
                       std::span<const int> head_units);
void write_steps_csv(const std::filesystem::path& file, const TrainHistory& history,
                     std::span<const int> head_units);

struct SummaryRow {
  std::string method;
  std::vector<std::uint64_t> seeds;
  std::vector<double> final_acc;  // aligned with seeds
  std::vector<double> best_acc;
};

// summary.csv (method, seed, final_acc, best_acc) and summary.md.
void write_summary(const std::filesystem::path& dir, std::span<const SummaryRow> rows);
std::vector<SummaryRow> read_summary(const std::filesystem::path& file);
// Markdown table: one column per seed, then "mean (std)" of final accuracy.
std::string summary_markdown(std::span<const SummaryRow> rows);

struct Series {
  std::string name;
  std::vector<double> x, y;
};

// Standalone SVG line chart; NaN points are skipped.
std::string line_chart_svg(const std::string& title, const std::string& x_label,
                           const std::string& y_label, std::span<const Series> series);

// Scans `run_dir` for metrics.csv files and writes <run_dir>/report/ with
// train_loss.svg, l_kd.svg, l_ohkd.svg, test_acc.svg and report.md. Throws
// DataError when no metrics are found. Returns the written files.
std::vector<std::filesystem::path> generate_report(const std::filesystem::path& run_dir);

}  // namespace mhkd
