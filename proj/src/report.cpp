#include "mhkd/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "mhkd/errors.hpp"

namespace mhkd {

namespace fs = std::filesystem;

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

std::ofstream open_out(const fs::path& file) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(file.string() + ": cannot open for writing");
  return out;
}

void write_row(std::ostream& os, const std::vector<std::string>& cells) {
  for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << cells[i];
  os << "\n";
}

}  // namespace

std::optional<std::size_t> CsvTable::find(const std::string& name) const {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) return std::nullopt;
  return static_cast<std::size_t>(it - header.begin());
}

std::vector<double> CsvTable::numbers(const std::string& name) const {
  auto col = find(name);
  if (!col) throw DataError("csv: no column '" + name + "'");
  std::vector<double> out;
  for (const auto& row : rows) {
    const std::string& cell = *col < row.size() ? row[*col] : std::string();
    double v = std::numeric_limits<double>::quiet_NaN();
    if (!cell.empty() && cell != "nan") {
      auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc() || ptr != cell.data() + cell.size())
        throw DataError("csv: column '" + name + "' has non-numeric cell '" + cell + "'");
    }
    out.push_back(v);
  }
  return out;
}

CsvTable read_csv(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError(file.string() + ": cannot open");
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw DataError(file.string() + ": empty file");
  t.header = split_line(line);
  for (int n = 2; std::getline(in, line); ++n) {
    if (line.empty()) continue;
    auto cells = split_line(line);
    if (cells.size() != t.header.size())
      throw DataError(file.string() + ":" + std::to_string(n) + ": expected " +
                      std::to_string(t.header.size()) + " cells, found " +
                      std::to_string(cells.size()));
    t.rows.push_back(std::move(cells));
  }
  return t;
}

std::vector<std::string> metrics_header(std::span<const int> head_units) {
  std::vector<std::string> h = {"epoch", "lr", "train_loss", "l_kd"};
  for (int u : head_units) h.push_back("l_ohkd_head" + std::to_string(u));
  for (int u : head_units) h.push_back("head" + std::to_string(u) + "_acc");
  h.push_back("test_acc");
  return h;
}

void write_metrics_csv(const fs::path& file, const TrainHistory& history,
                       std::span<const int> head_units) {
  auto out = open_out(file);
  write_row(out, metrics_header(head_units));
  for (const auto& e : history.epochs) {
    std::vector<std::string> row = {std::to_string(e.epoch), format_number(e.lr),
                                    format_number(e.train_loss),
                                    e.l_kd ? format_number(*e.l_kd) : ""};
    for (std::size_t j = 0; j < head_units.size(); ++j)
      row.push_back(j < e.l_ohkd_head.size() ? format_number(e.l_ohkd_head[j]) : "");
    for (std::size_t j = 0; j < head_units.size(); ++j)
      row.push_back(j < e.head_acc.size() ? format_number(e.head_acc[j]) : "");
    row.push_back(format_number(e.test_acc));
    write_row(out, row);
  }
}

void write_steps_csv(const fs::path& file, const TrainHistory& history,
                     std::span<const int> head_units) {
  auto out = open_out(file);
  std::vector<std::string> header = {"epoch", "step", "l_mhkd", "l_kd", "l_ce_final", "l_kl_final"};
  for (int u : head_units)
    for (const char* part : {"l_kl_head", "l_ce_head", "l_ohkd_head", "acc_head"})
      header.push_back(part + std::to_string(u));
  write_row(out, header);
  for (const auto& s : history.steps) {
    const auto& r = s.report;
    std::vector<std::string> row = {std::to_string(s.epoch), std::to_string(s.step),
                                    format_number(r.l_mhkd), format_number(r.l_kd),
                                    format_number(r.l_ce_final), format_number(r.l_kl_final)};
    for (std::size_t j = 0; j < head_units.size(); ++j) {
      bool have = j < r.per_head.size();
      row.push_back(have ? format_number(r.per_head[j].l_kl) : "");
      row.push_back(have ? format_number(r.per_head[j].l_ce) : "");
      row.push_back(have ? format_number(r.per_head[j].l_ohkd) : "");
      row.push_back(j < r.head_accuracies.size() ? format_number(r.head_accuracies[j]) : "");
    }
    write_row(out, row);
  }
}

void write_summary(const fs::path& dir, std::span<const SummaryRow> rows) {
  {
    auto out = open_out(dir / "summary.csv");
    write_row(out, {"method", "seed", "final_acc", "best_acc"});
    for (const auto& r : rows)
      for (std::size_t i = 0; i < r.seeds.size(); ++i)
        write_row(out, {r.method, std::to_string(r.seeds[i]), format_number(r.final_acc[i]),
                        format_number(r.best_acc[i])});
  }
  auto md = open_out(dir / "summary.md");
  md << summary_markdown(rows);
}

std::vector<SummaryRow> read_summary(const fs::path& file) {
  auto t = read_csv(file);
  auto method = t.find("method"), seed = t.find("seed");
  if (!method || !seed) throw DataError(file.string() + ": not a summary file");
  auto fin = t.numbers("final_acc"), best = t.numbers("best_acc");
  std::vector<SummaryRow> out;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& name = t.rows[i][*method];
    auto it = std::find_if(out.begin(), out.end(), [&](const SummaryRow& r) { return r.method == name; });
    if (it == out.end()) {
      out.push_back({name, {}, {}, {}});
      it = out.end() - 1;
    }
    it->seeds.push_back(std::stoull(t.rows[i][*seed]));
    it->final_acc.push_back(fin[i]);
    it->best_acc.push_back(best[i]);
  }
  return out;
}

std::string summary_markdown(std::span<const SummaryRow> rows) {
  std::vector<std::uint64_t> seeds;
  for (const auto& r : rows)
    for (auto s : r.seeds)
      if (std::find(seeds.begin(), seeds.end(), s) == seeds.end()) seeds.push_back(s);

  std::ostringstream os;
  os << "| Method |";
  for (auto s : seeds) os << " seed " << s << " |";
  os << " mean (std) |\n|---|";
  for (std::size_t i = 0; i < seeds.size(); ++i) os << "---|";
  os << "---|\n";
  char buf[32];
  for (const auto& r : rows) {
    os << "| " << r.method << " |";
    for (auto s : seeds) {
      auto it = std::find(r.seeds.begin(), r.seeds.end(), s);
      if (it == r.seeds.end()) {
        os << " |";
        continue;
      }
      std::snprintf(buf, sizeof buf, " %.2f |", 100.0 * r.final_acc[static_cast<std::size_t>(it - r.seeds.begin())]);
      os << buf;
    }
    os << " " << format_summary(summarize(r.final_acc)) << " |\n";
  }
  os << "\nTop-1 test accuracy (%) of the final-epoch model; std is the sample standard deviation over seeds.\n";
  return os.str();
}

std::string line_chart_svg(const std::string& title, const std::string& x_label,
                           const std::string& y_label, std::span<const Series> series) {
  constexpr double W = 720, H = 440, L = 70, R = 200, T = 40, B = 50;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

  std::ostringstream os;
  char buf[128];
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title
     << "</text>\n";
  os << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\""
     << H - T - B << "\" fill=\"none\" stroke=\"#333\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    double yv = y0 + (y1 - y0) * i / 4.0, xv = x0 + (x1 - x0) * i / 4.0;
    std::snprintf(buf, sizeof buf, "%.4g", yv);
    os << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << buf
       << "</text>\n";
    std::snprintf(buf, sizeof buf, "%.4g", xv);
    os << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << buf
       << "</text>\n";
  }
  os << "<text x=\"" << L + (W - L - R) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">"
     << x_label << "</text>\n";
  os << "<text x=\"16\" y=\"" << T + (H - T - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << T + (H - T - B) / 2 << ")\">" << y_label << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* colour = palette[k % std::size(palette)];
    os << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      std::snprintf(buf, sizeof buf, "%.1f,%.1f ", px(s.x[i]), py(s.y[i]));
      os << buf;
    }
    os << "\"/>\n";
    double ly = T + 14 + 16.0 * static_cast<double>(k);
    os << "<line x1=\"" << W - R + 10 << "\" y1=\"" << ly - 4 << "\" x2=\"" << W - R + 30
       << "\" y2=\"" << ly - 4 << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << W - R + 36 << "\" y=\"" << ly << "\">" << s.name << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::vector<fs::path> generate_report(const fs::path& run_dir) {
  if (!fs::is_directory(run_dir)) throw DataError(run_dir.string() + ": not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(run_dir))
    if (e.is_regular_file() && e.path().filename() == "metrics.csv") files.push_back(e.path());
  if (files.empty()) throw DataError(run_dir.string() + ": no metrics.csv found");
  std::sort(files.begin(), files.end());

  std::vector<Series> loss, kd, ohkd, acc;
  std::ostringstream final_table;
  final_table << "| Run | epochs | final test acc (%) | best test acc (%) |\n|---|---|---|---|\n";
  for (const auto& f : files) {
    auto label = fs::relative(f.parent_path(), run_dir).generic_string();
    if (label == ".") label = "run";
    auto t = read_csv(f);
    auto epoch = t.numbers("epoch");
    loss.push_back({label, epoch, t.numbers("train_loss")});
    auto acc_col = t.numbers("test_acc");
    for (double& a : acc_col) a *= 100.0;
    acc.push_back({label, epoch, acc_col});
    auto l_kd = t.numbers("l_kd");
    if (std::any_of(l_kd.begin(), l_kd.end(), [](double v) { return std::isfinite(v); }))
      kd.push_back({label, epoch, l_kd});
    for (const auto& col : t.header)
      if (col.rfind("l_ohkd_head", 0) == 0)
        ohkd.push_back({label + " " + col.substr(7), epoch, t.numbers(col)});
    char buf[96];
    double best = acc_col.empty() ? NAN : *std::max_element(acc_col.begin(), acc_col.end());
    std::snprintf(buf, sizeof buf, " %zu | %.2f | %.2f |\n", t.rows.size(),
                  acc_col.empty() ? NAN : acc_col.back(), best);
    final_table << "| " << label << " |" << buf;
  }

  const fs::path out_dir = run_dir / "report";
  fs::create_directories(out_dir);
  auto emit = [&](const std::string& name, const std::string& content) {
    auto path = out_dir / name;
    auto out = open_out(path);
    out << content;
    return path;
  };
  std::vector<fs::path> written;
  written.push_back(emit("train_loss.svg", line_chart_svg("Training objective", "epoch", "loss", loss)));
  written.push_back(emit("l_kd.svg", line_chart_svg("L_KD (final logits)", "epoch", "loss", kd)));
  written.push_back(emit("l_ohkd.svg", line_chart_svg("Per-head L_OHKD", "epoch", "loss", ohkd)));
  written.push_back(emit("test_acc.svg", line_chart_svg("Test accuracy", "epoch", "top-1 (%)", acc)));

  std::ostringstream md;
  md << "# Run report: " << run_dir.filename().string() << "\n\n";
  if (fs::exists(run_dir / "summary.csv")) {
    auto rows = read_summary(run_dir / "summary.csv");
    md << "## Summary over seeds\n\n" << summary_markdown(rows) << "\n";
  }
  md << "## Runs\n\n" << final_table.str() << "\n## Curves\n\n";
  for (const auto& p : written)
    md << "![" << p.stem().string() << "](" << p.filename().string() << ")\n\n";
  written.push_back(emit("report.md", md.str()));
  return written;
}

}  // namespace mhkd
