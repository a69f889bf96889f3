#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "mhkd/errors.hpp"
#include "mhkd/experiment.hpp"
#include "mhkd/report.hpp"

using namespace mhkd;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("mhkd_report_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TrainHistory history_with_heads() {
  TrainHistory h;
  for (int e = 0; e < 3; ++e) {
    EpochRecord r;
    r.epoch = e;
    r.lr = 0.05 * std::pow(0.1, e);
    r.train_loss = 1.0 / (e + 3);
    r.l_kd = 0.1 + e;
    r.l_ohkd_head = {0.5, 0.25 + e};
    r.head_acc = {0.3, 0.4};
    r.test_acc = 0.5 + 0.1 * e;
    h.epochs.push_back(r);
    StepRecord s;
    s.epoch = e;
    s.step = e;
    s.report.l_kd = 0.7;
    s.report.l_mhkd = 1.1;
    s.report.per_head = {{0.1, 0.2, 0.3}, {0.4, 0.5, 0.6}};
    s.report.head_accuracies = {0.25, 0.75};
    h.steps.push_back(s);
  }
  return h;
}

}  // namespace

TEST_CASE("metrics.csv schema") {
  std::vector<int> units{1, 2, 3};
  CHECK(metrics_header(units) ==
        std::vector<std::string>{"epoch", "lr", "train_loss", "l_kd", "l_ohkd_head1", "l_ohkd_head2",
                                 "l_ohkd_head3", "head1_acc", "head2_acc", "head3_acc", "test_acc"});
  CHECK(metrics_header({}) == std::vector<std::string>{"epoch", "lr", "train_loss", "l_kd", "test_acc"});
}

TEST_CASE("metrics round trip exactly") {
  auto dir = scratch("metrics");
  auto h = history_with_heads();
  std::vector<int> units{2, 3};
  write_metrics_csv(dir / "metrics.csv", h, units);
  auto t = read_csv(dir / "metrics.csv");
  CHECK(t.header == metrics_header(units));
  REQUIRE(t.rows.size() == 3);
  auto lr = t.numbers("lr"), loss = t.numbers("train_loss"), acc = t.numbers("test_acc");
  auto h3 = t.numbers("l_ohkd_head3");
  for (int e = 0; e < 3; ++e) {
    CHECK(lr[e] == h.epochs[e].lr);
    CHECK(loss[e] == h.epochs[e].train_loss);
    CHECK(acc[e] == h.epochs[e].test_acc);
    CHECK(h3[e] == h.epochs[e].l_ohkd_head[1]);
  }

  TrainHistory supervised;
  EpochRecord r;
  r.test_acc = 0.25;
  supervised.epochs.push_back(r);
  write_metrics_csv(dir / "sup.csv", supervised, {});
  auto s = read_csv(dir / "sup.csv");
  CHECK(std::isnan(s.numbers("l_kd")[0]));
  CHECK(s.rows[0][3].empty());

  write_steps_csv(dir / "steps.csv", h, units);
  auto st = read_csv(dir / "steps.csv");
  CHECK(st.rows.size() == 3);
  CHECK(st.numbers("l_ohkd_head3")[0] == 0.6);
  CHECK(st.numbers("acc_head2")[0] == 0.25);
  CHECK_THROWS_AS(st.numbers("missing"), DataError);
  fs::remove_all(dir);
}

TEST_CASE("format_number is shortest round-trip") {
  for (double v : {0.1, 1.0 / 3.0, 5e-4, 123456.789, 0.0, -2.5e-12}) {
    auto s = format_number(v);
    CHECK(std::stod(s) == v);
  }
  CHECK(format_number(0.1) == "0.1");
}

TEST_CASE("summary table") {
  std::vector<SummaryRow> rows = {
      {"KD", {0, 1, 2}, {0.70, 0.71, 0.72}, {0.7, 0.71, 0.72}},
      {"MHKD", {0, 1, 2}, {0.7500, 0.7528, 0.7556}, {0.76, 0.76, 0.76}},
  };
  auto md = summary_markdown(rows);
  CHECK(md.find("| Method | seed 0 | seed 1 | seed 2 | mean (std) |") != std::string::npos);
  CHECK(md.find("| MHKD | 75.00 | 75.28 | 75.56 | 75.28 (0.28) |") != std::string::npos);
  CHECK(md.find("| KD | 70.00 | 71.00 | 72.00 | 71.00 (1.00) |") != std::string::npos);

  auto dir = scratch("summary");
  write_summary(dir, rows);
  auto back = read_summary(dir / "summary.csv");
  REQUIRE(back.size() == 2);
  CHECK(back[1].final_acc == rows[1].final_acc);
  CHECK(back[0].seeds == rows[0].seeds);

  merge_summary(dir, {{"KD", {0}, {0.9}, {0.9}}, {"CE", {0}, {0.5}, {0.5}}});
  back = read_summary(dir / "summary.csv");
  REQUIRE(back.size() == 3);
  CHECK(back[0].method == "KD");
  CHECK(back[0].final_acc == std::vector<double>{0.9});
  CHECK(back[2].method == "CE");
  fs::remove_all(dir);
}

TEST_CASE("svg charts") {
  std::vector<Series> s = {{"a", {0, 1, 2}, {1, 2, NAN}}, {"b", {0, 1}, {3, 3}}};
  auto svg = line_chart_svg("T", "x", "y", s);
  CHECK(svg.rfind("<svg", 0) == 0);
  std::size_t lines = 0;
  for (auto pos = svg.find("<polyline"); pos != std::string::npos; pos = svg.find("<polyline", pos + 1)) ++lines;
  CHECK(lines == 2);
  CHECK(svg.find("nan") == std::string::npos);
  CHECK(line_chart_svg("empty", "x", "y", {}).find("</svg>") != std::string::npos);
}

TEST_CASE("generate_report") {
  auto empty = scratch("empty");
  CHECK_THROWS_AS(generate_report(empty), DataError);
  CHECK_THROWS_AS(generate_report(empty / "missing"), DataError);

  auto dir = scratch("run");
  write_metrics_csv(dir / "mhkd" / "seed_0" / "metrics.csv", history_with_heads(), std::vector<int>{1, 2});
  write_metrics_csv(dir / "kd" / "seed_0" / "metrics.csv", history_with_heads(), std::vector<int>{});
  write_summary(dir, std::vector<SummaryRow>{{"MHKD", {0}, {0.7}, {0.7}}});
  auto files = generate_report(dir);
  for (const char* name : {"train_loss.svg", "l_kd.svg", "l_ohkd.svg", "test_acc.svg", "report.md"})
    CHECK(fs::exists(dir / "report" / name));
  CHECK(files.size() == 5);
  auto md = slurp(dir / "report" / "report.md");
  CHECK(md.find("| MHKD | 70.00 | 70.00 (0.00) |") != std::string::npos);
  CHECK(md.find("mhkd/seed_0") != std::string::npos);
  auto ohkd = slurp(dir / "report" / "l_ohkd.svg");
  CHECK(ohkd.find("head2") != std::string::npos);
  fs::remove_all(dir);
  fs::remove_all(empty);
}

TEST_CASE("method labels") {
  DistillConfig d;
  CHECK(method_label(d) == "MHKD");
  d.beta = 0;
  CHECK(method_label(d) == "KD");
  d.beta = 0.5;
  d.head_units = {};
  CHECK(method_label(d) == "KD");
  CHECK(method_dir("MHKD") == "mhkd");
  CHECK(ablation_label({1}) == "Head-1");
  CHECK(ablation_label({1, 2, 3}) == "Head-1+2+3");
  CHECK(method_dir("Head-1+2+3") == "head-1+2+3");
}
