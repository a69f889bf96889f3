// Drives the mhkd binary end to end on a very small configuration.

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "mhkd/checkpoint.hpp"
#include "mhkd/nn.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "mhkd_cli_test";

struct Result {
  int code;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Result run(const std::string& args) {
  auto out = kRoot / "stdout.txt", err = kRoot / "stderr.txt";
  std::string cmd = std::string(MHKD_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
  int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

const char* kTiny =
    "[experiment]\n"
    "name = cli\n"
    "seeds = 0, 1\n"
    "ablation = 1 | 1,2\n"
    "[data]\n"
    "source = synth\n"
    "synth_train_per_class = 3\n"
    "synth_test_per_class = 2\n"
    "[teacher]\n"
    "network = plain\n"
    "widths = 4, 8, 8\n"
    "[student]\n"
    "network = plain\n"
    "widths = 4, 4, 4\n"
    "[head]\n"
    "num_conv = 1\n"
    "conv_channels = 4\n"
    "fc_hidden = 8\n"
    "[optim]\n"
    "epochs = 2\n"
    "lr_milestones = 1\n"
    "batch_size = 16\n";

fs::path write_config(const std::string& name, const std::string& text) {
  fs::create_directories(kRoot);
  auto p = kRoot / name;
  std::ofstream(p, std::ios::binary) << text;
  return p;
}

std::string line_with(const std::string& text, const std::string& prefix) {
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line))
    if (line.rfind(prefix, 0) == 0) return line;
  return "";
}

}  // namespace

TEST_CASE("command line workflow") {
  fs::remove_all(kRoot);
  auto cfg = write_config("tiny.cfg", kTiny);
  const auto out = kRoot / "run";
  const std::string common = " --config " + cfg.string() + " --output-dir " + out.string() + " --quiet";

  SUBCASE("config errors") {
    std::string text = kTiny;
    text.erase(text.find("source = synth\n"), 15);
    auto bad = write_config("bad.cfg", text);
    auto r = run("train-teacher --config " + bad.string());
    CHECK(r.code == 2);
    CHECK(r.err.find("[data] source") != std::string::npos);

    auto worse = write_config("worse.cfg", std::string(kTiny) + "lr = oops\n");
    r = run("train-teacher --config " + worse.string());
    CHECK(r.code == 2);
    CHECK(r.err.find("worse.cfg:23:") != std::string::npos);

    CHECK(run("").code != 0);
    CHECK(run("frobnicate").code != 0);
  }

  SUBCASE("teacher, distillation, evaluation, report") {
    auto r = run("train-teacher" + common + " --seed-override 0");
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto tdir = out / "teacher" / "seed_0";
    for (const char* f : {"teacher.ckpt", "teacher_best.ckpt", "metrics.csv", "steps.csv"})
      CHECK(fs::exists(tdir / f));
    CHECK(fs::exists(out / "teacher" / "manifest.cfg"));
    CHECK(slurp(out / "teacher" / "manifest.cfg").find("weight_decay = 0.0005") != std::string::npos);
    const auto metrics = slurp(tdir / "metrics.csv");
    CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 3);  // header + 2 epochs
    CHECK(metrics.rfind("epoch,lr,train_loss,l_kd,test_acc\n", 0) == 0);

    // Same config and seed: byte-identical metrics.
    r = run("train-teacher --config " + cfg.string() + " --output-dir " + (kRoot / "rerun").string() +
            " --seed-override 0 --quiet");
    REQUIRE(r.code == 0);
    CHECK(slurp(kRoot / "rerun" / "teacher" / "seed_0" / "metrics.csv") == metrics);

    const auto teacher = (tdir / "teacher.ckpt").string();
    r = run("distill" + common + " --teacher-ckpt " + teacher);
    REQUIRE_MESSAGE(r.code == 0, r.err);
    for (const char* seed : {"seed_0", "seed_1"}) {
      CHECK(fs::exists(out / "mhkd" / seed / "student.ckpt"));
      CHECK(fs::exists(out / "mhkd" / seed / "student_deploy.ckpt"));
      CHECK(fs::exists(out / "mhkd" / seed / "steps.csv"));
    }
    auto mh = slurp(out / "mhkd" / "seed_0" / "metrics.csv");
    CHECK(mh.rfind("epoch,lr,train_loss,l_kd,l_ohkd_head1,l_ohkd_head2,l_ohkd_head3,head1_acc,"
                   "head2_acc,head3_acc,test_acc\n", 0) == 0);

    // beta = 0 with no heads is the KD baseline.
    auto kd_cfg = write_config("kd.cfg", std::string(kTiny) + "[distill]\nbeta = 0\nhead_units =\n");
    r = run("distill --config " + kd_cfg.string() + " --output-dir " + out.string() +
            " --quiet --teacher-ckpt " + teacher);
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(fs::exists(out / "kd" / "seed_1" / "metrics.csv"));

    r = run("baseline" + common);
    REQUIRE_MESSAGE(r.code == 0, r.err);

    r = run("distill" + common + " --ablation --seed-override 0 --teacher-ckpt " + teacher);
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(fs::exists(out / "head-1" / "seed_0" / "metrics.csv"));
    CHECK(fs::exists(out / "head-1+2" / "seed_0" / "metrics.csv"));
    auto ablation = slurp(out / "ablation.md");
    CHECK(ablation.find("| Head-1 |") != std::string::npos);
    CHECK(ablation.find("| Head-1+2 |") != std::string::npos);

    auto summary = slurp(out / "summary.md");
    for (const char* row : {"| Teacher baseline |", "| MHKD |", "| KD |", "| Student baseline |", "| Head-1 |"})
      CHECK_MESSAGE(summary.find(row) != std::string::npos, row);
    CHECK(summary.find("| Method | seed 0 | seed 1 | mean (std) |") != std::string::npos);

    // Evaluation: deployable and full checkpoints agree; compression matches.
    const auto full = out / "mhkd" / "seed_0" / "student.ckpt";
    const auto deploy = out / "mhkd" / "seed_0" / "student_deploy.ckpt";
    auto a = run("eval --checkpoint " + full.string() + " --config " + cfg.string() +
                 " --reference " + teacher);
    auto b = run("eval --checkpoint " + deploy.string() + " --config " + cfg.string());
    REQUIRE_MESSAGE(a.code == 0, a.err);
    REQUIRE(b.code == 0);
    CHECK(line_with(a.out, "accuracy:") == line_with(b.out, "accuracy:"));
    CHECK(line_with(a.out, "head1_accuracy:").size() > 0);
    auto ps = mhkd::load_checkpoint(deploy).network.count_params();
    auto pt = mhkd::load_checkpoint(teacher).network.count_params();
    char expect[96];
    std::snprintf(expect, sizeof expect, "compression: %.2f%%", 100.0 * (1.0 - double(ps) / double(pt)));
    CHECK(line_with(a.out, "compression:").rfind(expect, 0) == 0);

    // Incompatible teacher: the student checkpoint is not the configured teacher.
    r = run("distill" + common + " --teacher-ckpt " + deploy.string());
    CHECK(r.code == 4);

    // Corrupt checkpoint.
    auto junk = kRoot / "junk.ckpt";
    std::ofstream(junk, std::ios::binary) << "not a checkpoint";
    CHECK(run("eval --checkpoint " + junk.string() + " --config " + cfg.string()).code == 4);

    r = run("report " + out.string());
    REQUIRE_MESSAGE(r.code == 0, r.err);
    for (const char* f : {"l_kd.svg", "l_ohkd.svg", "test_acc.svg", "report.md"})
      CHECK(fs::exists(out / "report" / f));
    fs::create_directories(kRoot / "empty");
    CHECK(run("report " + (kRoot / "empty").string()).code == 3);
  }
  fs::remove_all(kRoot);
}
