#include <cmath>

#include "doctest.h"
#include "mhkd/distill.hpp"
#include "mhkd/errors.hpp"
#include "mhkd/gradcheck.hpp"
#include "mhkd/kernels.hpp"
#include "loss_oracle.hpp"
#include "test_util.hpp"

using namespace mhkd;
using mhkd::testing::bit_equal;
using mhkd::testing::random_tensor;
using mhkd::testing::ref_ce;
using mhkd::testing::ref_kl;

namespace {

AuxHeadSpec small_head(int k = 5) {
  AuxHeadSpec h;
  h.num_conv = 1;
  h.conv_channels = 4;
  h.fc_hidden = 6;
  h.num_classes = k;
  return h;
}

}  // namespace

TEST_CASE("aux head output shape and dimension matching") {
  Rng rng(1);
  AuxHeadSpec spec;  // defaults
  AuxHead<float> head(spec, 64, 7);
  CHECK(head.forward(nullptr, random_tensor<float>(rng, {4, 64, 16, 16}), Mode::kEval).shape() == Shape{4, 10});

  AuxHead<float> ht(spec, 128, 1), hs(spec, 32, 2);
  CHECK(ht.forward(nullptr, random_tensor<float>(rng, {4, 128, 16, 16}), Mode::kTrain).shape() == Shape{4, 10});
  CHECK(hs.forward(nullptr, random_tensor<float>(rng, {4, 32, 16, 16}), Mode::kTrain).shape() == Shape{4, 10});
}

TEST_CASE("default head on a 64-channel input has the hand-computed size") {
  // conv 64->256 3x3 (+bias, BN affine), conv 256->256, FC 256->128, FC 128->10
  const std::size_t want = (64 * 256 * 9 + 256 + 512) + (256 * 256 * 9 + 256 + 512) +
                           (256 * 128 + 128) + (128 * 10 + 10);
  CHECK(want == 773002);
  CHECK(AuxHead<float>(AuxHeadSpec{}, 64, 0).count_params() == want);
}

TEST_CASE("aux head spec validation") {
  AuxHeadSpec spec;
  CHECK_NOTHROW(validate(spec, TaskSpec{}));
  spec.num_classes = 100;
  CHECK_THROWS_AS(validate(spec, TaskSpec{}), ConfigError);
  CHECK_THROWS_AS(AuxHead<float>(AuxHeadSpec{}, 0, 0), ConfigError);
}

TEST_CASE("softmax_t") {
  Tensor<double> zero({1, 2}, 0.0);
  Tensor<double> p = softmax_t(zero, 3.0);
  CHECK(p.data()[0] == 0.5);
  CHECK(p.data()[1] == 0.5);

  Tensor<double> z({1, 2}, std::vector<double>{1.0, 3.0});
  Tensor<double> p1 = softmax_t(z, 1.0);
  CHECK(p1.data()[0] == doctest::Approx(1.0 / (1.0 + std::exp(2.0))).epsilon(1e-12));
  CHECK(p1.data()[1] == doctest::Approx(std::exp(2.0) / (1.0 + std::exp(2.0))).epsilon(1e-12));
  CHECK(std::fabs(p1.data()[0] - 0.1192) < 1e-4);
  Tensor<double> hot = softmax_t(z, 1e6);
  CHECK(std::fabs(hot.data()[0] - 0.5) < 1e-5);

  Rng rng(2);
  Tensor<double> r = random_tensor<double>(rng, {7, 9}, -20, 20);
  Tensor<double> pr = softmax_t(r, 4.0);
  for (int i = 0; i < 7; ++i) {
    double s = 0;
    for (int j = 0; j < 9; ++j) s += pr.data()[i * 9 + j];
    CHECK(std::fabs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("kl_div_loss closed forms") {
  Rng rng(3);
  Tensor<double> a = random_tensor<double>(rng, {4, 6}, -3, 3);
  CHECK(kl_div_loss<double>(nullptr, a, a, 4.0).item() == doctest::Approx(0.0));

  Tensor<double> t({1, 2}, std::vector<double>{40.0, 0.0}), s({1, 2}, 0.0);
  CHECK(std::fabs(kl_div_loss<double>(nullptr, t, s, 1.0).item() - std::log(2.0)) < 1e-6);

  // tau = 1: plain batched KL of softmaxed logits
  Tensor<double> tt = random_tensor<double>(rng, {5, 4}, -3, 3), ss = random_tensor<double>(rng, {5, 4}, -3, 3);
  CHECK(std::fabs(kl_div_loss<double>(nullptr, tt, ss, 1.0).item() - ref_kl(tt, ss, 1.0)) < 1e-6);
  CHECK(std::fabs(kl_div_loss<double>(nullptr, tt, ss, 4.0).item() - ref_kl(tt, ss, 4.0)) < 1e-6);

  for (int rep = 0; rep < 20; ++rep) {
    Tensor<double> x = random_tensor<double>(rng, {3, 5}, -5, 5), y = random_tensor<double>(rng, {3, 5}, -5, 5);
    CHECK(kl_div_loss<double>(nullptr, x, y, rng.uniform(0.5, 8.0)).item() >= 0.0);
  }
  CHECK_THROWS_AS(kl_div_loss<double>(nullptr, tt, Tensor<double>({5, 3}), 1.0), DimensionError);
}

TEST_CASE("kl_div_loss sends no gradient to the teacher") {
  Rng rng(4);
  Tensor<double> t = random_tensor<double>(rng, {3, 4}, -2, 2, true);
  Tensor<double> s = random_tensor<double>(rng, {3, 4}, -2, 2, true);
  GradTape<double> tape;
  tape.backward(kl_div_loss(&tape, t, s, 4.0));
  CHECK(s.has_grad());
  for (double g : t.grad()) CHECK(g == 0.0);

  std::function<double(const Tensor<double>&)> f = [&](const Tensor<double>& probe) {
    return kl_div_loss<double>(nullptr, t, probe, 4.0).item();
  };
  CHECK(relative_error<double>(s.grad(), finite_difference_grad(f, s, 1e-6).data()) < 1e-6);
}

TEST_CASE("cross_entropy_loss closed forms") {
  const std::vector<int> y0{0};
  Tensor<double> uniform({1, 7}, 0.3);
  CHECK(cross_entropy_loss<double>(nullptr, uniform, y0).item() == doctest::Approx(std::log(7.0)));
  Tensor<double> sure({1, 3}, std::vector<double>{200.0, 0.0, 0.0});
  CHECK(cross_entropy_loss<double>(nullptr, sure, y0).item() < 1e-12);
  Tensor<double> z({1, 2}, std::vector<double>{2.0, 0.0});
  const double want = -std::log(std::exp(2.0) / (std::exp(2.0) + 1.0));
  CHECK(cross_entropy_loss<double>(nullptr, z, y0).item() == doctest::Approx(want).epsilon(1e-12));
  CHECK(std::fabs(want - 0.1269) < 1e-4);

  const std::vector<int> bad{2};
  CHECK_THROWS_AS(cross_entropy_loss<double>(nullptr, z, bad), DataError);
  const std::vector<int> neg{-1};
  CHECK_THROWS_AS(cross_entropy_loss<double>(nullptr, z, neg), DataError);
}

TEST_CASE("ohkd reductions and recomposition") {
  Rng rng(5);
  Tensor<double> t = random_tensor<double>(rng, {6, 5}, -3, 3), s = random_tensor<double>(rng, {6, 5}, -3, 3);
  const std::vector<int> y{0, 4, 2, 2, 1, 3};
  const double kl = kl_div_loss<double>(nullptr, t, s, 4.0).item();
  const double ce = cross_entropy_loss<double>(nullptr, s, y).item();

  LossTerm<double> a1 = ohkd_loss<double>(nullptr, t, s, y, 4.0, 1.0);
  LossTerm<double> a0 = ohkd_loss<double>(nullptr, t, s, y, 4.0, 0.0);
  CHECK(a1.loss.item() == kl);  // exact
  CHECK(a0.loss.item() == ce);

  LossTerm<double> mixed = ohkd_loss<double>(nullptr, t, s, y, 4.0, 0.9);
  const double want = 0.9 * ref_kl(t, s, 4.0) + 0.1 * ref_ce(s, y);
  CHECK(std::fabs(mixed.loss.item() - want) < 1e-6);
  CHECK(mixed.parts.l_kl == kl);
  CHECK(mixed.parts.l_ce == ce);
  CHECK(mixed.parts.l_ohkd == mixed.loss.item());

  LossTerm<double> kd = kd_loss<double>(nullptr, t, s, y, 4.0, 0.9);
  CHECK(kd.loss.item() == mixed.loss.item());
  CHECK(kd_loss<double>(nullptr, s, s, y, 4.0, 1.0).loss.item() == doctest::Approx(0.0));
  CHECK(kd_loss<double>(nullptr, t, s, y, 4.0, 0.0).loss.item() == ce);
}

TEST_CASE("teacher_head_loss is cross-entropy") {
  Rng rng(6);
  Tensor<double> z = random_tensor<double>(rng, {4, 3});
  const std::vector<int> y{0, 1, 2, 1};
  CHECK(teacher_head_loss<double>(nullptr, z, y).item() == cross_entropy_loss<double>(nullptr, z, y).item());
}

namespace {

struct Fixture {
  static constexpr int kB = 4, kK = 5;
  std::vector<FeatureMap<double>> taps_t, taps_s;
  std::vector<AuxHead<double>> heads_t, heads_s;
  Tensor<double> final_t, final_s;
  std::vector<int> labels;

  Fixture(const std::vector<int>& units, std::uint64_t seed) {
    Rng rng(seed);
    for (int u : units) {
      const int hw = 16 >> u;
      taps_t.push_back({random_tensor<double>(rng, {kB, 3 + u, hw, hw}), u, FeatureSource::kTeacher});
      taps_s.push_back({random_tensor<double>(rng, {kB, 1 + u, hw, hw}), u, FeatureSource::kStudent});
      heads_t.emplace_back(small_head(kK), 3 + u, rng.next_u64());
      heads_s.emplace_back(small_head(kK), 1 + u, rng.next_u64());
    }
    final_t = random_tensor<double>(rng, {kB, kK}, -3, 3);
    final_s = random_tensor<double>(rng, {kB, kK}, -3, 3);
    labels = {1, 0, 4, 2};
  }

  MhkdResult<double> run(GradTape<double>* tape, const DistillConfig& cfg) {
    return mhkd_loss<double>(tape, taps_t, taps_s, heads_t, heads_s, final_t, final_s, labels, cfg);
  }
};

}  // namespace

TEST_CASE("mhkd reductions") {
  DistillConfig cfg;
  SUBCASE("beta = 0 is exactly KD") {
    Fixture fx({1, 2, 3}, 7);
    cfg.beta = 0.0;
    const double kd = kd_loss<double>(nullptr, fx.final_t, fx.final_s, fx.labels, 4.0, 0.9).loss.item();
    CHECK(fx.run(nullptr, cfg).loss.item() == kd);
  }
  SUBCASE("D = 0 is exactly KD") {
    Fixture fx({}, 8);
    cfg.head_units = {};
    const double kd = kd_loss<double>(nullptr, fx.final_t, fx.final_s, fx.labels, 4.0, 0.9).loss.item();
    MhkdResult<double> r = fx.run(nullptr, cfg);
    CHECK(r.loss.item() == kd);
    CHECK(r.report.per_head.empty());
  }
  SUBCASE("D = 1 is beta * OHKD + KD") {
    Fixture fx({2}, 9);
    cfg.head_units = {2};
    Fixture twin({2}, 9);
    Tensor<double> zt = twin.heads_t[0].forward(nullptr, twin.taps_t[0].tensor, Mode::kTrain);
    Tensor<double> zs = twin.heads_s[0].forward(nullptr, twin.taps_s[0].tensor, Mode::kTrain);
    const double oh = ohkd_loss<double>(nullptr, zt, zs, twin.labels, 4.0, 0.9).loss.item();
    const double kd = kd_loss<double>(nullptr, twin.final_t, twin.final_s, twin.labels, 4.0, 0.9).loss.item();
    CHECK(fx.run(nullptr, cfg).loss.item() == doctest::Approx(0.5 * oh + kd).epsilon(1e-12));
  }
}

TEST_CASE("mhkd with D = 3, beta = 0.5 recomposes from independent components") {
  Fixture fx({1, 2, 3}, 10);
  DistillConfig cfg;
  MhkdResult<double> r = fx.run(nullptr, cfg);
  REQUIRE(r.report.per_head.size() == 3);
  REQUIRE(r.teacher_head_logits.size() == 3);
  long double want = 0;
  for (int j = 0; j < 3; ++j) {
    const auto& zt = r.teacher_head_logits[j];
    const auto& zs = r.student_head_logits[j];
    want += 0.9L * ref_kl(zt, zs, 4.0) + 0.1L * ref_ce(zs, fx.labels);
  }
  want = 0.5L * want + 0.9L * ref_kl(fx.final_t, fx.final_s, 4.0) + 0.1L * ref_ce(fx.final_s, fx.labels);
  CHECK(std::fabs(r.loss.item() - static_cast<double>(want)) < 1e-6);
  CHECK(r.report.l_mhkd == r.loss.item());
  CHECK_NOTHROW(check_report(r.report, cfg.beta));
  CHECK(std::fabs(recompose_mhkd(r.report, 0.5) - r.report.l_mhkd) <= 1e-6 * r.report.l_mhkd);
  CHECK(r.report.head_accuracies.size() == 3);
}

TEST_CASE("mhkd rejects misaligned taps") {
  Fixture fx({1, 2}, 11);
  DistillConfig cfg;  // expects three heads
  CHECK_THROWS_AS(fx.run(nullptr, cfg), ConfigError);
  cfg.head_units = {2, 1};
  CHECK_THROWS_AS(fx.run(nullptr, cfg), ConfigError);
}

TEST_CASE("check_report catches a broken decomposition") {
  LossReport r;
  r.l_kd = 1.0;
  r.per_head = {{0.2, 0.3, 0.21}};
  r.l_mhkd = 1.0 + 0.5 * 0.21;
  CHECK_NOTHROW(check_report(r, 0.5));
  r.l_mhkd += 1e-3;
  CHECK_THROWS_AS(check_report(r, 0.5), ContractError);
  r.l_mhkd = 1.0 + 0.5 * 0.21;
  r.per_head[0].l_ce = -0.5;
  CHECK_THROWS_AS(check_report(r, 0.5), ContractError);
}

TEST_CASE("mhkd gradients: student side matches finite differences, teacher taps get nothing") {
  Fixture fx({1, 2}, 12);
  DistillConfig cfg;
  cfg.head_units = {1, 2};
  for (auto& tap : fx.taps_t) tap.tensor.set_requires_grad(true);
  for (auto& tap : fx.taps_s) tap.tensor.set_requires_grad(true);
  fx.final_t.set_requires_grad(true);
  fx.final_s.set_requires_grad(true);
  GradTape<double> tape;
  MhkdResult<double> r = fx.run(&tape, cfg);
  Tensor<double> objective = r.loss;
  for (const auto& zt : r.teacher_head_logits) objective = add(&tape, objective, teacher_head_loss(&tape, zt, fx.labels));
  tape.backward(objective);

  for (const auto& tap : fx.taps_t) CHECK_FALSE(tap.tensor.has_grad());
  CHECK_FALSE(fx.final_t.has_grad());
  for (const auto& h : fx.heads_t) {
    bool any = false;
    for (const auto& p : h.parameters()) any = any || p.tensor.has_grad();
    CHECK(any);  // teacher heads do train
  }

  // BN in train mode updates running stats on every call; it does not affect
  // train-mode outputs, so repeated evaluation is a pure function of the input.
  std::function<double(const Tensor<double>&)> f = [&](const Tensor<double>& probe) {
    Tensor<double> saved = fx.final_s;
    fx.final_s = probe;
    const double v = fx.run(nullptr, cfg).loss.item();
    fx.final_s = saved;
    return v;
  };
  CHECK(relative_error<double>(fx.final_s.grad(), finite_difference_grad(f, fx.final_s, 1e-6).data()) < 1e-6);

  std::function<double(const Tensor<double>&)> g = [&](const Tensor<double>& probe) {
    Tensor<double> saved = fx.taps_s[1].tensor;
    fx.taps_s[1].tensor = probe;
    const double v = fx.run(nullptr, cfg).loss.item();
    fx.taps_s[1].tensor = saved;
    return v;
  };
  CHECK(relative_error<double>(fx.taps_s[1].tensor.grad(),
                               finite_difference_grad(g, fx.taps_s[1].tensor, 1e-6).data()) < 1e-6);
}

TEST_CASE("mhkd leaves a recorded teacher backbone without gradient") {
  TaskSpec task{4, 3, 16, 16};
  NetworkSpec tspec = tiny_teacher_spec(), sspec = tiny_student_spec();
  Network<double> teacher(tspec, task, 1), student(sspec, task, 2);
  teacher.set_requires_grad(true);  // even when recorded, nothing may reach it
  DistillConfig cfg;
  std::vector<AuxHead<double>> ht, hs;
  for (int u : cfg.head_units) {
    ht.emplace_back(small_head(4), tspec.unit_channels(u), 100 + u);
    hs.emplace_back(small_head(4), sspec.unit_channels(u), 200 + u);
  }
  Rng rng(13);
  Tensor<double> x = random_tensor<double>(rng, {3, 3, 16, 16});
  const std::vector<int> y{0, 3, 1};
  GradTape<double> tape;
  auto rt = teacher.forward_with_taps(&tape, x, cfg.head_units, Mode::kEval, FeatureSource::kTeacher);
  auto rs = student.forward_with_taps(&tape, x, cfg.head_units, Mode::kTrain);
  MhkdResult<double> r = mhkd_loss<double>(&tape, rt.taps, rs.taps, ht, hs, rt.logits, rs.logits, y, cfg);
  Tensor<double> objective = r.loss;
  for (const auto& zt : r.teacher_head_logits) objective = add(&tape, objective, teacher_head_loss(&tape, zt, y));
  tape.backward(objective);
  for (const auto& p : teacher.parameters()) {
    INFO(p.name);
    const bool zero = !p.tensor.has_grad() ||
                      std::all_of(p.tensor.grad().begin(), p.tensor.grad().end(), [](double g) { return g == 0.0; });
    CHECK(zero);
  }
  bool student_moved = false;
  for (const auto& p : student.parameters()) student_moved = student_moved || p.tensor.has_grad();
  CHECK(student_moved);
}

TEST_CASE("a teacher head learns a toy problem above chance within 50 steps") {
  // Frozen random features whose first channels encode the class.
  const int k = 4, b = 32;
  Rng rng(14);
  Tensor<float> feat({b, 8, 4, 4});
  std::vector<int> y(b);
  for (int i = 0; i < b; ++i) {
    y[i] = i % k;
    for (int c = 0; c < 8; ++c)
      for (int p = 0; p < 16; ++p)
        feat.data()[(i * 8 + c) * 16 + p] = static_cast<float>(0.3 * rng.normal() + (c == y[i] ? 1.5 : 0.0));
  }
  AuxHeadSpec spec = small_head(k);
  spec.conv_channels = 16;
  spec.fc_hidden = 16;
  AuxHead<float> head(spec, 8, 3);
  auto params = head.parameters();
  std::vector<std::vector<float>> vel;
  for (const auto& p : params) vel.emplace_back(p.tensor.numel(), 0.0f);
  double acc = 0;
  for (int step = 0; step < 50; ++step) {
    for (auto& p : params) p.tensor.zero_grad();
    GradTape<float> tape;
    Tensor<float> z = head.forward(&tape, feat, Mode::kTrain);
    tape.backward(teacher_head_loss(&tape, z, y));
    for (std::size_t i = 0; i < params.size(); ++i) {
      kernels::sgd_momentum<float>(params[i].tensor.ptr(), params[i].tensor.grad().data(), vel[i].data(),
                                   params[i].tensor.numel(), 0.05f, 0.9f, 0.0f);
    }
  }
  acc = batch_accuracy(head.infer(feat), y);
  CHECK(acc > 1.0 / k + 0.25);
}
