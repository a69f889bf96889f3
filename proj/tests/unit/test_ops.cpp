#include <cmath>

#include "doctest.h"
#include "grad_oracle.hpp"
#include "mhkd/errors.hpp"
#include "mhkd/kernels.hpp"
#include "mhkd/ops.hpp"
#include "test_util.hpp"

using namespace mhkd;
using mhkd::testing::bit_equal;
using mhkd::testing::random_tensor;

TEST_CASE("conv2d shapes and hand values") {
  Tensor<float> x({1, 3, 32, 32}), w({16, 3, 3, 3}), b({16});
  CHECK(conv2d<float>(nullptr, x, w, b, 1, 1).shape() == Shape{1, 16, 32, 32});

  Tensor<double> img({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor<double> diag({1, 1, 2, 2}, std::vector<double>{1, 0, 0, 1});
  Tensor<double> y = conv2d<double>(nullptr, img, diag, Tensor<double>({1}, 0.0), 1, 0);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.item() == 5.0);
}

TEST_CASE("conv2d with a 1x1 unit kernel is the identity, bit-exact") {
  Rng rng(4);
  for (kernels::Isa isa : {kernels::Isa::kScalar, kernels::Isa::kAvx2, kernels::Isa::kNeon}) {
    if (!kernels::isa_supported(isa)) continue;
    kernels::ScopedIsa scoped(isa);
    Tensor<float> x = random_tensor<float>(rng, {2, 1, 5, 7});
    Tensor<float> one({1, 1, 1, 1}, 1.0f);
    Tensor<float> y = conv2d<float>(nullptr, x, one, Tensor<float>({1}, 0.0f), 1, 0);
    CHECK(bit_equal<float>(x.data(), y.data()));
  }
}

TEST_CASE("conv2d errors") {
  Tensor<double> x({1, 3, 8, 8}), w({4, 2, 3, 3});
  CHECK_THROWS_AS(conv2d<double>(nullptr, x, w, {}, 1, 1), DimensionError);
  Tensor<double> w3({4, 3, 3, 3});
  CHECK_THROWS_AS(conv2d<double>(nullptr, x, w3, Tensor<double>({5}), 1, 1), DimensionError);
  CHECK_THROWS_AS(conv2d<double>(nullptr, x, w3, {}, 0, 1), ConfigError);
  CHECK_THROWS_AS(conv2d<double>(nullptr, x, w3, {}, 1, -1), ConfigError);
  Tensor<double> big({4, 3, 11, 11});
  CHECK_THROWS_AS(conv2d<double>(nullptr, x, big, {}, 1, 1), ConfigError);
}

TEST_CASE("conv2d SIMD path matches scalar") {
  Rng rng(5);
  Tensor<float> x = random_tensor<float>(rng, {3, 4, 9, 9}), w = random_tensor<float>(rng, {6, 4, 3, 3});
  Tensor<float> b = random_tensor<float>(rng, {6});
  Tensor<float> ref;
  {
    kernels::ScopedIsa scoped(kernels::Isa::kScalar);
    ref = conv2d<float>(nullptr, x, w, b, 2, 1);
  }
  Tensor<float> fast = conv2d<float>(nullptr, x, w, b, 2, 1);
  CHECK(relative_error<float>(ref.data(), fast.data()) < 1e-6);
}

TEST_CASE("batchnorm train mode normalizes each channel") {
  Rng rng(6);
  Tensor<double> x = random_tensor<double>(rng, {4, 3, 5, 5}, -3, 7);
  Tensor<double> gamma({3}, 1.0), beta({3}, 0.0), rm({3}, 0.0), rv({3}, 1.0);
  Tensor<double> y = batchnorm2d<double>(nullptr, x, gamma, beta, rm, rv, Mode::kTrain);
  const int per = 4 * 25;
  for (int c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    for (int b = 0; b < 4; ++b)
      for (int i = 0; i < 25; ++i) m += y.data()[(b * 3 + c) * 25 + i];
    m /= per;
    for (int b = 0; b < 4; ++b)
      for (int i = 0; i < 25; ++i) v += std::pow(y.data()[(b * 3 + c) * 25 + i] - m, 2);
    v /= per;
    CHECK(std::fabs(m) < 1e-5);
    CHECK(std::fabs(v - 1.0) < 1e-5);
  }
  // running stats moved toward the batch statistics
  CHECK(rm.data()[0] != 0.0);
}

TEST_CASE("batchnorm on a constant channel outputs zeros") {
  Tensor<double> x({2, 1, 3, 3}, 4.25);
  Tensor<double> gamma({1}, 1.0), beta({1}, 0.0), rm({1}, 0.0), rv({1}, 1.0);
  const Tensor<double> y = batchnorm2d<double>(nullptr, x, gamma, beta, rm, rv, Mode::kTrain);
  for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("batchnorm eval mode matches the scalar formula") {
  Rng rng(7);
  Tensor<double> x = random_tensor<double>(rng, {2, 2, 3, 3});
  Tensor<double> gamma({2}, std::vector<double>{1.5, -0.5}), beta({2}, std::vector<double>{0.1, 2.0});
  Tensor<double> rm({2}, std::vector<double>{0.3, -0.2}), rv({2}, std::vector<double>{0.8, 2.5});
  Tensor<double> rm0 = rm.clone(), rv0 = rv.clone();
  Tensor<double> y = batchnorm2d<double>(nullptr, x, gamma, beta, rm, rv, Mode::kEval);
  for (int b = 0; b < 2; ++b)
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < 9; ++i) {
        const int k = (b * 2 + c) * 9 + i;
        const double want = (x.data()[k] - rm0.data()[c]) / std::sqrt(rv0.data()[c] + 1e-5) *
                                gamma.data()[c] + beta.data()[c];
        CHECK(y.data()[k] == doctest::Approx(want).epsilon(1e-14));
      }
  CHECK(bit_equal<double>(rm.data(), rm0.data()));
  CHECK(bit_equal<double>(rv.data(), rv0.data()));
  Tensor<double> again = batchnorm2d<double>(nullptr, x, gamma, beta, rm, rv, Mode::kEval);
  CHECK(bit_equal<double>(y.data(), again.data()));
}

TEST_CASE("batchnorm train mode needs two values per channel") {
  Tensor<double> x({1, 2, 1, 1}, 1.0);
  Tensor<double> gamma({2}, 1.0), beta({2}, 0.0), rm({2}, 0.0), rv({2}, 1.0);
  CHECK_THROWS_AS(batchnorm2d<double>(nullptr, x, gamma, beta, rm, rv, Mode::kTrain), DegenerateBatchError);
  CHECK_NOTHROW(batchnorm2d<double>(nullptr, x, gamma, beta, rm, rv, Mode::kEval));
}

TEST_CASE("relu values and subgradient") {
  Tensor<double> x({3}, std::vector<double>{-1, 0, 2});
  x.set_requires_grad(true);
  GradTape<double> tape;
  Tensor<double> y = relu(&tape, x);
  CHECK(y.data()[0] == 0.0);
  CHECK(y.data()[1] == 0.0);
  CHECK(y.data()[2] == 2.0);
  tape.backward(sum(&tape, y));
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 0.0);  // subgradient at 0
  CHECK(x.grad()[2] == 1.0);

  Tensor<double> neg({4}, -0.5);
  neg.set_requires_grad(true);
  GradTape<double> t2;
  Tensor<double> z = relu(&t2, neg);
  t2.backward(sum(&t2, z));
  for (double v : z.data()) CHECK(v == 0.0);
  for (double g : neg.grad()) CHECK(g == 0.0);
}

TEST_CASE("relu gradient at [-1, 2] matches finite differences") {
  Tensor<double> x({2}, std::vector<double>{-1.0, 2.0});
  x.set_requires_grad(true);
  GradTape<double> tape;
  tape.backward(sum(&tape, relu(&tape, x)));
  std::function<double(const Tensor<double>&)> f = [](const Tensor<double>& t) {
    return sum<double>(nullptr, relu<double>(nullptr, t)).item();
  };
  Tensor<double> fd = finite_difference_grad(f, x, 1e-6);
  CHECK(fd.data()[0] == doctest::Approx(0.0));
  CHECK(fd.data()[1] == doctest::Approx(1.0));
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 1.0);
}

TEST_CASE("linear values and shapes") {
  Tensor<double> x({1, 2}, std::vector<double>{1, 2}), w({1, 2}, std::vector<double>{3, 4});
  CHECK(linear<double>(nullptr, x, w, Tensor<double>({1}, 5.0)).item() == 16.0);

  Rng rng(8);
  Tensor<double> in = random_tensor<double>(rng, {3, 4});
  Tensor<double> eye({4, 4});
  for (int i = 0; i < 4; ++i) eye.data()[i * 5] = 1.0;
  CHECK(bit_equal<double>(linear<double>(nullptr, in, eye, Tensor<double>({4}, 0.0)).data(), in.data()));

  Tensor<float> big({8, 256}), wb({100, 256});
  CHECK(linear<float>(nullptr, big, wb, Tensor<float>({100})).shape() == Shape{8, 100});
  CHECK_THROWS_AS(linear<float>(nullptr, big, Tensor<float>({100, 255}), {}), DimensionError);
}

TEST_CASE("global average pool") {
  Tensor<double> c({2, 3, 4, 4}, 0.75);
  const Tensor<double> pooled = global_avg_pool<double>(nullptr, c);
  for (double v : pooled.data()) CHECK(v == 0.75);
  Tensor<double> x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  x.set_requires_grad(true);
  GradTape<double> tape;
  Tensor<double> y = global_avg_pool(&tape, x);
  CHECK(y.shape() == Shape{1, 1});
  CHECK(y.item() == 2.5);
  tape.backward(sum(&tape, y));
  for (double g : x.grad()) CHECK(g == 0.25);
}

TEST_CASE("max pool values, ties and errors") {
  Tensor<double> x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  CHECK(max_pool2d<double>(nullptr, x, 2, 2).item() == 4.0);

  Tensor<double> flat({1, 1, 2, 2}, 3.0);
  flat.set_requires_grad(true);
  GradTape<double> tape;
  Tensor<double> y = max_pool2d(&tape, flat, 2, 2);
  CHECK(y.item() == 3.0);
  tape.backward(sum(&tape, y));
  CHECK(flat.grad()[0] == 1.0);  // first element in scan order wins
  CHECK(flat.grad()[1] == 0.0);
  CHECK(flat.grad()[2] == 0.0);
  CHECK(flat.grad()[3] == 0.0);

  CHECK_THROWS_AS(max_pool2d<double>(nullptr, x, 3, 1), ConfigError);
}

TEST_CASE("max pool matches a brute-force window scan") {
  Rng rng(9);
  for (int rep = 0; rep < 10; ++rep) {
    Tensor<double> x = random_tensor<double>(rng, {2, 3, 4, 4});
    Tensor<double> y = max_pool2d<double>(nullptr, x, 2, 2);
    REQUIRE(y.shape() == Shape{2, 3, 2, 2});
    for (int bc = 0; bc < 6; ++bc)
      for (int oy = 0; oy < 2; ++oy)
        for (int ox = 0; ox < 2; ++ox) {
          double best = -1e300;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) best = std::max(best, x.data()[bc * 16 + (2 * oy + dy) * 4 + 2 * ox + dx]);
          CHECK(y.data()[bc * 4 + oy * 2 + ox] == best);
        }
  }
}

TEST_CASE("forward ops are pure") {
  Rng rng(10);
  Tensor<float> x = random_tensor<float>(rng, {2, 3, 6, 6}), w = random_tensor<float>(rng, {4, 3, 3, 3});
  Tensor<float> b = random_tensor<float>(rng, {4});
  CHECK(bit_equal<float>(conv2d<float>(nullptr, x, w, b, 1, 1).data(), conv2d<float>(nullptr, x, w, b, 1, 1).data()));
  CHECK(bit_equal<float>(max_pool2d<float>(nullptr, x, 2, 2).data(), max_pool2d<float>(nullptr, x, 2, 2).data()));
}

TEST_CASE("gradient oracle: every op within 1e-6 over 20 random shapes") {
  for (const auto& report : mhkd::testing::run_gradient_oracles(20240601)) {
    INFO(report.op);
    CHECK(report.cases.size() >= 20);
    CHECK(report.worst() <= 1e-6);
  }
}
