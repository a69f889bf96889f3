// Times the GEMM variants and a conv2d forward/backward at training shapes.

#include <chrono>
#include <cstdio>
#include <vector>

#include "mhkd/kernels.hpp"
#include "mhkd/ops.hpp"
#include "mhkd/rng.hpp"

using namespace mhkd;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void bench_gemm(kernels::Isa isa, int m, int n, int k, kernels::Trans ta = kernels::Trans::kNo,
                kernels::Trans tb = kernels::Trans::kNo) {
  kernels::ScopedIsa scoped(isa);
  const int lda = ta == kernels::Trans::kNo ? k : m;
  const int ldb = tb == kernels::Trans::kNo ? n : k;
  std::vector<float> a(static_cast<std::size_t>(m) * k, 0.5f), b(static_cast<std::size_t>(k) * n, 0.25f),
      c(static_cast<std::size_t>(m) * n);
  int reps = 0;
  const auto t0 = std::chrono::steady_clock::now();
  do {
    kernels::gemm<float>(ta, tb, m, n, k, a.data(), lda, b.data(), ldb,
                         c.data(), n, false);
    ++reps;
  } while (seconds_since(t0) < 0.5);
  const double gflops = 2.0 * m * n * k * reps / seconds_since(t0) / 1e9;
  std::printf("gemm %-6s %c%c m=%-4d n=%-6d k=%-5d %8.2f GFLOP/s\n",
              std::string(kernels::isa_name(isa)).c_str(), ta == kernels::Trans::kNo ? 'N' : 'T',
              tb == kernels::Trans::kNo ? 'N' : 'T', m, n, k, gflops);
}

void bench_conv(int batch, int cin, int cout, int hw) {
  Rng rng(1);
  Tensor<float> x(Shape{batch, cin, hw, hw}), w(Shape{cout, cin, 3, 3}), b(Shape{cout});
  for (float& v : x.data()) v = static_cast<float>(rng.normal());
  for (float& v : w.data()) v = static_cast<float>(rng.normal() * 0.1);
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  b.set_requires_grad(true);
  const auto t0 = std::chrono::steady_clock::now();
  int reps = 0;
  do {
    GradTape<float> tape;
    Tensor<float> y = conv2d(&tape, x, w, b, 1, 1);
    Tensor<float> loss = sum(&tape, y);
    tape.backward(loss);
    ++reps;
  } while (seconds_since(t0) < 1.0);
  const double macs = 3.0 * batch * cout * cin * 9.0 * hw * hw;
  std::printf("conv fwd+bwd B=%d %d->%d %dx%d: %.1f ms/iter, %.2f GMAC/s\n", batch, cin, cout, hw, hw,
              1e3 * seconds_since(t0) / reps, macs * reps / seconds_since(t0) / 1e9);
}

}  // namespace

int main() {
  for (kernels::Isa isa : {kernels::Isa::kScalar, kernels::Isa::kAvx2, kernels::Isa::kNeon}) {
    if (!kernels::isa_supported(isa)) continue;
    bench_gemm(isa, 32, 8192, 288);
    bench_gemm(isa, 128, 1024, 1152);
  }
  // The three products of a 32->32 conv step at 32x32: forward, weight grad, input grad.
  bench_gemm(kernels::active_isa(), 32, 288, 8192, kernels::Trans::kNo, kernels::Trans::kYes);
  bench_gemm(kernels::active_isa(), 288, 8192, 32, kernels::Trans::kYes, kernels::Trans::kNo);
  std::printf("active isa: %s\n", std::string(kernels::isa_name(kernels::active_isa())).c_str());
  bench_conv(64, 32, 32, 32);
  bench_conv(64, 64, 64, 16);
  bench_conv(64, 128, 128, 8);
  bench_conv(64, 64, 64, 4);
}
