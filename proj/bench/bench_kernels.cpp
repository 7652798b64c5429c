#include <chrono>
#include <cmath>
#include <cstdio>
#include <vector>

#include "wmlab/kernels.hpp"
#include "wmlab/rng.hpp"

using Clock = std::chrono::steady_clock;

namespace {

double time_ms(void (*fn)(bool, bool, int, int, int, const double*,
                          const double*, double*, bool),
               int n, const std::vector<double>& a,
               const std::vector<double>& b, std::vector<double>& c,
               int reps) {
  fn(false, false, n, n, n, a.data(), b.data(), c.data(), false);  // warm
  const auto t0 = Clock::now();
  for (int r = 0; r < reps; ++r)
    fn(false, false, n, n, n, a.data(), b.data(), c.data(), false);
  const auto t1 = Clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

}  // namespace

int main() {
  wmlab::Rng rng(42);
  std::printf("%8s %6s %12s %12s %9s %10s\n", "n", "reps", "serial ms",
              "parallel ms", "speedup", "max |diff|");
  for (int n : {32, 64, 128, 256, 512}) {
    const int reps = n <= 128 ? 50 : 10;
    std::vector<double> a(static_cast<size_t>(n) * n),
        b(static_cast<size_t>(n) * n), c0(a.size()), c1(a.size());
    for (auto& x : a) x = rng.normal();
    for (auto& x : b) x = rng.normal();
    const double ts = time_ms(wmlab::kernels::gemm_serial, n, a, b, c0, reps);
    const double tp = time_ms(wmlab::kernels::gemm, n, a, b, c1, reps);
    double md = 0.0;
    for (size_t i = 0; i < c0.size(); ++i)
      md = std::max(md, std::fabs(c0[i] - c1[i]));
    std::printf("%8d %6d %12.3f %12.3f %8.2fx %10.3g\n", n, reps, ts, tp,
                ts / tp, md);
  }
  return 0;
}
