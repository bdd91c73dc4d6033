// Serial reference vs OpenMP kernels: wall time and bitwise agreement.
//   bench_kernels [repetitions]

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <vector>

#include "cellscape/kernels.hpp"
#include "cellscape/rng.hpp"

namespace k = cellscape::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  cellscape::Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

double best_of(int reps, const std::function<void()>& f) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  return best;
}

void report(const char* name, double serial_s, double omp_s, bool identical) {
  std::printf("%-28s serial %9.3f ms  omp %9.3f ms  speedup %5.2fx  %s\n", name, serial_s * 1e3, omp_s * 1e3,
              serial_s / omp_s, identical ? "bitwise-equal" : "MISMATCH");
}

bool same(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

int main(int argc, char** argv) {
  const int reps = argc > 1 ? std::max(1, std::atoi(argv[1])) : 5;
  std::printf("openmp %s, max threads %d, best of %d\n", k::openmp_enabled() ? "on" : "off", k::max_threads(), reps);
  bool ok = true;

  for (std::size_t n : {128, 512}) {
    const auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
    std::vector<double> cs(n * n), co(n * n);
    const double ts = best_of(reps, [&] { k::serial::gemm_nn(n, n, n, a.data(), b.data(), cs.data()); });
    const double to = best_of(reps, [&] { k::omp::gemm_nn(n, n, n, a.data(), b.data(), co.data()); });
    char name[64];
    std::snprintf(name, sizeof name, "gemm_nn %zux%zux%zu", n, n, n);
    report(name, ts, to, same(cs, co));
    ok = ok && same(cs, co);
  }
  {
    // Shapes seen in training: 2000 cells x 200 genes x 128 hidden.
    const std::size_t m = 2000, kk = 200, n = 128;
    const auto a = random_vec(m * kk, 3), b = random_vec(kk * n, 4), bt = random_vec(n * kk, 5);
    std::vector<double> cs(m * n), co(m * n);
    report("gemm_nn 2000x200x128", best_of(reps, [&] { k::serial::gemm_nn(m, kk, n, a.data(), b.data(), cs.data()); }),
           best_of(reps, [&] { k::omp::gemm_nn(m, kk, n, a.data(), b.data(), co.data()); }), same(cs, co));
    ok = ok && same(cs, co);
    report("gemm_nt 2000x200x128", best_of(reps, [&] { k::serial::gemm_nt(m, kk, n, a.data(), bt.data(), cs.data()); }),
           best_of(reps, [&] { k::omp::gemm_nt(m, kk, n, a.data(), bt.data(), co.data()); }), same(cs, co));
    ok = ok && same(cs, co);
    const auto at = random_vec(kk * m, 6);
    std::vector<double> gs(m * n), go(m * n);
    const auto bb = random_vec(kk * n, 7);
    report("gemm_tn 2000x200x128", best_of(reps, [&] { k::serial::gemm_tn(m, kk, n, at.data(), bb.data(), gs.data()); }),
           best_of(reps, [&] { k::omp::gemm_tn(m, kk, n, at.data(), bb.data(), go.data()); }), same(gs, go));
    ok = ok && same(gs, go);
  }
  {
    const k::ConvShape s{256, 15, 15, 16, 3, 3, 1};
    const auto in = random_vec(s.batch * s.height * s.width * s.channels, 8);
    std::vector<double> cs(s.rows() * s.patch()), co(cs.size());
    report("im2col 256x15x15x16", best_of(reps, [&] { k::serial::im2col(s, in.data(), cs.data()); }),
           best_of(reps, [&] { k::omp::im2col(s, in.data(), co.data()); }), same(cs, co));
    ok = ok && same(cs, co);
    std::vector<double> gs(in.size()), go(in.size());
    report("col2im 256x15x15x16", best_of(reps, [&] { k::serial::col2im(s, cs.data(), gs.data()); }),
           best_of(reps, [&] { k::omp::col2im(s, cs.data(), go.data()); }), same(gs, go));
    ok = ok && same(gs, go);
  }
  {
    const std::size_t n = 4000;
    const auto pts = random_vec(n * 2, 9);
    k::KnnResult rs, ro;
    const double ts = best_of(reps, [&] { rs = k::serial::knn_search(pts.data(), n, 2, 6); });
    const double to = best_of(reps, [&] { ro = k::omp::knn_search(pts.data(), n, 2, 6); });
    const bool eq = rs.index == ro.index && same(rs.distance, ro.distance);
    report("knn 4000 pts k=6", ts, to, eq);
    ok = ok && eq;
  }
  return ok ? 0 : 1;
}
