#include "cellscape/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#if defined(__AVX2__) || defined(__AVX512F__)
#include <immintrin.h>
#endif

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cellscape::kernels {

bool openmp_enabled() {
#ifdef _OPENMP
  return true;
#else
  return false;
#endif
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace omp {

namespace {

// Packed GEMM. C is computed in MR x NR register tiles; every element is a
// single fused multiply-add chain over p in ascending order, so blocking,
// packing, and the thread count never change a result bit.
constexpr std::size_t MR = 8;
constexpr std::size_t NR = 16;
constexpr std::size_t KC = 256;
constexpr std::size_t MC = 128;
constexpr std::size_t NC = 1024;

// Element (i, p) of A lives at a[i * si + p * sp]; likewise for B.
struct View {
  const double* data;
  std::size_t si, sj;
  double at(std::size_t i, std::size_t j) const { return data[i * si + j * sj]; }
};

// rows [i0, i0+mc) x cols [p0, p0+kc) of A into MR-row panels, p-major.
void pack_a(const View& a, std::size_t i0, std::size_t mc, std::size_t p0, std::size_t kc, double* out) {
  for (std::size_t ir = 0; ir < mc; ir += MR) {
    const std::size_t rows = std::min(MR, mc - ir);
    for (std::size_t p = 0; p < kc; ++p) {
      double* dst = out + ir * kc + p * MR;
      std::size_t r = 0;
      for (; r < rows; ++r) dst[r] = a.at(i0 + ir + r, p0 + p);
      for (; r < MR; ++r) dst[r] = 0.0;
    }
  }
}

void pack_b(const View& b, std::size_t p0, std::size_t kc, std::size_t j0, std::size_t nc, double* out) {
  for (std::size_t jr = 0; jr < nc; jr += NR) {
    const std::size_t cols = std::min(NR, nc - jr);
    for (std::size_t p = 0; p < kc; ++p) {
      double* dst = out + jr * kc + p * NR;
      std::size_t j = 0;
      if (b.sj == 1) {
        const double* src = b.data + (p0 + p) * b.si + j0 + jr;
        for (; j < cols; ++j) dst[j] = src[j];
      } else {
        for (; j < cols; ++j) dst[j] = b.at(p0 + p, j0 + jr + j);
      }
      for (; j < NR; ++j) dst[j] = 0.0;
    }
  }
}

// acc (MR x NR, row-major) continues its fma chains over kc packed steps.
inline void micro_kernel(std::size_t kc, const double* ap, const double* bp, double* acc) {
#if defined(__AVX512F__)
  __m512d c[MR][2];
  for (std::size_t r = 0; r < MR; ++r) {
    c[r][0] = _mm512_loadu_pd(acc + r * NR);
    c[r][1] = _mm512_loadu_pd(acc + r * NR + 8);
  }
  for (std::size_t p = 0; p < kc; ++p) {
    const __m512d b0 = _mm512_loadu_pd(bp + p * NR);
    const __m512d b1 = _mm512_loadu_pd(bp + p * NR + 8);
    for (std::size_t r = 0; r < MR; ++r) {
      const __m512d av = _mm512_set1_pd(ap[p * MR + r]);
      c[r][0] = _mm512_fmadd_pd(av, b0, c[r][0]);
      c[r][1] = _mm512_fmadd_pd(av, b1, c[r][1]);
    }
  }
  for (std::size_t r = 0; r < MR; ++r) {
    _mm512_storeu_pd(acc + r * NR, c[r][0]);
    _mm512_storeu_pd(acc + r * NR + 8, c[r][1]);
  }
#elif defined(__AVX2__) && defined(__FMA__)
  for (std::size_t half = 0; half < MR; half += 4) {
    __m256d c[4][4];
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t v = 0; v < 4; ++v) c[r][v] = _mm256_loadu_pd(acc + (half + r) * NR + 4 * v);
    for (std::size_t p = 0; p < kc; ++p) {
      __m256d bv[4];
      for (std::size_t v = 0; v < 4; ++v) bv[v] = _mm256_loadu_pd(bp + p * NR + 4 * v);
      for (std::size_t r = 0; r < 4; ++r) {
        const __m256d av = _mm256_set1_pd(ap[p * MR + half + r]);
        for (std::size_t v = 0; v < 4; ++v) c[r][v] = _mm256_fmadd_pd(av, bv[v], c[r][v]);
      }
    }
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t v = 0; v < 4; ++v) _mm256_storeu_pd(acc + (half + r) * NR + 4 * v, c[r][v]);
  }
#else
  for (std::size_t p = 0; p < kc; ++p)
    for (std::size_t r = 0; r < MR; ++r) {
      const double av = ap[p * MR + r];
      for (std::size_t j = 0; j < NR; ++j) acc[r * NR + j] = std::fma(av, bp[p * NR + j], acc[r * NR + j]);
    }
#endif
}

void gemm_packed(std::size_t m, std::size_t k, std::size_t n, const View& a, const View& b, double* c,
                 bool accumulate) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    return;
  }
  std::vector<double> bpack(std::min(KC, k) * ((std::min(NC, n) + NR - 1) / NR * NR));
  for (std::size_t j0 = 0; j0 < n; j0 += NC) {
    const std::size_t nc = std::min(NC, n - j0);
    for (std::size_t p0 = 0; p0 < k; p0 += KC) {
      const std::size_t kc = std::min(KC, k - p0);
      const bool first = p0 == 0 && !accumulate;
      pack_b(b, p0, kc, j0, nc, bpack.data());
      const long mblocks = static_cast<long>((m + MC - 1) / MC);
#pragma omp parallel if (m * kc * nc > 65536)
      {
        std::vector<double> apack(MC * kc);
        alignas(64) double acc[MR * NR];
#pragma omp for schedule(static)
        for (long blk = 0; blk < mblocks; ++blk) {
          const std::size_t i0 = static_cast<std::size_t>(blk) * MC;
          const std::size_t mc = std::min(MC, m - i0);
          pack_a(a, i0, mc, p0, kc, apack.data());
          for (std::size_t jr = 0; jr < nc; jr += NR) {
            const std::size_t cols = std::min(NR, nc - jr);
            for (std::size_t ir = 0; ir < mc; ir += MR) {
              const std::size_t rows = std::min(MR, mc - ir);
              double* ct = c + (i0 + ir) * n + j0 + jr;
              for (std::size_t r = 0; r < MR; ++r)
                for (std::size_t j = 0; j < NR; ++j)
                  acc[r * NR + j] = (!first && r < rows && j < cols) ? ct[r * n + j] : 0.0;
              micro_kernel(kc, apack.data() + ir * kc, bpack.data() + jr * kc, acc);
              for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < cols; ++j) ct[r * n + j] = acc[r * NR + j];
            }
          }
        }
      }
    }
  }
}

}  // namespace

void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
             bool accumulate) {
  gemm_packed(m, k, n, {a, k, 1}, {b, n, 1}, c, accumulate);
}

void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
             bool accumulate) {
  gemm_packed(m, k, n, {a, 1, m}, {b, n, 1}, c, accumulate);
}

void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
             bool accumulate) {
  gemm_packed(m, k, n, {a, k, 1}, {b, 1, k}, c, accumulate);
}

void im2col(const ConvShape& s, const double* input, double* cols) {
  const std::size_t ho = s.out_height(), wo = s.out_width(), patch = s.patch();
#pragma omp parallel for schedule(static)
  for (long img = 0; img < static_cast<long>(s.batch); ++img)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t x = 0; x < wo; ++x) {
        double* row = cols + ((img * ho + y) * wo + x) * patch;
        for (std::size_t dy = 0; dy < s.kernel_h; ++dy)
          for (std::size_t dx = 0; dx < s.kernel_w; ++dx) {
            const long iy = static_cast<long>(y + dy) - static_cast<long>(s.pad);
            const long ix = static_cast<long>(x + dx) - static_cast<long>(s.pad);
            double* dst = row + (dy * s.kernel_w + dx) * s.channels;
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(s.height) || ix >= static_cast<long>(s.width)) {
              std::fill(dst, dst + s.channels, 0.0);
            } else {
              const double* src = input + ((img * s.height + iy) * s.width + ix) * s.channels;
              std::copy(src, src + s.channels, dst);
            }
          }
      }
}

void col2im(const ConvShape& s, const double* cols, double* input_grad) {
  const std::size_t ho = s.out_height(), wo = s.out_width(), patch = s.patch();
  // Images never overlap, so parallelizing over the batch keeps each input
  // element's accumulation order identical to the serial kernel.
#pragma omp parallel for schedule(static)
  for (long img = 0; img < static_cast<long>(s.batch); ++img)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t x = 0; x < wo; ++x) {
        const double* row = cols + ((img * ho + y) * wo + x) * patch;
        for (std::size_t dy = 0; dy < s.kernel_h; ++dy)
          for (std::size_t dx = 0; dx < s.kernel_w; ++dx) {
            const long iy = static_cast<long>(y + dy) - static_cast<long>(s.pad);
            const long ix = static_cast<long>(x + dx) - static_cast<long>(s.pad);
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(s.height) || ix >= static_cast<long>(s.width)) continue;
            const double* src = row + (dy * s.kernel_w + dx) * s.channels;
            double* dst = input_grad + ((img * s.height + iy) * s.width + ix) * s.channels;
            for (std::size_t ch = 0; ch < s.channels; ++ch) dst[ch] += src[ch];
          }
      }
}

KnnResult knn_search(const double* points, std::size_t n, std::size_t dim, std::size_t k) {
  KnnResult out{n, k, std::vector<std::uint32_t>(n * k), std::vector<double>(n * k)};
#pragma omp parallel
  {
    std::vector<std::pair<double, std::uint32_t>> cand;
    cand.reserve(n);
#pragma omp for schedule(dynamic, 64)
    for (long ii = 0; ii < static_cast<long>(n); ++ii) {
      const std::size_t i = static_cast<std::size_t>(ii);
      cand.clear();
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        double d2 = 0.0;
        for (std::size_t t = 0; t < dim; ++t) {
          const double diff = points[i * dim + t] - points[j * dim + t];
          d2 += diff * diff;
        }
        cand.emplace_back(d2, static_cast<std::uint32_t>(j));
      }
      std::partial_sort(cand.begin(), cand.begin() + static_cast<long>(k), cand.end());
      for (std::size_t t = 0; t < k; ++t) {
        out.index[i * k + t] = cand[t].second;
        out.distance[i * k + t] = std::sqrt(cand[t].first);
      }
    }
  }
  return out;
}

}  // namespace omp
}  // namespace cellscape::kernels
