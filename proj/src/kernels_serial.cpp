#include "cellscape/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace cellscape::kernels::serial {

void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
             bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    if (!accumulate) std::fill(ci, ci + n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] = std::fma(aip, bp[j], ci[j]);
    }
  }
}

void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double api = ap[i];
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] = std::fma(api, bp[j], ci[j]);
    }
  }
}

void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
             bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = accumulate ? c[i * n + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) s = std::fma(a[i * k + p], b[j * k + p], s);
      c[i * n + j] = s;
    }
  }
}

void im2col(const ConvShape& s, const double* input, double* cols) {
  const std::size_t ho = s.out_height(), wo = s.out_width(), patch = s.patch();
  for (std::size_t img = 0; img < s.batch; ++img)
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
  for (std::size_t img = 0; img < s.batch; ++img)
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
  std::vector<std::pair<double, std::uint32_t>> cand;
  for (std::size_t i = 0; i < n; ++i) {
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
    std::sort(cand.begin(), cand.end());
    for (std::size_t t = 0; t < k; ++t) {
      out.index[i * k + t] = cand[t].second;
      out.distance[i * k + t] = std::sqrt(cand[t].first);
    }
  }
  return out;
}

}  // namespace cellscape::kernels::serial
