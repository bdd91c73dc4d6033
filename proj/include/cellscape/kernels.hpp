#pragma once

// Dense inner loops shared by the graph, model, and clustering code.
//
// Each kernel exists twice: a plain serial reference in kernels::serial and an
// OpenMP version in kernels::omp. The unqualified kernels::* entry points
// dispatch to the OpenMP version when it was compiled in. Every output element
// is produced by one thread with a fixed summation order, so results do not
// depend on the thread count. GEMM entries are fused multiply-add chains over
// the inner index in ascending order; the serial loops and the packed,
// register-tiled OpenMP kernel therefore agree bit for bit.

#include <cstddef>
#include <cstdint>
#include <vector>

namespace cellscape::kernels {

/// Neighbors of each query point: row i holds k (index, distance) pairs sorted
/// by distance, then index.
struct KnnResult {
  std::size_t n = 0;
  std::size_t k = 0;
  std::vector<std::uint32_t> index;
  std::vector<double> distance;
};

/// Output geometry of a stride-1 NHWC convolution.
struct ConvShape {
  std::size_t batch, height, width, channels;
  std::size_t kernel_h, kernel_w, pad;
  std::size_t out_height() const { return height + 2 * pad - kernel_h + 1; }
  std::size_t out_width() const { return width + 2 * pad - kernel_w + 1; }
  std::size_t patch() const { return kernel_h * kernel_w * channels; }
  std::size_t rows() const { return batch * out_height() * out_width(); }
};

namespace serial {
// C[m,n] (+)= A[m,k] * B[k,n]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
             bool accumulate = false);
// C[m,n] (+)= A[k,m]^T * B[k,n]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
             bool accumulate = false);
// C[m,n] (+)= A[m,k] * B[n,k]^T
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
             bool accumulate = false);
void im2col(const ConvShape& s, const double* input, double* cols);
void col2im(const ConvShape& s, const double* cols, double* input_grad);
KnnResult knn_search(const double* points, std::size_t n, std::size_t dim, std::size_t k);
}  // namespace serial

namespace omp {
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
             bool accumulate = false);
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
             bool accumulate = false);
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
             bool accumulate = false);
void im2col(const ConvShape& s, const double* input, double* cols);
void col2im(const ConvShape& s, const double* cols, double* input_grad);
KnnResult knn_search(const double* points, std::size_t n, std::size_t dim, std::size_t k);
}  // namespace omp

bool openmp_enabled();
int max_threads();

inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
                    bool accumulate = false) {
  omp::gemm_nn(m, k, n, a, b, c, accumulate);
}
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
                    bool accumulate = false) {
  omp::gemm_tn(m, k, n, a, b, c, accumulate);
}
inline void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
                    bool accumulate = false) {
  omp::gemm_nt(m, k, n, a, b, c, accumulate);
}
inline void im2col(const ConvShape& s, const double* input, double* cols) { omp::im2col(s, input, cols); }
inline void col2im(const ConvShape& s, const double* cols, double* input_grad) {
  omp::col2im(s, cols, input_grad);
}
inline KnnResult knn_search(const double* points, std::size_t n, std::size_t dim, std::size_t k) {
  return omp::knn_search(points, n, dim, k);
}

}  // namespace cellscape::kernels
