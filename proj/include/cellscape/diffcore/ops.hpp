#pragma once

#include <cstdint>
#include <vector>

#include "cellscape/diffcore/tensor.hpp"

namespace cellscape::ad {

// Linear algebra (2-D operands).
Tensor matmul(const Tensor& a, const Tensor& b);             // [m,k] x [k,n]
Tensor matmul_transposed(const Tensor& a, const Tensor& b);  // [m,k] x [n,k]^T

// Elementwise; operands must have equal shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// Adds a length-C bias along the last axis.
Tensor add_bias(const Tensor& a, const Tensor& bias);

Tensor leaky_relu(const Tensor& a, double slope = 0.2);
Tensor elu(const Tensor& a, double alpha = 1.0);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // input must be positive
/// Softmax of a 2-D tensor along axis 0 (columns) or 1 (rows).
Tensor softmax(const Tensor& a, int axis);

/// Rows divided by their Euclidean norm. Rows with norm below `eps` are
/// divided by eps instead.
Tensor l2_normalize_rows(const Tensor& a, double eps = 1e-12);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor select_rows(const Tensor& a, const std::vector<std::uint32_t>& rows);
Tensor reshape(const Tensor& a, Shape shape);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis);  // 2-D; reduces the given axis
Tensor mean_axis(const Tensor& a, int axis);

// Convolution on NHWC input with a [kh, kw, Cin, Cout] kernel, stride 1.
Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t pad);
/// 2x2 max pooling, stride 2, floor on odd sizes. Ties pick the first element.
Tensor max_pool2x2(const Tensor& x);

struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;
  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

/// Normalizes over every axis except the last. Training mode uses batch
/// statistics and updates the running estimates (unbiased variance).
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state, bool training);

/// Neighborhoods in CSR form. Attention neighborhoods include the node itself.
struct Csr {
  std::vector<std::size_t> offsets;  // n + 1
  std::vector<std::uint32_t> indices;
  std::size_t n() const { return offsets.empty() ? 0 : offsets.size() - 1; }
};

/// Multi-head graph attention. h: [n, din]; weight: [din, heads*dout];
/// att_src and att_dst: [heads, dout]. e_ij = LeakyReLU(att_src.Wh_i + att_dst.Wh_j)
/// is normalized over j in neighborhood(i). Heads are concatenated
/// ([n, heads*dout]) or averaged ([n, dout]). If `attention` is non-null it
/// receives one coefficient per CSR entry and head (entry-major).
Tensor graph_attention(const Tensor& h, const Tensor& weight, const Tensor& att_src, const Tensor& att_dst,
                       const Csr& neighborhood, std::size_t heads, bool concat_heads, double slope = 0.2,
                       std::vector<double>* attention = nullptr);

/// Mean over masked rows of (1 - cos(x_i, xhat_i))^gamma. x is a constant
/// target. A zero-norm row in a masked pair scores cos = 0 and is reported.
Tensor sce_loss(const Tensor& x, const Tensor& xhat, const std::vector<std::uint32_t>& mask, double gamma,
                WarningLog* warnings = nullptr);

/// Multi-positive contrastive loss over unit rows z with positives N_i (no
/// self). The denominator for anchor i sums exp(z_i.z_l / tau) over every
/// (k, l) pair with l in N_k. Anchors default to every row.
Tensor contrastive_loss(const Tensor& z, const Csr& positives, double tau,
                        const std::vector<std::uint32_t>* anchors = nullptr,
                        std::vector<double>* per_anchor = nullptr);

}  // namespace cellscape::ad
