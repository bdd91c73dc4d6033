#include "cellscape/diffcore/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "cellscape/kernels.hpp"

namespace cellscape::ad {

namespace {

void require_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2) throw InvalidArgument(std::string(op) + " needs a 2-D tensor, got " + shape_string(t.shape()));
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw InvalidArgument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                          shape_string(b.shape()));
}

bool needs(const Node& self, std::size_t k) { return self.inputs[k]->requires_grad; }
std::vector<double>& grad_in(Node& self, std::size_t k) { return self.inputs[k]->grad_buffer(); }
const std::vector<double>& value_in(const Node& self, std::size_t k) { return self.inputs[k]->value; }

double log_sum_exp(const double* v, std::size_t n) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) m = std::max(m, v[i]);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(v[i] - m);
  return m + std::log(s);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw DimensionMismatch("matmul inner dimension", k, b.dim(0));
  std::vector<double> c(m * n);
  kernels::gemm_nn(m, k, n, a.value().data(), b.value().data(), c.data());
  return make_result({m, n}, std::move(c), {a, b}, [m, k, n](Node& self) {
    const double* dc = self.grad.data();
    if (needs(self, 0)) kernels::gemm_nt(m, n, k, dc, value_in(self, 1).data(), grad_in(self, 0).data(), true);
    if (needs(self, 1)) kernels::gemm_tn(k, m, n, value_in(self, 0).data(), dc, grad_in(self, 1).data(), true);
  });
}

Tensor matmul_transposed(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul_transposed");
  require_2d(b, "matmul_transposed");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) throw DimensionMismatch("matmul_transposed inner dimension", k, b.dim(1));
  std::vector<double> c(m * n);
  kernels::gemm_nt(m, k, n, a.value().data(), b.value().data(), c.data());
  return make_result({m, n}, std::move(c), {a, b}, [m, k, n](Node& self) {
    const double* dc = self.grad.data();
    if (needs(self, 0)) kernels::gemm_nn(m, n, k, dc, value_in(self, 1).data(), grad_in(self, 0).data(), true);
    if (needs(self, 1)) kernels::gemm_tn(n, m, k, dc, value_in(self, 0).data(), grad_in(self, 1).data(), true);
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] + b.value()[i];
  return make_result(a.shape(), std::move(v), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (needs(self, k)) {
        auto& g = grad_in(self, k);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] - b.value()[i];
  return make_result(a.shape(), std::move(v), {a, b}, [](Node& self) {
    if (needs(self, 0)) {
      auto& g = grad_in(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (needs(self, 1)) {
      auto& g = grad_in(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] * b.value()[i];
  return make_result(a.shape(), std::move(v), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (needs(self, k)) {
        auto& g = grad_in(self, k);
        const auto& other = value_in(self, 1 - k);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * other[i];
      }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> v(a.value());
  for (double& x : v) x *= s;
  return make_result(a.shape(), std::move(v), {a}, [s](Node& self) {
    auto& g = grad_in(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  if (a.ndim() == 0) throw InvalidArgument("add_bias on a scalar");
  const std::size_t c = a.shape().back();
  if (bias.numel() != c) throw DimensionMismatch("bias length vs last axis", c, bias.numel());
  std::vector<double> v(a.value());
  const std::size_t rows = c ? v.size() / c : 0;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) v[r * c + j] += bias.value()[j];
  return make_result(a.shape(), std::move(v), {a, bias}, [rows, c](Node& self) {
    if (needs(self, 0)) {
      auto& g = grad_in(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (needs(self, 1)) {
      auto& g = grad_in(self, 1);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[r * c + j];
    }
  });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  std::vector<double> v(a.value());
  for (double& x : v) x = x > 0.0 ? x : slope * x;
  return make_result(a.shape(), std::move(v), {a}, [slope](Node& self) {
    auto& g = grad_in(self, 0);
    const auto& x = value_in(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (x[i] > 0.0 ? 1.0 : slope);
  });
}

Tensor elu(const Tensor& a, double alpha) {
  std::vector<double> v(a.value());
  for (double& x : v) x = x > 0.0 ? x : alpha * std::expm1(x);
  // For x <= 0 the derivative alpha * e^x equals y + alpha.
  return make_result(a.shape(), std::move(v), {a}, [alpha](Node& self) {
    auto& g = grad_in(self, 0);
    const auto& x = value_in(self, 0);
    const auto& y = self.value;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (x[i] > 0.0 ? 1.0 : y[i] + alpha);
  });
}

Tensor exp(const Tensor& a) {
  std::vector<double> v(a.value());
  for (double& x : v) x = std::exp(x);
  auto out = make_result(a.shape(), v, {a}, nullptr);
  if (out.requires_grad())
    out.node()->backward_fn = [](Node& self) {
      auto& g = grad_in(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
    };
  return out;
}

Tensor log(const Tensor& a) {
  std::vector<double> v(a.value());
  for (double& x : v) {
    if (!(x > 0.0)) throw NumericalError("log of a non-positive value");
    x = std::log(x);
  }
  return make_result(a.shape(), std::move(v), {a}, [](Node& self) {
    auto& g = grad_in(self, 0);
    const auto& x = value_in(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / x[i];
  });
}

Tensor softmax(const Tensor& a, int axis) {
  require_2d(a, "softmax");
  if (axis != 0 && axis != 1) throw InvalidArgument("softmax axis must be 0 or 1");
  const std::size_t r = a.dim(0), c = a.dim(1);
  // Strided view: `lines` independent vectors of length `len`.
  const std::size_t lines = axis == 1 ? r : c, len = axis == 1 ? c : r;
  const std::size_t step = axis == 1 ? 1 : c, line_step = axis == 1 ? c : 1;
  std::vector<double> v(a.numel());
  for (std::size_t l = 0; l < lines; ++l) {
    const double* x = a.value().data() + l * line_step;
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < len; ++t) m = std::max(m, x[t * step]);
    double s = 0.0;
    for (std::size_t t = 0; t < len; ++t) s += (v[l * line_step + t * step] = std::exp(x[t * step] - m));
    for (std::size_t t = 0; t < len; ++t) v[l * line_step + t * step] /= s;
  }
  auto out = make_result(a.shape(), std::move(v), {a}, nullptr);
  if (out.requires_grad())
    out.node()->backward_fn = [lines, len, step, line_step](Node& self) {
      auto& g = grad_in(self, 0);
      for (std::size_t l = 0; l < lines; ++l) {
        double dot = 0.0;
        for (std::size_t t = 0; t < len; ++t) {
          const std::size_t i = l * line_step + t * step;
          dot += self.grad[i] * self.value[i];
        }
        for (std::size_t t = 0; t < len; ++t) {
          const std::size_t i = l * line_step + t * step;
          g[i] += self.value[i] * (self.grad[i] - dot);
        }
      }
    };
  return out;
}

Tensor l2_normalize_rows(const Tensor& a, double eps) {
  require_2d(a, "l2_normalize_rows");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> v(a.numel()), norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += a.value()[i * c + j] * a.value()[i * c + j];
    norms[i] = std::sqrt(s);
    const double d = std::max(norms[i], eps);
    for (std::size_t j = 0; j < c; ++j) v[i * c + j] = a.value()[i * c + j] / d;
  }
  auto out = make_result(a.shape(), std::move(v), {a}, nullptr);
  if (out.requires_grad())
    out.node()->backward_fn = [r, c, eps, norms = std::move(norms)](Node& self) {
      auto& g = grad_in(self, 0);
      for (std::size_t i = 0; i < r; ++i) {
        const double* y = self.value.data() + i * c;
        const double* dy = self.grad.data() + i * c;
        if (norms[i] < eps) {
          for (std::size_t j = 0; j < c; ++j) g[i * c + j] += dy[j] / eps;
          continue;
        }
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += dy[j] * y[j];
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += (dy[j] - dot * y[j]) / norms[i];
      }
    };
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw InvalidArgument("concat_cols of nothing");
  const std::size_t r = parts[0].ndim() == 2 ? parts[0].dim(0) : 0;
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_2d(p, "concat_cols");
    if (p.dim(0) != r) throw DimensionMismatch("concat_cols row count", r, p.dim(0));
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<double> v(r * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(parts[k].value().data() + i * widths[k], widths[k], v.data() + i * total + off);
    off += widths[k];
  }
  return make_result({r, total}, std::move(v), parts, [r, total, widths](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (needs(self, k)) {
        auto& g = grad_in(self, k);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) g[i * widths[k] + j] += self.grad[i * total + off + j];
      }
      off += widths[k];
    }
  });
}

Tensor select_rows(const Tensor& a, const std::vector<std::uint32_t>& rows) {
  if (a.ndim() == 0) throw InvalidArgument("select_rows on a scalar");
  const std::size_t n = a.dim(0), w = n ? a.numel() / n : 0;
  std::vector<double> v(rows.size() * w);
  for (std::size_t t = 0; t < rows.size(); ++t) {
    if (rows[t] >= n) throw InvalidArgument("select_rows index " + std::to_string(rows[t]) + " out of range");
    std::copy_n(a.value().data() + rows[t] * w, w, v.data() + t * w);
  }
  Shape shape = a.shape();
  shape[0] = rows.size();
  return make_result(std::move(shape), std::move(v), {a}, [rows, w](Node& self) {
    auto& g = grad_in(self, 0);
    for (std::size_t t = 0; t < rows.size(); ++t)
      for (std::size_t j = 0; j < w; ++j) g[rows[t] * w + j] += self.grad[t * w + j];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) throw DimensionMismatch("reshape element count", a.numel(), numel(shape));
  return make_result(std::move(shape), a.value(), {a}, [](Node& self) {
    auto& g = grad_in(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.value()) s += x;
  return make_result({}, {s}, {a}, [](Node& self) {
    auto& g = grad_in(self, 0);
    for (double& x : g) x += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw InvalidArgument("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_axis(const Tensor& a, int axis) {
  require_2d(a, "sum_axis");
  if (axis != 0 && axis != 1) throw InvalidArgument("sum_axis axis must be 0 or 1");
  const std::size_t r = a.dim(0), c = a.dim(1);
  const std::size_t out_n = axis == 0 ? c : r;
  std::vector<double> v(out_n, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[axis == 0 ? j : i] += a.value()[i * c + j];
  return make_result({out_n}, std::move(v), {a}, [r, c, axis](Node& self) {
    auto& g = grad_in(self, 0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[axis == 0 ? j : i];
  });
}

Tensor mean_axis(const Tensor& a, int axis) {
  require_2d(a, "mean_axis");
  const std::size_t len = a.dim(axis == 0 ? 0 : 1);
  if (len == 0) throw InvalidArgument("mean over an empty axis");
  return scale(sum_axis(a, axis), 1.0 / static_cast<double>(len));
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t pad) {
  if (x.ndim() != 4) throw InvalidArgument("conv2d input must be NHWC, got " + shape_string(x.shape()));
  if (kernel.ndim() != 4) throw InvalidArgument("conv2d kernel must be [kh, kw, Cin, Cout]");
  if (kernel.dim(2) != x.dim(3)) throw DimensionMismatch("conv2d input channels", kernel.dim(2), x.dim(3));
  const kernels::ConvShape s{x.dim(0), x.dim(1), x.dim(2), x.dim(3), kernel.dim(0), kernel.dim(1), pad};
  if (s.height + 2 * pad < s.kernel_h || s.width + 2 * pad < s.kernel_w)
    throw InvalidArgument("conv2d kernel larger than the padded input");
  const std::size_t cout = kernel.dim(3), rows = s.rows(), patch = s.patch();
  auto cols = std::make_shared<std::vector<double>>(rows * patch);
  std::vector<double> y(rows * cout);
  kernels::im2col(s, x.value().data(), cols->data());
  kernels::gemm_nn(rows, patch, cout, cols->data(), kernel.value().data(), y.data());
  if (!x.requires_grad() && !kernel.requires_grad()) cols.reset();
  return make_result({s.batch, s.out_height(), s.out_width(), cout}, std::move(y), {x, kernel},
                     [s, cout, rows, patch, cols](Node& self) {
                       const double* dy = self.grad.data();
                       if (needs(self, 1))
                         kernels::gemm_tn(patch, rows, cout, cols->data(), dy, grad_in(self, 1).data(), true);
                       if (needs(self, 0)) {
                         std::vector<double> dcols(rows * patch);
                         kernels::gemm_nt(rows, cout, patch, dy, value_in(self, 1).data(), dcols.data());
                         kernels::col2im(s, dcols.data(), grad_in(self, 0).data());
                       }
                     });
}

Tensor max_pool2x2(const Tensor& x) {
  if (x.ndim() != 4) throw InvalidArgument("max_pool2x2 input must be NHWC");
  const std::size_t nb = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const std::size_t ho = h / 2, wo = w / 2;
  if (ho == 0 || wo == 0) throw InvalidArgument("max_pool2x2 needs spatial size >= 2");
  std::vector<double> y(nb * ho * wo * c);
  std::vector<std::size_t> arg(y.size());
  const auto& xv = x.value();
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j)
        for (std::size_t ch = 0; ch < c; ++ch) {
          std::size_t best = ((b * h + 2 * i) * w + 2 * j) * c + ch;
          for (std::size_t di = 0; di < 2; ++di)
            for (std::size_t dj = 0; dj < 2; ++dj) {
              const std::size_t idx = ((b * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
              if (xv[idx] > xv[best]) best = idx;
            }
          const std::size_t o = ((b * ho + i) * wo + j) * c + ch;
          y[o] = xv[best];
          arg[o] = best;
        }
  return make_result({nb, ho, wo, c}, std::move(y), {x}, [arg = std::move(arg)](Node& self) {
    auto& g = grad_in(self, 0);
    for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += self.grad[o];
  });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state, bool training) {
  if (x.ndim() < 2) throw InvalidArgument("batch_norm needs at least 2 axes");
  const std::size_t c = x.shape().back(), r = x.numel() / c;
  if (gamma.numel() != c || beta.numel() != c) throw DimensionMismatch("batch_norm affine parameters", c, gamma.numel());
  if (state.running_mean.size() != c) throw DimensionMismatch("batch_norm running statistics", c, state.running_mean.size());
  const auto& xv = x.value();
  std::vector<double> mu(c, 0.0), var(c, 0.0);
  if (training) {
    if (r < 2) throw InvalidArgument("batch_norm training needs at least 2 values per channel");
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) mu[j] += xv[i * c + j];
    for (double& m : mu) m /= static_cast<double>(r);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) var[j] += (xv[i * c + j] - mu[j]) * (xv[i * c + j] - mu[j]);
    for (double& v : var) v /= static_cast<double>(r);
    const double unbias = static_cast<double>(r) / static_cast<double>(r - 1);
    for (std::size_t j = 0; j < c; ++j) {
      state.running_mean[j] = (1.0 - state.momentum) * state.running_mean[j] + state.momentum * mu[j];
      state.running_var[j] = (1.0 - state.momentum) * state.running_var[j] + state.momentum * var[j] * unbias;
    }
  } else {
    mu = state.running_mean;
    var = state.running_var;
  }
  std::vector<double> invstd(c), xhat(xv.size()), y(xv.size());
  for (std::size_t j = 0; j < c; ++j) invstd[j] = 1.0 / std::sqrt(var[j] + state.eps);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t t = i * c + j;
      xhat[t] = (xv[t] - mu[j]) * invstd[j];
      y[t] = gamma.value()[j] * xhat[t] + beta.value()[j];
    }
  return make_result(x.shape(), std::move(y), {x, gamma, beta},
                     [r, c, training, invstd = std::move(invstd), xhat = std::move(xhat)](Node& self) {
                       const auto& gam = value_in(self, 1);
                       const double* dy = self.grad.data();
                       // Per-channel sums of dy and dy * xhat serve every input.
                       std::vector<double> sum_dy(c, 0.0), sum_dyx(c, 0.0);
                       for (std::size_t i = 0; i < r; ++i) {
                         const double* d = dy + i * c;
                         const double* xh = xhat.data() + i * c;
                         for (std::size_t j = 0; j < c; ++j) {
                           sum_dy[j] += d[j];
                           sum_dyx[j] += d[j] * xh[j];
                         }
                       }
                       if (needs(self, 1)) {
                         auto& g = grad_in(self, 1);
                         for (std::size_t j = 0; j < c; ++j) g[j] += sum_dyx[j];
                       }
                       if (needs(self, 2)) {
                         auto& g = grad_in(self, 2);
                         for (std::size_t j = 0; j < c; ++j) g[j] += sum_dy[j];
                       }
                       if (!needs(self, 0)) return;
                       double* gx = grad_in(self, 0).data();
                       std::vector<double> k0(c), k1(c), k2(c);
                       const double rn = static_cast<double>(r);
                       for (std::size_t j = 0; j < c; ++j) {
                         k0[j] = gam[j] * invstd[j];
                         k1[j] = training ? k0[j] * sum_dy[j] / rn : 0.0;
                         k2[j] = training ? k0[j] * sum_dyx[j] / rn : 0.0;
                       }
                       for (std::size_t i = 0; i < r; ++i) {
                         const double* d = dy + i * c;
                         const double* xh = xhat.data() + i * c;
                         double* g = gx + i * c;
                         for (std::size_t j = 0; j < c; ++j) g[j] += k0[j] * d[j] - k1[j] - k2[j] * xh[j];
                       }
                     });
}

Tensor graph_attention(const Tensor& h, const Tensor& weight, const Tensor& att_src, const Tensor& att_dst,
                       const Csr& nb, std::size_t heads, bool concat_heads, double slope,
                       std::vector<double>* attention) {
  require_2d(h, "graph_attention");
  require_2d(weight, "graph_attention");
  const std::size_t n = h.dim(0);
  if (nb.n() != n) throw DimensionMismatch("attention neighborhoods vs feature rows", n, nb.n());
  if (weight.dim(0) != h.dim(1)) throw DimensionMismatch("attention weight input width", h.dim(1), weight.dim(0));
  if (heads == 0 || weight.dim(1) % heads) throw InvalidArgument("weight width must be a multiple of the head count");
  const std::size_t dout = weight.dim(1) / heads, width = weight.dim(1);
  if (att_src.numel() != width || att_dst.numel() != width)
    throw DimensionMismatch("attention vectors", width, att_src.numel());
  for (std::size_t i = 0; i < n; ++i)
    if (nb.offsets[i + 1] == nb.offsets[i]) throw InvalidArgument("node " + std::to_string(i) + " has an empty attention neighborhood");

  // Projection Wh as a plain matmul node keeps the weight gradient in one place.
  Tensor wh = matmul(h, weight);
  const auto& whv = wh.value();
  const auto& as = att_src.value();
  const auto& ad = att_dst.value();
  std::vector<double> s(n * heads, 0.0), t(n * heads, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < heads; ++k) {
      double a = 0.0, b = 0.0;
      for (std::size_t d = 0; d < dout; ++d) {
        a += as[k * dout + d] * whv[i * width + k * dout + d];
        b += ad[k * dout + d] * whv[i * width + k * dout + d];
      }
      s[i * heads + k] = a;
      t[i * heads + k] = b;
    }
  const std::size_t nnz = nb.indices.size();
  std::vector<double> alpha(nnz * heads), raw(nnz * heads);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lo = nb.offsets[i], hi = nb.offsets[i + 1];
    for (std::size_t k = 0; k < heads; ++k) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t e = lo; e < hi; ++e) {
        const double v = s[i * heads + k] + t[nb.indices[e] * heads + k];
        raw[e * heads + k] = v;
        const double lr = v > 0.0 ? v : slope * v;
        alpha[e * heads + k] = lr;
        m = std::max(m, lr);
      }
      double z = 0.0;
      for (std::size_t e = lo; e < hi; ++e) z += (alpha[e * heads + k] = std::exp(alpha[e * heads + k] - m));
      for (std::size_t e = lo; e < hi; ++e) alpha[e * heads + k] /= z;
    }
  }
  const std::size_t out_w = concat_heads ? width : dout;
  const double head_scale = concat_heads ? 1.0 : 1.0 / static_cast<double>(heads);
  std::vector<double> out(n * out_w, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t e = nb.offsets[i]; e < nb.offsets[i + 1]; ++e) {
      const std::size_t j = nb.indices[e];
      for (std::size_t k = 0; k < heads; ++k) {
        const double a = alpha[e * heads + k] * head_scale;
        double* o = out.data() + i * out_w + (concat_heads ? k * dout : 0);
        const double* src = whv.data() + j * width + k * dout;
        for (std::size_t d = 0; d < dout; ++d) o[d] += a * src[d];
      }
    }
  if (attention) *attention = alpha;

  return make_result({n, out_w}, std::move(out), {wh, att_src, att_dst},
                     [n, heads, dout, width, out_w, concat_heads, head_scale, slope,
                      offsets = nb.offsets, indices = nb.indices, alpha = std::move(alpha),
                      raw = std::move(raw)](Node& self) {
                       const auto& whv = value_in(self, 0);
                       const auto& as = value_in(self, 1);
                       const auto& ad = value_in(self, 2);
                       std::vector<double> dwh(n * width, 0.0), ds(n * heads, 0.0), dt(n * heads, 0.0);
                       std::vector<double> dalpha(heads);
                       for (std::size_t i = 0; i < n; ++i) {
                         const std::size_t lo = offsets[i], hi = offsets[i + 1];
                         for (std::size_t k = 0; k < heads; ++k) {
                           const double* go = self.grad.data() + i * out_w + (concat_heads ? k * dout : 0);
                           // d(alpha_ij) and the softmax correction term.
                           double dot = 0.0;
                           std::vector<double>& da = dalpha;
                           da.assign(hi - lo, 0.0);
                           for (std::size_t e = lo; e < hi; ++e) {
                             const std::size_t j = indices[e];
                             const double* src = whv.data() + j * width + k * dout;
                             double* dsrc = dwh.data() + j * width + k * dout;
                             const double a = alpha[e * heads + k] * head_scale;
                             double acc = 0.0;
                             for (std::size_t d = 0; d < dout; ++d) {
                               acc += go[d] * src[d];
                               dsrc[d] += a * go[d];
                             }
                             da[e - lo] = acc * head_scale;
                             dot += alpha[e * heads + k] * da[e - lo];
                           }
                           for (std::size_t e = lo; e < hi; ++e) {
                             const double de = alpha[e * heads + k] * (da[e - lo] - dot);
                             const double draw = de * (raw[e * heads + k] > 0.0 ? 1.0 : slope);
                             ds[i * heads + k] += draw;
                             dt[indices[e] * heads + k] += draw;
                           }
                         }
                       }
                       const bool need_src = needs(self, 1), need_dst = needs(self, 2);
                       std::vector<double>* gas = need_src ? &grad_in(self, 1) : nullptr;
                       std::vector<double>* gad = need_dst ? &grad_in(self, 2) : nullptr;
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t k = 0; k < heads; ++k) {
                           const double dsi = ds[i * heads + k], dti = dt[i * heads + k];
                           for (std::size_t d = 0; d < dout; ++d) {
                             const std::size_t col = k * dout + d;
                             dwh[i * width + col] += as[col] * dsi + ad[col] * dti;
                             if (gas) (*gas)[col] += dsi * whv[i * width + col];
                             if (gad) (*gad)[col] += dti * whv[i * width + col];
                           }
                         }
                       if (needs(self, 0)) {
                         auto& g = grad_in(self, 0);
                         for (std::size_t t = 0; t < g.size(); ++t) g[t] += dwh[t];
                       }
                     });
}

Tensor sce_loss(const Tensor& x, const Tensor& xhat, const std::vector<std::uint32_t>& mask, double gamma,
                WarningLog* warnings) {
  require_2d(x, "sce_loss");
  require_same(x, xhat, "sce_loss");
  if (mask.empty()) throw InvalidArgument("sce_loss needs at least one masked row");
  if (!(gamma > 0.0)) throw InvalidArgument("sce_loss gamma must be positive");
  const std::size_t n = x.dim(0), p = x.dim(1);
  const double m = static_cast<double>(mask.size());
  std::vector<double> cosv(mask.size(), 0.0), nx(mask.size()), ny(mask.size());
  std::vector<char> degenerate(mask.size(), 0);
  double loss = 0.0;
  std::size_t zero_rows = 0;
  for (std::size_t t = 0; t < mask.size(); ++t) {
    const std::size_t i = mask[t];
    if (i >= n) throw InvalidArgument("masked row out of range");
    const double* a = x.value().data() + i * p;
    const double* b = xhat.value().data() + i * p;
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t j = 0; j < p; ++j) {
      ab += a[j] * b[j];
      aa += a[j] * a[j];
      bb += b[j] * b[j];
    }
    nx[t] = std::sqrt(aa);
    ny[t] = std::sqrt(bb);
    if (nx[t] == 0.0 || ny[t] == 0.0) {
      degenerate[t] = 1;
      ++zero_rows;
    } else {
      cosv[t] = std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
    }
    loss += std::pow(1.0 - cosv[t], gamma);
  }
  if (zero_rows) warn(warnings, "sce_loss: " + std::to_string(zero_rows) + " zero-norm masked rows scored as cos = 0");
  return make_result({}, {loss / m}, {x, xhat},
                     [mask, gamma, p, m, cosv = std::move(cosv), nx = std::move(nx), ny = std::move(ny),
                      degenerate = std::move(degenerate)](Node& self) {
                       if (needs(self, 0)) throw InvalidArgument("sce_loss target must not require a gradient");
                       if (!needs(self, 1)) return;
                       auto& g = grad_in(self, 1);
                       const auto& xv = value_in(self, 0);
                       const auto& yv = value_in(self, 1);
                       for (std::size_t t = 0; t < mask.size(); ++t) {
                         if (degenerate[t]) continue;
                         const std::size_t i = mask[t];
                         const double dc = -self.grad[0] * gamma * std::pow(1.0 - cosv[t], gamma - 1.0) / m;
                         for (std::size_t j = 0; j < p; ++j) {
                           const double dcos = xv[i * p + j] / (nx[t] * ny[t]) - cosv[t] * yv[i * p + j] / (ny[t] * ny[t]);
                           g[i * p + j] += dc * dcos;
                         }
                       }
                     });
}

Tensor contrastive_loss(const Tensor& z, const Csr& positives, double tau, const std::vector<std::uint32_t>* anchors,
                        std::vector<double>* per_anchor) {
  require_2d(z, "contrastive_loss");
  if (!(tau > 0.0)) throw InvalidArgument("contrastive temperature must be positive");
  const std::size_t n = z.dim(0), d = z.dim(1);
  if (positives.n() != n) throw DimensionMismatch("positive sets vs embedding rows", n, positives.n());
  for (std::size_t i = 0; i < n; ++i)
    if (positives.offsets[i + 1] == positives.offsets[i])
      throw InvalidArgument("cell " + std::to_string(i) + " has no positive neighbors");
  std::vector<std::uint32_t> anc;
  if (anchors) {
    anc = *anchors;
    if (anc.empty()) throw InvalidArgument("contrastive loss needs at least one anchor");
    for (auto a : anc)
      if (a >= n) throw InvalidArgument("anchor index out of range");
  } else {
    anc.resize(n);
    for (std::size_t i = 0; i < n; ++i) anc[i] = static_cast<std::uint32_t>(i);
  }
  const std::size_t na = anc.size();

  // count[l] = number of k with l in N_k; log weights enter the denominator.
  std::vector<double> count(n, 0.0);
  for (auto l : positives.indices) count[l] += 1.0;
  std::vector<double> logc(n);
  for (std::size_t l = 0; l < n; ++l)
    logc[l] = count[l] > 0.0 ? std::log(count[l]) : -std::numeric_limits<double>::infinity();

  std::vector<double> za(na * d);
  for (std::size_t a = 0; a < na; ++a) std::copy_n(z.value().data() + anc[a] * d, d, za.data() + a * d);
  std::vector<double> sim(na * n);
  kernels::gemm_nt(na, d, n, za.data(), z.value().data(), sim.data());
  const double inv_tau = 1.0 / tau;
  for (double& v : sim) v *= inv_tau;

  // G = dL/dS, built row by row: softmax over the weighted denominator minus
  // softmax over the positives.
  std::vector<double> grad_s(na * n, 0.0), terms(na);
  std::vector<double> buf(n);
  double total = 0.0;
  for (std::size_t a = 0; a < na; ++a) {
    const std::size_t i = anc[a];
    const double* s = sim.data() + a * n;
    for (std::size_t l = 0; l < n; ++l) buf[l] = logc[l] + s[l];
    const double log_den = log_sum_exp(buf.data(), n);
    const std::size_t lo = positives.offsets[i], hi = positives.offsets[i + 1];
    std::vector<double> pos(hi - lo);
    for (std::size_t e = lo; e < hi; ++e) pos[e - lo] = s[positives.indices[e]];
    const double log_num = log_sum_exp(pos.data(), pos.size());
    terms[a] = log_den - log_num;
    total += terms[a];
    double* g = grad_s.data() + a * n;
    for (std::size_t l = 0; l < n; ++l) g[l] = std::exp(buf[l] - log_den) / static_cast<double>(na);
    for (std::size_t e = lo; e < hi; ++e)
      g[positives.indices[e]] -= std::exp(pos[e - lo] - log_num) / static_cast<double>(na);
  }
  if (per_anchor) *per_anchor = terms;
  std::vector<double>().swap(sim);

  return make_result({}, {total / static_cast<double>(na)}, {z},
                     [n, d, na, inv_tau, anc = std::move(anc), za = std::move(za),
                      grad_s = std::move(grad_s)](Node& self) {
                       auto& g = grad_in(self, 0);
                       const double scale = self.grad[0] * inv_tau;
                       const auto& zv = value_in(self, 0);
                       // Anchor rows: G Z; every row: G^T Z_anchor.
                       std::vector<double> ga(na * d), gt(n * d);
                       kernels::gemm_nn(na, n, d, grad_s.data(), zv.data(), ga.data());
                       kernels::gemm_tn(n, na, d, grad_s.data(), za.data(), gt.data());
                       for (std::size_t t = 0; t < n * d; ++t) g[t] += scale * gt[t];
                       for (std::size_t a = 0; a < na; ++a)
                         for (std::size_t j = 0; j < d; ++j) g[anc[a] * d + j] += scale * ga[a * d + j];
                     });
}

}  // namespace cellscape::ad
