#include "cellscape/diffcore/optim.hpp"

#include <cmath>
#include <numeric>

#include "cellscape/rng.hpp"

namespace cellscape::ad {

OptimizerState make_adam(const std::vector<Tensor>& params, const AdamConfig& config) {
  OptimizerState s;
  s.config = config;
  for (const auto& p : params) {
    s.m.emplace_back(p.numel(), 0.0);
    s.v.emplace_back(p.numel(), 0.0);
  }
  return s;
}

void adam_step(OptimizerState& state, std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads,
               double lr) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw DimensionMismatch("adam parameter count", params.size(), grads.size());
  for (std::size_t k = 0; k < params.size(); ++k)
    if (params[k].numel() != grads[k].size() || state.m[k].size() != grads[k].size())
      throw DimensionMismatch("adam gradient size for parameter " + std::to_string(k), params[k].numel(), grads[k].size());
  const auto& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t), bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k].mutable_value();
    auto& m = state.m[k];
    auto& v = state.v[k];
    const auto& g = grads[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] -= lr * c.weight_decay * p[i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1, vhat = v[i] / bc2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

void adam_step(OptimizerState& state, std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads) {
  adam_step(state, params, grads, state.config.learning_rate);
}

double lr_schedule(std::size_t epoch, double eta0, std::size_t halve_every) {
  if (halve_every == 0) throw InvalidArgument("halving period must be positive");
  return std::ldexp(eta0, -static_cast<int>(epoch / halve_every));
}

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

PcgradResult pcgrad(const std::vector<std::vector<double>>& grads, std::uint64_t seed, WarningLog* warnings) {
  if (grads.size() < 2) throw InvalidArgument("pcgrad needs at least two task gradients");
  for (const auto& g : grads)
    if (g.size() != grads[0].size()) throw DimensionMismatch("pcgrad gradient length", grads[0].size(), g.size());
  const std::size_t tasks = grads.size();
  std::vector<double> norm2(tasks);
  for (std::size_t j = 0; j < tasks; ++j) norm2[j] = dot(grads[j], grads[j]);

  PcgradResult out;
  out.adjusted = grads;
  Rng rng(seed);
  for (std::size_t i = 0; i < tasks; ++i) {
    std::vector<std::size_t> order;
    for (std::size_t j = 0; j < tasks; ++j)
      if (j != i) order.push_back(j);
    rng.shuffle(order);
    auto& gi = out.adjusted[i];
    for (std::size_t j : order) {
      const double d = dot(gi, grads[j]);
      if (!(d < 0.0)) continue;
      if (!(norm2[j] > 0.0) || !std::isfinite(norm2[j])) {
        warn(warnings, "pcgrad: conflicting gradient " + std::to_string(j) + " has zero norm; projection skipped");
        continue;
      }
      const double coef = d / norm2[j];
      for (std::size_t t = 0; t < gi.size(); ++t) gi[t] -= coef * grads[j][t];
      out.projections.emplace_back(i, j);
    }
  }
  return out;
}

std::vector<double> flatten_grads(const std::vector<Tensor>& params) {
  std::size_t total = 0;
  for (const auto& p : params) total += p.numel();
  std::vector<double> flat;
  flat.reserve(total);
  for (const auto& p : params) {
    const auto& g = p.grad();
    if (g.size() == p.numel())
      flat.insert(flat.end(), g.begin(), g.end());
    else
      flat.insert(flat.end(), p.numel(), 0.0);
  }
  return flat;
}

std::vector<std::vector<double>> unflatten(const std::vector<double>& flat, const std::vector<Tensor>& params) {
  std::vector<std::vector<double>> out;
  std::size_t off = 0;
  for (const auto& p : params) {
    if (off + p.numel() > flat.size()) throw DimensionMismatch("flat gradient length", off + p.numel(), flat.size());
    out.emplace_back(flat.begin() + static_cast<long>(off), flat.begin() + static_cast<long>(off + p.numel()));
    off += p.numel();
  }
  if (off != flat.size()) throw DimensionMismatch("flat gradient length", off, flat.size());
  return out;
}

}  // namespace cellscape::ad
