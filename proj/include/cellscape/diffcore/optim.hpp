#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "cellscape/diffcore/tensor.hpp"

namespace cellscape::ad {

struct AdamConfig {
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

OptimizerState make_adam(const std::vector<Tensor>& params, const AdamConfig& config = {});

/// One Adam update at learning rate `lr`: decoupled decay
/// p -= lr * weight_decay * p, then the bias-corrected moment step.
void adam_step(OptimizerState& state, std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads,
               double lr);
void adam_step(OptimizerState& state, std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads);

/// eta0 * 0.5^floor(epoch / 50), epochs counted from 0.
double lr_schedule(std::size_t epoch, double eta0, std::size_t halve_every = 50);

struct PcgradResult {
  std::vector<std::vector<double>> adjusted;
  std::vector<std::pair<std::size_t, std::size_t>> projections;  // (i, j): g_i projected off g_j
};

/// Gradient surgery: each task gradient is projected off every conflicting
/// original task gradient, visiting the others in a seeded random order.
PcgradResult pcgrad(const std::vector<std::vector<double>>& grads, std::uint64_t seed, WarningLog* warnings = nullptr);

/// Concatenates parameter gradients (missing gradients count as zeros).
std::vector<double> flatten_grads(const std::vector<Tensor>& params);
/// Splits a flat vector back into per-parameter pieces.
std::vector<std::vector<double>> unflatten(const std::vector<double>& flat, const std::vector<Tensor>& params);

}  // namespace cellscape::ad
