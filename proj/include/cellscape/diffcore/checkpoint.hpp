#pragma once

// Binary checkpoint container, little-endian throughout:
//
//   "CSK1"                      4 bytes magic
//   u32 version                 currently 1
//   u64 len, bytes              configuration (JSON text)
//   u64 count, then per tensor: u64 len, name bytes, u64 ndim, u64 dims[ndim], f64 values[]
//   u64 count, buffers          same layout as tensors (batch-norm running stats)
//   u8  has_optimizer
//   optimizer (if present):     u64 step, f64 lr, wd, beta1, beta2, eps,
//                               u64 count, then per parameter: u64 n, f64 m[n], f64 v[n]

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cellscape/diffcore/optim.hpp"
#include "cellscape/diffcore/tensor.hpp"

namespace cellscape::ad {

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
  friend bool operator==(const NamedArray&, const NamedArray&) = default;
};

struct Checkpoint {
  std::string config_json;
  std::vector<NamedArray> tensors;
  std::vector<NamedArray> buffers;
  std::optional<OptimizerState> optimizer;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace cellscape::ad
