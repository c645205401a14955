#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "erp/tensor.hpp"

namespace erp {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// On-disk layout (docs/checkpoint_format.md):
//   bytes 0..7   magic "ERPCKPT1"
//   bytes 8..15  manifest length N, unsigned 64-bit little-endian
//   next N bytes manifest, UTF-8 JSON:
//                {"format":"erp-checkpoint","version":1,
//                 "tensors":[{"name":..,"shape":[..]},..], "meta":{..}}
//   payload      for each manifest tensor in order, product(shape)
//                IEEE-754 binary64 values, little-endian, row-major
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  NamedTensors tensors;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace erp
