#pragma once

#include <string>
#include <vector>

#include "traject/tensor.hpp"

namespace traject {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Writes `path` (manifest: one "name shape dtype offset" line per tensor, shape
// written as e.g. 105x64, dtype f64, byte offset into the blob) and
// `path`.bin (little-endian float64 values, concatenated in manifest order).
void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors);

// Reads a checkpoint into existing tensors, matching by name. Every target must
// be present with an identical shape; extra entries in the file are an error.
void load_checkpoint(const std::string& path, const std::vector<NamedTensor>& targets);

}  // namespace traject
