#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "pcos/nn/tensor.hpp"

namespace pcos::nn {

/// Named-tensor container used for checkpoints and pretrained weights.
///
/// Layout (little-endian): "PCOSTNSR", u32 version, u64 count, then per tensor
/// u32 name length, name bytes, u32 rank, i32 dims[rank], f64 values.
using TensorMap = std::map<std::string, Tensor>;

void write_tensors(std::ostream& out, const std::vector<std::pair<std::string, const Tensor*>>& tensors);
TensorMap read_tensors(std::istream& in);

TensorMap read_tensor_file(const std::filesystem::path& path);

}  // namespace pcos::nn
