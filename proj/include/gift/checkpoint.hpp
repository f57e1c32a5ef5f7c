#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gift/tensor.hpp"

namespace gift {

/// Named tensors in a fixed order. Serialization is byte-exact: saving the
/// result of a load reproduces the original file.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void save_checkpoint(const std::string& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::string& path);

/// Returns the tensor with the given name or throws format_error.
const Tensor& find_tensor(const NamedTensors& tensors, const std::string& name);
bool has_tensor(const NamedTensors& tensors, const std::string& name);

} // namespace gift
