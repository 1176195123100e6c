#pragma once

// Minimal reader/writer for the NumPy .npy array format (version 1.0,
// C order, little endian). Supported dtypes: uint8, int64, float32, float64.

#include <filesystem>

#include <torch/types.h>

namespace vidconcept::npy {

void save(const std::filesystem::path& path, const torch::Tensor& array);
torch::Tensor load(const std::filesystem::path& path);

}  // namespace vidconcept::npy
