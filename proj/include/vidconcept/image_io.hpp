#pragma once

#include <filesystem>

#include <torch/types.h>

namespace vidconcept::image {

/// Writes a uint8 [H, W, 3] or [H, W] tensor as an 8-bit PNG.
void write_png(const std::filesystem::path& path, const torch::Tensor& rgb);

/// Reads PNG or binary PPM/PGM into uint8 [H, W, 3].
torch::Tensor read_image(const std::filesystem::path& path);

}  // namespace vidconcept::image
