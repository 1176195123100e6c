#pragma once

// Self-describing tensor archive: a fixed magic, a JSON header holding
// metadata and a tensor index, then the raw little-endian tensor bytes in
// index order. Tensor names are sorted, so identical contents always give
// identical bytes.

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>
#include <torch/types.h>

namespace vidconcept {

struct Archive {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, torch::Tensor> tensors;
};

void write_archive(const std::filesystem::path& path, const Archive& archive);
Archive read_archive(const std::filesystem::path& path);

}  // namespace vidconcept
