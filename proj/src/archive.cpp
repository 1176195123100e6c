#include "vidconcept/archive.hpp"

#include <fstream>

#include <torch/torch.h>

#include "vidconcept/error.hpp"

namespace vidconcept {
namespace {

constexpr char kMagic[8] = {'V', 'I', 'D', 'C', 'K', 'P', 'T', '1'};
constexpr const char* kModule = "archive";

std::string dtype_tag(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "f32";
    case torch::kFloat64: return "f64";
    case torch::kInt64: return "i64";
    case torch::kUInt8: return "u8";
    default: throw IoError(kModule, std::string("unsupported dtype ") + c10::toString(t));
  }
}

torch::ScalarType dtype_from_tag(const std::string& tag) {
  if (tag == "f32") return torch::kFloat32;
  if (tag == "f64") return torch::kFloat64;
  if (tag == "i64") return torch::kInt64;
  if (tag == "u8") return torch::kUInt8;
  throw IoError(kModule, "unknown dtype tag '" + tag + "'");
}

}  // namespace

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  nlohmann::json index = nlohmann::json::array();
  std::vector<torch::Tensor> blobs;
  uint64_t offset = 0;
  for (const auto& [name, tensor] : archive.tensors) {
    auto t = tensor.detach().to(torch::kCPU).contiguous();
    index.push_back({{"name", name},
                     {"dtype", dtype_tag(t.scalar_type())},
                     {"shape", t.sizes().vec()},
                     {"offset", offset},
                     {"nbytes", t.nbytes()}});
    offset += t.nbytes();
    blobs.push_back(t);
  }
  const std::string header = nlohmann::json{{"meta", archive.meta}, {"tensors", index}}.dump();

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(kModule, "cannot open " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    const uint64_t len = header.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& t : blobs)
      out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.nbytes()));
    if (!out) throw IoError(kModule, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(kModule, "cannot open " + path.string());
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (!in || !std::equal(magic, magic + sizeof magic, kMagic))
    throw IoError(kModule, path.string() + " is not a checkpoint archive");
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError(kModule, "truncated header in " + path.string());
  const auto doc = nlohmann::json::parse(header);
  const auto data_start = in.tellg();

  Archive archive;
  archive.meta = doc.at("meta");
  for (const auto& entry : doc.at("tensors")) {
    auto t = torch::empty(entry.at("shape").get<std::vector<int64_t>>(),
                          dtype_from_tag(entry.at("dtype").get<std::string>()));
    if (t.nbytes() != entry.at("nbytes").get<uint64_t>())
      throw IoError(kModule, "size mismatch for " + entry.at("name").get<std::string>());
    in.seekg(data_start + static_cast<std::streamoff>(entry.at("offset").get<uint64_t>()));
    in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(t.nbytes()));
    if (!in) throw IoError(kModule, "truncated tensor data in " + path.string());
    archive.tensors.emplace(entry.at("name").get<std::string>(), t);
  }
  return archive;
}

}  // namespace vidconcept
