#include "vidconcept/npy.hpp"

#include <fstream>
#include <regex>
#include <sstream>
#include <string>

#include <torch/torch.h>

#include "vidconcept/error.hpp"

namespace vidconcept::npy {
namespace {

std::string descr_for(torch::ScalarType t) {
  switch (t) {
    case torch::kUInt8: return "|u1";
    case torch::kInt64: return "<i8";
    case torch::kFloat32: return "<f4";
    case torch::kFloat64: return "<f8";
    default: break;
  }
  throw IoError("npy", std::string("unsupported dtype ") + c10::toString(t));
}

torch::ScalarType dtype_for(const std::string& descr) {
  if (descr == "|u1" || descr == "<u1") return torch::kUInt8;
  if (descr == "<i8") return torch::kInt64;
  if (descr == "<f4") return torch::kFloat32;
  if (descr == "<f8") return torch::kFloat64;
  throw IoError("npy", "unsupported descr '" + descr + "'");
}

}  // namespace

void save(const std::filesystem::path& path, const torch::Tensor& array) {
  auto data = array.detach().to(torch::kCPU).contiguous();
  std::ostringstream header;
  header << "{'descr': '" << descr_for(data.scalar_type())
         << "', 'fortran_order': False, 'shape': (";
  for (int64_t i = 0; i < data.dim(); ++i) {
    header << data.size(i);
    if (data.dim() == 1 || i + 1 < data.dim()) header << ",";
    if (i + 1 < data.dim()) header << " ";
  }
  header << "), }";
  std::string h = header.str();
  // magic(6) + version(2) + len(2) + header + '\n' padded to 64 bytes
  const size_t unpadded = 10 + h.size() + 1;
  h.append((64 - unpadded % 64) % 64, ' ');
  h.push_back('\n');

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("npy", "cannot open " + path.string() + " for writing");
  out.write("\x93NUMPY\x01\x00", 8);
  const uint16_t len = static_cast<uint16_t>(h.size());
  const char len_bytes[2] = {static_cast<char>(len & 0xff), static_cast<char>(len >> 8)};
  out.write(len_bytes, 2);
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.write(static_cast<const char*>(data.data_ptr()),
            static_cast<std::streamsize>(data.nbytes()));
  if (!out) throw IoError("npy", "short write to " + path.string());
}

torch::Tensor load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("npy", "cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::string(magic, 6) != "\x93NUMPY")
    throw IoError("npy", path.string() + " is not an .npy file");
  const int major = static_cast<unsigned char>(magic[6]);
  size_t header_len = 0;
  if (major == 1) {
    unsigned char b[2];
    in.read(reinterpret_cast<char*>(b), 2);
    header_len = b[0] | (b[1] << 8);
  } else {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    header_len = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<size_t>(b[3]) << 24);
  }
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw IoError("npy", "truncated header in " + path.string());

  std::smatch m;
  if (!std::regex_search(header, m, std::regex("'descr':\\s*'([^']+)'")))
    throw IoError("npy", "missing descr in " + path.string());
  const auto dtype = dtype_for(m[1]);
  if (std::regex_search(header, m, std::regex("'fortran_order':\\s*True")))
    throw IoError("npy", "fortran order not supported: " + path.string());
  if (!std::regex_search(header, m, std::regex("'shape':\\s*\\(([^)]*)\\)")))
    throw IoError("npy", "missing shape in " + path.string());
  std::vector<int64_t> shape;
  std::string dims = m[1];
  std::regex num("\\d+");
  for (auto it = std::sregex_iterator(dims.begin(), dims.end(), num);
       it != std::sregex_iterator(); ++it)
    shape.push_back(std::stoll(it->str()));

  auto out = torch::empty(shape, torch::TensorOptions().dtype(dtype));
  in.read(static_cast<char*>(out.data_ptr()), static_cast<std::streamsize>(out.nbytes()));
  if (!in) throw IoError("npy", "truncated data in " + path.string());
  return out;
}

}  // namespace vidconcept::npy
