#include "vidconcept/image_io.hpp"

#include <png.h>

#include <fstream>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "vidconcept/error.hpp"

namespace vidconcept::image {
namespace {


torch::Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("image", "cannot open " + path.string());
  std::string magic;
  in >> magic;
  auto next_int = [&] {
    while (true) {
      in >> std::ws;
      if (in.peek() == '#') {
        std::string skip;
        std::getline(in, skip);
      } else {
        break;
      }
    }
    int64_t v = 0;
    in >> v;
    return v;
  };
  const int64_t w = next_int(), h = next_int(), maxval = next_int();
  in.get();
  if (!in || (magic != "P6" && magic != "P5") || maxval != 255)
    throw IoError("image", "unsupported PPM/PGM (8-bit P5/P6 only): " + path.string());
  const int64_t ch = magic == "P6" ? 3 : 1;
  auto img = torch::empty({h, w, ch}, torch::kUInt8);
  in.read(reinterpret_cast<char*>(img.data_ptr<uint8_t>()),
          static_cast<std::streamsize>(img.numel()));
  if (!in) throw IoError("image", "truncated " + path.string());
  return ch == 3 ? img : img.expand({h, w, 3}).contiguous();
}

torch::Tensor read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw IoError("image", "cannot read " + path.string() + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  auto img = torch::empty({static_cast<int64_t>(image.height),
                           static_cast<int64_t>(image.width), 3},
                          torch::kUInt8);
  if (!png_image_finish_read(&image, nullptr, img.data_ptr<uint8_t>(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("image", "decode failed for " + path.string() + ": " + image.message);
  }
  return img;
}

}  // namespace

void write_png(const std::filesystem::path& path, const torch::Tensor& rgb) {
  auto img = rgb.to(torch::kCPU).contiguous();
  if (img.scalar_type() != torch::kUInt8 || (img.dim() != 3 && img.dim() != 2) ||
      (img.dim() == 3 && img.size(2) != 3))
    throw InvalidInput("image", "write_png expects uint8 [H,W,3] or [H,W]");
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.size(1));
  image.height = static_cast<png_uint_32>(img.size(0));
  image.format = img.dim() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.c_str(), 0, img.data_ptr<uint8_t>(), 0,
                               nullptr))
    throw IoError("image", "cannot write " + path.string() + ": " + image.message);
}

torch::Tensor read_image(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".png" || ext == ".PNG") return read_png(path);
  if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") return read_ppm(path);
  throw IoError("image", "unsupported image format: " + path.string());
}

}  // namespace vidconcept::image
