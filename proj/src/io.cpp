#include "omgseg/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <png.h>
#include <sodium.h>

namespace omgseg::io {

namespace {

std::vector<unsigned char> to_bytes(const Image& img) {
  std::vector<unsigned char> px(img.rgb.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    const float v = std::clamp(img.rgb[i], 0.f, 1.f);
    px[i] = static_cast<unsigned char>(std::lround(v * 255.f));
  }
  return px;
}

Image from_bytes(int h, int w, const std::vector<unsigned char>& px) {
  Image img(h, w);
  for (std::size_t i = 0; i < px.size(); ++i) img.rgb[i] = static_cast<float>(px[i]) / 255.f;
  return img;
}

}  // namespace

std::vector<unsigned char> encode_png(const Image& img) {
  auto px = to_bytes(img);
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, px.data(), 0, nullptr))
    throw DataError(std::string("png encode failed: ") + image.message);
  std::vector<unsigned char> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, px.data(), 0, nullptr))
    throw DataError(std::string("png encode failed: ") + image.message);
  out.resize(size);
  return out;
}

Image decode_png(std::span<const unsigned char> bytes) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (bytes.empty() || !png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    throw DataError("not a decodable PNG");
  image.format = PNG_FORMAT_RGB;
  if (image.width == 0 || image.height == 0 || image.width > 16384 || image.height > 16384) {
    png_image_free(&image);
    throw DataError("PNG has unsupported dimensions");
  }
  std::vector<unsigned char> px(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, px.data(), 0, nullptr)) {
    png_image_free(&image);
    throw DataError(std::string("png decode failed: ") + image.message);
  }
  return from_bytes(static_cast<int>(image.height), static_cast<int>(image.width), px);
}

void write_png(const std::filesystem::path& path, const Image& img) {
  auto bytes = encode_png(img);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Image read_png(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), {});
  return decode_png(bytes);
}

std::string base64_encode(std::span<const unsigned char> bytes) {
  const auto len = sodium_base64_ENCODED_LEN(bytes.size(), sodium_base64_VARIANT_ORIGINAL);
  std::string out(len, '\0');
  sodium_bin2base64(out.data(), len, bytes.data(), bytes.size(), sodium_base64_VARIANT_ORIGINAL);
  out.resize(std::strlen(out.c_str()));
  return out;
}

std::vector<unsigned char> base64_decode(std::string_view text) {
  std::vector<unsigned char> out(text.size() / 4 * 3 + 3);
  std::size_t len = 0;
  if (sodium_base642bin(out.data(), out.size(), text.data(), text.size(), " \n\r\t", &len,
                        nullptr, sodium_base64_VARIANT_ORIGINAL) != 0)
    throw DataError("invalid base64 payload");
  out.resize(len);
  return out;
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j, int indent) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  f << j.dump(indent) << '\n';
}

void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                         std::string_view context) {
  if (!j.is_object()) throw ConfigError(std::string(context) + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ConfigError("unknown key '" + key + "' in " + std::string(context));
  }
}

}  // namespace omgseg::io
