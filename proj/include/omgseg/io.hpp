#pragma once

#include <filesystem>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "omgseg/core.hpp"

namespace omgseg::io {

std::vector<unsigned char> encode_png(const Image& img);
/// Throws DataError on undecodable bytes.
Image decode_png(std::span<const unsigned char> bytes);
void write_png(const std::filesystem::path& path, const Image& img);
Image read_png(const std::filesystem::path& path);

std::string base64_encode(std::span<const unsigned char> bytes);
/// Throws DataError on invalid input.
std::vector<unsigned char> base64_decode(std::string_view text);

nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& j, int indent = 2);

/// ConfigError naming the first key of `j` not listed in `allowed`.
void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                         std::string_view context);

}  // namespace omgseg::io
