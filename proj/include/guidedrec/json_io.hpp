#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "guidedrec/volume.hpp"

namespace guidedrec {

nlohmann::json grid_to_json(const Grid3& g);
Grid3 grid_from_json(const nlohmann::json& j);

nlohmann::json vec3_to_json(const Vec3& v);
Vec3 vec3_from_json(const nlohmann::json& j);

nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

// FNV-1a 64-bit hash rendered as 16 hex digits.
std::string fnv1a_hex(const std::string& text);

}  // namespace guidedrec
