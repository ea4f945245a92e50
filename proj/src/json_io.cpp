#include "guidedrec/json_io.hpp"

#include <cstdint>
#include <fstream>

#include <fmt/format.h>

#include "guidedrec/errors.hpp"

namespace guidedrec {

nlohmann::json vec3_to_json(const Vec3& v) { return nlohmann::json::array({v[0], v[1], v[2]}); }

Vec3 vec3_from_json(const nlohmann::json& j) {
    if (!j.is_array() || j.size() != 3) throw ParseError("vec3", "expected a 3-element array");
    return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

nlohmann::json grid_to_json(const Grid3& g) {
    return {{"dims", {g.dims[0], g.dims[1], g.dims[2]}},
            {"spacing", vec3_to_json(g.spacing)},
            {"origin", vec3_to_json(g.origin)}};
}

Grid3 grid_from_json(const nlohmann::json& j) {
    Grid3 g;
    try {
        const auto& d = j.at("dims");
        if (!d.is_array() || d.size() != 3) throw ParseError("dims", "grid: dims must have 3 entries");
        for (int a = 0; a < 3; ++a) g.dims[a] = d[a].get<int>();
        g.spacing = vec3_from_json(j.at("spacing"));
        g.origin = vec3_from_json(j.at("origin"));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("grid", std::string("grid: ") + e.what());
    }
    g.validate();
    return g;
}

nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("json", path.string() + ": " + e.what());
    }
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << j.dump(2) << '\n';
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::string fnv1a_hex(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return fmt::format("{:016x}", h);
}

}  // namespace guidedrec
