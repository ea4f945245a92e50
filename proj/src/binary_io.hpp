#pragma once

// Little-endian encode/decode helpers for the GVOL and GPRJ formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "guidedrec/errors.hpp"

namespace guidedrec::binio {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

class Writer {
public:
    void magic(const char (&tag)[5]) { bytes_.insert(bytes_.end(), tag, tag + 4); }
    void u32(std::uint32_t x) { put(x); }
    void f64(double x) { put(x); }
    void f32(float x) { put(x); }
    std::vector<std::uint8_t> take() { return std::move(bytes_); }
    void reserve(std::size_t n) { bytes_.reserve(n); }

private:
    template <class T>
    void put(T x) {
        std::uint8_t buf[sizeof(T)];
        std::memcpy(buf, &x, sizeof(T));
        bytes_.insert(bytes_.end(), buf, buf + sizeof(T));
    }
    std::vector<std::uint8_t> bytes_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    void expect_magic(const char (&tag)[5], const std::string& format) {
        need(4, "magic");
        if (std::memcmp(bytes_.data() + pos_, tag, 4) != 0)
            throw ParseError("magic", format + ": bad magic, expected \"" + std::string(tag, 4) + "\"");
        pos_ += 4;
    }
    std::uint32_t u32(const std::string& field) { return get<std::uint32_t>(field); }
    double f64(const std::string& field) { return get<double>(field); }
    float f32(const std::string& field) { return get<float>(field); }
    std::size_t remaining() const { return bytes_.size() - pos_; }

    void need(std::size_t n, const std::string& field) const {
        if (bytes_.size() - pos_ < n)
            throw ParseError(field, "truncated input while reading " + field);
    }

private:
    template <class T>
    T get(const std::string& field) {
        need(sizeof(T), field);
        T x;
        std::memcpy(&x, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return x;
    }
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace guidedrec::binio
