#pragma once

// Little-endian byte encoding shared by the DSD1, LAT1 and VAE1 formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "dropletscope/error.hpp"

namespace dropletscope::binio {

static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");

class ByteWriter {
public:
    void magic(std::string_view tag) { buf_.append(tag.data(), tag.size()); }

    template <typename T>
        requires std::is_arithmetic_v<T>
    void put(T value) {
        char raw[sizeof(T)];
        std::memcpy(raw, &value, sizeof(T));
        buf_.append(raw, sizeof(T));
    }

    const std::string& bytes() const noexcept { return buf_; }
    std::size_t size() const noexcept { return buf_.size(); }

private:
    std::string buf_;
};

class ByteReader {
public:
    ByteReader(std::string_view data, std::string context) : data_(data), context_(std::move(context)) {}

    void expect_magic(std::string_view tag) {
        need(tag.size(), "magic");
        if (data_.substr(pos_, tag.size()) != tag) {
            throw FormatError(context_ + ": bad magic, expected '" + std::string(tag) + "'", pos_);
        }
        pos_ += tag.size();
    }

    template <typename T>
        requires std::is_arithmetic_v<T>
    T get(const char* field) {
        need(sizeof(T), field);
        T value;
        std::memcpy(&value, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return value;
    }

    /// Throws unless at least `count * width` bytes remain. Guards allocations
    /// sized from untrusted header fields.
    void require(std::uint64_t count, std::uint64_t width, const char* field) const {
        const std::uint64_t left = data_.size() - pos_;
        if (width != 0 && count > left / width) {
            throw FormatError(context_ + ": truncated while reading " + field, pos_);
        }
    }

    void expect_end() const {
        if (pos_ != data_.size()) {
            throw FormatError(context_ + ": trailing bytes after payload", pos_);
        }
    }

    std::uint64_t offset() const noexcept { return pos_; }
    const std::string& context() const noexcept { return context_; }

private:
    void need(std::size_t n, const char* field) const {
        if (data_.size() - pos_ < n) {
            throw FormatError(context_ + ": truncated while reading " + field, pos_);
        }
    }

    std::string_view data_;
    std::size_t pos_ = 0;
    std::string context_;
};

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace dropletscope::binio
