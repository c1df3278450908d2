#pragma once

// Little-endian byte buffers with a trailing CRC32, shared by the bag and
// checkpoint formats.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <zlib.h>

#include "seqshort/errors.hpp"

namespace seqshort::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

inline std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks for very large buffers.
    std::size_t offset = 0;
    while (offset < bytes.size()) {
        const std::size_t chunk = std::min<std::size_t>(bytes.size() - offset, 1u << 30);
        crc = ::crc32(crc, bytes.data() + offset, static_cast<uInt>(chunk));
        offset += chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

class ByteWriter {
public:
    void bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        buffer_.insert(buffer_.end(), p, p + n);
    }
    void text(std::string_view s) { bytes(s.data(), s.size()); }
    void u8(std::uint8_t v) { buffer_.push_back(v); }
    void u16(std::uint16_t v) { bytes(&v, sizeof v); }
    void u32(std::uint32_t v) { bytes(&v, sizeof v); }
    void i32(std::int32_t v) { bytes(&v, sizeof v); }
    void f32(float v) { bytes(&v, sizeof v); }
    void f64(double v) { bytes(&v, sizeof v); }

    /// Appends the CRC32 of everything written so far and returns the buffer.
    std::vector<std::uint8_t> finish_with_crc() && {
        u32(crc32(buffer_));
        return std::move(buffer_);
    }

private:
    std::vector<std::uint8_t> buffer_;
};

class ByteReader {
public:
    ByteReader(std::span<const std::uint8_t> data, std::string what) : data_(data), what_(std::move(what)) {}

    /// Restricts reads to the payload ahead of the 4-byte CRC trailer. Call
    /// verify_crc once the payload has been parsed, so truncation is reported
    /// as such rather than as a checksum failure.
    void split_crc_trailer() {
        if (data_.size() < 4) throw TruncationError(what_ + ": file too short for a checksum");
        std::memcpy(&stored_crc_, data_.data() + data_.size() - 4, 4);
        data_ = data_.first(data_.size() - 4);
    }

    void verify_crc() const {
        if (remaining() != 0) {
            throw FormatError(what_ + ": " + std::to_string(remaining()) + " unexpected trailing bytes");
        }
        if (crc32(data_) != stored_crc_) throw ChecksumError(what_ + ": CRC32 mismatch");
    }

    void expect_magic(std::string_view magic) {
        if (data_.size() < magic.size()) throw TruncationError(what_ + ": file too short for magic bytes");
        if (std::memcmp(data_.data(), magic.data(), magic.size()) != 0) {
            throw MagicError(what_ + ": bad magic bytes, expected '" + std::string(magic) + "'");
        }
        pos_ = magic.size();
    }

    void bytes(void* out, std::size_t n) {
        if (remaining() < n) {
            throw TruncationError(what_ + ": truncated at byte " + std::to_string(pos_) + " (needed " +
                                  std::to_string(n) + " more)");
        }
        std::memcpy(out, data_.data() + pos_, n);
        pos_ += n;
    }

    template <class V>
    V scalar() {
        V v{};
        bytes(&v, sizeof v);
        return v;
    }

    std::uint8_t u8() { return scalar<std::uint8_t>(); }
    std::uint16_t u16() { return scalar<std::uint16_t>(); }
    std::uint32_t u32() { return scalar<std::uint32_t>(); }
    std::int32_t i32() { return scalar<std::int32_t>(); }

    std::string text(std::size_t n) {
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }

    std::size_t remaining() const { return data_.size() - pos_; }
    const std::string& what() const { return what_; }

private:
    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
    std::uint32_t stored_crc_ = 0;
    std::string what_;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path.string() + "' for reading");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing '" + path.string() + "'");
}

}  // namespace seqshort::io
