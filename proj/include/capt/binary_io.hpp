#pragma once

// Little-endian binary encoding shared by the world, bank and checkpoint files.

#include "capt/error.hpp"
#include "capt/tensor.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

namespace capt::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class Writer {
  public:
    void bytes(const void *p, std::size_t n) {
        const auto *c = static_cast<const unsigned char *>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    void magic(std::string_view m) { bytes(m.data(), m.size()); }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void u64(std::uint64_t v) { bytes(&v, 8); }
    void i64(std::int64_t v) { bytes(&v, 8); }
    void f64(double v) { bytes(&v, 8); }
    void str(std::string_view s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void tensor(const Tensor &t) {
        u32(static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) {
            u64(d);
        }
        bytes(t.data().data(), t.size() * sizeof(double));
    }

    [[nodiscard]] const std::vector<unsigned char> &buffer() const noexcept { return buf_; }

    void save(const std::filesystem::path &path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot open '" + path.string() + "' for writing");
        }
        out.write(reinterpret_cast<const char *>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
        if (!out) {
            throw IoError("write failed for '" + path.string() + "'");
        }
    }

  private:
    std::vector<unsigned char> buf_;
};

/// Bounds-checked reader; every failure is a FormatError carrying the offset.
class Reader {
  public:
    explicit Reader(std::vector<unsigned char> data) : data_(std::move(data)) {}

    static Reader from_file(const std::filesystem::path &path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) {
            throw IoError("cannot open '" + path.string() + "' for reading");
        }
        std::vector<unsigned char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return Reader(std::move(data));
    }

    void bytes(void *p, std::size_t n) {
        need(n);
        std::memcpy(p, data_.data() + pos_, n);
        pos_ += n;
    }
    void expect_magic(std::string_view m) {
        const std::size_t at = pos_;
        std::string got(m.size(), '\0');
        if (data_.size() - pos_ < m.size()) {
            throw FormatError("file too short for magic '" + std::string(m) + "'", at);
        }
        bytes(got.data(), m.size());
        if (got != m) {
            throw FormatError("bad magic, expected '" + std::string(m) + "'", at);
        }
    }
    std::uint8_t u8() {
        std::uint8_t v;
        bytes(&v, 1);
        return v;
    }
    std::uint32_t u32() {
        std::uint32_t v;
        bytes(&v, 4);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        bytes(&v, 8);
        return v;
    }
    std::int64_t i64() {
        std::int64_t v;
        bytes(&v, 8);
        return v;
    }
    double f64() {
        double v;
        bytes(&v, 8);
        return v;
    }
    std::string str() {
        const std::size_t at = pos_;
        const std::uint32_t n = u32();
        if (n > remaining()) {
            throw FormatError("string length " + std::to_string(n) + " exceeds remaining bytes", at);
        }
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
    Tensor tensor() {
        const std::size_t at = pos_;
        const std::uint32_t rank = u32();
        if (rank == 0 || rank > 4) {
            throw FormatError("invalid tensor rank " + std::to_string(rank), at);
        }
        Shape shape(rank);
        std::uint64_t volume = 1;
        for (auto &d : shape) {
            const std::uint64_t v = u64();
            if (v == 0 || v > (std::uint64_t{1} << 32)) {
                throw FormatError("invalid tensor dimension " + std::to_string(v), at);
            }
            d = static_cast<std::size_t>(v);
            volume *= v;
            if (volume * sizeof(double) > remaining()) {
                throw FormatError("tensor data exceeds remaining bytes", at);
            }
        }
        std::vector<double> data(static_cast<std::size_t>(volume));
        bytes(data.data(), data.size() * sizeof(double));
        return Tensor(std::move(shape), std::move(data));
    }

    /// Reads a count and checks it against a plausibility bound.
    std::size_t count(std::uint64_t max, const char *what) {
        const std::size_t at = pos_;
        const std::uint64_t v = u64();
        if (v > max) {
            throw FormatError(std::string("implausible ") + what + " count " + std::to_string(v), at);
        }
        return static_cast<std::size_t>(v);
    }

    [[nodiscard]] std::size_t offset() const noexcept { return pos_; }
    [[nodiscard]] std::size_t remaining() const noexcept { return data_.size() - pos_; }

    void expect_end() const {
        if (pos_ != data_.size()) {
            throw FormatError("trailing bytes after payload", pos_);
        }
    }

  private:
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) {
            throw FormatError("unexpected end of file", pos_);
        }
    }

    std::vector<unsigned char> data_;
    std::size_t pos_ = 0;
};

/// FNV-1a over raw bytes.
inline std::uint64_t fnv1a(const void *p, std::size_t n, std::uint64_t h = 1469598103934665603ull) {
    const auto *c = static_cast<const unsigned char *>(p);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= c[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t fnv1a(std::string_view s) { return fnv1a(s.data(), s.size()); }

inline std::uint64_t checksum(const Tensor &t, std::uint64_t h = 1469598103934665603ull) {
    return fnv1a(t.data().data(), t.size() * sizeof(double), h);
}

}  // namespace capt::io
