#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "fae/common.hpp"

namespace fae {

// Little-endian append-only buffer.
class ByteWriter {
public:
    void u8(std::uint8_t x) { buf_.push_back(x); }
    void u16(std::uint16_t x) { raw(&x, 2); }
    void u32(std::uint32_t x) { raw(&x, 4); }
    void u64(std::uint64_t x) { raw(&x, 8); }
    void i32(std::int32_t x) { raw(&x, 4); }
    void f32(float x) { raw(&x, 4); }
    void f64(double x) { raw(&x, 8); }
    void bytes(const void* p, std::size_t n) { raw(p, n); }
    void str(const std::string& s) { raw(s.data(), s.size()); }

    std::size_t size() const { return buf_.size(); }
    const std::vector<std::uint8_t>& data() const { return buf_; }

private:
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    std::vector<std::uint8_t> buf_;
};

// Bounds-checked reader; errors carry the byte offset of the failure.
class ByteReader {
public:
    ByteReader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}
    explicit ByteReader(const std::vector<std::uint8_t>& v) : p_(v.data()), n_(v.size()) {}

    std::size_t offset() const { return off_; }
    std::size_t remaining() const { return n_ - off_; }

    std::uint8_t u8() { return take<std::uint8_t>(); }
    std::uint16_t u16() { return take<std::uint16_t>(); }
    std::uint32_t u32() { return take<std::uint32_t>(); }
    std::uint64_t u64() { return take<std::uint64_t>(); }
    std::int32_t i32() { return take<std::int32_t>(); }
    float f32() { return take<float>(); }
    double f64() { return take<double>(); }

    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(p_ + off_), n);
        off_ += n;
        return s;
    }
    const std::uint8_t* raw(std::size_t n) {
        need(n);
        const std::uint8_t* r = p_ + off_;
        off_ += n;
        return r;
    }

private:
    template <typename T>
    T take() {
        need(sizeof(T));
        T x;
        std::memcpy(&x, p_ + off_, sizeof(T));
        off_ += sizeof(T);
        return x;
    }
    void need(std::size_t n) const {
        if (off_ + n > n_)
            throw format_error("truncated input at offset " + std::to_string(off_) +
                               " (need " + std::to_string(n) + " bytes, have " +
                               std::to_string(n_ - off_) + ")");
    }
    const std::uint8_t* p_;
    std::size_t n_;
    std::size_t off_ = 0;
};

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
// Temp-file + rename. Refuses to replace an existing file unless `force`.
void write_file_atomic(const std::string& path, const void* data, std::size_t n,
                       bool force = true);
void write_text_atomic(const std::string& path, const std::string& text, bool force = true);

std::uint32_t crc32_bytes(const void* data, std::size_t n);

} // namespace fae
