#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "autofed/errors.hpp"

namespace autofed {

// Little-endian binary encoding, independent of host byte order, so dataset
// and checkpoint files compare byte-identical across platforms.
class ByteWriter {
public:
    void put_u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }

    void put_u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }

    void put_u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }

    void put_f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        put_u64(bits);
    }

    void put_bytes(const void* data, std::size_t len) {
        buf_.append(static_cast<const char*>(data), len);
    }

    void put_string(const std::string& s) {
        put_u32(static_cast<std::uint32_t>(s.size()));
        put_bytes(s.data(), s.size());
    }

    const std::string& bytes() const { return buf_; }
    std::size_t size() const { return buf_.size(); }

private:
    std::string buf_;
};

class ByteReader {
public:
    ByteReader(const void* data, std::size_t len)
        : p_(static_cast<const unsigned char*>(data)), len_(len) {}
    explicit ByteReader(const std::string& s) : ByteReader(s.data(), s.size()) {}

    std::uint8_t get_u8() {
        need(1);
        return p_[pos_++];
    }

    std::uint32_t get_u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint64_t get_u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }

    double get_f64() {
        const std::uint64_t bits = get_u64();
        double v;
        std::memcpy(&v, &bits, sizeof v);
        return v;
    }

    std::string get_string() {
        const auto n = get_u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(p_ + pos_), n);
        pos_ += n;
        return s;
    }

    std::size_t remaining() const { return len_ - pos_; }
    std::size_t pos() const { return pos_; }

private:
    void need(std::size_t n) const {
        if (pos_ + n > len_) throw IoError("truncated record: need " + std::to_string(n) + " bytes");
    }

    const unsigned char* p_;
    std::size_t len_;
    std::size_t pos_ = 0;
};

// Write-temp-then-rename; interrupted runs never leave truncated files.
void write_file_atomic(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);
bool file_exists(const std::string& path);

}  // namespace autofed
