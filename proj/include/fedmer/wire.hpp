#pragma once

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedmer {

// malformed byte stream; carries the offset where decoding failed
struct FormatError : std::runtime_error {
    std::size_t offset;
    FormatError(const std::string& msg, std::size_t at)
        : std::runtime_error(msg + " (at byte " + std::to_string(at) + ")"), offset(at) {}
};

// Little-endian primitives shared by the parameter wire format and the
// dataset container: u64 for counts/dims, raw IEEE-754 for values.
namespace wire {

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f64(std::vector<std::uint8_t>& out, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u64(out, bits);
}

inline void put_bytes(std::vector<std::uint8_t>& out, const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
}

struct Reader {
    const std::uint8_t* data;
    std::size_t size;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) const {
        if (pos + n > size) {
            throw FormatError(std::string("truncated stream while reading ") + what, pos);
        }
    }

    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }

    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }

    double f64(const char* what) {
        const std::uint64_t bits = u64(what);
        double d;
        std::memcpy(&d, &bits, 8);
        return d;
    }

    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(data + pos), n);
        pos += n;
        return s;
    }

    void f64_array(double* dst, std::size_t n, const char* what) {
        need(8 * n, what);
        for (std::size_t i = 0; i < n; ++i) {
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b) {
                bits |= static_cast<std::uint64_t>(data[pos + 8 * i + b]) << (8 * b);
            }
            std::memcpy(dst + i, &bits, 8);
        }
        pos += 8 * n;
    }
};

}  // namespace wire
}  // namespace fedmer
