#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

namespace neuroloc {

// FNV-1a 64-bit running digest. Not cryptographic; used to fingerprint
// lead fields, configs and datasets so reports can assert which inputs
// produced them.
class Digest {
public:
    void update(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            hash_ ^= p[i];
            hash_ *= 0x100000001B3ULL;
        }
    }

    void update_u64(std::uint64_t v) { update(&v, sizeof v); }
    void update_f64(double v) { update(&v, sizeof v); }
    void update_str(const std::string& s) {
        update_u64(s.size());
        update(s.data(), s.size());
    }
    template <typename T>
    void update_span(const T* data, std::size_t n) {
        update_u64(n);
        update(data, n * sizeof(T));
    }

    std::uint64_t value() const { return hash_; }

    std::string hex() const {
        static const char* digits = "0123456789abcdef";
        std::string out(16, '0');
        std::uint64_t v = hash_;
        for (int i = 15; i >= 0; --i) {
            out[static_cast<std::size_t>(i)] = digits[v & 0xF];
            v >>= 4;
        }
        return out;
    }

private:
    std::uint64_t hash_ = 0xCBF29CE484222325ULL;
};

}  // namespace neuroloc
