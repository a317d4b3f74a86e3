#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace neuroloc {

// NLT1 binary tensor container:
//   4-byte magic "NLT1" | u8 dtype (0=f64, 1=f32) | u8 ndim |
//   ndim x u64 dims (little-endian) | row-major payload.
static_assert(std::endian::native == std::endian::little, "NLT1 I/O assumes a little-endian host");

enum class Nlt1Dtype : std::uint8_t { f64 = 0, f32 = 1 };

struct Nlt1Tensor {
    Nlt1Dtype dtype = Nlt1Dtype::f64;
    std::vector<std::uint64_t> dims;
    std::vector<double> f64_data;  // valid when dtype == f64
    std::vector<float> f32_data;   // valid when dtype == f32

    std::uint64_t element_count() const {
        std::uint64_t n = 1;
        for (auto d : dims) n *= d;
        return n;
    }
};

void nlt1_save(const std::filesystem::path& path, const Nlt1Tensor& t);
Nlt1Tensor nlt1_load(const std::filesystem::path& path);

// Stream forms, used to concatenate records into archive files; `context`
// names the container in error messages. The record layout is identical to
// the single-tensor files.
void nlt1_write(std::ostream& out, const Nlt1Tensor& t, const std::string& context);
Nlt1Tensor nlt1_read(std::istream& in, const std::string& context);

// Serialized record size in bytes (header + payload).
std::uint64_t nlt1_record_bytes(const Nlt1Tensor& t);

// Header-only peek used by `inspect`; throws the same corrupt-file errors
// as a full load but does not read the payload.
struct Nlt1Header {
    Nlt1Dtype dtype;
    std::vector<std::uint64_t> dims;
    std::uint64_t payload_bytes;
};
Nlt1Header nlt1_read_header(const std::filesystem::path& path);

}  // namespace neuroloc
