#include "neuroloc/nlt1.hpp"

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "neuroloc/error.hpp"

namespace neuroloc {

namespace {

constexpr char kMagic[4] = {'N', 'L', 'T', '1'};

std::size_t dtype_size(Nlt1Dtype d) { return d == Nlt1Dtype::f64 ? 8 : 4; }

void read_exact(std::istream& in, void* dst, std::size_t n, const std::string& context) {
    in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
        fail_data("corrupt NLT1 data (truncated): " + context);
}

}  // namespace

std::uint64_t nlt1_record_bytes(const Nlt1Tensor& t) {
    return 4 + 2 + 8 * t.dims.size() + t.element_count() * dtype_size(t.dtype);
}

void nlt1_write(std::ostream& out, const Nlt1Tensor& t, const std::string& context) {
    out.write(kMagic, 4);
    const auto dtype = static_cast<std::uint8_t>(t.dtype);
    const auto ndim = static_cast<std::uint8_t>(t.dims.size());
    out.write(reinterpret_cast<const char*>(&dtype), 1);
    out.write(reinterpret_cast<const char*>(&ndim), 1);
    for (std::uint64_t d : t.dims) out.write(reinterpret_cast<const char*>(&d), 8);
    const std::uint64_t n = t.element_count();
    if (t.dtype == Nlt1Dtype::f64) {
        if (t.f64_data.size() != n) fail_data("NLT1 payload size mismatch on save: " + context);
        out.write(reinterpret_cast<const char*>(t.f64_data.data()),
                  static_cast<std::streamsize>(n * 8));
    } else {
        if (t.f32_data.size() != n) fail_data("NLT1 payload size mismatch on save: " + context);
        out.write(reinterpret_cast<const char*>(t.f32_data.data()),
                  static_cast<std::streamsize>(n * 4));
    }
    if (!out) fail_data("write failed: " + context);
}

Nlt1Tensor nlt1_read(std::istream& in, const std::string& context) {
    char magic[4];
    read_exact(in, magic, 4, context);
    if (std::memcmp(magic, kMagic, 4) != 0) fail_data("bad NLT1 magic in " + context);
    std::uint8_t dtype_raw = 0, ndim = 0;
    read_exact(in, &dtype_raw, 1, context);
    read_exact(in, &ndim, 1, context);
    if (dtype_raw > 1) fail_data("unknown NLT1 dtype in " + context);
    Nlt1Tensor t;
    t.dtype = static_cast<Nlt1Dtype>(dtype_raw);
    t.dims.resize(ndim);
    for (auto& d : t.dims) read_exact(in, &d, 8, context);
    const std::uint64_t n = t.element_count();
    if (t.dtype == Nlt1Dtype::f64) {
        t.f64_data.resize(n);
        read_exact(in, t.f64_data.data(), n * 8, context);
    } else {
        t.f32_data.resize(n);
        read_exact(in, t.f32_data.data(), n * 4, context);
    }
    return t;
}

void nlt1_save(const std::filesystem::path& path, const Nlt1Tensor& t) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail_data("cannot open for writing: " + path.string());
    nlt1_write(out, t, path.string());
}

Nlt1Header nlt1_read_header(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail_data("cannot open: " + path.string());
    char magic[4];
    read_exact(in, magic, 4, path.string());
    if (std::memcmp(magic, kMagic, 4) != 0) fail_data("bad NLT1 magic in " + path.string());
    std::uint8_t dtype_raw = 0, ndim = 0;
    read_exact(in, &dtype_raw, 1, path.string());
    read_exact(in, &ndim, 1, path.string());
    if (dtype_raw > 1) fail_data("unknown NLT1 dtype in " + path.string());
    Nlt1Header h;
    h.dtype = static_cast<Nlt1Dtype>(dtype_raw);
    h.dims.resize(ndim);
    for (auto& d : h.dims) read_exact(in, &d, 8, path.string());
    std::uint64_t n = 1;
    for (auto d : h.dims) n *= d;
    h.payload_bytes = n * dtype_size(h.dtype);
    return h;
}

Nlt1Tensor nlt1_load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail_data("cannot open: " + path.string());
    return nlt1_read(in, path.string());
}

}  // namespace neuroloc
