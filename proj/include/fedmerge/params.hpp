#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "fedmerge/errors.hpp"

namespace fedmerge {

// One named, shaped slab of 64-bit reals. Values are row-major.
struct Block {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> values;

    std::size_t count() const { return values.size(); }
};

inline std::size_t shape_count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (const std::size_t d : shape) { n *= d; }
    return n;
}

// Flat, ordered collection of named parameter blocks. The universal currency
// for model weights, task vectors, gradients, Fisher diagonals and posterior
// variances. Block order is fixed at construction; all binary operations
// require exact (name, order, shape) agreement.
class ParamVector {
public:
    ParamVector() = default;

    void add_block(std::string name, std::vector<std::size_t> shape, std::vector<double> values) {
        if (shape_count(shape) != values.size()) {
            throw ShapeError("block '" + name + "': shape count " + std::to_string(shape_count(shape)) +
                             " != value count " + std::to_string(values.size()));
        }
        for (const Block& b : blocks_) {
            if (b.name == name) { throw ShapeError("duplicate block name '" + name + "'"); }
        }
        blocks_.push_back(Block{std::move(name), std::move(shape), std::move(values)});
    }

    void add_block(std::string name, std::vector<std::size_t> shape, double fill = 0.0) {
        std::vector<double> values(shape_count(shape), fill);
        add_block(std::move(name), std::move(shape), std::move(values));
    }

    std::size_t block_count() const { return blocks_.size(); }
    const Block& block(std::size_t i) const { return blocks_[i]; }
    Block& block(std::size_t i) { return blocks_[i]; }
    const std::vector<Block>& blocks() const { return blocks_; }

    const Block* find(std::string_view name) const {
        for (const Block& b : blocks_) {
            if (b.name == name) { return &b; }
        }
        return nullptr;
    }

    Block* find(std::string_view name) {
        for (Block& b : blocks_) {
            if (b.name == name) { return &b; }
        }
        return nullptr;
    }

    std::size_t total_count() const {
        std::size_t n = 0;
        for (const Block& b : blocks_) { n += b.count(); }
        return n;
    }

    // Throws ShapeError naming the first mismatching block.
    void require_compatible(const ParamVector& other) const {
        const std::size_t n = std::min(blocks_.size(), other.blocks_.size());
        for (std::size_t i = 0; i < n; ++i) {
            const Block& a = blocks_[i];
            const Block& b = other.blocks_[i];
            if (a.name != b.name) {
                throw ShapeError("block " + std::to_string(i) + ": name '" + a.name + "' vs '" + b.name + "'");
            }
            if (a.shape != b.shape) {
                throw ShapeError("block '" + a.name + "': shape mismatch");
            }
        }
        if (blocks_.size() != other.blocks_.size()) {
            const ParamVector& longer = blocks_.size() > other.blocks_.size() ? *this : other;
            throw ShapeError("block count mismatch, first extra block '" + longer.block(n).name + "'");
        }
    }

    bool compatible_with(const ParamVector& other) const {
        if (blocks_.size() != other.blocks_.size()) { return false; }
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            if (blocks_[i].name != other.blocks_[i].name || blocks_[i].shape != other.blocks_[i].shape) {
                return false;
            }
        }
        return true;
    }

    ParamVector zeros_like() const {
        ParamVector out;
        for (const Block& b : blocks_) { out.add_block(b.name, b.shape, 0.0); }
        return out;
    }

    // Visits every coordinate in fixed block order.
    template <class F>
    void for_each(F&& f) const {
        for (const Block& b : blocks_) {
            for (const double v : b.values) { f(v); }
        }
    }

private:
    std::vector<Block> blocks_;
};

// result_k = alpha*x_k + beta*y_k.
inline ParamVector axpby(double alpha, const ParamVector& x, double beta, const ParamVector& y) {
    x.require_compatible(y);
    ParamVector out = x;
    for (std::size_t i = 0; i < out.block_count(); ++i) {
        double* o = out.block(i).values.data();
        const double* yv = y.block(i).values.data();
        const std::size_t n = out.block(i).count();
        for (std::size_t k = 0; k < n; ++k) { o[k] = alpha * o[k] + beta * yv[k]; }
    }
    return out;
}

// Sequential left-to-right reduction in 80-bit extended precision.
inline double dot(const ParamVector& x, const ParamVector& y) {
    x.require_compatible(y);
    long double acc = 0.0L;
    for (std::size_t i = 0; i < x.block_count(); ++i) {
        const double* xv = x.block(i).values.data();
        const double* yv = y.block(i).values.data();
        const std::size_t n = x.block(i).count();
        for (std::size_t k = 0; k < n; ++k) { acc += static_cast<long double>(xv[k]) * yv[k]; }
    }
    return static_cast<double>(acc);
}

inline double norm2(const ParamVector& x) { return std::sqrt(dot(x, x)); }

// Mean of several shape-compatible vectors. Accumulates each coordinate in
// long double so the mean of K <= 64 identical values reproduces them
// bit-exactly (64-bit mantissa holds k*m exactly for k <= 64).
inline ParamVector mean_of(const std::vector<const ParamVector*>& xs) {
    if (xs.empty()) { throw ShapeError("mean_of: empty input"); }
    for (std::size_t i = 1; i < xs.size(); ++i) { xs[0]->require_compatible(*xs[i]); }
    ParamVector out = xs[0]->zeros_like();
    const long double inv_n = 1.0L / static_cast<long double>(xs.size());
    for (std::size_t b = 0; b < out.block_count(); ++b) {
        double* o = out.block(b).values.data();
        const std::size_t n = out.block(b).count();
        for (std::size_t k = 0; k < n; ++k) {
            long double acc = 0.0L;
            for (const ParamVector* x : xs) { acc += x->block(b).values[k]; }
            o[k] = static_cast<double>(acc * inv_n);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// PVEC binary container.
//
//   magic "PVEC" | u16 version | u32 block count
//   per block: u16 name length + UTF-8 name | u8 ndim | u32 dims...
//              | payload of little-endian 64-bit floats
//   trailing u32 CRC32 over the concatenated payload bytes
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint32_t crc32_table_entry(std::uint32_t i) {
    std::uint32_t c = i;
    for (int k = 0; k < 8; ++k) { c = (c & 1u) ? (0xedb88320u ^ (c >> 1)) : (c >> 1); }
    return c;
}

inline std::uint32_t crc32_update(std::uint32_t crc, const unsigned char* data, std::size_t len) {
    static const auto table = [] {
        std::vector<std::uint32_t> t(256);
        for (std::uint32_t i = 0; i < 256; ++i) { t[i] = crc32_table_entry(i); }
        return t;
    }();
    std::uint32_t c = crc ^ 0xffffffffu;
    for (std::size_t i = 0; i < len; ++i) { c = table[(c ^ data[i]) & 0xffu] ^ (c >> 8); }
    return c ^ 0xffffffffu;
}

inline void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
    out.push_back(static_cast<unsigned char>(v & 0xffu));
    out.push_back(static_cast<unsigned char>((v >> 8) & 0xffu));
}

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) { out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xffu)); }
}

inline void put_f64(std::vector<unsigned char>& out, double v) {
    const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) { out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xffu)); }
}

struct Reader {
    const unsigned char* p;
    std::size_t remaining;

    void need(std::size_t n) const {
        if (remaining < n) { throw FormatError("pvec: truncated payload"); }
    }
    std::uint8_t u8() {
        need(1);
        const std::uint8_t v = *p;
        p += 1;
        remaining -= 1;
        return v;
    }
    std::uint16_t u16() {
        need(2);
        const std::uint16_t v = static_cast<std::uint16_t>(p[0] | (p[1] << 8));
        p += 2;
        remaining -= 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) { v |= static_cast<std::uint32_t>(p[i]) << (8 * i); }
        p += 4;
        remaining -= 4;
        return v;
    }
    double f64() {
        need(8);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) { bits |= static_cast<std::uint64_t>(p[i]) << (8 * i); }
        p += 8;
        remaining -= 8;
        return std::bit_cast<double>(bits);
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(p), n);
        p += n;
        remaining -= n;
        return s;
    }
};

} // namespace detail

inline std::vector<unsigned char> serialize(const ParamVector& v) {
    std::vector<unsigned char> out;
    out.push_back('P');
    out.push_back('V');
    out.push_back('E');
    out.push_back('C');
    detail::put_u16(out, 1);
    detail::put_u32(out, static_cast<std::uint32_t>(v.block_count()));
    std::uint32_t crc = 0;
    for (const Block& b : v.blocks()) {
        detail::put_u16(out, static_cast<std::uint16_t>(b.name.size()));
        out.insert(out.end(), b.name.begin(), b.name.end());
        out.push_back(static_cast<unsigned char>(b.shape.size()));
        for (const std::size_t d : b.shape) { detail::put_u32(out, static_cast<std::uint32_t>(d)); }
        const std::size_t payload_start = out.size();
        for (const double x : b.values) { detail::put_f64(out, x); }
        crc = detail::crc32_update(crc, out.data() + payload_start, out.size() - payload_start);
    }
    detail::put_u32(out, crc);
    return out;
}

inline ParamVector deserialize(const unsigned char* data, std::size_t size) {
    detail::Reader r{data, size};
    r.need(4);
    if (std::memcmp(r.p, "PVEC", 4) != 0) { throw FormatError("pvec: bad magic"); }
    r.p += 4;
    r.remaining -= 4;
    const std::uint16_t version = r.u16();
    if (version != 1) { throw FormatError("pvec: unsupported version " + std::to_string(version)); }
    const std::uint32_t nblocks = r.u32();
    ParamVector v;
    std::uint32_t crc = 0;
    for (std::uint32_t i = 0; i < nblocks; ++i) {
        const std::uint16_t name_len = r.u16();
        std::string name = r.str(name_len);
        const std::uint8_t ndim = r.u8();
        std::vector<std::size_t> shape(ndim);
        for (std::uint8_t d = 0; d < ndim; ++d) { shape[d] = r.u32(); }
        const std::size_t count = shape_count(shape);
        r.need(count * 8);
        crc = detail::crc32_update(crc, r.p, count * 8);
        std::vector<double> values(count);
        for (std::size_t k = 0; k < count; ++k) { values[k] = r.f64(); }
        v.add_block(std::move(name), std::move(shape), std::move(values));
    }
    const std::uint32_t stored = r.u32();
    if (stored != crc) { throw FormatError("pvec: checksum mismatch"); }
    if (r.remaining != 0) { throw FormatError("pvec: trailing bytes"); }
    return v;
}

inline ParamVector deserialize(const std::vector<unsigned char>& bytes) {
    return deserialize(bytes.data(), bytes.size());
}

inline void save_pvec(const ParamVector& v, const std::string& path) {
    const std::vector<unsigned char> bytes = serialize(v);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) { throw IoError("cannot open '" + path + "' for writing"); }
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) { throw IoError("write failed for '" + path + "'"); }
}

inline ParamVector load_pvec(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) { throw IoError("cannot open '" + path + "' for reading"); }
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

} // namespace fedmerge
