#pragma once

// WTNS v1 weight container.
//
// Layout: 8-byte magic "WTNS0001", 8-byte little-endian unsigned header
// length, UTF-8 JSON header, contiguous little-endian payload. The header is
//   {"tensors": [{"name", "dims", "dtype" ("f64"|"u8"), "byte_offset"}, ...],
//    "meta": {...}}            (meta optional)
// byte_offset is relative to the start of the payload region.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "prunescope/errors.hpp"

namespace prunescope::wtns {

enum class Dtype { f64, u8 };

inline std::string_view dtype_name(Dtype t) { return t == Dtype::f64 ? "f64" : "u8"; }

inline Dtype dtype_from_name(std::string_view name) {
    if (name == "f64") return Dtype::f64;
    if (name == "u8") return Dtype::u8;
    throw ParseError("WTNS: unknown dtype '" + std::string(name) + "'");
}

struct Tensor {
    std::string name;
    std::vector<std::size_t> dims;
    Dtype dtype = Dtype::f64;
    std::vector<double> f64;       // used when dtype == f64
    std::vector<std::uint8_t> u8;  // used when dtype == u8

    std::size_t element_count() const {
        std::size_t n = 1;
        for (std::size_t d : dims) n *= d;
        return n;
    }

    void validate() const {
        const std::size_t n = element_count();
        const std::size_t have = dtype == Dtype::f64 ? f64.size() : u8.size();
        if (have != n)
            throw InvalidParameter("WTNS tensor '" + name + "': " + std::to_string(have) +
                                   " elements stored, dims say " + std::to_string(n));
    }
};

struct Container {
    std::vector<Tensor> tensors;
    nlohmann::json meta;  // optional free-form annotations

    const Tensor* find(std::string_view name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }

    const Tensor& require(std::string_view name) const {
        const Tensor* t = find(name);
        if (!t) throw ParseError("WTNS: tensor '" + std::string(name) + "' missing");
        return *t;
    }
};

namespace detail {

constexpr char kMagic[9] = "WTNS0001";

inline void put_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

inline void put_f64_le(std::string& out, double d) {
    put_u64_le(out, std::bit_cast<std::uint64_t>(d));
}

inline double get_f64_le(const unsigned char* p) {
    return std::bit_cast<double>(get_u64_le(p));
}

}  // namespace detail

inline void write(const std::string& path, const Container& c) {
    nlohmann::json header;
    header["tensors"] = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& t : c.tensors) {
        t.validate();
        nlohmann::json jt;
        jt["name"] = t.name;
        jt["dims"] = t.dims;
        jt["dtype"] = std::string(dtype_name(t.dtype));
        jt["byte_offset"] = offset;
        header["tensors"].push_back(std::move(jt));
        offset += t.dtype == Dtype::f64 ? 8 * t.element_count() : t.element_count();
    }
    if (!c.meta.is_null()) header["meta"] = c.meta;

    const std::string header_text = header.dump();
    std::string blob;
    blob.reserve(16 + header_text.size() + offset);
    blob.append(detail::kMagic, 8);
    detail::put_u64_le(blob, header_text.size());
    blob += header_text;
    for (const auto& t : c.tensors) {
        if (t.dtype == Dtype::f64) {
            for (double v : t.f64) detail::put_f64_le(blob, v);
        } else {
            for (std::uint8_t v : t.u8) blob.push_back(static_cast<char>(v));
        }
    }

    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParseError("WTNS: cannot open '" + path + "' for writing");
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw ParseError("WTNS: short write to '" + path + "'");
}

inline Container read(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("WTNS: cannot open '" + path + "'");
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());

    if (blob.size() < 16 || std::memcmp(blob.data(), detail::kMagic, 8) != 0)
        throw ParseError("WTNS: '" + path + "' lacks the WTNS0001 magic");
    const std::uint64_t header_len = detail::get_u64_le(bytes + 8);
    if (16 + header_len > blob.size())
        throw ParseError("WTNS: '" + path + "' header length exceeds file size");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(blob.substr(16, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("WTNS: '" + path + "' header is not valid JSON: " + e.what());
    }
    if (!header.contains("tensors") || !header["tensors"].is_array())
        throw ParseError("WTNS: '" + path + "' header lacks a tensors array");

    const std::size_t payload_at = 16 + header_len;
    const std::size_t payload_size = blob.size() - payload_at;
    Container c;
    if (header.contains("meta")) c.meta = header["meta"];
    for (const auto& jt : header["tensors"]) {
        Tensor t;
        try {
            t.name = jt.at("name").get<std::string>();
            t.dims = jt.at("dims").get<std::vector<std::size_t>>();
            t.dtype = dtype_from_name(jt.at("dtype").get<std::string>());
            const std::size_t off = jt.at("byte_offset").get<std::size_t>();
            const std::size_t n = t.element_count();
            const std::size_t nbytes = t.dtype == Dtype::f64 ? 8 * n : n;
            if (off + nbytes > payload_size)
                throw ParseError("WTNS: tensor '" + t.name + "' overruns the payload of '" +
                                 path + "'");
            const unsigned char* src = bytes + payload_at + off;
            if (t.dtype == Dtype::f64) {
                t.f64.resize(n);
                for (std::size_t i = 0; i < n; ++i) t.f64[i] = detail::get_f64_le(src + 8 * i);
            } else {
                t.u8.assign(src, src + n);
            }
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("WTNS: malformed tensor entry in '" + path + "': " + e.what());
        }
        c.tensors.push_back(std::move(t));
    }
    return c;
}

}  // namespace prunescope::wtns
