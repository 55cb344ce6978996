#pragma once

// Flat archive of named arrays plus a JSON header.
//
// Layout (all integers little-endian):
//   "AGPARCH1"                      8-byte magic
//   u64 header_len, header bytes    UTF-8 JSON object
//   u64 entry_count
//   entry*:
//     u32 name_len, name bytes
//     u8 kind                       0 = float64 array, 1 = text
//     kind 0: u32 ndim, u64 dim[ndim], f64 values[prod(dim)]
//     kind 1: u64 len, bytes
//   u64 checksum                    FNV-1a of every preceding byte
//
// Entries are written in name order so identical contents give identical
// files.

#include <agp/error.hpp>
#include <agp/nn.hpp>
#include <agp/tensor.hpp>

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <variant>
#include <vector>

namespace agp {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

struct ArrayRecord {
    std::vector<std::int64_t> shape;
    std::vector<double> values;

    bool operator==(const ArrayRecord&) const = default;
};

class Archive {
public:
    using Entry = std::variant<ArrayRecord, std::string>;

    nlohmann::json header = nlohmann::json::object();

    void put(const std::string& name, ArrayRecord rec) { entries_[name] = std::move(rec); }

    void put(const std::string& name, const Matrix& m) {
        ArrayRecord rec{{m.rows(), m.cols()}, std::vector<double>(m.data(), m.data() + m.size())};
        entries_[name] = std::move(rec);
    }

    void put_text(const std::string& name, std::string text) { entries_[name] = std::move(text); }

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }

    const ArrayRecord& array(const std::string& name) const {
        auto it = entries_.find(name);
        require(it != entries_.end(), ErrorKind::load, "missing array '" + name + "'");
        const auto* rec = std::get_if<ArrayRecord>(&it->second);
        require(rec != nullptr, ErrorKind::load, "entry '" + name + "' is not an array");
        return *rec;
    }

    Matrix matrix(const std::string& name) const {
        const ArrayRecord& rec = array(name);
        require(rec.shape.size() == 2, ErrorKind::load, "array '" + name + "' is not 2-D");
        Matrix m(rec.shape[0], rec.shape[1]);
        std::copy(rec.values.begin(), rec.values.end(), m.data());
        return m;
    }

    const std::string& text(const std::string& name) const {
        auto it = entries_.find(name);
        require(it != entries_.end(), ErrorKind::load, "missing entry '" + name + "'");
        const auto* s = std::get_if<std::string>(&it->second);
        require(s != nullptr, ErrorKind::load, "entry '" + name + "' is not text");
        return *s;
    }

    std::vector<std::string> names(const std::string& prefix = {}) const {
        std::vector<std::string> out;
        for (const auto& [k, v] : entries_)
            if (k.rfind(prefix, 0) == 0) out.push_back(k);
        return out;
    }

    std::vector<std::uint8_t> serialize() const {
        std::vector<std::uint8_t> buf;
        auto raw = [&](const void* p, std::size_t n) {
            const auto* b = static_cast<const std::uint8_t*>(p);
            buf.insert(buf.end(), b, b + n);
        };
        auto u64 = [&](std::uint64_t v) { raw(&v, 8); };
        auto u32 = [&](std::uint32_t v) { raw(&v, 4); };
        raw(kMagic, 8);
        const std::string h = header.dump();
        u64(h.size());
        raw(h.data(), h.size());
        u64(entries_.size());
        for (const auto& [name, entry] : entries_) {
            u32(static_cast<std::uint32_t>(name.size()));
            raw(name.data(), name.size());
            if (const auto* rec = std::get_if<ArrayRecord>(&entry)) {
                buf.push_back(0);
                u32(static_cast<std::uint32_t>(rec->shape.size()));
                for (auto d : rec->shape) u64(static_cast<std::uint64_t>(d));
                raw(rec->values.data(), rec->values.size() * sizeof(double));
            } else {
                const auto& s = std::get<std::string>(entry);
                buf.push_back(1);
                u64(s.size());
                raw(s.data(), s.size());
            }
        }
        u64(checksum(buf.data(), buf.size()));
        return buf;
    }

    static Archive deserialize(const std::vector<std::uint8_t>& buf) {
        std::size_t pos = 0;
        auto take = [&](void* dst, std::size_t n) {
            require(pos + n <= buf.size(), ErrorKind::load, "truncated archive");
            std::memcpy(dst, buf.data() + pos, n);
            pos += n;
        };
        auto u64 = [&] {
            std::uint64_t v;
            take(&v, 8);
            return v;
        };
        auto u32 = [&] {
            std::uint32_t v;
            take(&v, 4);
            return v;
        };
        require(buf.size() >= 16, ErrorKind::load, "truncated archive");
        char magic[8];
        take(magic, 8);
        require(std::memcmp(magic, kMagic, 8) == 0, ErrorKind::load, "not an archive (bad magic)");
        std::uint64_t stored = 0;
        std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
        require(stored == checksum(buf.data(), buf.size() - 8), ErrorKind::load, "checksum mismatch (truncated or corrupt)");

        Archive a;
        const std::uint64_t hlen = u64();
        require(hlen <= buf.size(), ErrorKind::load, "truncated archive");
        std::string h(hlen, '\0');
        take(h.data(), hlen);
        try {
            a.header = nlohmann::json::parse(h);
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::load, std::string("bad archive header: ") + e.what());
        }
        const std::uint64_t count = u64();
        for (std::uint64_t e = 0; e < count; ++e) {
            std::string name(u32(), '\0');
            take(name.data(), name.size());
            std::uint8_t kind = 0;
            take(&kind, 1);
            if (kind == 0) {
                ArrayRecord rec;
                const std::uint32_t ndim = u32();
                require(ndim <= 8, ErrorKind::load, "bad rank for '" + name + "'");
                std::uint64_t total = 1;
                for (std::uint32_t i = 0; i < ndim; ++i) {
                    const std::uint64_t d = u64();
                    rec.shape.push_back(static_cast<std::int64_t>(d));
                    total *= d;
                }
                require(total * sizeof(double) <= buf.size() - pos, ErrorKind::load, "truncated array '" + name + "'");
                rec.values.resize(total);
                take(rec.values.data(), total * sizeof(double));
                a.entries_[name] = std::move(rec);
            } else if (kind == 1) {
                const std::uint64_t len = u64();
                require(len <= buf.size() - pos, ErrorKind::load, "truncated text '" + name + "'");
                std::string s(len, '\0');
                take(s.data(), len);
                a.entries_[name] = std::move(s);
            } else {
                fail(ErrorKind::load, "unknown entry kind for '" + name + "'");
            }
        }
        require(pos + 8 == buf.size(), ErrorKind::load, "trailing bytes in archive");
        return a;
    }

    /// Writes to a sibling temp file and renames it into place, so a reader
    /// never observes a partial archive.
    void save(const std::filesystem::path& path) const {
        const auto bytes = serialize();
        auto tmp = path;
        tmp += ".tmp";
        {
            std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
            require(static_cast<bool>(out), ErrorKind::io, "cannot write " + tmp.string());
            out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
            out.flush();
            require(static_cast<bool>(out), ErrorKind::io, "write failed for " + tmp.string());
        }
        std::filesystem::rename(tmp, path);
    }

    static Archive load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        require(static_cast<bool>(in), ErrorKind::load, "cannot open " + path.string());
        std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return deserialize(buf);
    }

    bool operator==(const Archive& o) const { return header == o.header && entries_ == o.entries_; }

private:
    static constexpr char kMagic[8] = {'A', 'G', 'P', 'A', 'R', 'C', 'H', '1'};

    static std::uint64_t checksum(const std::uint8_t* p, std::size_t n) {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
        return h;
    }

    std::map<std::string, Entry> entries_;
};

template <class Params>
void write_params(Archive& a, const std::string& prefix, const Params& p) {
    Params::each(p, prefix, [&](const std::string& name, const Matrix& m) { a.put(name, m); });
}

/// Reads every array of `p` from `prefix`; all missing or mis-shaped names are
/// reported together and `p` is untouched on failure.
template <class Params>
void read_params(const Archive& a, const std::string& prefix, Params& p) {
    std::vector<std::string> bad;
    Params::each(p, prefix, [&](const std::string& name, const Matrix& m) {
        if (!a.contains(name)) {
            bad.push_back(name + " (missing)");
            return;
        }
        const ArrayRecord& rec = a.array(name);
        if (rec.shape.size() != 2 || rec.shape[0] != m.rows() || rec.shape[1] != m.cols()) {
            std::string got;
            for (auto d : rec.shape) got += (got.empty() ? "" : "x") + std::to_string(d);
            bad.push_back(name + " (expected " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ", got " +
                          got + ")");
        }
    });
    if (!bad.empty()) {
        std::string msg = "parameter mismatch:";
        for (const auto& b : bad) msg += " " + b + ";";
        fail(ErrorKind::load, msg);
    }
    Params::each(p, prefix, [&](const std::string& name, Matrix& m) { m = a.matrix(name); });
}

} // namespace agp
