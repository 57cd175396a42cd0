#pragma once

/// The "STDG" binary container.
///
/// Layout (all integers little-endian):
///
///     char[4]   magic "STDG"
///     u32       version (= 1)
///     u32       ndim
///     u64[ndim] dims
///     u8        dtype code (0 = float32 LE)
///     u32       number of metadata blocks
///     per block: u32 byte length, UTF-8 "key=value\n" lines
///     payload   prod(dims) values, row-major
///
/// Datasets carry one metadata block, checkpoints a second block holding the
/// architecture descriptor and training configuration.

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include "dynaguide/errors.hpp"
#include "dynaguide/field.hpp"

namespace dynaguide {

static_assert(std::endian::native == std::endian::little, "STDG I/O assumes a little-endian host");

inline constexpr char kStdgMagic[4] = {'S', 'T', 'D', 'G'};
inline constexpr std::uint32_t kStdgVersion = 1;

/// Shortest decimal string that round-trips the double exactly.
inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
        throw FormatError("cannot parse number '" + std::string(s) + "'");
    return v;
}

/// Ordered key=value metadata.
class Metadata {
public:
    void set(const std::string& key, const std::string& value) {
        if (key.find_first_of("=\n") != std::string::npos || value.find('\n') != std::string::npos)
            throw FormatError("metadata key/value contains a reserved character: " + key);
        for (auto& kv : entries_)
            if (kv.first == key) {
                kv.second = value;
                return;
            }
        entries_.emplace_back(key, value);
    }
    void set(const std::string& key, double v) { set(key, format_double(v)); }
    void set(const std::string& key, std::int64_t v) { set(key, std::to_string(v)); }
    void set(const std::string& key, std::uint64_t v) { set(key, std::to_string(v)); }
    void set(const std::string& key, int v) { set(key, std::to_string(v)); }
    void set(const std::string& key, const char* v) { set(key, std::string(v)); }

    bool has(const std::string& key) const {
        for (const auto& kv : entries_)
            if (kv.first == key) return true;
        return false;
    }

    const std::string& get(const std::string& key) const {
        for (const auto& kv : entries_)
            if (kv.first == key) return kv.second;
        throw FormatError("missing metadata key '" + key + "'");
    }

    std::string get_or(const std::string& key, const std::string& fallback) const {
        return has(key) ? get(key) : fallback;
    }
    double get_double(const std::string& key) const { return parse_double(get(key)); }
    std::int64_t get_int(const std::string& key) const {
        const auto& s = get(key);
        std::int64_t v = 0;
        auto res = std::from_chars(s.data(), s.data() + s.size(), v);
        if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
            throw FormatError("cannot parse integer '" + s + "' for key " + key);
        return v;
    }

    const std::vector<std::pair<std::string, std::string>>& entries() const noexcept { return entries_; }

    std::string serialize() const {
        std::string out;
        for (const auto& [k, v] : entries_) out += k + "=" + v + "\n";
        return out;
    }

    static Metadata parse(std::string_view text) {
        Metadata m;
        std::size_t pos = 0;
        while (pos < text.size()) {
            auto nl = text.find('\n', pos);
            if (nl == std::string_view::npos) nl = text.size();
            const auto line = text.substr(pos, nl - pos);
            pos = nl + 1;
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string_view::npos) throw FormatError("malformed metadata line '" + std::string(line) + "'");
            m.entries_.emplace_back(std::string(line.substr(0, eq)), std::string(line.substr(eq + 1)));
        }
        return m;
    }

    friend bool operator==(const Metadata&, const Metadata&) = default;

private:
    std::vector<std::pair<std::string, std::string>> entries_;
};

struct Container {
    std::vector<std::uint64_t> dims;
    std::vector<Metadata> blocks;
    std::vector<float> payload;

    std::uint64_t element_count() const {
        std::uint64_t n = 1;
        for (auto d : dims) n *= d;
        return dims.empty() ? 0 : n;
    }
};

namespace detail {

template <class T>
void put(std::string& buf, T v) {
    char raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    buf.append(raw, sizeof(T));
}

class Reader {
public:
    Reader(const std::string& bytes, const std::string& path) : bytes_(bytes), path_(path) {}

    template <class T>
    T get(const char* what) {
        if (pos_ + sizeof(T) > bytes_.size()) throw TruncatedPayload(path_ + ": truncated header reading " + what);
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string take(std::size_t n, const char* what) {
        if (pos_ + n > bytes_.size()) throw TruncatedPayload(path_ + ": truncated " + what);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t remaining() const { return bytes_.size() - pos_; }
    std::size_t position() const { return pos_; }

private:
    const std::string& bytes_;
    const std::string& path_;
    std::size_t pos_ = 0;
};

}  // namespace detail

/// Serialize a container into bytes.
inline std::string encode_container(const Container& c) {
    if (c.element_count() != c.payload.size()) throw ShapeError("container dims do not match payload length");
    std::string buf;
    buf.append(kStdgMagic, 4);
    detail::put<std::uint32_t>(buf, kStdgVersion);
    detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(c.dims.size()));
    for (auto d : c.dims) detail::put<std::uint64_t>(buf, d);
    detail::put<std::uint8_t>(buf, 0);
    detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(c.blocks.size()));
    for (const auto& b : c.blocks) {
        const auto text = b.serialize();
        detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(text.size()));
        buf += text;
    }
    const auto header = buf.size();
    buf.resize(header + c.payload.size() * sizeof(float));
    if (!c.payload.empty()) std::memcpy(buf.data() + header, c.payload.data(), c.payload.size() * sizeof(float));
    return buf;
}

inline Container decode_container(const std::string& bytes, const std::string& path = "<memory>") {
    detail::Reader r(bytes, path);
    const auto magic = r.take(4, "magic");
    if (std::memcmp(magic.data(), kStdgMagic, 4) != 0) throw MagicMismatch(path + ": not an STDG file (bad magic)");
    const auto version = r.get<std::uint32_t>("version");
    if (version != kStdgVersion)
        throw VersionMismatch(path + ": unsupported STDG version " + std::to_string(version));
    Container c;
    const auto ndim = r.get<std::uint32_t>("ndim");
    if (ndim > 16) throw FormatError(path + ": implausible ndim " + std::to_string(ndim));
    for (std::uint32_t i = 0; i < ndim; ++i) c.dims.push_back(r.get<std::uint64_t>("dims"));
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype != 0) throw FormatError(path + ": unsupported dtype code " + std::to_string(dtype));
    const auto nblocks = r.get<std::uint32_t>("block count");
    for (std::uint32_t i = 0; i < nblocks; ++i) {
        const auto len = r.get<std::uint32_t>("block length");
        c.blocks.push_back(Metadata::parse(r.take(len, "metadata block")));
    }
    const auto n = c.element_count();
    if (r.remaining() < n * sizeof(float))
        throw TruncatedPayload(path + ": payload truncated (" + std::to_string(r.remaining()) + " of " +
                               std::to_string(n * sizeof(float)) + " bytes)");
    if (r.remaining() > n * sizeof(float)) throw FormatError(path + ": trailing bytes after payload");
    c.payload.resize(n);
    if (n) std::memcpy(c.payload.data(), bytes.data() + r.position(), n * sizeof(float));
    return c;
}

inline void write_container(const std::filesystem::path& path, const Container& c) {
    const auto bytes = encode_container(c);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline Container read_container(const std::filesystem::path& path) {
    return decode_container(read_file_bytes(path), path.string());
}

// ---------------------------------------------------------------------------
// Datasets

inline Metadata dataset_metadata(const TrajectoryDataset& ds) {
    Metadata m;
    m.set("kind", "dataset");
    m.set("dt", ds.dt_physical);
    m.set("geometry", to_string(ds.geometry()));
    m.set("transform", ds.transform.kind == Transform::Kind::identity ? "identity" : "log_epsilon");
    if (ds.transform.kind == Transform::Kind::log_epsilon) m.set("transform.epsilon", ds.transform.epsilon);
    m.set("split", to_string(ds.split));
    if (ds.norm_stats) {
        m.set("stats.channels", static_cast<std::uint64_t>(ds.norm_stats->size()));
        for (std::size_t c = 0; c < ds.norm_stats->size(); ++c) {
            m.set("stats.mean." + std::to_string(c), (*ds.norm_stats)[c].mean);
            m.set("stats.std." + std::to_string(c), (*ds.norm_stats)[c].std);
        }
    }
    if (!ds.latitudes.empty()) {
        std::string s;
        for (std::size_t k = 0; k < ds.latitudes.size(); ++k) s += (k ? "," : "") + format_double(ds.latitudes[k]);
        m.set("latitudes", s);
    }
    if (!ds.months.empty()) {
        std::string s;
        for (std::size_t k = 0; k < ds.months.size(); ++k) s += (k ? "," : "") + std::to_string(ds.months[k]);
        m.set("months", s);
    }
    return m;
}

inline Container dataset_to_container(const TrajectoryDataset& ds) {
    ds.validate();
    Container c;
    c.dims = {ds.size(), ds.channels(), ds.height(), ds.width()};
    c.blocks.push_back(dataset_metadata(ds));
    c.payload.reserve(ds.size() * ds.channels() * ds.height() * ds.width());
    for (const auto& f : ds.frames) c.payload.insert(c.payload.end(), f.values().begin(), f.values().end());
    return c;
}

inline std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        auto comma = s.find(',', pos);
        if (comma == std::string::npos) comma = s.size();
        out.push_back(s.substr(pos, comma - pos));
        pos = comma + 1;
    }
    return out;
}

inline TrajectoryDataset dataset_from_container(const Container& c, const std::string& path = "<memory>") {
    if (c.dims.size() != 4) throw FormatError(path + ": dataset must have 4 dims (N, C, H, W)");
    if (c.blocks.empty()) throw FormatError(path + ": dataset metadata block missing");
    const auto& m = c.blocks.front();
    if (m.get_or("kind", "") != "dataset") throw FormatError(path + ": container is not a dataset");
    TrajectoryDataset ds;
    ds.dt_physical = m.get_double("dt");
    const auto geometry = geometry_from_string(m.get("geometry"));
    const auto& t = m.get("transform");
    if (t == "identity") {
        ds.transform = {};
    } else if (t == "log_epsilon") {
        ds.transform = {Transform::Kind::log_epsilon, m.get_double("transform.epsilon")};
    } else {
        throw FormatError(path + ": unknown transform '" + t + "'");
    }
    ds.split = split_from_string(m.get("split"));
    if (m.has("stats.channels")) {
        std::vector<ChannelStats> stats(static_cast<std::size_t>(m.get_int("stats.channels")));
        for (std::size_t k = 0; k < stats.size(); ++k)
            stats[k] = {m.get_double("stats.mean." + std::to_string(k)), m.get_double("stats.std." + std::to_string(k))};
        ds.norm_stats = std::move(stats);
    }
    if (m.has("latitudes"))
        for (const auto& s : split_commas(m.get("latitudes"))) ds.latitudes.push_back(parse_double(s));
    if (m.has("months"))
        for (const auto& s : split_commas(m.get("months"))) ds.months.push_back(static_cast<int>(parse_double(s)));
    const auto N = c.dims[0], C = c.dims[1], H = c.dims[2], W = c.dims[3];
    const std::size_t per = C * H * W;
    ds.frames.reserve(N);
    for (std::uint64_t n = 0; n < N; ++n) {
        std::vector<float> v(c.payload.begin() + static_cast<std::ptrdiff_t>(n * per),
                             c.payload.begin() + static_cast<std::ptrdiff_t>((n + 1) * per));
        ds.frames.emplace_back(C, H, W, std::move(v), geometry);
    }
    ds.validate();
    return ds;
}

inline void save_dataset(const std::filesystem::path& path, const TrajectoryDataset& ds) {
    write_container(path, dataset_to_container(ds));
}

inline TrajectoryDataset load_dataset(const std::filesystem::path& path) {
    return dataset_from_container(read_container(path), path.string());
}

}  // namespace dynaguide
