#pragma once

/// Metric reports and content hashing for provenance.

#include <openssl/evp.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>
#include <string_view>
#include <vector>

#include "dynaguide/errors.hpp"
#include "dynaguide/stdg.hpp"

namespace dynaguide {

/// Lower-case hex SHA-1 of `bytes`.
inline std::string sha1_hex(std::string_view bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha1(), nullptr) != 1)
        throw Error("SHA-1 digest failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 0xF];
    }
    return out;
}

/// Git blob object id: SHA-1 of "blob <size>\0" followed by the content.
inline std::string git_blob_hash(std::string_view bytes) {
    std::string obj = "blob " + std::to_string(bytes.size());
    obj.push_back('\0');
    obj.append(bytes);
    return sha1_hex(obj);
}

inline std::string file_hash(const std::filesystem::path& path) { return git_blob_hash(read_file_bytes(path)); }

inline std::string container_hash(const Container& c) { return git_blob_hash(encode_container(c)); }

/// Append a provenance block (config hash plus named input hashes) to a container.
inline void add_provenance(Container& c, const std::string& config_hash,
                           const std::vector<std::pair<std::string, std::string>>& inputs) {
    Metadata m;
    m.set("kind", "provenance");
    m.set("config_hash", config_hash);
    for (const auto& [name, hash] : inputs) m.set("input." + name, hash);
    c.blocks.push_back(std::move(m));
}

/// Provenance block of a container, if present.
inline const Metadata* find_provenance(const Container& c) {
    for (const auto& b : c.blocks)
        if (b.get_or("kind", "") == "provenance") return &b;
    return nullptr;
}

/// Flat, ordered key → scalar / array / string document.
class MetricReport {
public:
    void set(const std::string& key, double v) { doc_[key] = finite_or_null(v); }
    void set(const std::string& key, std::int64_t v) { doc_[key] = v; }
    void set(const std::string& key, std::size_t v) { doc_[key] = static_cast<std::uint64_t>(v); }
    void set(const std::string& key, int v) { doc_[key] = v; }
    void set(const std::string& key, bool v) { doc_[key] = v; }
    void set(const std::string& key, const char* v) { doc_[key] = std::string(v); }
    void set(const std::string& key, const std::string& v) { doc_[key] = v; }
    void set(const std::string& key, const std::vector<double>& v) {
        auto arr = nlohmann::ordered_json::array();
        for (double x : v) arr.push_back(finite_or_null(x));
        doc_[key] = std::move(arr);
    }

    bool has(const std::string& key) const { return doc_.contains(key); }

    /// Scalar value; NaN for a stored non-finite value.
    double number(const std::string& key) const {
        const auto& v = at(key);
        if (v.is_null()) return std::numeric_limits<double>::quiet_NaN();
        if (!v.is_number()) throw FormatError("report entry '" + key + "' is not a number");
        return v.get<double>();
    }

    bool flag(const std::string& key) const {
        const auto& v = at(key);
        if (!v.is_boolean()) throw FormatError("report entry '" + key + "' is not a boolean");
        return v.get<bool>();
    }

    std::string text(const std::string& key) const {
        const auto& v = at(key);
        if (!v.is_string()) throw FormatError("report entry '" + key + "' is not a string");
        return v.get<std::string>();
    }

    std::vector<double> array(const std::string& key) const {
        const auto& v = at(key);
        if (!v.is_array()) throw FormatError("report entry '" + key + "' is not an array");
        std::vector<double> out;
        for (const auto& x : v) out.push_back(x.is_null() ? std::numeric_limits<double>::quiet_NaN() : x.get<double>());
        return out;
    }

    /// Merge another report under a key prefix.
    void merge(const MetricReport& other, const std::string& prefix = "") {
        for (const auto& [k, v] : other.doc_.items()) doc_[prefix + k] = v;
    }

    std::vector<std::string> keys() const {
        std::vector<std::string> out;
        for (const auto& [k, v] : doc_.items()) out.push_back(k);
        return out;
    }

    std::string serialize() const { return doc_.dump(2) + "\n"; }
    std::string hash() const { return git_blob_hash(serialize()); }

    static MetricReport parse(const std::string& text, const std::string& path = "<memory>") {
        MetricReport r;
        try {
            r.doc_ = nlohmann::ordered_json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path + ": malformed report (" + e.what() + ")");
        }
        if (!r.doc_.is_object()) throw FormatError(path + ": report must be a JSON object");
        return r;
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + path.string() + " for writing");
        out << serialize();
        if (!out) throw IoError("write failed for " + path.string());
    }

    static MetricReport load(const std::filesystem::path& path) {
        return parse(read_file_bytes(path), path.string());
    }

    friend bool operator==(const MetricReport& a, const MetricReport& b) { return a.doc_ == b.doc_; }

private:
    static nlohmann::ordered_json finite_or_null(double v) {
        if (std::isfinite(v)) return v;
        return nullptr;
    }

    const nlohmann::ordered_json& at(const std::string& key) const {
        const auto it = doc_.find(key);
        if (it == doc_.end()) throw FormatError("report has no entry '" + key + "'");
        return *it;
    }

    nlohmann::ordered_json doc_ = nlohmann::ordered_json::object();
};

}  // namespace dynaguide
