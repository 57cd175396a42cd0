#pragma once

/// Grid snapshots, trajectory datasets, normalization and area weighting.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dynaguide/errors.hpp"

namespace dynaguide {

enum class Geometry { periodic_both, periodic_width_only };

inline std::string to_string(Geometry g) {
    return g == Geometry::periodic_both ? "periodic_both" : "periodic_width_only";
}

inline Geometry geometry_from_string(const std::string& s) {
    if (s == "periodic_both") return Geometry::periodic_both;
    if (s == "periodic_width_only") return Geometry::periodic_width_only;
    throw ConfigError("unknown geometry '" + s + "'");
}

/// One C x H x W snapshot, row-major (C, H, W).
class Field {
public:
    Field() = default;

    Field(std::size_t channels, std::size_t height, std::size_t width,
          Geometry geometry = Geometry::periodic_both)
        : channels_(channels), height_(height), width_(width), geometry_(geometry),
          values_(channels * height * width, 0.0f) {}

    Field(std::size_t channels, std::size_t height, std::size_t width, std::vector<float> values,
          Geometry geometry = Geometry::periodic_both)
        : channels_(channels), height_(height), width_(width), geometry_(geometry),
          values_(std::move(values)) {
        if (values_.size() != channels_ * height_ * width_)
            throw ShapeError("field payload has " + std::to_string(values_.size()) + " values, expected " +
                             std::to_string(channels_ * height_ * width_));
        for (float v : values_)
            if (!std::isfinite(v)) throw DomainError("field contains non-finite values");
    }

    std::size_t channels() const noexcept { return channels_; }
    std::size_t height() const noexcept { return height_; }
    std::size_t width() const noexcept { return width_; }
    std::size_t size() const noexcept { return values_.size(); }
    Geometry geometry() const noexcept { return geometry_; }

    std::span<const float> values() const noexcept { return values_; }
    std::span<float> values() noexcept { return values_; }

    float& at(std::size_t c, std::size_t k, std::size_t l) { return values_[(c * height_ + k) * width_ + l]; }
    float at(std::size_t c, std::size_t k, std::size_t l) const { return values_[(c * height_ + k) * width_ + l]; }

    bool same_shape(const Field& o) const noexcept {
        return channels_ == o.channels_ && height_ == o.height_ && width_ == o.width_;
    }

    std::string shape_string() const {
        return std::to_string(channels_) + "x" + std::to_string(height_) + "x" + std::to_string(width_);
    }

    bool all_finite() const noexcept {
        return std::all_of(values_.begin(), values_.end(), [](float v) { return std::isfinite(v); });
    }

    friend bool operator==(const Field&, const Field&) = default;

private:
    std::size_t channels_ = 0;
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    Geometry geometry_ = Geometry::periodic_both;
    std::vector<float> values_;
};

struct ChannelStats {
    double mean = 0.0;
    double std = 1.0;
    friend bool operator==(const ChannelStats&, const ChannelStats&) = default;
};

struct Transform {
    enum class Kind { identity, log_epsilon };
    Kind kind = Kind::identity;
    double epsilon = 0.0;
    friend bool operator==(const Transform&, const Transform&) = default;
};

enum class Split { train, val, test };

inline std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "train";
}

inline Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw ConfigError("unknown split '" + s + "'");
}

/// Temporally ordered frames; frame n sits at physical time n * dt_physical.
struct TrajectoryDataset {
    std::vector<Field> frames;
    double dt_physical = 1.0;
    std::optional<std::vector<ChannelStats>> norm_stats;
    Transform transform;
    Split split = Split::train;
    /// Latitude (degrees) of each row, present for spherical data only.
    std::vector<double> latitudes;
    /// Calendar month (1..12) per frame, present for seasonal data only.
    std::vector<int> months;

    std::size_t size() const noexcept { return frames.size(); }
    bool empty() const noexcept { return frames.empty(); }
    const Field& operator[](std::size_t n) const { return frames[n]; }

    std::size_t channels() const { return frames.empty() ? 0 : frames.front().channels(); }
    std::size_t height() const { return frames.empty() ? 0 : frames.front().height(); }
    std::size_t width() const { return frames.empty() ? 0 : frames.front().width(); }
    Geometry geometry() const { return frames.empty() ? Geometry::periodic_both : frames.front().geometry(); }

    /// Throws if frames disagree in shape or geometry.
    void validate() const {
        for (const auto& f : frames) {
            if (!f.same_shape(frames.front()))
                throw ShapeError("dataset frames disagree in shape: " + frames.front().shape_string() + " vs " +
                                 f.shape_string());
            if (f.geometry() != frames.front().geometry())
                throw ShapeError("dataset frames disagree in geometry");
        }
        if (norm_stats) {
            if (norm_stats->size() != channels()) throw ShapeError("norm_stats channel count mismatch");
            for (const auto& s : *norm_stats)
                if (!(s.std > 0.0)) throw DomainError("norm_stats std must be positive");
        }
        if (!latitudes.empty() && latitudes.size() != height())
            throw ShapeError("latitude count does not match grid height");
        if (!months.empty() && months.size() != frames.size())
            throw ShapeError("month labels do not match frame count");
    }

    /// Copy of the metadata with an empty frame list.
    TrajectoryDataset empty_like() const {
        TrajectoryDataset d;
        d.dt_physical = dt_physical;
        d.norm_stats = norm_stats;
        d.transform = transform;
        d.split = split;
        d.latitudes = latitudes;
        return d;
    }
};

/// Per-channel population mean and standard deviation over all frames.
inline std::vector<ChannelStats> channel_statistics(const TrajectoryDataset& ds) {
    if (ds.empty()) throw DomainError("cannot compute statistics of an empty dataset");
    const std::size_t C = ds.channels(), HW = ds.height() * ds.width();
    std::vector<ChannelStats> stats(C);
    for (std::size_t c = 0; c < C; ++c) {
        double sum = 0.0;
        for (const auto& f : ds.frames)
            for (std::size_t i = 0; i < HW; ++i) sum += f.values()[c * HW + i];
        const double count = static_cast<double>(HW * ds.size());
        const double mean = sum / count;
        double ss = 0.0;
        for (const auto& f : ds.frames)
            for (std::size_t i = 0; i < HW; ++i) {
                const double d = f.values()[c * HW + i] - mean;
                ss += d * d;
            }
        const double sd = std::sqrt(ss / count);
        if (!(sd > 0.0) || sd < 1e-12 * std::max(1.0, std::abs(mean)))
            throw DomainError("degenerate channel " + std::to_string(c));
        stats[c] = {mean, sd};
    }
    return stats;
}

/// Apply (x - mean) / std per channel using the given statistics.
inline TrajectoryDataset standardize(const TrajectoryDataset& ds, const std::vector<ChannelStats>& stats) {
    if (ds.norm_stats) throw DomainError("dataset is already normalized");
    if (stats.size() != ds.channels()) throw ShapeError("statistics channel count mismatch");
    TrajectoryDataset out = ds;
    const std::size_t HW = ds.height() * ds.width();
    for (auto& f : out.frames) {
        auto v = f.values();
        for (std::size_t c = 0; c < stats.size(); ++c)
            for (std::size_t i = 0; i < HW; ++i)
                v[c * HW + i] = static_cast<float>((v[c * HW + i] - stats[c].mean) / stats[c].std);
    }
    out.norm_stats = stats;
    return out;
}

/// Standardize a training split with its own statistics.
inline TrajectoryDataset standardize(const TrajectoryDataset& ds) {
    if (ds.split != Split::train)
        throw DomainError("statistics must come from the train split; pass train statistics explicitly");
    if (ds.norm_stats) throw DomainError("dataset is already normalized");
    return standardize(ds, channel_statistics(ds));
}

/// Map a model-space field back to physical units.
inline Field destandardize(const Field& f, const std::vector<ChannelStats>& stats) {
    Field out = f;
    const std::size_t HW = f.height() * f.width();
    auto v = out.values();
    for (std::size_t c = 0; c < f.channels(); ++c)
        for (std::size_t i = 0; i < HW; ++i)
            v[c * HW + i] = static_cast<float>(v[c * HW + i] * stats[c].std + stats[c].mean);
    return out;
}

/// x~ = log(x + eps) - log(eps), elementwise.
inline Field log_transform(const Field& x, double eps) {
    if (!(eps > 0.0)) throw DomainError("log_transform epsilon must be positive");
    Field out = x;
    const double log_eps = std::log(eps);
    for (float& v : out.values()) {
        if (v < 0.0f) throw DomainError("log_transform requires nonnegative values");
        v = static_cast<float>(std::log(static_cast<double>(v) + eps) - log_eps);
    }
    return out;
}

/// Inverse of log_transform: x = exp(x~ + log eps) - eps.
inline Field inverse_log_transform(const Field& xt, double eps) {
    if (!(eps > 0.0)) throw DomainError("log_transform epsilon must be positive");
    Field out = xt;
    const double log_eps = std::log(eps);
    for (float& v : out.values()) v = static_cast<float>(std::exp(static_cast<double>(v) + log_eps) - eps);
    return out;
}

/// Apply the log transform to every frame and record it in the dataset.
inline TrajectoryDataset log_transform(const TrajectoryDataset& ds, double eps) {
    if (ds.transform.kind != Transform::Kind::identity) throw DomainError("dataset already transformed");
    TrajectoryDataset out = ds;
    for (auto& f : out.frames) f = log_transform(f, eps);
    out.transform = {Transform::Kind::log_epsilon, eps};
    return out;
}

/// Linear-interpolated percentile (0..100) of a sample; the input is copied.
inline double percentile(std::vector<double> v, double pct) {
    if (v.empty()) throw DomainError("percentile of empty sample");
    if (pct < 0.0 || pct > 100.0) throw DomainError("percentile out of [0, 100]");
    std::sort(v.begin(), v.end());
    const double pos = pct / 100.0 * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return v[lo] + frac * (v[hi] - v[lo]);
}

/// Scale per channel by the given percentile of training values (mean 0,
/// std = percentile in the stored statistics). No clamping.
inline std::vector<ChannelStats> percentile_scale(const TrajectoryDataset& train, double pct = 99.9) {
    if (train.split != Split::train) throw DomainError("percentile scale must come from the train split");
    const std::size_t C = train.channels(), HW = train.height() * train.width();
    std::vector<ChannelStats> stats(C);
    for (std::size_t c = 0; c < C; ++c) {
        std::vector<double> vals;
        vals.reserve(HW * train.size());
        for (const auto& f : train.frames)
            for (std::size_t i = 0; i < HW; ++i) vals.push_back(std::abs(f.values()[c * HW + i]));
        const double s = percentile(std::move(vals), pct);
        if (!(s > 0.0)) throw DomainError("degenerate channel " + std::to_string(c));
        stats[c] = {0.0, s};
    }
    return stats;
}

/// Contiguous train/val/test split by frame counts.
struct SplitDatasets {
    TrajectoryDataset train, val, test;
};

inline SplitDatasets split_dataset(const TrajectoryDataset& ds, std::size_t n_train, std::size_t n_val) {
    if (n_train + n_val > ds.size()) throw ConfigError("split sizes exceed dataset length");
    SplitDatasets s{ds.empty_like(), ds.empty_like(), ds.empty_like()};
    s.train.split = Split::train;
    s.val.split = Split::val;
    s.test.split = Split::test;
    for (std::size_t n = 0; n < ds.size(); ++n) {
        auto& dst = n < n_train ? s.train : (n < n_train + n_val ? s.val : s.test);
        dst.frames.push_back(ds.frames[n]);
        if (!ds.months.empty()) dst.months.push_back(ds.months[n]);
    }
    return s;
}

/// Row weights w(k); mean over rows is one.
struct AreaWeights {
    std::vector<double> w;

    std::size_t size() const noexcept { return w.size(); }
    double operator[](std::size_t k) const { return w[k]; }

    static AreaWeights uniform(std::size_t height) { return {std::vector<double>(height, 1.0)}; }
};

/// w(k) = cos(lat(k)) / mean_i cos(lat(i)), latitudes in degrees.
inline AreaWeights latitude_weights(std::span<const double> lat_degrees) {
    if (lat_degrees.empty()) throw DomainError("latitude_weights needs at least one row");
    std::vector<double> c(lat_degrees.size());
    double sum = 0.0;
    for (std::size_t k = 0; k < c.size(); ++k) {
        if (!(std::abs(lat_degrees[k]) < 90.0))
            throw DomainError("latitude " + std::to_string(lat_degrees[k]) + " outside (-90, 90)");
        c[k] = std::cos(lat_degrees[k] * std::numbers::pi / 180.0);
        sum += c[k];
    }
    const double mean = sum / static_cast<double>(c.size());
    for (auto& v : c) v /= mean;
    return {std::move(c)};
}

/// Weights appropriate for a dataset: cosine-latitude if latitudes are
/// present, otherwise uniform.
inline AreaWeights area_weights(const TrajectoryDataset& ds) {
    if (!ds.latitudes.empty()) return latitude_weights(ds.latitudes);
    return AreaWeights::uniform(ds.height());
}

}  // namespace dynaguide
