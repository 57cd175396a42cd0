#pragma once

/// Verification metrics for generated trajectories and ensemble forecasts.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "dynaguide/ensemble.hpp"
#include "dynaguide/field.hpp"

namespace dynaguide {

namespace detail {

inline void require_aligned(const std::vector<Field>& x, const std::vector<Field>& y) {
    if (x.size() != y.size())
        throw ShapeError("trajectories differ in length: " + std::to_string(x.size()) + " vs " + std::to_string(y.size()));
    if (x.empty()) throw ShapeError("empty trajectory");
    for (std::size_t n = 0; n < x.size(); ++n)
        if (!x[n].same_shape(y[n]) || !x[n].same_shape(x.front()))
            throw ShapeError("grid shapes differ: " + x[n].shape_string() + " vs " + y[n].shape_string());
}

inline void require_weights(const Field& f, const AreaWeights& w) {
    if (w.size() != f.height())
        throw ShapeError("area weights have " + std::to_string(w.size()) + " rows, grid has " +
                         std::to_string(f.height()));
}

}  // namespace detail

/// sqrt( (1/L) Σ_l (1/K) Σ_k w(k) Σ_n (y − x)² ), summed over channels.
inline double rmse(const std::vector<Field>& x, const std::vector<Field>& y, const AreaWeights& w) {
    detail::require_aligned(x, y);
    detail::require_weights(x.front(), w);
    const auto& f0 = x.front();
    const std::size_t K = f0.height(), L = f0.width();
    double acc = 0.0;
    for (std::size_t n = 0; n < x.size(); ++n)
        for (std::size_t c = 0; c < f0.channels(); ++c)
            for (std::size_t k = 0; k < K; ++k) {
                double row = 0.0;
                for (std::size_t l = 0; l < L; ++l) {
                    const double d = static_cast<double>(y[n].at(c, k, l)) - x[n].at(c, k, l);
                    row += d * d;
                }
                acc += w[k] * row;
            }
    return std::sqrt(acc / static_cast<double>(K * L));
}

struct BiasResult {
    /// Per-cell time mean of y − x (double precision, layout C×K×L).
    std::vector<double> map;
    std::size_t channels = 0, height = 0, width = 0;
    /// Area-weighted spatial mean of the map.
    double global_mean = 0.0;
    /// Area-weighted spatial mean of |map|.
    double mean_abs = 0.0;
};

inline BiasResult bias_map(const std::vector<Field>& x, const std::vector<Field>& y, const AreaWeights& w) {
    detail::require_aligned(x, y);
    detail::require_weights(x.front(), w);
    const auto& f0 = x.front();
    BiasResult r{std::vector<double>(f0.size(), 0.0), f0.channels(), f0.height(), f0.width(), 0.0, 0.0};
    for (std::size_t n = 0; n < x.size(); ++n) {
        const auto xv = x[n].values(), yv = y[n].values();
        for (std::size_t i = 0; i < r.map.size(); ++i) r.map[i] += static_cast<double>(yv[i]) - xv[i];
    }
    const double inv = 1.0 / static_cast<double>(x.size());
    for (auto& v : r.map) v *= inv;
    const std::size_t K = r.height, L = r.width;
    for (std::size_t c = 0; c < r.channels; ++c)
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t l = 0; l < L; ++l) {
                const double b = r.map[(c * K + k) * L + l];
                r.global_mean += w[k] * b;
                r.mean_abs += w[k] * std::abs(b);
            }
    const double norm = 1.0 / static_cast<double>(r.channels * K * L);
    r.global_mean *= norm;
    r.mean_abs *= norm;
    return r;
}

inline Field bias_field(const BiasResult& b, Geometry g) {
    std::vector<float> v(b.map.begin(), b.map.end());
    return Field(b.channels, b.height, b.width, std::move(v), g);
}

struct AcfResult {
    /// ACF(0..max_lag).
    std::vector<double> values;
    /// Cells dropped because their (deseasonalized) variance is zero.
    std::size_t excluded_cells = 0;
};

/// Area-weighted mean of per-cell autocorrelation functions. With
/// `months` non-empty and `deseasonalize` set, monthly means are removed first.
inline AcfResult acf(const std::vector<Field>& x, const AreaWeights& w, std::size_t max_lag, bool deseasonalize = false,
                     const std::vector<int>& months = {}) {
    if (x.size() <= max_lag) throw DomainError("series length must exceed max_lag");
    detail::require_weights(x.front(), w);
    if (deseasonalize && months.size() != x.size()) throw ShapeError("deseasonalization requires a month per frame");
    const auto& f0 = x.front();
    const std::size_t N = x.size(), K = f0.height(), L = f0.width();
    AcfResult r{std::vector<double>(max_lag + 1, 0.0), 0};
    double wsum = 0.0;
    std::vector<double> s(N);
    for (std::size_t c = 0; c < f0.channels(); ++c)
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t l = 0; l < L; ++l) {
                for (std::size_t n = 0; n < N; ++n) s[n] = x[n].at(c, k, l);
                if (deseasonalize) {
                    double msum[13] = {}, mcnt[13] = {};
                    for (std::size_t n = 0; n < N; ++n) {
                        msum[months[n]] += s[n];
                        mcnt[months[n]] += 1;
                    }
                    for (std::size_t n = 0; n < N; ++n) s[n] -= msum[months[n]] / mcnt[months[n]];
                }
                const double mean = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(N);
                double var = 0.0;
                for (auto& v : s) {
                    v -= mean;
                    var += v * v;
                }
                var /= static_cast<double>(N);
                if (!(var > 1e-12 * (1.0 + mean * mean))) {
                    ++r.excluded_cells;
                    continue;
                }
                for (std::size_t j = 0; j <= max_lag; ++j) {
                    double acc = 0.0;
                    for (std::size_t n = j; n < N; ++n) acc += s[n] * s[n - j];
                    r.values[j] += w[k] * acc / (static_cast<double>(N) * var);
                }
                wsum += w[k];
            }
    if (wsum == 0.0) throw DomainError("every cell has zero variance");
    for (auto& v : r.values) v /= wsum;
    return r;
}

enum class BandAxis { rows, columns };

/// `count` consecutive rows or columns starting at `start`, averaged over.
struct Band {
    BandAxis axis = BandAxis::columns;
    std::size_t start = 0;
    std::size_t count = 1;

    /// `count` columns centred in a grid of the given width.
    static Band center_columns(std::size_t width, std::size_t count) {
        count = std::min(count, width);
        return {BandAxis::columns, (width - count) / 2, count};
    }

    /// Rows whose latitude lies in [lo, hi] degrees.
    static Band latitude_rows(const std::vector<double>& latitudes, double lo, double hi) {
        std::size_t first = latitudes.size(), last = 0;
        for (std::size_t k = 0; k < latitudes.size(); ++k)
            if (latitudes[k] >= lo && latitudes[k] <= hi) {
                first = std::min(first, k);
                last = k;
            }
        if (first == latitudes.size()) throw DomainError("latitude band is empty");
        return {BandAxis::rows, first, last - first + 1};
    }
};

struct Hovmoeller {
    Band band;
    std::size_t times = 0, positions = 0;
    /// times × positions, row-major.
    std::vector<double> values;
    double at(std::size_t n, std::size_t p) const { return values[n * positions + p]; }
};

inline Hovmoeller hovmoeller(const std::vector<Field>& traj, const Band& band, std::size_t channel = 0) {
    if (traj.empty()) throw ShapeError("empty trajectory");
    if (band.count == 0) throw DomainError("empty band");
    const auto& f0 = traj.front();
    const std::size_t K = f0.height(), L = f0.width();
    const std::size_t extent = band.axis == BandAxis::columns ? L : K;
    if (band.start + band.count > extent) throw DomainError("band exceeds the grid");
    Hovmoeller h{band, traj.size(), band.axis == BandAxis::columns ? K : L, {}};
    h.values.assign(h.times * h.positions, 0.0);
    for (std::size_t n = 0; n < traj.size(); ++n) {
        if (!traj[n].same_shape(f0)) throw ShapeError("trajectory frames differ in shape");
        for (std::size_t p = 0; p < h.positions; ++p) {
            double acc = 0.0;
            for (std::size_t b = band.start; b < band.start + band.count; ++b)
                acc += band.axis == BandAxis::columns ? traj[n].at(channel, p, b) : traj[n].at(channel, b, p);
            h.values[n * h.positions + p] = acc / static_cast<double>(band.count);
        }
    }
    return h;
}

/// W1 between |p| and |q| normalized to unit mass: (1/K) Σ_i |F_p(i) − F_q(i)|.
inline double w1_rows(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size() || p.empty()) throw ShapeError("rows must be non-empty and of equal length");
    double sp = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        sp += std::abs(p[i]);
        sq += std::abs(q[i]);
    }
    if (!(sp > 0.0) || !(sq > 0.0)) throw DomainError("degenerate distribution");
    double fp = 0.0, fq = 0.0, acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        fp += std::abs(p[i]) / sp;
        fq += std::abs(q[i]) / sq;
        acc += std::abs(fp - fq);
    }
    return acc / static_cast<double>(p.size());
}

/// W1 between each pair of consecutive Hovmöller rows.
inline std::vector<double> w1_consecutive(const Hovmoeller& h) {
    if (h.times < 2) throw DomainError("need at least two time rows");
    std::vector<double> out(h.times - 1);
    for (std::size_t n = 0; n + 1 < h.times; ++n)
        out[n] = w1_rows({h.values.data() + n * h.positions, h.positions},
                         {h.values.data() + (n + 1) * h.positions, h.positions});
    return out;
}

namespace detail {

/// Σ_b Σ_b' |x_b − x_b'| via sorting.
inline double pairwise_abs_sum(std::vector<double>& v) {
    std::sort(v.begin(), v.end());
    const auto B = static_cast<double>(v.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) acc += (2.0 * static_cast<double>(i) - B + 1.0) * v[i];
    return 2.0 * acc;
}

}  // namespace detail

/// Ensemble CRPS at lead j for forecast n.
inline double crps_single(const EnsembleForecast& e, std::size_t n, std::size_t j) {
    const auto& y = e.truth_at(n, j);
    const std::size_t B = e.members, K = y.height(), L = y.width(), C = y.channels();
    const double Bd = static_cast<double>(B);
    std::vector<double> v(B);
    double acc = 0.0;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t k = 0; k < K; ++k) {
            double row = 0.0;
            for (std::size_t l = 0; l < L; ++l) {
                double skill = 0.0;
                for (std::size_t b = 0; b < B; ++b) {
                    v[b] = e.value(n, b, j).at(c, k, l);
                    skill += std::abs(v[b] - y.at(c, k, l));
                }
                row += skill / Bd - detail::pairwise_abs_sum(v) / (2.0 * Bd * Bd);
            }
            acc += e.weights[k] * row;
        }
    return acc / static_cast<double>(C * K * L);
}

/// CRPS at lead j averaged over forecasts.
inline double crps(const EnsembleForecast& e, std::size_t j) {
    e.validate();
    if (j >= e.leads) throw DomainError("lead out of range");
    if (e.members < 1) throw DomainError("CRPS needs at least one member");
    double acc = 0.0;
    for (std::size_t n = 0; n < e.forecasts; ++n) acc += crps_single(e, n, j);
    return acc / static_cast<double>(e.forecasts);
}

struct SpreadSkill {
    double spread = 0.0;
    double skill = 0.0;
    double ratio = 0.0;
};

/// Spread, skill and corrected spread-skill ratio at lead j. Squared
/// spread and skill are averaged over forecasts before the square root.
inline SpreadSkill spread_skill_ratio(const EnsembleForecast& e, std::size_t j) {
    e.validate();
    if (j >= e.leads) throw DomainError("lead out of range");
    if (e.members < 2) throw DomainError("spread needs at least two members");
    const std::size_t B = e.members;
    double spread2 = 0.0, skill2 = 0.0;
    for (std::size_t n = 0; n < e.forecasts; ++n) {
        const auto& y = e.truth_at(n, j);
        const std::size_t K = y.height(), L = y.width(), C = y.channels();
        double sp = 0.0, sk = 0.0;
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t k = 0; k < K; ++k) {
                double rsp = 0.0, rsk = 0.0;
                for (std::size_t l = 0; l < L; ++l) {
                    double mean = 0.0;
                    for (std::size_t b = 0; b < B; ++b) mean += e.value(n, b, j).at(c, k, l);
                    mean /= static_cast<double>(B);
                    double var = 0.0;
                    for (std::size_t b = 0; b < B; ++b) {
                        const double d = e.value(n, b, j).at(c, k, l) - mean;
                        var += d * d;
                    }
                    rsp += var / static_cast<double>(B - 1);
                    const double d = y.at(c, k, l) - mean;
                    rsk += d * d;
                }
                sp += e.weights[k] * rsp;
                sk += e.weights[k] * rsk;
            }
        spread2 += sp / static_cast<double>(C * K * L);
        skill2 += sk / static_cast<double>(C * K * L);
    }
    SpreadSkill r;
    r.spread = std::sqrt(spread2 / static_cast<double>(e.forecasts));
    r.skill = std::sqrt(skill2 / static_cast<double>(e.forecasts));
    if (!(r.skill > 0.0)) throw DomainError("degenerate forecast");
    const double M = static_cast<double>(B);
    r.ratio = std::sqrt((M + 1.0) / M) * r.spread / r.skill;
    return r;
}

struct WaitingTimes {
    /// Gaps (in frames) between consecutive exceedances, pooled over cells.
    std::vector<std::size_t> gaps;
    /// Log-spaced bin edges (powers of two) and counts per bin [edge_i, edge_{i+1}).
    std::vector<double> bin_edges;
    std::vector<std::size_t> counts;
    std::size_t cells_without_events = 0;
    std::size_t cells_with_single_event = 0;

    double mean_gap() const {
        if (gaps.empty()) return 0.0;
        return static_cast<double>(std::accumulate(gaps.begin(), gaps.end(), std::size_t{0})) /
               static_cast<double>(gaps.size());
    }
};

/// Per-cell `pct` percentile thresholds taken from `reference`.
inline std::vector<double> cell_thresholds(const std::vector<Field>& reference, double pct) {
    if (reference.empty()) throw ShapeError("empty reference");
    const auto& f0 = reference.front();
    std::vector<double> thr(f0.size());
    std::vector<double> s(reference.size());
    for (std::size_t i = 0; i < f0.size(); ++i) {
        for (std::size_t n = 0; n < reference.size(); ++n) {
            if (!reference[n].same_shape(f0)) throw ShapeError("reference frames differ in shape");
            s[n] = reference[n].values()[i];
        }
        thr[i] = percentile(s, pct);
    }
    return thr;
}

inline WaitingTimes waiting_times(const std::vector<Field>& traj, const std::vector<Field>& reference, double pct) {
    if (traj.empty()) throw ShapeError("empty trajectory");
    if (!traj.front().same_shape(reference.front()))
        throw ShapeError("trajectory " + traj.front().shape_string() + " vs reference " +
                         reference.front().shape_string());
    const auto thr = cell_thresholds(reference, pct);
    WaitingTimes r;
    for (std::size_t i = 0; i < thr.size(); ++i) {
        std::size_t events = 0, last = 0;
        for (std::size_t n = 0; n < traj.size(); ++n) {
            if (!(traj[n].values()[i] > thr[i])) continue;
            if (events) r.gaps.push_back(n - last);
            last = n;
            ++events;
        }
        if (events == 0) ++r.cells_without_events;
        if (events == 1) ++r.cells_with_single_event;
    }
    const std::size_t max_gap = r.gaps.empty() ? 1 : *std::max_element(r.gaps.begin(), r.gaps.end());
    for (double e = 1.0; ; e *= 2.0) {
        r.bin_edges.push_back(e);
        if (e > static_cast<double>(max_gap)) break;
    }
    r.counts.assign(r.bin_edges.size() - 1, 0);
    for (auto g : r.gaps) {
        const auto b = static_cast<std::size_t>(std::floor(std::log2(static_cast<double>(g))));
        ++r.counts[std::min(b, r.counts.size() - 1)];
    }
    return r;
}

struct EofResult {
    /// n_modes patterns, each of length C·K·L, unit norm in the weighted inner product.
    std::vector<std::vector<double>> modes;
    std::vector<double> explained_variance;
    /// Principal component time series per mode.
    std::vector<std::vector<double>> pcs;
};

/// Area-weighted EOFs of the anomalies about the time mean (method of snapshots).
inline EofResult eof(const std::vector<Field>& traj, const AreaWeights& w, std::size_t n_modes) {
    if (traj.size() < n_modes || n_modes == 0) throw DomainError("need at least n_modes frames");
    detail::require_weights(traj.front(), w);
    const auto& f0 = traj.front();
    const std::size_t T = traj.size(), P = f0.size(), K = f0.height(), L = f0.width();
    Eigen::MatrixXd A(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(P));
    for (std::size_t n = 0; n < T; ++n) {
        if (!traj[n].same_shape(f0)) throw ShapeError("trajectory frames differ in shape");
        for (std::size_t i = 0; i < P; ++i) A(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(i)) = traj[n].values()[i];
    }
    A.rowwise() -= A.colwise().mean();
    std::vector<double> sw(P);
    for (std::size_t i = 0; i < P; ++i) sw[i] = std::sqrt(w[(i / L) % K]);
    for (std::size_t i = 0; i < P; ++i) A.col(static_cast<Eigen::Index>(i)) *= sw[i];
    const Eigen::MatrixXd G = A * A.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G);
    const auto& ev = es.eigenvalues();
    const double total = ev.cwiseMax(0.0).sum();
    if (!(total > 0.0)) throw DomainError("trajectory has no variance");
    EofResult r;
    for (std::size_t m = 0; m < n_modes; ++m) {
        const auto idx = static_cast<Eigen::Index>(T - 1 - m);
        const double lam = ev(idx);
        if (!(lam > 1e-10 * total))
            throw DomainError("rank " + std::to_string(m) + " is below the requested " + std::to_string(n_modes) +
                              " modes");
        Eigen::VectorXd u = A.transpose() * es.eigenvectors().col(idx);
        u /= u.norm();
        std::vector<double> mode(P);
        for (std::size_t i = 0; i < P; ++i) mode[i] = u(static_cast<Eigen::Index>(i)) / sw[i];
        const auto big = std::max_element(mode.begin(), mode.end(),
                                          [](double a, double b) { return std::abs(a) < std::abs(b); });
        if (*big < 0) {
            u = -u;
            for (auto& v : mode) v = -v;
        }
        const Eigen::VectorXd pc = A * u;
        r.modes.push_back(std::move(mode));
        r.pcs.emplace_back(pc.data(), pc.data() + pc.size());
        r.explained_variance.push_back(lam / total);
    }
    return r;
}

/// Pearson correlation of two equally long vectors.
inline double pattern_correlation(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.empty()) throw ShapeError("patterns differ in length");
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(a.size());
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / static_cast<double>(b.size());
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

}  // namespace dynaguide
