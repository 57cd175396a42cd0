#pragma once

/// Pseudo-spectral solver for forced 2D incompressible Navier-Stokes in
/// vorticity-streamfunction form on a doubly periodic [0, 2pi)^2 domain:
///
///     d zeta/dt + u . grad zeta = -nu (-lap)^p zeta - mu zeta + F
///     zeta = lap psi,  u = -d psi/dy,  v = d psi/dx
///
/// Wavenumbers are integers; the forcing wavenumber k_f and bandwidth
/// delta_f are therefore given in units of 2pi / (domain length).
/// Spectral arrays use the FFTW r2c layout: L rows (ky, wrapped) by L/2+1
/// columns (kx >= 0), matching a real field stored row-major as [y][x].

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dynaguide/errors.hpp"
#include "dynaguide/field.hpp"
#include "dynaguide/rng.hpp"

namespace dynaguide {

using cplx = std::complex<double>;

struct SimConfig {
    std::size_t L = 64;              ///< grid points per side
    double dt = 0.005;               ///< time step
    double nu = 2e-7;                ///< hyperviscosity coefficient
    int hyper_order = 2;             ///< p in nu (-lap)^p
    double mu = 0.1;                 ///< linear drag
    double k_f = 6.0;                ///< forcing wavenumber
    double delta_f = 1.5;            ///< forcing bandwidth
    double eps_inject = 0.1;         ///< target energy injection rate
    std::size_t subsample = 4;       ///< save every s-th step
    std::size_t spinup_steps = 500;  ///< discarded steps
    std::size_t frames = 5000;       ///< saved frames
    std::uint64_t seed = 0;

    void validate() const {
        if (L < 8 || (L & (L - 1)) != 0) throw ConfigError("sim.L must be a power of two >= 8");
        if (!(dt > 0.0)) throw ConfigError("sim.dt must be positive");
        if (!(nu >= 0.0)) throw ConfigError("sim.nu must be nonnegative");
        if (!(mu >= 0.0)) throw ConfigError("sim.mu must be nonnegative");
        if (hyper_order < 1) throw ConfigError("sim.hyper_order must be >= 1");
        if (!(k_f > 0.0) || !(k_f < static_cast<double>(L) / 2.0))
            throw ConfigError("sim.k_f must lie in (0, L/2)");
        if (!(delta_f >= 0.0)) throw ConfigError("sim.delta_f must be nonnegative");
        if (!(eps_inject >= 0.0)) throw ConfigError("sim.eps_inject must be nonnegative");
        if (subsample == 0) throw ConfigError("sim.subsample must be >= 1");
    }
};

struct SpectralState {
    std::size_t L = 0;
    std::vector<cplx> zeta_hat;     ///< L x (L/2+1)
    std::vector<cplx> forcing_hat;  ///< same layout
    double t_model = 0.0;
    std::uint64_t step = 0;

    static SpectralState zeros(std::size_t L) {
        SpectralState s;
        s.L = L;
        s.zeta_hat.assign(L * (L / 2 + 1), cplx{});
        s.forcing_hat.assign(L * (L / 2 + 1), cplx{});
        return s;
    }
};

namespace detail {

struct FftwPlanDeleter {
    void operator()(fftw_plan_s* p) const { fftw_destroy_plan(p); }
};
using FftwPlan = std::unique_ptr<fftw_plan_s, FftwPlanDeleter>;

template <class T>
struct FftwFree {
    void operator()(T* p) const { fftw_free(p); }
};
template <class T>
using FftwBuffer = std::unique_ptr<T[], FftwFree<T>>;

template <class T>
FftwBuffer<T> fftw_buffer(std::size_t n) {
    return FftwBuffer<T>(static_cast<T*>(fftw_malloc(sizeof(T) * n)));
}

}  // namespace detail

/// Holds FFTW plans, wavenumber tables and the dealiasing mask for one
/// grid size. Plan creation is not thread-safe; build solvers up front.
class SpectralSolver {
public:
    explicit SpectralSolver(const SimConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        L_ = cfg_.L;
        nk_ = L_ / 2 + 1;
        const std::size_t nspec = L_ * nk_;
        kx_.resize(nspec);
        ky_.resize(nspec);
        k2_.resize(nspec);
        mask_.resize(nspec);
        forcing_support_.assign(nspec, 0);
        const double kmax = static_cast<double>(L_) / 3.0;
        for (std::size_t iy = 0; iy < L_; ++iy) {
            const double ky = iy < L_ / 2 ? static_cast<double>(iy) : static_cast<double>(iy) - static_cast<double>(L_);
            for (std::size_t jx = 0; jx < nk_; ++jx) {
                const auto i = iy * nk_ + jx;
                kx_[i] = static_cast<double>(jx);
                ky_[i] = ky;
                k2_[i] = kx_[i] * kx_[i] + ky * ky;
                mask_[i] = (std::abs(kx_[i]) < kmax && std::abs(ky) < kmax) ? 1.0 : 0.0;
                const double k = std::sqrt(k2_[i]);
                if (i != 0 && mask_[i] > 0.0 && std::abs(k - cfg_.k_f) <= cfg_.delta_f) forcing_support_[i] = 1;
            }
        }
        mask_[0] = 0.0;

        real_buf_ = detail::fftw_buffer<double>(L_ * L_);
        spec_buf_ = detail::fftw_buffer<fftw_complex>(nspec);
        const int n = static_cast<int>(L_);
        forward_.reset(fftw_plan_dft_r2c_2d(n, n, real_buf_.get(), spec_buf_.get(), FFTW_ESTIMATE));
        backward_.reset(fftw_plan_dft_c2r_2d(n, n, spec_buf_.get(), real_buf_.get(), FFTW_ESTIMATE));
        if (!forward_ || !backward_) throw Error("FFTW plan creation failed");

        // Normalization for the white-in-time forcing: expected injection
        // (1 / 2L^4) sum_full Q_k / k^2 must equal eps_inject.
        double s = 0.0;
        for (std::size_t i = 0; i < nspec; ++i)
            if (forcing_support_[i]) s += column_weight(i) / k2_[i];
        forcing_shape_sum_ = s;
    }

    const SimConfig& config() const noexcept { return cfg_; }
    std::size_t L() const noexcept { return L_; }
    std::size_t spectral_size() const noexcept { return L_ * nk_; }
    std::span<const double> kx() const noexcept { return kx_; }
    std::span<const double> ky() const noexcept { return ky_; }
    std::span<const double> k2() const noexcept { return k2_; }
    std::span<const double> dealias_mask() const noexcept { return mask_; }

    std::size_t forcing_mode_count() const {
        std::size_t c = 0;
        for (auto f : forcing_support_) c += f;
        return c;
    }

    /// 2 for interior half-spectrum columns, 1 for kx = 0 and kx = L/2.
    double column_weight(std::size_t i) const {
        const auto jx = i % nk_;
        return (jx == 0 || jx == nk_ - 1) ? 1.0 : 2.0;
    }

    /// Linear damping rate nu k^{2p} + mu of mode i.
    double damping(std::size_t i) const {
        return cfg_.nu * std::pow(k2_[i], cfg_.hyper_order) + cfg_.mu;
    }

    /// Time tendency of zeta_hat with the given (fixed) forcing.
    std::vector<cplx> rhs(std::span<const cplx> zeta_hat, std::span<const cplx> forcing_hat) const {
        const std::size_t nspec = spectral_size();
        std::vector<cplx> out(nspec);
        std::vector<double> u(L_ * L_), v(L_ * L_), zx(L_ * L_), zy(L_ * L_);
        std::vector<cplx> tmp(nspec);
        const cplx I(0.0, 1.0);

        auto to_real = [&](auto&& spectral, std::vector<double>& dst) {
            for (std::size_t i = 0; i < nspec; ++i) tmp[i] = spectral(i);
            inverse(tmp, dst);
        };
        // psi_hat = -zeta_hat / k^2
        to_real([&](std::size_t i) { return i == 0 ? cplx{} : mask_[i] * (I * ky_[i]) * zeta_hat[i] / k2_[i]; }, u);
        to_real([&](std::size_t i) { return i == 0 ? cplx{} : -mask_[i] * (I * kx_[i]) * zeta_hat[i] / k2_[i]; }, v);
        to_real([&](std::size_t i) { return mask_[i] * (I * kx_[i]) * zeta_hat[i]; }, zx);
        to_real([&](std::size_t i) { return mask_[i] * (I * ky_[i]) * zeta_hat[i]; }, zy);
        for (std::size_t p = 0; p < L_ * L_; ++p) u[p] = u[p] * zx[p] + v[p] * zy[p];
        forward(u, tmp);
        for (std::size_t i = 0; i < nspec; ++i) {
            if (i == 0) {
                out[i] = cplx{};
                continue;
            }
            out[i] = mask_[i] * (-tmp[i] - damping(i) * zeta_hat[i] + forcing_hat[i]);
        }
        return out;
    }

    std::vector<cplx> rhs(const SpectralState& s) const { return rhs(s.zeta_hat, s.forcing_hat); }

    /// Classical RK4 with forcing frozen over the step.
    SpectralState rk4_step(const SpectralState& s) const {
        const std::size_t nspec = spectral_size();
        const double dt = cfg_.dt;
        std::vector<cplx> stage(nspec);
        const auto k1 = rhs(s.zeta_hat, s.forcing_hat);
        for (std::size_t i = 0; i < nspec; ++i) stage[i] = s.zeta_hat[i] + 0.5 * dt * k1[i];
        const auto k2 = rhs(stage, s.forcing_hat);
        for (std::size_t i = 0; i < nspec; ++i) stage[i] = s.zeta_hat[i] + 0.5 * dt * k2[i];
        const auto k3 = rhs(stage, s.forcing_hat);
        for (std::size_t i = 0; i < nspec; ++i) stage[i] = s.zeta_hat[i] + dt * k3[i];
        const auto k4 = rhs(stage, s.forcing_hat);
        SpectralState out = s;
        for (std::size_t i = 0; i < nspec; ++i) {
            out.zeta_hat[i] = s.zeta_hat[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            if (!std::isfinite(out.zeta_hat[i].real()) || !std::isfinite(out.zeta_hat[i].imag()))
                throw NumericalError("simulation blow-up at step " + std::to_string(s.step + 1));
        }
        out.zeta_hat[0] = cplx{};
        out.t_model = s.t_model + dt;
        out.step = s.step + 1;
        return out;
    }

    /// Redraw the white-in-time forcing on the annulus |k - k_f| <= delta_f.
    void refresh_forcing(SpectralState& s, Rng& rng) const {
        if (forcing_support_empty()) throw ConfigError("forcing annulus is empty for the given k_f, delta_f and L");
        const double amplitude = std::sqrt(forcing_variance() / cfg_.dt);
        const double half = std::sqrt(0.5);
        std::fill(s.forcing_hat.begin(), s.forcing_hat.end(), cplx{});
        for (std::size_t iy = 0; iy < L_; ++iy) {
            for (std::size_t jx = 0; jx < nk_; ++jx) {
                const auto i = iy * nk_ + jx;
                if (!forcing_support_[i]) continue;
                if (jx == 0 && ky_[i] < 0.0) continue;  // filled from its conjugate partner
                const double re = rng.normal() * half, im = rng.normal() * half;
                s.forcing_hat[i] = amplitude * cplx(re, im);
                if (jx == 0) {
                    const auto mirror = ((L_ - iy) % L_) * nk_;
                    s.forcing_hat[mirror] = std::conj(s.forcing_hat[i]);
                }
            }
        }
    }

    /// Q in <F_k F_k^*> = Q delta(t - t') for supported modes.
    double forcing_variance() const { return cfg_.eps_inject * 2.0 * std::pow(static_cast<double>(L_), 4) / forcing_shape_sum_; }

    bool forcing_support_empty() const { return forcing_shape_sum_ == 0.0; }

    /// Kinetic energy 1/2 <|u|^2>.
    double energy(std::span<const cplx> zeta_hat) const {
        double e = 0.0;
        for (std::size_t i = 1; i < zeta_hat.size(); ++i) e += column_weight(i) * std::norm(zeta_hat[i]) / k2_[i];
        return 0.5 * e / std::pow(static_cast<double>(L_), 4);
    }

    /// Enstrophy 1/2 <zeta^2>.
    double enstrophy(std::span<const cplx> zeta_hat) const {
        double z = 0.0;
        for (std::size_t i = 1; i < zeta_hat.size(); ++i) z += column_weight(i) * std::norm(zeta_hat[i]);
        return 0.5 * z / std::pow(static_cast<double>(L_), 4);
    }

    /// Energy injected per unit time by `forcing` over a step from `before`
    /// to `after`, evaluated at the midpoint state.
    double injection_rate(std::span<const cplx> before, std::span<const cplx> after,
                          std::span<const cplx> forcing) const {
        double r = 0.0;
        for (std::size_t i = 1; i < forcing.size(); ++i) {
            const cplx mid = 0.5 * (before[i] + after[i]);
            r += column_weight(i) * (std::conj(mid) * forcing[i]).real() / k2_[i];
        }
        return r / std::pow(static_cast<double>(L_), 4);
    }

    /// Real-space field, normalized so that forward(real) == zeta_hat.
    std::vector<double> to_physical(std::span<const cplx> zeta_hat) const {
        std::vector<cplx> tmp(zeta_hat.begin(), zeta_hat.end());
        std::vector<double> out(L_ * L_);
        inverse(tmp, out);
        return out;
    }

    std::vector<cplx> to_spectral(std::span<const double> real) const {
        std::vector<double> tmp(real.begin(), real.end());
        std::vector<cplx> out(spectral_size());
        forward(tmp, out);
        return out;
    }

    /// Max |imag| of the full complex inverse transform of the
    /// Hermitian-extended spectrum (zero for a realizable field).
    double imaginary_residue(std::span<const cplx> zeta_hat) const {
        const std::size_t n = L_ * L_;
        auto in = detail::fftw_buffer<fftw_complex>(n);
        auto out = detail::fftw_buffer<fftw_complex>(n);
        detail::FftwPlan plan(fftw_plan_dft_2d(static_cast<int>(L_), static_cast<int>(L_), in.get(), out.get(),
                                               FFTW_BACKWARD, FFTW_ESTIMATE));
        for (std::size_t iy = 0; iy < L_; ++iy)
            for (std::size_t jx = 0; jx < L_; ++jx) {
                cplx v;
                if (jx < nk_) {
                    v = zeta_hat[iy * nk_ + jx];
                } else {
                    v = std::conj(zeta_hat[((L_ - iy) % L_) * nk_ + (L_ - jx)]);
                }
                in[iy * L_ + jx][0] = v.real();
                in[iy * L_ + jx][1] = v.imag();
            }
        fftw_execute(plan.get());
        double worst = 0.0;
        for (std::size_t p = 0; p < n; ++p) worst = std::max(worst, std::abs(out[p][1]) / static_cast<double>(n));
        return worst;
    }

private:
    void forward(const std::vector<double>& real, std::vector<cplx>& spec) const {
        std::copy(real.begin(), real.end(), real_buf_.get());
        fftw_execute_dft_r2c(forward_.get(), real_buf_.get(), spec_buf_.get());
        for (std::size_t i = 0; i < spectral_size(); ++i) spec[i] = cplx(spec_buf_[i][0], spec_buf_[i][1]);
    }

    /// Normalized inverse (divides by L^2); `spec` is left unchanged.
    void inverse(const std::vector<cplx>& spec, std::vector<double>& real) const {
        for (std::size_t i = 0; i < spectral_size(); ++i) {
            spec_buf_[i][0] = spec[i].real();
            spec_buf_[i][1] = spec[i].imag();
        }
        fftw_execute_dft_c2r(backward_.get(), spec_buf_.get(), real_buf_.get());
        const double norm = 1.0 / static_cast<double>(L_ * L_);
        for (std::size_t p = 0; p < L_ * L_; ++p) real[p] = real_buf_[p] * norm;
    }

    SimConfig cfg_;
    std::size_t L_ = 0, nk_ = 0;
    std::vector<double> kx_, ky_, k2_, mask_;
    std::vector<unsigned char> forcing_support_;
    double forcing_shape_sum_ = 0.0;
    detail::FftwBuffer<double> real_buf_;
    detail::FftwBuffer<fftw_complex> spec_buf_;
    detail::FftwPlan forward_, backward_;
};

/// Per-frame diagnostics recorded by `simulate`.
struct SimDiagnostics {
    std::vector<double> energy;          ///< kinetic energy per saved frame
    double mean_injection_rate = 0.0;    ///< averaged over all integrated steps
    std::size_t steps = 0;
};

/// Integrate from rest, discard `spinup_steps`, then save every
/// `subsample`-th step as a real-space vorticity frame.
inline TrajectoryDataset simulate(const SimConfig& cfg, SimDiagnostics* diag = nullptr) {
    SpectralSolver solver(cfg);
    Rng rng(derive_seed(cfg.seed, {0x5157ULL}));
    auto state = SpectralState::zeros(cfg.L);
    TrajectoryDataset ds;
    ds.dt_physical = cfg.dt * static_cast<double>(cfg.subsample);
    ds.split = Split::train;
    ds.frames.reserve(cfg.frames);
    double injected = 0.0;
    const std::size_t total = cfg.spinup_steps + cfg.frames * cfg.subsample;
    for (std::size_t n = 0; n < total; ++n) {
        solver.refresh_forcing(state, rng);
        auto next = solver.rk4_step(state);
        if (diag) injected += solver.injection_rate(state.zeta_hat, next.zeta_hat, state.forcing_hat);
        state = std::move(next);
        if (n + 1 > cfg.spinup_steps && (n + 1 - cfg.spinup_steps) % cfg.subsample == 0) {
            const auto real = solver.to_physical(state.zeta_hat);
            std::vector<float> v(real.begin(), real.end());
            ds.frames.emplace_back(1, cfg.L, cfg.L, std::move(v), Geometry::periodic_both);
            if (diag) diag->energy.push_back(solver.energy(state.zeta_hat));
        }
    }
    if (diag) {
        diag->steps = total;
        diag->mean_injection_rate = total ? injected / static_cast<double>(total) : 0.0;
    }
    return ds;
}

}  // namespace dynaguide
