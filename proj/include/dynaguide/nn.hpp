#pragma once

/// Parameter storage and the convolutional building blocks shared by the
/// score networks and the discriminator.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "dynaguide/autodiff.hpp"
#include "dynaguide/field.hpp"
#include "dynaguide/rng.hpp"

namespace dynaguide::nn {

using ad::Tape;
using ad::Var;

/// Flat parameter vector with a named tensor layout.
template <class T>
class ParameterStore {
public:
    struct Entry {
        std::string name;
        std::size_t offset = 0;
        typename Tensor<T>::Shape shape{};
        std::size_t size() const { return shape[0] * shape[1] * shape[2] * shape[3]; }
    };

    std::size_t add(std::string name, typename Tensor<T>::Shape shape) {
        Entry e{std::move(name), values_.size(), shape};
        values_.resize(values_.size() + e.size(), T(0));
        entries_.push_back(std::move(e));
        return entries_.size() - 1;
    }

    std::span<T> slice(std::size_t i) { return {values_.data() + entries_[i].offset, entries_[i].size()}; }
    std::span<const T> slice(std::size_t i) const {
        return {values_.data() + entries_[i].offset, entries_[i].size()};
    }

    Tensor<T> tensor(std::size_t i) const {
        const auto s = slice(i);
        return Tensor<T>(entries_[i].shape, std::vector<T>(s.begin(), s.end()));
    }

    std::vector<T>& values() noexcept { return values_; }
    const std::vector<T>& values() const noexcept { return values_; }
    const std::vector<Entry>& entries() const noexcept { return entries_; }
    std::size_t size() const noexcept { return values_.size(); }

private:
    std::vector<T> values_;
    std::vector<Entry> entries_;
};

/// One forward pass: materializes parameters as tape leaves on demand and
/// gathers their gradients after `Tape::backward`.
template <class T>
class Forward {
public:
    Forward(Tape<T>& tape, const ParameterStore<T>& params, bool param_grads)
        : tape_(tape), params_(params), param_grads_(param_grads), leaves_(params.entries().size()) {}

    Tape<T>& tape() noexcept { return tape_; }

    Var param(std::size_t i) {
        if (!leaves_[i].valid())
            leaves_[i] = param_grads_ ? tape_.variable(params_.tensor(i)) : tape_.constant(params_.tensor(i));
        return leaves_[i];
    }

    /// Flat gradient in the parameter layout (zeros for unused entries).
    std::vector<T> param_gradients() const {
        std::vector<T> g(params_.size(), T(0));
        for (std::size_t i = 0; i < leaves_.size(); ++i) {
            if (!leaves_[i].valid()) continue;
            const auto gt = tape_.grad(leaves_[i]);
            std::copy(gt.data.begin(), gt.data.end(), g.begin() + static_cast<std::ptrdiff_t>(params_.entries()[i].offset));
        }
        return g;
    }

private:
    Tape<T>& tape_;
    const ParameterStore<T>& params_;
    bool param_grads_;
    std::vector<Var> leaves_;
};

template <class T>
void init_normal(std::span<T> s, Rng& rng, double stddev) {
    for (auto& v : s) v = static_cast<T>(stddev * rng.normal());
}

struct Conv {
    std::size_t weight = 0, bias = 0;

    template <class T>
    static Conv make(ParameterStore<T>& ps, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                     Rng& rng, double gain = 1.0) {
        Conv c;
        c.weight = ps.add(name + ".weight", {cout, cin, k, k});
        c.bias = ps.add(name + ".bias", {1, cout, 1, 1});
        init_normal(ps.slice(c.weight), rng, gain * std::sqrt(1.0 / static_cast<double>(cin * k * k)));
        return c;
    }

    template <class T>
    Var operator()(Forward<T>& f, Var x, ad::Padding pad) const {
        return ad::conv2d(f.tape(), x, f.param(weight), f.param(bias), pad);
    }
};

struct Linear {
    std::size_t weight = 0, bias = 0;

    template <class T>
    static Linear make(ParameterStore<T>& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                       double gain = 1.0) {
        Linear l;
        l.weight = ps.add(name + ".weight", {out, in, 1, 1});
        l.bias = ps.add(name + ".bias", {1, out, 1, 1});
        init_normal(ps.slice(l.weight), rng, gain * std::sqrt(1.0 / static_cast<double>(in)));
        return l;
    }

    template <class T>
    Var operator()(Forward<T>& f, Var x) const {
        return ad::linear(f.tape(), x, f.param(weight), f.param(bias));
    }
};

struct GroupNorm {
    std::size_t gamma = 0, beta = 0, groups = 1;

    template <class T>
    static GroupNorm make(ParameterStore<T>& ps, const std::string& name, std::size_t channels, std::size_t max_groups) {
        GroupNorm g;
        g.groups = std::min(max_groups, channels);
        while (channels % g.groups) --g.groups;
        g.gamma = ps.add(name + ".gamma", {1, channels, 1, 1});
        g.beta = ps.add(name + ".beta", {1, channels, 1, 1});
        for (auto& v : ps.slice(g.gamma)) v = T(1);
        return g;
    }

    template <class T>
    Var operator()(Forward<T>& f, Var x) const {
        return ad::group_norm(f.tape(), x, f.param(gamma), f.param(beta), groups);
    }
};

/// Pre-activation residual block with an additive per-channel embedding.
struct ResBlock {
    GroupNorm norm0, norm1;
    Conv conv0, conv1;
    Linear emb;
    bool has_skip = false;
    Conv skip;

    template <class T>
    static ResBlock make(ParameterStore<T>& ps, const std::string& name, std::size_t cin, std::size_t cout,
                         std::size_t emb_dim, std::size_t groups, Rng& rng) {
        ResBlock b;
        b.norm0 = GroupNorm::make(ps, name + ".norm0", cin, groups);
        b.conv0 = Conv::make(ps, name + ".conv0", cin, cout, 3, rng, std::sqrt(2.0));
        b.emb = Linear::make(ps, name + ".emb", emb_dim, cout, rng);
        b.norm1 = GroupNorm::make(ps, name + ".norm1", cout, groups);
        b.conv1 = Conv::make(ps, name + ".conv1", cout, cout, 3, rng, 0.1);
        b.has_skip = cin != cout;
        if (b.has_skip) b.skip = Conv::make(ps, name + ".skip", cin, cout, 1, rng);
        return b;
    }

    template <class T>
    Var operator()(Forward<T>& f, Var x, Var emb_act, ad::Padding pad) const {
        auto& tp = f.tape();
        Var h = conv0(f, ad::silu(tp, norm0(f, x)), pad);
        h = ad::add_channel_bias(tp, h, emb(f, emb_act));
        h = conv1(f, ad::silu(tp, norm1(f, h)), pad);
        Var s = has_skip ? skip(f, x, pad) : x;
        return ad::scale(tp, ad::add(tp, h, s), static_cast<T>(1.0 / std::numbers::sqrt2));
    }
};

/// Sinusoidal features of the noise labels: (N, dim, 1, 1).
template <class T>
Tensor<T> sinusoidal_embedding(std::span<const T> labels, std::size_t dim) {
    const std::size_t half = dim / 2;
    Tensor<T> out({labels.size(), dim, 1, 1});
    for (std::size_t i = 0; i < labels.size(); ++i)
        for (std::size_t j = 0; j < half; ++j) {
            const double freq = std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(half));
            const double a = static_cast<double>(labels[i]) * freq;
            out.data[i * dim + j] = static_cast<T>(std::cos(a));
            out.data[i * dim + half + j] = static_cast<T>(std::sin(a));
        }
    return out;
}

/// Maps noise labels through sinusoidal features and a two-layer MLP.
struct NoiseEmbedding {
    std::size_t feature_dim = 32;
    Linear l0, l1;

    template <class T>
    static NoiseEmbedding make(ParameterStore<T>& ps, const std::string& name, std::size_t feature_dim,
                               std::size_t hidden, Rng& rng) {
        NoiseEmbedding e;
        e.feature_dim = feature_dim;
        e.l0 = Linear::make(ps, name + ".l0", feature_dim, hidden, rng);
        e.l1 = Linear::make(ps, name + ".l1", hidden, hidden, rng);
        return e;
    }

    template <class T>
    Var operator()(Forward<T>& f, std::span<const T> labels) const {
        auto& tp = f.tape();
        Var feat = tp.constant(sinusoidal_embedding<T>(labels, feature_dim));
        return ad::silu(tp, l1(f, ad::silu(tp, l0(f, feat))));
    }
};

inline ad::Padding padding_for(Geometry g) {
    return g == Geometry::periodic_both ? ad::Padding{true, true} : ad::Padding{false, true};
}

/// Copy the parameter values of one store into another of a different scalar type.
template <class To, class From>
void copy_values(const ParameterStore<From>& src, ParameterStore<To>& dst) {
    if (src.size() != dst.size()) throw ShapeError("parameter layouts differ");
    for (std::size_t i = 0; i < src.size(); ++i) dst.values()[i] = static_cast<To>(src.values()[i]);
}

}  // namespace dynaguide::nn
