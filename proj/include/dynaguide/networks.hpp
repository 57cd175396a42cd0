#pragma once

/// Network architectures: the encoder-decoder denoiser used by both score
/// models and the noise-conditioned encoder + MLP head of the discriminator.

#include <cstdint>
#include <string>
#include <vector>

#include "dynaguide/nn.hpp"
#include "dynaguide/stdg.hpp"

namespace dynaguide {

inline std::string join_sizes(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

inline std::vector<std::size_t> parse_sizes(const std::string& s) {
    std::vector<std::size_t> out;
    for (const auto& tok : split_commas(s)) {
        if (tok.empty()) continue;
        const double v = parse_double(tok);
        if (v < 1 || v != static_cast<double>(static_cast<std::size_t>(v)))
            throw ConfigError("expected a positive integer list, got '" + s + "'");
        out.push_back(static_cast<std::size_t>(v));
    }
    return out;
}

/// Encoder-decoder denoiser: `widths.size()` resolution levels, `blocks`
/// residual blocks per encoder level, skip connections into the decoder.
struct UNetSpec {
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    std::vector<std::size_t> widths{32, 64, 64};
    std::size_t blocks = 2;
    std::size_t emb_features = 32;
    std::size_t emb_hidden = 128;
    std::size_t groups = 8;
    Geometry geometry = Geometry::periodic_both;

    void validate() const {
        if (in_channels == 0 || out_channels == 0) throw ConfigError("unet channels must be positive");
        if (widths.empty()) throw ConfigError("unet needs at least one level");
        if (blocks == 0) throw ConfigError("unet needs at least one block per level");
        if (emb_features < 2 || emb_features % 2) throw ConfigError("embedding features must be even");
    }

    /// Spatial dims must be divisible by this.
    std::size_t divisor() const { return std::size_t{1} << (widths.size() - 1); }

    void write(Metadata& m, const std::string& prefix) const {
        m.set(prefix + "arch", "unet");
        m.set(prefix + "in_channels", static_cast<std::uint64_t>(in_channels));
        m.set(prefix + "out_channels", static_cast<std::uint64_t>(out_channels));
        m.set(prefix + "widths", join_sizes(widths));
        m.set(prefix + "blocks", static_cast<std::uint64_t>(blocks));
        m.set(prefix + "emb_features", static_cast<std::uint64_t>(emb_features));
        m.set(prefix + "emb_hidden", static_cast<std::uint64_t>(emb_hidden));
        m.set(prefix + "groups", static_cast<std::uint64_t>(groups));
        m.set(prefix + "geometry", to_string(geometry));
    }

    static UNetSpec read(const Metadata& m, const std::string& prefix) {
        if (m.get(prefix + "arch") != "unet") throw FormatError("architecture is not a unet");
        UNetSpec s;
        s.in_channels = static_cast<std::size_t>(m.get_int(prefix + "in_channels"));
        s.out_channels = static_cast<std::size_t>(m.get_int(prefix + "out_channels"));
        s.widths = parse_sizes(m.get(prefix + "widths"));
        s.blocks = static_cast<std::size_t>(m.get_int(prefix + "blocks"));
        s.emb_features = static_cast<std::size_t>(m.get_int(prefix + "emb_features"));
        s.emb_hidden = static_cast<std::size_t>(m.get_int(prefix + "emb_hidden"));
        s.groups = static_cast<std::size_t>(m.get_int(prefix + "groups"));
        s.geometry = geometry_from_string(m.get(prefix + "geometry"));
        s.validate();
        return s;
    }

    friend bool operator==(const UNetSpec&, const UNetSpec&) = default;
};

template <class T>
class UNet {
public:
    UNet(const UNetSpec& spec, std::uint64_t seed) : spec_(spec) {
        spec_.validate();
        Rng rng(derive_seed(seed, {0x0E7ULL}));
        const auto& w = spec_.widths;
        emb_ = nn::NoiseEmbedding::make(ps_, "emb", spec_.emb_features, spec_.emb_hidden, rng);
        conv_in_ = nn::Conv::make(ps_, "conv_in", spec_.in_channels, w[0], 3, rng);
        std::vector<std::size_t> skip_ch{w[0]};
        std::size_t ch = w[0];
        for (std::size_t l = 0; l < w.size(); ++l) {
            for (std::size_t b = 0; b < spec_.blocks; ++b) {
                enc_.push_back(nn::ResBlock::make(ps_, "enc" + std::to_string(l) + "." + std::to_string(b), ch, w[l],
                                                  spec_.emb_hidden, spec_.groups, rng));
                ch = w[l];
                skip_ch.push_back(ch);
            }
            if (l + 1 < w.size()) skip_ch.push_back(ch);
        }
        for (std::size_t l = w.size(); l-- > 0;) {
            for (std::size_t b = 0; b <= spec_.blocks; ++b) {
                const std::size_t sc = skip_ch.back();
                skip_ch.pop_back();
                dec_.push_back(nn::ResBlock::make(ps_, "dec" + std::to_string(l) + "." + std::to_string(b), ch + sc,
                                                  w[l], spec_.emb_hidden, spec_.groups, rng));
                ch = w[l];
            }
        }
        norm_out_ = nn::GroupNorm::make(ps_, "norm_out", ch, spec_.groups);
        conv_out_ = nn::Conv::make(ps_, "conv_out", ch, spec_.out_channels, 3, rng, 0.2);
    }

    const UNetSpec& spec() const noexcept { return spec_; }
    nn::ParameterStore<T>& params() noexcept { return ps_; }
    const nn::ParameterStore<T>& params() const noexcept { return ps_; }

    /// x: (N, in_channels, H, W); labels: one noise label per sample.
    ad::Var forward(nn::Forward<T>& f, ad::Var x, std::span<const T> labels) const {
        auto& tp = f.tape();
        const auto& X = tp.value(x);
        if (X.c() != spec_.in_channels)
            throw ShapeError("unet expects " + std::to_string(spec_.in_channels) + " input channels, got " +
                             X.shape_string());
        if (X.h() % spec_.divisor() || X.w() % spec_.divisor())
            throw ShapeError("unet spatial dims must be divisible by " + std::to_string(spec_.divisor()));
        if (labels.size() != X.n()) throw ShapeError("one noise label per sample required");
        const auto pad = nn::padding_for(spec_.geometry);
        const ad::Var emb = emb_(f, labels);
        ad::Var h = conv_in_(f, x, pad);
        std::vector<ad::Var> skips{h};
        std::size_t e = 0;
        const auto levels = spec_.widths.size();
        for (std::size_t l = 0; l < levels; ++l) {
            for (std::size_t b = 0; b < spec_.blocks; ++b) {
                h = enc_[e++](f, h, emb, pad);
                skips.push_back(h);
            }
            if (l + 1 < levels) {
                h = ad::avg_pool2(tp, h);
                skips.push_back(h);
            }
        }
        std::size_t d = 0;
        for (std::size_t l = levels; l-- > 0;) {
            for (std::size_t b = 0; b <= spec_.blocks; ++b) {
                h = dec_[d++](f, ad::concat_channels(tp, h, skips.back()), emb, pad);
                skips.pop_back();
            }
            if (l > 0) h = ad::upsample2(tp, h);
        }
        return conv_out_(f, ad::silu(tp, norm_out_(f, h)), pad);
    }

private:
    UNetSpec spec_;
    nn::ParameterStore<T> ps_;
    nn::NoiseEmbedding emb_;
    nn::Conv conv_in_;
    std::vector<nn::ResBlock> enc_, dec_;
    nn::GroupNorm norm_out_;
    nn::Conv conv_out_;
};

/// Noise-conditioned convolutional encoder, global average pooling and a
/// fully connected head emitting one logit per sample.
struct EncoderSpec {
    std::size_t in_channels = 3;
    std::vector<std::size_t> widths{32, 64};
    std::size_t blocks = 2;
    std::size_t emb_features = 32;
    std::size_t emb_hidden = 128;
    std::size_t groups = 8;
    std::size_t head_hidden = 1024;
    std::size_t head_layers = 2;
    Geometry geometry = Geometry::periodic_both;

    void validate() const {
        if (in_channels == 0) throw ConfigError("encoder needs input channels");
        if (widths.empty() || blocks == 0) throw ConfigError("encoder needs at least one level and block");
        if (head_hidden == 0 || head_layers == 0) throw ConfigError("head needs at least one hidden layer");
        if (emb_features < 2 || emb_features % 2) throw ConfigError("embedding features must be even");
    }

    std::size_t divisor() const { return std::size_t{1} << (widths.size() - 1); }

    void write(Metadata& m, const std::string& prefix) const {
        m.set(prefix + "arch", "encoder_mlp");
        m.set(prefix + "in_channels", static_cast<std::uint64_t>(in_channels));
        m.set(prefix + "widths", join_sizes(widths));
        m.set(prefix + "blocks", static_cast<std::uint64_t>(blocks));
        m.set(prefix + "emb_features", static_cast<std::uint64_t>(emb_features));
        m.set(prefix + "emb_hidden", static_cast<std::uint64_t>(emb_hidden));
        m.set(prefix + "groups", static_cast<std::uint64_t>(groups));
        m.set(prefix + "head_hidden", static_cast<std::uint64_t>(head_hidden));
        m.set(prefix + "head_layers", static_cast<std::uint64_t>(head_layers));
        m.set(prefix + "geometry", to_string(geometry));
    }

    static EncoderSpec read(const Metadata& m, const std::string& prefix) {
        if (m.get(prefix + "arch") != "encoder_mlp") throw FormatError("architecture is not an encoder_mlp");
        EncoderSpec s;
        s.in_channels = static_cast<std::size_t>(m.get_int(prefix + "in_channels"));
        s.widths = parse_sizes(m.get(prefix + "widths"));
        s.blocks = static_cast<std::size_t>(m.get_int(prefix + "blocks"));
        s.emb_features = static_cast<std::size_t>(m.get_int(prefix + "emb_features"));
        s.emb_hidden = static_cast<std::size_t>(m.get_int(prefix + "emb_hidden"));
        s.groups = static_cast<std::size_t>(m.get_int(prefix + "groups"));
        s.head_hidden = static_cast<std::size_t>(m.get_int(prefix + "head_hidden"));
        s.head_layers = static_cast<std::size_t>(m.get_int(prefix + "head_layers"));
        s.geometry = geometry_from_string(m.get(prefix + "geometry"));
        s.validate();
        return s;
    }

    friend bool operator==(const EncoderSpec&, const EncoderSpec&) = default;
};

template <class T>
class EncoderClassifier {
public:
    EncoderClassifier(const EncoderSpec& spec, std::uint64_t seed) : spec_(spec) {
        spec_.validate();
        Rng rng(derive_seed(seed, {0xD15CULL}));
        const auto& w = spec_.widths;
        emb_ = nn::NoiseEmbedding::make(ps_, "emb", spec_.emb_features, spec_.emb_hidden, rng);
        conv_in_ = nn::Conv::make(ps_, "conv_in", spec_.in_channels, w[0], 3, rng);
        std::size_t ch = w[0];
        for (std::size_t l = 0; l < w.size(); ++l)
            for (std::size_t b = 0; b < spec_.blocks; ++b) {
                enc_.push_back(nn::ResBlock::make(ps_, "enc" + std::to_string(l) + "." + std::to_string(b), ch, w[l],
                                                  spec_.emb_hidden, spec_.groups, rng));
                ch = w[l];
            }
        norm_out_ = nn::GroupNorm::make(ps_, "norm_out", ch, spec_.groups);
        std::size_t in = ch;
        for (std::size_t i = 0; i < spec_.head_layers; ++i) {
            head_.push_back(nn::Linear::make(ps_, "head" + std::to_string(i), in, spec_.head_hidden, rng, std::sqrt(2.0)));
            in = spec_.head_hidden;
        }
        // zero-initialized output layer: logit 0, probability 1/2
        out_ = nn::Linear::make(ps_, "head_out", in, 1, rng, 0.0);
    }

    const EncoderSpec& spec() const noexcept { return spec_; }
    nn::ParameterStore<T>& params() noexcept { return ps_; }
    const nn::ParameterStore<T>& params() const noexcept { return ps_; }

    /// x: (N, in_channels, H, W) -> logits (N, 1, 1, 1).
    ad::Var forward(nn::Forward<T>& f, ad::Var x, std::span<const T> labels) const {
        auto& tp = f.tape();
        const auto& X = tp.value(x);
        if (X.c() != spec_.in_channels)
            throw ShapeError("encoder expects " + std::to_string(spec_.in_channels) + " input channels, got " +
                             X.shape_string());
        if (X.h() % spec_.divisor() || X.w() % spec_.divisor())
            throw ShapeError("encoder spatial dims must be divisible by " + std::to_string(spec_.divisor()));
        if (labels.size() != X.n()) throw ShapeError("one noise label per sample required");
        const auto pad = nn::padding_for(spec_.geometry);
        const ad::Var emb = emb_(f, labels);
        ad::Var h = conv_in_(f, x, pad);
        std::size_t e = 0;
        for (std::size_t l = 0; l < spec_.widths.size(); ++l) {
            for (std::size_t b = 0; b < spec_.blocks; ++b) h = enc_[e++](f, h, emb, pad);
            if (l + 1 < spec_.widths.size()) h = ad::avg_pool2(tp, h);
        }
        h = ad::global_avg_pool(tp, ad::silu(tp, norm_out_(f, h)));
        for (const auto& layer : head_) h = ad::silu(tp, layer(f, h));
        return out_(f, h);
    }

private:
    EncoderSpec spec_;
    nn::ParameterStore<T> ps_;
    nn::NoiseEmbedding emb_;
    nn::Conv conv_in_;
    std::vector<nn::ResBlock> enc_;
    nn::GroupNorm norm_out_;
    std::vector<nn::Linear> head_;
    nn::Linear out_;
};

}  // namespace dynaguide
