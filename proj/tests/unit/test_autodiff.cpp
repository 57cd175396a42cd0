#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "dynaguide/networks.hpp"

using namespace dynaguide;
using ad::Tape;
using ad::Var;

namespace {

Tensor<double> random_tensor(Tensor<double>::Shape s, Rng& rng, double sd = 1.0) {
    Tensor<double> t(s);
    for (auto& v : t.data) v = sd * rng.normal();
    return t;
}

using Graph = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

/// Compares tape gradients of <seed, f(inputs)> against central differences.
void check_gradients(const Graph& f, std::vector<Tensor<double>> inputs, std::uint64_t seed = 1, double tol = 1e-6) {
    Rng rng(seed);
    Tensor<double> weights;
    std::vector<Tensor<double>> analytic;
    {
        Tape<double> tape;
        std::vector<Var> vars;
        for (const auto& in : inputs) vars.push_back(tape.variable(in));
        const Var out = f(tape, vars);
        weights = random_tensor(tape.value(out).shape, rng);
        tape.backward(out, weights);
        for (auto v : vars) analytic.push_back(tape.grad(v));
    }
    auto objective = [&](const std::vector<Tensor<double>>& xs) {
        Tape<double> tape;
        std::vector<Var> vars;
        for (const auto& in : xs) vars.push_back(tape.constant(in));
        const auto& y = tape.value(f(tape, vars));
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i) s += y.data[i] * weights.data[i];
        return s;
    };
    const double h = 1e-6;
    for (std::size_t a = 0; a < inputs.size(); ++a) {
        // probe a subset of coordinates on large inputs
        const std::size_t n = inputs[a].size();
        const std::size_t stride = std::max<std::size_t>(1, n / 40);
        for (std::size_t i = 0; i < n; i += stride) {
            auto plus = inputs, minus = inputs;
            plus[a].data[i] += h;
            minus[a].data[i] -= h;
            const double fd = (objective(plus) - objective(minus)) / (2 * h);
            const double an = analytic[a].data[i];
            EXPECT_NEAR(an, fd, tol * std::max(1.0, std::abs(fd))) << "input " << a << " index " << i;
        }
    }
}

}  // namespace

TEST(Autodiff, Conv3x3PeriodicBoth) {
    Rng rng(2);
    check_gradients(
        [](Tape<double>& t, const std::vector<Var>& v) { return ad::conv2d(t, v[0], v[1], v[2], {true, true}); },
        {random_tensor({2, 3, 6, 5}, rng), random_tensor({4, 3, 3, 3}, rng), random_tensor({1, 4, 1, 1}, rng)});
}

TEST(Autodiff, Conv3x3ZeroPadRows) {
    Rng rng(3);
    check_gradients(
        [](Tape<double>& t, const std::vector<Var>& v) { return ad::conv2d(t, v[0], v[1], v[2], {false, true}); },
        {random_tensor({2, 2, 5, 6}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({1, 3, 1, 1}, rng)});
}

TEST(Autodiff, Conv1x1) {
    Rng rng(4);
    check_gradients(
        [](Tape<double>& t, const std::vector<Var>& v) { return ad::conv2d(t, v[0], v[1], v[2], {true, true}); },
        {random_tensor({2, 3, 4, 4}, rng), random_tensor({5, 3, 1, 1}, rng), random_tensor({1, 5, 1, 1}, rng)});
}

TEST(Autodiff, PeriodicConvIsTranslationEquivariant) {
    Rng rng(5);
    const auto x = random_tensor({1, 1, 6, 6}, rng);
    const auto w = random_tensor({1, 1, 3, 3}, rng);
    Tensor<double> shifted(x.shape);
    for (std::size_t y = 0; y < 6; ++y)
        for (std::size_t c = 0; c < 6; ++c) shifted(0, 0, (y + 2) % 6, (c + 1) % 6) = x(0, 0, y, c);
    Tape<double> tape;
    const auto b = tape.constant(Tensor<double>({1, 1, 1, 1}));
    const auto a = tape.value(ad::conv2d(tape, tape.constant(x), tape.constant(w), b, {true, true}));
    const auto s = tape.value(ad::conv2d(tape, tape.constant(shifted), tape.constant(w), b, {true, true}));
    for (std::size_t y = 0; y < 6; ++y)
        for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(s(0, 0, (y + 2) % 6, (c + 1) % 6), a(0, 0, y, c), 1e-12);
}

TEST(Autodiff, Linear) {
    Rng rng(6);
    check_gradients([](Tape<double>& t, const std::vector<Var>& v) { return ad::linear(t, v[0], v[1], v[2]); },
                    {random_tensor({3, 5, 1, 1}, rng), random_tensor({4, 5, 1, 1}, rng),
                     random_tensor({1, 4, 1, 1}, rng)});
}

TEST(Autodiff, GroupNorm) {
    Rng rng(7);
    check_gradients(
        [](Tape<double>& t, const std::vector<Var>& v) { return ad::group_norm(t, v[0], v[1], v[2], 2); },
        {random_tensor({2, 4, 3, 3}, rng), random_tensor({1, 4, 1, 1}, rng), random_tensor({1, 4, 1, 1}, rng)});
}

TEST(Autodiff, ElementwiseAndShapeOps) {
    Rng rng(8);
    check_gradients([](Tape<double>& t, const std::vector<Var>& v) { return ad::silu(t, v[0]); },
                    {random_tensor({2, 2, 3, 3}, rng, 3.0)});
    check_gradients([](Tape<double>& t, const std::vector<Var>& v) { return ad::add(t, v[0], v[1]); },
                    {random_tensor({2, 2, 3, 3}, rng), random_tensor({2, 2, 3, 3}, rng)});
    check_gradients([](Tape<double>& t, const std::vector<Var>& v) { return ad::scale(t, v[0], -0.3); },
                    {random_tensor({2, 2, 3, 3}, rng)});
    check_gradients(
        [](Tape<double>& t, const std::vector<Var>& v) { return ad::scale_per_sample(t, v[0], {0.5, -2.0}); },
        {random_tensor({2, 2, 3, 3}, rng)});
    check_gradients([](Tape<double>& t, const std::vector<Var>& v) { return ad::add_channel_bias(t, v[0], v[1]); },
                    {random_tensor({2, 3, 2, 2}, rng), random_tensor({2, 3, 1, 1}, rng)});
    check_gradients([](Tape<double>& t, const std::vector<Var>& v) { return ad::avg_pool2(t, v[0]); },
                    {random_tensor({2, 2, 4, 6}, rng)});
    check_gradients([](Tape<double>& t, const std::vector<Var>& v) { return ad::upsample2(t, v[0]); },
                    {random_tensor({2, 2, 2, 3}, rng)});
    check_gradients([](Tape<double>& t, const std::vector<Var>& v) { return ad::concat_channels(t, v[0], v[1]); },
                    {random_tensor({2, 2, 3, 3}, rng), random_tensor({2, 3, 3, 3}, rng)});
    check_gradients([](Tape<double>& t, const std::vector<Var>& v) { return ad::global_avg_pool(t, v[0]); },
                    {random_tensor({2, 3, 4, 4}, rng)});
}

TEST(Autodiff, ReusedNodeAccumulates) {
    Rng rng(9);
    check_gradients(
        [](Tape<double>& t, const std::vector<Var>& v) {
            const Var s = ad::silu(t, v[0]);
            return ad::add(t, s, ad::scale(t, s, 2.0));
        },
        {random_tensor({1, 2, 2, 2}, rng)});
}

TEST(Autodiff, SeedShapeMismatchThrows) {
    Tape<double> tape;
    const auto x = tape.variable(Tensor<double>({1, 1, 2, 2}, 1.0));
    const auto y = ad::silu(tape, x);
    EXPECT_THROW(tape.backward(y, Tensor<double>({1, 1, 1, 1})), ShapeError);
}

namespace {

UNetSpec tiny_unet(std::size_t in, Geometry g) {
    UNetSpec s;
    s.in_channels = in;
    s.widths = {4, 8};
    s.blocks = 1;
    s.emb_features = 4;
    s.emb_hidden = 8;
    s.groups = 2;
    s.geometry = g;
    return s;
}

/// Whole-network gradient check with respect to the flat parameter vector and the input.
template <class Net>
void check_network(Net& net, const Tensor<double>& x, std::vector<double> labels) {
    auto& ps = net.params();
    Rng rng(11);
    for (auto& v : ps.values()) v += 0.05 * rng.normal();  // move off the zero-init corner
    Tensor<double> weights;
    std::vector<double> pgrad;
    Tensor<double> xgrad;
    {
        Tape<double> tape;
        nn::Forward<double> f(tape, ps, true);
        const Var xv = tape.variable(x);
        const Var out = net.forward(f, xv, labels);
        weights = random_tensor(tape.value(out).shape, rng);
        tape.backward(out, weights);
        pgrad = f.param_gradients();
        xgrad = tape.grad(xv);
    }
    auto objective = [&](const Tensor<double>& xin) {
        Tape<double> tape;
        nn::Forward<double> f(tape, ps, false);
        const auto& y = tape.value(net.forward(f, tape.constant(xin), labels));
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i) s += y.data[i] * weights.data[i];
        return s;
    };
    const double h = 1e-6;
    const std::size_t stride = std::max<std::size_t>(1, ps.size() / 60);
    for (std::size_t i = 0; i < ps.size(); i += stride) {
        const double keep = ps.values()[i];
        ps.values()[i] = keep + h;
        const double up = objective(x);
        ps.values()[i] = keep - h;
        const double down = objective(x);
        ps.values()[i] = keep;
        const double fd = (up - down) / (2 * h);
        EXPECT_NEAR(pgrad[i], fd, 1e-6 * std::max(1.0, std::abs(fd))) << "parameter " << i;
    }
    for (std::size_t i = 0; i < x.size(); i += 7) {
        auto p = x, m = x;
        p.data[i] += h;
        m.data[i] -= h;
        const double fd = (objective(p) - objective(m)) / (2 * h);
        EXPECT_NEAR(xgrad.data[i], fd, 1e-6 * std::max(1.0, std::abs(fd))) << "input " << i;
    }
}

}  // namespace

TEST(Networks, UNetGradientsPeriodic) {
    UNet<double> net(tiny_unet(1, Geometry::periodic_both), 3);
    Rng rng(12);
    check_network(net, random_tensor({2, 1, 8, 8}, rng), {-0.3, 0.4});
}

TEST(Networks, ConditionalUNetGradientsWidthPeriodic) {
    UNet<double> net(tiny_unet(3, Geometry::periodic_width_only), 3);
    Rng rng(13);
    check_network(net, random_tensor({2, 3, 8, 8}, rng), {0.1, -1.0});
}

TEST(Networks, EncoderGradients) {
    EncoderSpec s;
    s.widths = {4, 8};
    s.blocks = 1;
    s.emb_features = 4;
    s.emb_hidden = 8;
    s.groups = 2;
    s.head_hidden = 6;
    EncoderClassifier<double> net(s, 5);
    Rng rng(14);
    check_network(net, random_tensor({2, 3, 8, 8}, rng), {0.2, -0.5});
}

TEST(Networks, ZeroInitHeadGivesZeroLogit) {
    EncoderSpec s;
    s.widths = {4, 8};
    s.blocks = 1;
    s.head_hidden = 16;
    EncoderClassifier<double> net(s, 5);
    Rng rng(15);
    Tape<double> tape;
    nn::Forward<double> f(tape, net.params(), false);
    const std::vector<double> labels{0.0, 1.0, -1.0};
    const auto& y = tape.value(net.forward(f, tape.constant(random_tensor({3, 3, 8, 8}, rng)), labels));
    for (double v : y.data) EXPECT_EQ(v, 0.0);
}

TEST(Networks, RejectsMismatchedInput) {
    UNet<double> net(tiny_unet(1, Geometry::periodic_both), 3);
    Tape<double> tape;
    nn::Forward<double> f(tape, net.params(), false);
    const std::vector<double> labels{0.0};
    EXPECT_THROW(net.forward(f, tape.constant(Tensor<double>({1, 2, 8, 8})), labels), ShapeError);
    EXPECT_THROW(net.forward(f, tape.constant(Tensor<double>({1, 1, 7, 8})), labels), ShapeError);
}

TEST(Networks, SpecRoundTripThroughMetadata) {
    const auto s = tiny_unet(3, Geometry::periodic_width_only);
    Metadata m;
    s.write(m, "score.");
    EXPECT_EQ(UNetSpec::read(Metadata::parse(m.serialize()), "score."), s);
    EncoderSpec e;
    e.widths = {8, 16, 16};
    Metadata m2;
    e.write(m2, "disc.");
    EXPECT_EQ(EncoderSpec::read(m2, "disc."), e);
    EXPECT_THROW(UNetSpec::read(m2, "disc."), FormatError);
}

TEST(Networks, SameSeedSameParameters) {
    UNet<float> a(tiny_unet(1, Geometry::periodic_both), 9), b(tiny_unet(1, Geometry::periodic_both), 9),
        c(tiny_unet(1, Geometry::periodic_both), 10);
    EXPECT_EQ(a.params().values(), b.params().values());
    EXPECT_NE(a.params().values(), c.params().values());
}
