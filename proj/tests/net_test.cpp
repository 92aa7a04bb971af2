#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <random>

#include "cada/error.hpp"
#include "cada/net.hpp"
#include "test_util.hpp"

using namespace cada;
using namespace cada::net;
using cada::testing::kind_of;
using cada::testing::message_of;
using cada::testing::TempDir;

namespace {

Tensor randn(std::vector<std::size_t> shape, std::uint64_t seed, double scale = 1.0) {
    Tensor t(std::move(shape));
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n01;
    for (auto& v : t.data) v = scale * n01(rng);
    return t;
}

// Loss = sum_i c_i * out_i with fixed random c, so every output matters.
LossFn weighted_sum(std::size_t n, std::uint64_t seed) {
    const Tensor c = randn({n}, seed);
    return [c](const Tensor& out) {
        Loss l;
        l.grad.assign(c.data.begin(), c.data.begin() + static_cast<std::ptrdiff_t>(out.size()));
        for (std::size_t i = 0; i < out.size(); ++i) l.value += c[i] * out[i];
        return l;
    };
}

Network build(std::vector<LayerSpec> specs, std::uint64_t seed = 1) { return Network::build(specs, seed); }

// Linear layer whose backward is off by 10%, for the negative control.
class BrokenLinear final : public Layer {
public:
    BrokenLinear(std::size_t in, std::size_t out) : inner_(in, out) {}
    LayerSpec spec() const override { return inner_.spec(); }
    Tensor forward(const Tensor& x, Mode m) override { return inner_.forward(x, m); }
    Tensor backward(const Tensor& g) override {
        Tensor gx = inner_.backward(g);
        for (double& v : inner_.weight().grad.data) v *= 1.1;
        return gx;
    }
    std::vector<Param*> params() override { return inner_.params(); }

private:
    Linear inner_;
};

}  // namespace

TEST(Conv3x3, IdentityKernel) {
    Conv3x3 conv(3, 3);
    auto& w = conv.weight().value;
    for (std::size_t c = 0; c < 3; ++c) w.data[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
    const Tensor x = randn({3, 5, 4}, 2);
    EXPECT_EQ(conv.forward(x, Mode::Eval), x);
}

TEST(Conv3x3, OneByOneInputSeesOnlyCenterTap) {
    Conv3x3 conv(2, 1);
    std::fill(conv.weight().value.data.begin(), conv.weight().value.data.end(), 1.0);
    conv.bias().value.data[0] = 0.5;
    const Tensor y = conv.forward(Tensor({2, 1, 1}, {3.0, 4.0}), Mode::Eval);
    ASSERT_EQ(y.shape, (std::vector<std::size_t>{1, 1, 1}));
    EXPECT_DOUBLE_EQ(y[0], 3.0 + 4.0 + 0.5);
}

TEST(Conv3x3, ZeroPaddingAtBorders) {
    // All-ones kernel on an all-ones 3x3 map counts the in-bounds neighbours.
    Conv3x3 conv(1, 1);
    std::fill(conv.weight().value.data.begin(), conv.weight().value.data.end(), 1.0);
    const Tensor y = conv.forward(Tensor({1, 3, 3}, std::vector<double>(9, 1.0)), Mode::Eval);
    EXPECT_EQ(y.data, (std::vector<double>{4, 6, 4, 6, 9, 6, 4, 6, 4}));
}

TEST(Conv3x3, ChannelMismatch) {
    Conv3x3 conv(3, 3);
    EXPECT_EQ(kind_of([&] { conv.forward(Tensor({2, 4, 4}), Mode::Eval); }), ErrorKind::Data);
}

TEST(Linear, IdentityAndBias) {
    Linear lin(3, 3);
    for (std::size_t i = 0; i < 3; ++i) lin.weight().value.data[i * 3 + i] = 1.0;
    const Tensor x({3}, {1.5, -2.0, 0.25});
    EXPECT_EQ(lin.forward(x, Mode::Eval), x);
    lin.bias().value.data = {1, 2, 3};
    EXPECT_EQ(lin.forward(Tensor({3}), Mode::Eval).data, (std::vector<double>{1, 2, 3}));
    EXPECT_EQ(kind_of([&] { lin.forward(Tensor({4}), Mode::Eval); }), ErrorKind::Data);
}

TEST(Activations, Values) {
    Gelu gelu;
    Relu relu;
    const Tensor x({4}, {0.0, -1.0, 10.0, 1.0});
    const Tensor g = gelu.forward(x, Mode::Eval);
    EXPECT_EQ(g[0], 0.0);
    EXPECT_NEAR(g[2], 10.0, 1e-6);
    // Independent form: 0.5 x (1 + erf(x / sqrt 2)).
    EXPECT_NEAR(g[1], -0.5 * (1.0 + std::erf(-1.0 / std::sqrt(2.0))), 1e-15);
    EXPECT_NEAR(g[3], 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0))), 1e-15);
    const Tensor r = relu.forward(x, Mode::Eval);
    EXPECT_EQ(r.data, (std::vector<double>{0.0, 0.0, 10.0, 1.0}));
}

TEST(Activations, GeluFarTailsStayFinite) {
    Gelu gelu;
    const Tensor y = gelu.forward(Tensor({2}, {-40.0, 40.0}), Mode::Train);
    EXPECT_EQ(y[0], -0.0);
    EXPECT_EQ(y[1], 40.0);
    const Tensor g = gelu.backward(Tensor({2}, {1.0, 1.0}));
    EXPECT_TRUE(std::isfinite(g[0]) && std::isfinite(g[1]));
}

TEST(Dropout, RateZeroAndEvalAreIdentity) {
    Rng rng(1);
    Dropout none(0.0, &rng);
    const Tensor x = randn({100}, 4);
    EXPECT_EQ(none.forward(x, Mode::Train), x);
    EXPECT_EQ(none.forward(x, Mode::Eval), x);
    Dropout d(0.5, &rng);
    EXPECT_EQ(d.forward(x, Mode::Eval), x);
    EXPECT_EQ(d.backward(x), x);
}

TEST(Dropout, SurvivorFractionAndMean) {
    Rng rng(2024);
    Dropout d(0.25, &rng);
    const std::size_t n = 1'000'000;
    const Tensor x({n}, std::vector<double>(n, 2.0));
    const Tensor y = d.forward(x, Mode::Train);
    std::size_t alive = 0;
    double sum = 0.0;
    for (double v : y.data) {
        alive += v != 0.0;
        sum += v;
    }
    EXPECT_NEAR(static_cast<double>(alive) / n, 0.75, 0.01);
    EXPECT_NEAR(sum / n, 2.0, 0.02);
    for (double v : y.data) ASSERT_TRUE(v == 0.0 || std::abs(v - 2.0 / 0.75) < 1e-15);
}

TEST(Dropout, BackwardUsesTheForwardMask) {
    Rng rng(3);
    Dropout d(0.5, &rng);
    const Tensor x({64}, std::vector<double>(64, 1.0));
    const Tensor y = d.forward(x, Mode::Train);
    EXPECT_EQ(d.backward(x), y);
}

TEST(Dropout, RateOneRejected) {
    Rng rng(1);
    EXPECT_EQ(kind_of([&] { Dropout d(1.0, &rng); }), ErrorKind::Usage);
    EXPECT_EQ(kind_of([&] { Dropout d(-0.1, &rng); }), ErrorKind::Usage);
}

TEST(GlobalAvgPool, ConstantAndOneByOne) {
    GlobalAvgPool gap;
    EXPECT_EQ(gap.forward(Tensor({2, 3, 3}, std::vector<double>(18, 1.25)), Mode::Eval).data,
              (std::vector<double>{1.25, 1.25}));
    const Tensor x({3, 1, 1}, {1, 2, 3});
    EXPECT_EQ(gap.forward(x, Mode::Eval).data, x.data);
    const Tensor g = gap.backward(Tensor({3}, {3, 6, 9}));
    EXPECT_EQ(g.data, (std::vector<double>{3, 6, 9}));
}

// Every layer against central differences.
TEST(GradCheck, EachLayerKind) {
    const std::vector<std::pair<std::string, std::vector<LayerSpec>>> cases = {
        {"conv", {{LayerKind::Conv3x3, 3, 4, 0}, {LayerKind::GlobalAvgPool, 0, 0, 0}}},
        {"conv_spatial_loss", {{LayerKind::Conv3x3, 2, 2, 0}}},
        {"linear", {{LayerKind::Linear, 6, 5, 0}}},
        {"gelu", {{LayerKind::Linear, 6, 8, 0}, {LayerKind::Gelu, 0, 0, 0}}},
        {"relu", {{LayerKind::Linear, 6, 8, 0}, {LayerKind::Relu, 0, 0, 0}}},
        {"dropout", {{LayerKind::Dropout, 0, 0, 0.4}, {LayerKind::Linear, 6, 4, 0}}},
        {"gap", {{LayerKind::GlobalAvgPool, 0, 0, 0}, {LayerKind::Linear, 3, 2, 0}}},
    };
    for (const auto& [name, specs] : cases) {
        Network net = build(specs, 5);
        const bool spatial = specs.front().kind == LayerKind::Conv3x3 || specs.front().kind == LayerKind::GlobalAvgPool;
        const Tensor x = spatial ? randn({specs.front().kind == LayerKind::Conv3x3 ? specs.front().in_dim : 3, 5, 4}, 9)
                                 : randn({6}, 9);
        const std::size_t n_out = net.forward(x, Mode::Eval).size();
        const auto r = grad_check(net, x, weighted_sum(n_out, 17));
        EXPECT_LE(r.max_rel_error, 1e-4) << name << " worst " << r.worst;
        EXPECT_GT(r.checked, 0u);
    }
}

TEST(GradCheck, LinearOnlyHeadIsTight) {
    Network net = build({{LayerKind::GlobalAvgPool, 0, 0, 0}, {LayerKind::Linear, 4, 2, 0}}, 3);
    const Tensor x = randn({4, 6, 6}, 8);
    const Tensor t = randn({2}, 10);
    const auto loss = [t](const Tensor& o) {
        Loss l;
        l.grad.resize(2);
        for (int k = 0; k < 2; ++k) l.value += smooth_l1(o[k], t[k], 0.1, &l.grad[k]);
        return l;
    };
    EXPECT_LE(grad_check(net, x, loss).max_rel_error, 1e-6);
}

TEST(GradCheck, CorruptedBackwardIsCaught) {
    Network net(1);
    net.add(std::make_unique<BrokenLinear>(5, 3));
    kaiming_uniform_init(net, 1);
    const auto r = grad_check(net, randn({5}, 2), weighted_sum(3, 4));
    EXPECT_GE(r.max_rel_error, 1e-2);
    EXPECT_EQ(r.worst, "linear.weight");
}

TEST(SmoothL1, ClosedFormExamples) {
    double g = 0.0;
    EXPECT_NEAR(smooth_l1(0.05, 0.0, 0.1, &g), 0.0125, 1e-17);
    EXPECT_NEAR(g, 0.5, 1e-15);
    EXPECT_NEAR(smooth_l1(0.0, 0.1, 0.1), 0.05, 1e-17);
    EXPECT_NEAR(smooth_l1(1.0, 0.0, 0.1, &g), 0.95, 1e-15);
    EXPECT_EQ(g, 1.0);
    smooth_l1(-1.0, 0.0, 0.1, &g);
    EXPECT_EQ(g, -1.0);
}

TEST(SmoothL1, ContinuousAtTheBoundary) {
    for (double alpha : {0.1, 1.0, 10.0, 1e-3}) {
        const double below = std::nextafter(alpha, 0.0), above = std::nextafter(alpha, 1e9);
        const double q = below * below / (2.0 * alpha), l = above - alpha / 2.0;
        const double at = smooth_l1(alpha, 0.0, alpha);
        EXPECT_NEAR(smooth_l1(below, 0.0, alpha), at, 4 * std::numeric_limits<double>::epsilon() * alpha);
        EXPECT_NEAR(smooth_l1(above, 0.0, alpha), at, 4 * std::numeric_limits<double>::epsilon() * alpha);
        EXPECT_NEAR(q, l, 4 * std::numeric_limits<double>::epsilon() * alpha);
    }
}

TEST(SmoothL1, GradientBoundedByOne) {
    std::mt19937_64 rng(6);
    std::normal_distribution<double> n(0.0, 3.0);
    for (int i = 0; i < 10000; ++i) {
        double g = 0.0;
        smooth_l1(n(rng), n(rng), 0.1 + std::abs(n(rng)), &g);
        ASSERT_LE(std::abs(g), 1.0);
    }
}

TEST(SmoothL1, NonPositiveAlphaRejected) {
    EXPECT_EQ(kind_of([] { smooth_l1(1.0, 0.0, 0.0); }), ErrorKind::Usage);
    EXPECT_EQ(kind_of([] { smooth_l1(1.0, 0.0, -1.0); }), ErrorKind::Usage);
}

TEST(CrossEntropy, UniformLogits) {
    const auto l = cross_entropy(std::vector<double>{2.0, 2.0, 2.0, 2.0}, 1);
    EXPECT_NEAR(l.value, std::log(4.0), 1e-15);
    EXPECT_NEAR(l.grad[1], 0.25 - 1.0, 1e-15);
}

TEST(CrossEntropy, DominantTrueLogit) {
    const auto l = cross_entropy(std::vector<double>{100.0, 0.0, 0.0}, 0);
    EXPECT_LT(l.value, 1e-40);
    const auto w = cross_entropy(std::vector<double>{100.0, 0.0, 0.0}, 2);
    EXPECT_NEAR(w.value, 100.0, 1e-12);
    EXPECT_TRUE(std::isfinite(cross_entropy(std::vector<double>{1e4, -1e4}, 1).value));
}

TEST(CrossEntropy, GradientSumsToZero) {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> n(0.0, 5.0);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> z(2 + trial % 9);
        for (auto& v : z) v = n(rng);
        const auto l = cross_entropy(z, trial % z.size());
        EXPECT_NEAR(std::accumulate(l.grad.begin(), l.grad.end(), 0.0), 0.0, 1e-12);
    }
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
    Network net = build({{LayerKind::Linear, 4, 5, 0}}, 2);
    const auto r = grad_check(net, randn({4}, 3), [](const Tensor& o) { return cross_entropy(o.values(), 3); });
    EXPECT_LE(r.max_rel_error, 1e-4);
}

TEST(CrossEntropy, ClassOutOfRange) {
    EXPECT_EQ(kind_of([] { cross_entropy(std::vector<double>{1.0, 2.0}, 2); }), ErrorKind::Usage);
}

TEST(Sgd, HandUnrolledExamples) {
    Param p("w", {1});
    OptimState st{0.1, 0.0, 0.0, {}};
    p.value[0] = 1.0;
    p.grad[0] = 0.1;
    std::vector<Param*> ps = {&p};
    sgd_step(ps, st);
    EXPECT_NEAR(p.value[0], 0.99, 1e-15);
    EXPECT_EQ(p.grad[0], 0.0);

    Param q("w", {1});
    OptimState mom{0.1, 0.9, 0.0, {}};
    std::vector<Param*> qs = {&q};
    for (int i = 0; i < 2; ++i) {
        q.grad[0] = 1.0;
        sgd_step(qs, mom);
    }
    EXPECT_NEAR(mom.velocity[0][0], 1.9, 1e-15);
    EXPECT_NEAR(q.value[0], -0.29, 1e-15);

    Param r("w", {1});
    r.value[0] = 1.0;
    OptimState wd{1.0, 0.0, 1e-4, {}};
    std::vector<Param*> rs = {&r};
    sgd_step(rs, wd);
    EXPECT_NEAR(r.value[0], 0.9999, 1e-15);
}

TEST(Sgd, NonFiniteGradientRejected) {
    Param p("w", {2});
    p.grad[1] = std::numeric_limits<double>::quiet_NaN();
    OptimState st;
    std::vector<Param*> ps = {&p};
    EXPECT_EQ(kind_of([&] { sgd_step(ps, st); }), ErrorKind::Numerical);
}

TEST(Sgd, BadHyperparametersRejected) {
    Param p("w", {1});
    std::vector<Param*> ps = {&p};
    OptimState lr0{0.0, 0.9, 0.0, {}};
    EXPECT_EQ(kind_of([&] { sgd_step(ps, lr0); }), ErrorKind::Usage);
    OptimState m1{0.1, 1.0, 0.0, {}};
    EXPECT_EQ(kind_of([&] { sgd_step(ps, m1); }), ErrorKind::Usage);
}

TEST(Network, BuildValidatesShapes) {
    EXPECT_EQ(kind_of([] { build({{LayerKind::Conv3x3, 3, 3, 0}, {LayerKind::Linear, 3, 2, 0}}); }), ErrorKind::Usage);
    EXPECT_EQ(kind_of([] {
                  build({{LayerKind::GlobalAvgPool, 0, 0, 0}, {LayerKind::Linear, 3, 4, 0}, {LayerKind::Linear, 5, 2, 0}});
              }),
              ErrorKind::Usage);
    EXPECT_EQ(kind_of([] { build({{LayerKind::Conv3x3, 3, 4, 0}, {LayerKind::Conv3x3, 3, 4, 0}}); }), ErrorKind::Usage);
}

TEST(Network, InitIsSeededAndFanInBounded) {
    const std::vector<LayerSpec> specs = {{LayerKind::Conv3x3, 4, 4, 0},
                                          {LayerKind::GlobalAvgPool, 0, 0, 0},
                                          {LayerKind::Linear, 4, 16, 0}};
    Network a = build(specs, 7), b = build(specs, 7), c = build(specs, 8);
    const auto pa = a.params(), pb = b.params(), pc = c.params();
    ASSERT_EQ(pa.size(), 4u);
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, pb[i]->value);
    EXPECT_NE(pa[0]->value, pc[0]->value);
    for (double v : pa[0]->value.data) EXPECT_LE(std::abs(v), 1.0 / std::sqrt(36.0));
    for (double v : pa[1]->value.data) EXPECT_EQ(v, 0.0);
}

TEST(Network, DropoutMasksFollowTheSeed) {
    const std::vector<LayerSpec> specs = {{LayerKind::Dropout, 0, 0, 0.5}, {LayerKind::Linear, 32, 1, 0}};
    Network a = build(specs, 3), b = build(specs, 3);
    const Tensor x({32}, std::vector<double>(32, 1.0));
    for (int i = 0; i < 5; ++i) EXPECT_EQ(a.forward(x, Mode::Train), b.forward(x, Mode::Train));
}

TEST(Checkpoint, RoundTripIsBitwise) {
    TempDir dir("ckpt");
    const std::vector<LayerSpec> specs = {{LayerKind::Conv3x3, 3, 3, 0},   {LayerKind::Gelu, 0, 0, 0},
                                          {LayerKind::GlobalAvgPool, 0, 0, 0}, {LayerKind::Dropout, 0, 0, 0.25},
                                          {LayerKind::Linear, 3, 8, 0},    {LayerKind::Relu, 0, 0, 0},
                                          {LayerKind::Linear, 8, 2, 0}};
    Network net = build(specs, 11);
    // Perturb so loaded values are not just a re-init.
    for (auto* p : net.params())
        for (double& v : p->value.data) v += 1e-3;
    save_checkpoint(dir / "c", net, {{"note", "x"}, {"pi", 3.14159}});
    auto loaded = load_checkpoint(dir / "c");
    EXPECT_EQ(loaded.net.specs(), specs);
    EXPECT_EQ(loaded.meta.at("note"), "x");
    const auto pa = net.params(), pb = loaded.net.params();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, pb[i]->value);
    const Tensor x = randn({3, 4, 4}, 5);
    EXPECT_EQ(net.forward(x, Mode::Eval), loaded.net.forward(x, Mode::Eval));

    save_checkpoint(dir / "d", loaded.net, loaded.meta);
    for (const auto& f : std::filesystem::directory_iterator(dir / "c"))
        EXPECT_EQ(cada::testing::slurp(f.path()), cada::testing::slurp(dir / "d" / f.path().filename()))
            << f.path().filename();
}

TEST(Checkpoint, MissingOrCorrupt) {
    TempDir dir("ckpt");
    EXPECT_NE(message_of([&] { load_checkpoint(dir / "nope"); }).find("missing checkpoint"), std::string::npos);
    Network net = build({{LayerKind::Linear, 2, 2, 0}});
    save_checkpoint(dir / "c", net, nlohmann::json::object());
    std::filesystem::remove(dir / "c" / "param_001.adt");
    EXPECT_EQ(kind_of([&] { load_checkpoint(dir / "c"); }), ErrorKind::Data);
}
