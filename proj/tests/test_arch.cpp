#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "mddet/arch.hpp"
#include "mddet/checkpoint.hpp"
#include "mddet/gradcheck.hpp"
#include "mddet/rng.hpp"

using namespace mddet;

namespace {

Tensor4 random_input(int n, int c, int h, int w, std::uint64_t seed) {
    Rng rng(seed);
    Tensor4 t(n, c, h, w);
    for (double& x : t.v) x = rng.uniform(0.0, 1.0);
    return t;
}

// spec with one head layer only: forward is a bare 1x1 conv
NetworkSpec head_only_spec(int in_ch, int out_ch) {
    NetworkSpec s;
    s.in_channels = in_ch;
    s.layers = {HeadSpec{out_ch}};
    return s;
}

double projected_loss(Network& net, const Tensor4& input, const Tensor4& proj, ForwardMode mode) {
    Tensor4 out = net.forward(input, mode);
    double s = 0.0;
    for (std::size_t i = 0; i < out.v.size(); ++i) s += out.v[i] * proj.v[i];
    return s;
}

// flattens current parameter values
std::vector<double> flatten(const std::vector<std::span<double>>& views) {
    std::vector<double> out;
    for (const auto& v : views) out.insert(out.end(), v.begin(), v.end());
    return out;
}

void unflatten(const std::vector<std::span<double>>& views, std::span<const double> flat) {
    std::size_t o = 0;
    for (const auto& v : views) {
        std::copy(flat.begin() + o, flat.begin() + o + v.size(), v.begin());
        o += v.size();
    }
}

std::vector<double> flatten_grads(const std::vector<std::span<const double>>& views) {
    std::vector<double> out;
    for (const auto& v : views) out.insert(out.end(), v.begin(), v.end());
    return out;
}

void check_network_gradient(const NetworkSpec& spec, std::uint64_t seed, double tol) {
    Network net = Network::build(spec, seed);
    Tensor4 input = random_input(2, 3, 16, 16, seed + 1);
    Tensor4 probe = net.forward(input, ForwardMode::GradCheck);
    Rng rng(seed + 2);
    Tensor4 proj(probe.n, probe.c, probe.h, probe.w);
    for (double& x : proj.v) x = rng.uniform(-1, 1);

    net.forward(input, ForwardMode::GradCheck);
    net.backward(proj);
    const std::vector<double> analytic = flatten_grads(net.grad_views());
    const std::vector<double> p0 = flatten(net.param_views());

    auto loss = [&](std::span<const double> p) {
        unflatten(net.param_views(), p);
        const double s = projected_loss(net, input, proj, ForwardMode::GradCheck);
        return s;
    };
    auto rep = finite_diff_check(loss, p0, analytic, 1e-6, seed + 3);
    unflatten(net.param_views(), p0);
    CHECK(rep.max_rel_err <= tol);
}

}  // namespace

TEST_CASE("head layer channel rule N*(K+5)") {
    NetworkSpec spec;
    spec.classes = 20;
    spec.anchors = default_anchors();  // 5 anchors
    CHECK(spec.head_channels() == 125);
    spec.layers = {ConvSpec{8, 3, 1, 1, true, Activation::LeakyRelu}, HeadSpec{125}};
    CHECK_NOTHROW(Network::build(spec, 1));
    spec.layers.back() = HeadSpec{124};
    CHECK_THROWS_WITH_AS(Network::build(spec, 1), doctest::Contains("N*(K+5)"),
                         std::invalid_argument);
}

TEST_CASE("1x1 conv parameter count") {
    NetworkSpec s;
    s.in_channels = 64;
    s.layers = {HeadSpec{16}};  // bare 1x1 conv, no norm
    Network net = Network::build(s, 1);
    CHECK(net.param_count() == 64 * 16 + 16);
}

TEST_CASE("stack_merge channel sum") {
    // contributions after bottleneck+block: 16*2^2 = 64 and 128*1 = 128
    NetworkSpec s;
    s.in_channels = 3;
    s.layers = {
        ConvSpec{4, 3, 1, 1, true, Activation::LeakyRelu},   // 0 at /1
        MaxPoolSpec{},                                       // 1 at /2
        ConvSpec{32, 3, 1, 1, true, Activation::LeakyRelu},  // 2 at /2
        StackMergeSpec{{{2, 128, 1}, {0, 16, 2}}},           // 3: 128 + 64 = 192
        HeadSpec{7},
    };
    Network net = Network::build(s, 1);
    CHECK(net.layer_out_channels(3) == 192);

    Tensor4 out = net.forward(random_input(1, 3, 8, 8, 2), ForwardMode::Eval);
    CHECK(out.c == 7);
    CHECK(out.h == 4);
}

TEST_CASE("reference specs: shapes, counts and structure") {
    auto [teacher, student] = reference_specs(4, default_anchors());

    SUBCASE("student forward 64x64 -> 4x4 head grid") {
        Network net = Network::build(student, 3);
        CHECK(net.downsample_factor() == 16);
        Tensor4 out = net.forward(random_input(1, 3, 64, 64, 4), ForwardMode::Eval);
        CHECK(out.h == 4);
        CHECK(out.w == 4);
        CHECK(out.c == student.head_channels());
    }
    SUBCASE("indivisible input rejected") {
        Network net = Network::build(student, 3);
        CHECK_THROWS_AS(net.forward(random_input(1, 3, 60, 60, 4), ForwardMode::Eval),
                        std::invalid_argument);
    }
    SUBCASE("zero input through zero head gives zero output") {
        Network net = Network::build(student, 5);
        auto params = net.param_views();
        // last two views are the head weight and bias
        for (double& x : params[params.size() - 2]) x = 0.0;
        for (double& x : params[params.size() - 1]) x = 0.0;
        Tensor4 out = net.forward(Tensor4(1, 3, 64, 64, 0.0), ForwardMode::GradCheck);
        for (double v : out.v) CHECK(v == 0.0);
    }
    SUBCASE("forward is deterministic") {
        Network net = Network::build(student, 6);
        Tensor4 in = random_input(2, 3, 64, 64, 7);
        Tensor4 a = net.forward(in, ForwardMode::Eval);
        Tensor4 b = net.forward(in, ForwardMode::Eval);
        CHECK(std::memcmp(a.v.data(), b.v.data(), a.v.size() * sizeof(double)) == 0);
    }
    SUBCASE("parameter compactness: student under a quarter of teacher") {
        Network t = Network::build(teacher, 1);
        Network s = Network::build(student, 1);
        CHECK(s.param_count() * 4 < t.param_count());
    }
    SUBCASE("student has at least two trailing 1x1 convs before the head") {
        int trailing = 0;
        for (int i = static_cast<int>(student.layers.size()) - 2; i >= 0; --i) {
            const auto* c = std::get_if<ConvSpec>(&student.layers[i]);
            if (c && c->k == 1)
                ++trailing;
            else
                break;
        }
        CHECK(trailing >= 2);
    }
    SUBCASE("both specs end in a head with N*(K+5) channels") {
        CHECK(std::get<HeadSpec>(teacher.layers.back()).out_ch == teacher.head_channels());
        CHECK(std::get<HeadSpec>(student.layers.back()).out_ch == student.head_channels());
    }
    SUBCASE("tail widths: student 128 vs teacher 256") {
        auto tail_width = [](const NetworkSpec& s) {
            for (std::size_t i = s.layers.size() - 1; i > 0; --i)
                if (const auto* c = std::get_if<ConvSpec>(&s.layers[i - 1]); c && c->k == 3)
                    return c->out_ch;
            return 0;
        };
        CHECK(tail_width(student) == 128);
        CHECK(tail_width(teacher) == 256);
    }
    SUBCASE("flops: teacher costs several times the student") {
        Network t = Network::build(teacher, 1);
        Network s = Network::build(student, 1);
        CHECK(t.flops_estimate(64, 64) > 4 * s.flops_estimate(64, 64));
    }
}

TEST_CASE("flops formula for a bare 1x1 conv") {
    Network net = Network::build(head_only_spec(3, 11), 1);
    CHECK(net.flops_estimate(10, 12) == 10LL * 12 * 3 * 11);
}

TEST_CASE("backward basics") {
    SUBCASE("backward without forward rejected") {
        Network net = Network::build(head_only_spec(2, 3), 1);
        CHECK_THROWS_AS(net.backward(Tensor4(1, 3, 4, 4)), std::logic_error);
    }
    SUBCASE("zero head grad gives zero parameter grads") {
        auto [teacher, student] = reference_specs(4, default_anchors());
        Network net = Network::build(student, 8);
        net.forward(random_input(1, 3, 16, 16, 9), ForwardMode::GradCheck);
        Tensor4 zeros(1, student.head_channels(), 1, 1, 0.0);
        net.backward(zeros);
        for (const auto& g : net.grad_views())
            for (double v : g) CHECK(v == 0.0);
    }
    SUBCASE("single-conv net matches conv2d_backward directly") {
        Network net = Network::build(head_only_spec(2, 3), 10);
        Tensor4 in = random_input(2, 2, 4, 4, 11);
        Tensor4 out = net.forward(in, ForwardMode::GradCheck);
        Rng rng(12);
        Tensor4 og(out.n, out.c, out.h, out.w);
        for (double& x : og.v) x = rng.uniform(-1, 1);
        net.backward(og);

        // reconstruct the same conv from the network parameters
        auto params = net.param_views();
        ConvLayer l = make_conv(3, 2, 1, 1, 0);
        std::copy(params[0].begin(), params[0].end(), l.weight.v.begin());
        std::copy(params[1].begin(), params[1].end(), l.bias.begin());
        ConvGrads cg = conv2d_backward(in, l, og);

        auto grads = net.grad_views();
        REQUIRE(grads[0].size() == cg.weight.v.size());
        for (std::size_t i = 0; i < cg.weight.v.size(); ++i)
            CHECK(grads[0][i] == cg.weight.v[i]);
        for (std::size_t i = 0; i < cg.bias.size(); ++i) CHECK(grads[1][i] == cg.bias[i]);
    }
}

TEST_CASE("reference specs pass the finite-difference round trip") {
    auto [teacher, student] = reference_specs(4, default_anchors());
    SUBCASE("student") { check_network_gradient(student, 21, 1e-4); }
    SUBCASE("teacher") { check_network_gradient(teacher, 22, 1e-4); }
    SUBCASE("student with maxpool merge") {
        NetworkSpec variant = student;
        variant.merge_with_maxpool = true;
        check_network_gradient(variant, 23, 1e-4);
    }
}

TEST_CASE("maxpool merge variant changes only channel counts") {
    auto [teacher, student] = reference_specs(4, default_anchors());
    NetworkSpec variant = student;
    variant.merge_with_maxpool = true;
    Network stack_net = Network::build(student, 30);
    Network max_net = Network::build(variant, 30);
    // stack: 48 + 6*4 + 2*16 = 104; max: 48 + 6 + 2 = 56
    const std::size_t merge_idx = 8;
    CHECK(stack_net.layer_out_channels(merge_idx) == 104);
    CHECK(max_net.layer_out_channels(merge_idx) == 56);
    Tensor4 in = random_input(1, 3, 64, 64, 31);
    CHECK(stack_net.forward(in, ForwardMode::Eval).c == student.head_channels());
    CHECK(max_net.forward(in, ForwardMode::Eval).c == student.head_channels());
}

TEST_CASE("network spec serialization round trip") {
    auto [teacher, student] = reference_specs(6, default_anchors());
    student.merge_with_maxpool = true;
    const std::string text = student.serialize();
    NetworkSpec parsed = NetworkSpec::parse(text);
    CHECK(parsed.serialize() == text);
    CHECK(parsed.classes == 6);
    CHECK(parsed.anchors.size() == 5);
    CHECK(parsed.merge_with_maxpool);
    CHECK(parsed.layers.size() == student.layers.size());
}

TEST_CASE("build validation errors name the layer") {
    NetworkSpec s;
    s.in_channels = 3;
    s.layers = {
        ConvSpec{4, 3, 1, 1, true, Activation::LeakyRelu},
        StackMergeSpec{{{5, 8, 1}}},  // dangling source
        HeadSpec{7},
    };
    CHECK_THROWS_WITH_AS(Network::build(s, 1), doctest::Contains("layer 1"),
                         std::invalid_argument);

    s.layers[1] = StackMergeSpec{{{0, 8, 3}}};  // block 3 in max mode is not a power of 2
    s.merge_with_maxpool = true;
    CHECK_THROWS_AS(Network::build(s, 1), std::invalid_argument);
}

TEST_CASE("checkpoint round trip") {
    auto [teacher, student] = reference_specs(4, default_anchors());
    Network net = Network::build(student, 40);
    // move the running stats off their defaults so they are exercised too
    net.forward(random_input(2, 3, 32, 32, 41), ForwardMode::Train);

    const auto dir = std::filesystem::temp_directory_path() / "mddet_test_ckpt";
    std::filesystem::create_directories(dir);
    const auto path = dir / "student.ckpt";
    save_checkpoint(path, net);

    Network loaded = load_checkpoint(path);
    CHECK(loaded.spec().serialize() == net.spec().serialize());
    auto a = net.state_views();
    auto b = loaded.state_views();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].size() == b[i].size());
        for (std::size_t j = 0; j < a[i].size(); ++j)
            CHECK(b[i][j] == static_cast<double>(static_cast<float>(a[i][j])));
    }

    // identical inputs produce identical eval outputs through the f32 round trip
    Tensor4 in = random_input(1, 3, 64, 64, 42);
    Tensor4 o1 = loaded.forward(in, ForwardMode::Eval);
    Tensor4 o2 = loaded.forward(in, ForwardMode::Eval);
    CHECK(std::memcmp(o1.v.data(), o2.v.data(), o1.v.size() * sizeof(double)) == 0);

    std::filesystem::remove_all(dir);
}
