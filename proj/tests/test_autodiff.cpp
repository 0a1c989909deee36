#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "gmparse/adam.hpp"
#include "gmparse/nets.hpp"
#include "gmparse/ops.hpp"

using namespace gmparse;
using ad::Parameter;
using ad::Tape;
using ad::Var;

namespace {

// Uniform values bounded away from zero so kinked ops (ReLU, max) are checked
// at differentiable points.
TensorND<double> random_signed(const Shape& s, std::uint64_t seed) {
    auto t = TensorND<double>::uniform(s, 0.15, 1.0, seed);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    for (auto& v : t.data)
        if (rng() & 1) v = -v;
    return t;
}

constexpr int kTrials = 5;
constexpr double kTol = 1e-4;

}  // namespace

// ==== forward examples =====================================================

TEST_CASE("1x1 convolution with identity kernel reproduces the image") {
    Tape<double> t;
    auto img = TensorND<double>::uniform(Shape{1, 1, 4, 4}, -1, 1, 7);
    Parameter<double> w("w", TensorND<double>::full(Shape{1, 1, 1, 1}, 1.0));
    Parameter<double> b("b", TensorND<double>::zeros(Shape{1}));
    auto y = ad::conv2d(t.input(img), t.param(w), t.param(b), 1, 0);
    CHECK(y.shape() == img.shape);
    for (std::size_t i = 0; i < img.data.size(); ++i) CHECK(y.val()[i] == img.data[i]);
}

TEST_CASE("relu clamps negatives") {
    Tape<double> t;
    auto y = ad::relu(t.input(TensorND<double>(Shape{3}, {-1, 0, 2})));
    CHECK(y.val() == std::vector<double>{0, 0, 2});
}

TEST_CASE("2x2 average pool of [[1,3],[5,7]] is [[4]]") {
    Tape<double> t;
    auto y = ad::avgpool2d(t.input(TensorND<double>(Shape{1, 1, 2, 2}, {1, 3, 5, 7})), 2, 2);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.val()[0] == 4.0);
}

TEST_CASE("forward is a pure function of weights and inputs") {
    auto img = TensorND<double>::uniform(Shape{2, 1, 4, 4}, -1, 1, 11);
    nn::Conv2d<double> conv("c", 1, 2, 3, 1, 1, 99);
    std::vector<double> first;
    for (int run = 0; run < 2; ++run) {
        Tape<double> t;
        auto y = ad::relu(conv(t, t.input(img)));
        if (run == 0)
            first = y.val();
        else
            CHECK(first == y.val());
    }
}

// ==== backward basics ======================================================

TEST_CASE("gradient of sum(x) is all ones") {
    Parameter<double> x("x", TensorND<double>::uniform(Shape{3, 4}, -1, 1, 5));
    Tape<double> t;
    t.backward(ad::sum_all(t.param(x)));
    for (double g : x.grad.data) CHECK(g == 1.0);
}

TEST_CASE("gradient of sum(x^2) at x=[3] is [6]") {
    Parameter<double> x("x", TensorND<double>(Shape{1}, {3.0}));
    Tape<double> t;
    t.backward(ad::sum_all(ad::square(t.param(x))));
    CHECK(x.grad.data[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("constant loss leaves disconnected parameters at zero with a warning flag") {
    Parameter<double> x("x", TensorND<double>::uniform(Shape{4}, -1, 1, 6));
    Tape<double> t;
    (void)t.param(x);
    auto c = t.input(TensorND<double>(Shape{1}, {2.5}));
    auto rep = t.backward(ad::scale(c, 2.0));
    CHECK(rep.disconnected == std::vector<std::string>{"x"});
    for (double g : x.grad.data) CHECK(g == 0.0);
}

TEST_CASE("backward requires a scalar loss") {
    Parameter<double> x("x", TensorND<double>::uniform(Shape{4}, -1, 1, 8));
    Tape<double> t;
    auto y = ad::square(t.param(x));
    CHECK_THROWS_AS(t.backward(y), ValueError);
}

TEST_CASE("backward of a weighted sum of losses is the weighted sum of backwards") {
    Parameter<double> x("x", random_signed(Shape{2, 3}, 77));
    auto grad_of = [&](int which) {
        Tape<double> t;
        auto v = t.param(x);
        auto l1 = ad::sum_all(ad::square(v));
        auto l2 = ad::sum_all(ad::mul(v, ad::tanh_op(v)));
        if (which == 0) t.backward(l1);
        if (which == 1) t.backward(l2);
        if (which == 2) t.backward(ad::add(ad::scale(l1, 0.7), ad::scale(l2, 1.3)));
        return x.grad.data;
    };
    auto g1 = grad_of(0), g2 = grad_of(1), gc = grad_of(2);
    for (std::size_t i = 0; i < gc.size(); ++i) CHECK(std::abs(gc[i] - (0.7 * g1[i] + 1.3 * g2[i])) < 1e-10);
}

TEST_CASE("non-finite forward values raise an error naming the node") {
    Tape<double> t;
    auto x = t.input(TensorND<double>(Shape{1}, {1e200}));
    CHECK_THROWS_WITH_AS((void)ad::square(x), doctest::Contains("square"), NonFiniteError);
}

TEST_CASE("shape errors name the operation") {
    Tape<double> t;
    auto a = t.input(TensorND<double>::zeros(Shape{2, 2}));
    auto b = t.input(TensorND<double>::zeros(Shape{2, 3}));
    CHECK_THROWS_WITH_AS((void)ad::add(a, b), doctest::Contains("add"), ShapeError);
    CHECK_THROWS_AS((void)ad::conv2d(a, a, a), ShapeError);
}

// ==== finite-difference checks, one per op =================================

TEST_CASE("gradcheck: elementwise unaries") {
    for (int trial = 0; trial < kTrials; ++trial) {
        Parameter<double> x("x", random_signed(Shape{3, 4}, 1000 + std::uint64_t(trial)));
        auto run = [&](auto fn) {
            auto res = ad::check_gradients([&](Tape<double>& t) { return ad::sum_all(fn(t, ad::square(t.param(x)))); },
                                           {&x});
            CHECK(res.max_rel_err < kTol);
        };
        run([](Tape<double>&, Var<double> v) { return ad::relu(v); });
        run([](Tape<double>&, Var<double> v) { return ad::leaky_relu(v, 0.2); });
        run([](Tape<double>&, Var<double> v) { return ad::tanh_op(v); });
        run([](Tape<double>&, Var<double> v) { return ad::sigmoid(v); });
        run([](Tape<double>&, Var<double> v) { return ad::square(v); });
        run([](Tape<double>&, Var<double> v) { return ad::affine(v, 1.7, -0.4); });
        run([](Tape<double>&, Var<double> v) { return ad::log_clamped(ad::affine(v, 1.0, 0.5)); });
        run([](Tape<double>&, Var<double> v) { return ad::log_sigmoid_clamped(v); });
    }
}

TEST_CASE("gradcheck: binary elementwise") {
    for (int trial = 0; trial < kTrials; ++trial) {
        Parameter<double> a("a", random_signed(Shape{2, 5}, 2000 + std::uint64_t(trial)));
        Parameter<double> b("b", random_signed(Shape{2, 5}, 2500 + std::uint64_t(trial)));
        for (int op = 0; op < 3; ++op) {
            auto res = ad::check_gradients(
                [&](Tape<double>& t) {
                    auto va = t.param(a), vb = t.param(b);
                    auto y = op == 0 ? ad::add(va, vb) : op == 1 ? ad::sub(va, vb) : ad::mul(va, vb);
                    return ad::sum_all(ad::square(y));
                },
                {&a, &b});
            CHECK(res.max_rel_err < kTol);
        }
    }
}

TEST_CASE("gradcheck: movement and reductions") {
    for (int trial = 0; trial < kTrials; ++trial) {
        Parameter<double> x("x", random_signed(Shape{2, 3, 4}, 3000 + std::uint64_t(trial)));
        auto r1 = ad::check_gradients(
            [&](Tape<double>& t) { return ad::sum_all(ad::square(ad::reshape(t.param(x), Shape{6, 4}))); }, {&x});
        CHECK(r1.max_rel_err < kTol);
        auto r2 = ad::check_gradients(
            [&](Tape<double>& t) { return ad::sum_all(ad::square(ad::transpose_hw(t.param(x)))); }, {&x});
        CHECK(r2.max_rel_err < kTol);
        auto r3 = ad::check_gradients([&](Tape<double>& t) { return ad::mean_all(ad::square(t.param(x))); }, {&x});
        CHECK(r3.max_rel_err < kTol);
        auto r4 = ad::check_gradients([&](Tape<double>& t) { return ad::max_all(t.param(x)); }, {&x});
        CHECK(r4.max_rel_err < kTol);
        Parameter<double> m("m", random_signed(Shape{3, 5}, 3500 + std::uint64_t(trial)));
        auto r5 = ad::check_gradients(
            [&](Tape<double>& t) {
                return ad::sum_all(ad::square(ad::gather_cols(t.param(m), {4, 0, 0, 2})));
            },
            {&m});
        CHECK(r5.max_rel_err < kTol);
    }
}

TEST_CASE("gradcheck: linear") {
    for (int trial = 0; trial < kTrials; ++trial) {
        Parameter<double> x("x", random_signed(Shape{3, 4}, 4000 + std::uint64_t(trial)));
        Parameter<double> w("w", random_signed(Shape{2, 4}, 4100 + std::uint64_t(trial)));
        Parameter<double> b("b", random_signed(Shape{2}, 4200 + std::uint64_t(trial)));
        auto res = ad::check_gradients(
            [&](Tape<double>& t) { return ad::sum_all(ad::square(ad::linear(t.param(x), t.param(w), t.param(b)))); },
            {&x, &w, &b});
        CHECK(res.max_rel_err < kTol);
    }
}

TEST_CASE("gradcheck: conv2d stride/pad variants") {
    for (int trial = 0; trial < kTrials; ++trial) {
        Parameter<double> x("x", random_signed(Shape{2, 2, 5, 5}, 5000 + std::uint64_t(trial)));
        Parameter<double> w("w", random_signed(Shape{3, 2, 3, 3}, 5100 + std::uint64_t(trial)));
        Parameter<double> b("b", random_signed(Shape{3}, 5200 + std::uint64_t(trial)));
        for (auto [stride, pad] : {std::pair{1, 1}, std::pair{2, 0}, std::pair{2, 1}}) {
            auto res = ad::check_gradients(
                [&, stride, pad](Tape<double>& t) {
                    return ad::sum_all(ad::square(ad::conv2d(t.param(x), t.param(w), t.param(b), stride, pad)));
                },
                {&x, &w, &b});
            CHECK(res.max_rel_err < kTol);
        }
    }
}

TEST_CASE("gradcheck: conv_transpose2d stride variants") {
    for (int trial = 0; trial < kTrials; ++trial) {
        Parameter<double> x("x", random_signed(Shape{2, 3, 3, 3}, 6000 + std::uint64_t(trial)));
        Parameter<double> w("w", random_signed(Shape{3, 2, 3, 3}, 6100 + std::uint64_t(trial)));
        Parameter<double> b("b", random_signed(Shape{2}, 6200 + std::uint64_t(trial)));
        for (auto [stride, pad] : {std::pair{1, 0}, std::pair{2, 1}}) {
            auto res = ad::check_gradients(
                [&, stride, pad](Tape<double>& t) {
                    return ad::sum_all(ad::square(ad::conv_transpose2d(t.param(x), t.param(w), t.param(b), stride, pad)));
                },
                {&x, &w, &b});
            CHECK(res.max_rel_err < kTol);
        }
    }
}

TEST_CASE("conv_transpose2d stride-2 output size and scatter values") {
    Tape<double> t;
    auto x = t.input(TensorND<double>(Shape{1, 1, 2, 2}, {1, 2, 3, 4}));
    Parameter<double> w("w", TensorND<double>::full(Shape{1, 1, 2, 2}, 1.0));
    Parameter<double> b("b", TensorND<double>::zeros(Shape{1}));
    auto y = ad::conv_transpose2d(x, t.param(w), t.param(b), 2, 0);
    CHECK(y.shape() == Shape{1, 1, 4, 4});
    // Each input pixel paints a disjoint 2x2 block with its value.
    CHECK(y.val() == std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
}

TEST_CASE("gradcheck: pooling and upsampling") {
    for (int trial = 0; trial < kTrials; ++trial) {
        Parameter<double> x("x", random_signed(Shape{2, 2, 4, 4}, 7000 + std::uint64_t(trial)));
        auto r1 = ad::check_gradients(
            [&](Tape<double>& t) { return ad::sum_all(ad::square(ad::maxpool2d(t.param(x), 2, 2))); }, {&x});
        CHECK(r1.max_rel_err < kTol);
        auto r2 = ad::check_gradients(
            [&](Tape<double>& t) { return ad::sum_all(ad::square(ad::avgpool2d(t.param(x), 2, 2))); }, {&x});
        CHECK(r2.max_rel_err < kTol);
        auto r3 = ad::check_gradients(
            [&](Tape<double>& t) { return ad::sum_all(ad::square(ad::upsample_nearest2(t.param(x), 2))); }, {&x});
        CHECK(r3.max_rel_err < kTol);
    }
}

TEST_CASE("upsample_nearest2 repeats pixels") {
    Tape<double> t;
    auto y = ad::upsample_nearest2(t.input(TensorND<double>(Shape{1, 1, 2, 2}, {1, 2, 3, 4})), 2);
    CHECK(y.val() == std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
}

TEST_CASE("gradcheck: normalization layers") {
    // The probe weights r break the symmetry of the normalized output; a bare
    // sum of squares of normalized values does not depend on x at all.
    for (int trial = 0; trial < kTrials; ++trial) {
        Parameter<double> x("x", TensorND<double>::uniform(Shape{3, 2, 4, 4}, -2, 2, 8000 + std::uint64_t(trial)));
        Parameter<double> g("g", TensorND<double>::uniform(Shape{2}, 0.5, 1.5, 8100 + std::uint64_t(trial)));
        Parameter<double> be("be", TensorND<double>::uniform(Shape{2}, -0.5, 0.5, 8200 + std::uint64_t(trial)));
        const auto probe = TensorND<double>::uniform(Shape{3, 2, 4, 4}, -1, 1, 8300 + std::uint64_t(trial));
        auto loss_of = [&](Tape<double>& t, Var<double> y) { return ad::sum_all(ad::square(ad::mul(y, t.input(probe)))); };
        auto r1 = ad::check_gradients(
            [&](Tape<double>& t) {
                return loss_of(t, ad::batch_norm(t.param(x), t.param(g), t.param(be), nullptr, nullptr, true));
            },
            {&x, &g, &be});
        CHECK(r1.max_rel_err < kTol);
        auto r2 = ad::check_gradients(
            [&](Tape<double>& t) { return loss_of(t, ad::instance_norm(t.param(x), t.param(g), t.param(be))); },
            {&x, &g, &be});
        CHECK(r2.max_rel_err < kTol);
        auto r3 = ad::check_gradients(
            [&](Tape<double>& t) { return loss_of(t, ad::layer_norm(t.param(x), t.param(g), t.param(be))); },
            {&x, &g, &be});
        CHECK(r3.max_rel_err < kTol);
    }
}

TEST_CASE("batch_norm eval mode uses running statistics") {
    nn::BatchNorm2d<double> bn("bn", 1);
    bn.running_mean.data[0] = 2.0;
    bn.running_var.data[0] = 4.0;
    Tape<double> t;
    auto x = t.input(TensorND<double>(Shape{1, 1, 1, 2}, {2.0, 4.0}));
    auto y = bn(t, x, /*training=*/false);
    CHECK(y.val()[0] == doctest::Approx(0.0));
    CHECK(y.val()[1] == doctest::Approx(2.0 / std::sqrt(4.0 + 1e-5)));
}

TEST_CASE("batch_norm running statistics blend with momentum 0.1") {
    nn::BatchNorm2d<double> bn("bn", 1);
    Tape<double> t;
    auto x = t.input(TensorND<double>(Shape{1, 1, 1, 4}, {1, 2, 3, 4}));
    (void)bn(t, x, /*training=*/true);
    // batch mean 2.5, biased variance 1.25
    CHECK(bn.running_mean.data[0] == doctest::Approx(0.9 * 0.0 + 0.1 * 2.5));
    CHECK(bn.running_var.data[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 1.25));
}

TEST_CASE("gradcheck: log_softmax") {
    for (int trial = 0; trial < kTrials; ++trial) {
        Parameter<double> x("x", random_signed(Shape{4, 5}, 9000 + std::uint64_t(trial)));
        auto res = ad::check_gradients(
            [&](Tape<double>& t) {
                return ad::sum_all(ad::mul(ad::log_softmax(t.param(x)), ad::tanh_op(t.param(x))));
            },
            {&x});
        CHECK(res.max_rel_err < kTol);
    }
}

TEST_CASE("gradcheck: spectral ops") {
    for (int trial = 0; trial < kTrials; ++trial) {
        Parameter<double> x("x", random_signed(Shape{2, 1, 4, 4}, 10000 + std::uint64_t(trial)));
        auto r1 = ad::check_gradients(
            [&](Tape<double>& t) { return ad::sum_all(ad::square(ad::dft2_op(t.param(x)))); }, {&x});
        CHECK(r1.max_rel_err < kTol);
        const auto lp = spectral::low_pass_mask(4, 4, 2);
        auto r2 = ad::check_gradients(
            [&](Tape<double>& t) { return ad::sum_all(ad::square(ad::mul_mask2d(ad::dft2_op(t.param(x)), lp, 4, 4))); },
            {&x});
        CHECK(r2.max_rel_err < kTol);
        auto r3 = ad::check_gradients(
            [&](Tape<double>& t) { return ad::neg_max_mag_mean(ad::dft2_op(t.param(x))); }, {&x});
        CHECK(r3.max_rel_err < kTol);
    }
}

TEST_CASE("dft2_op forward matches the spectral-module transform") {
    auto img = TensorND<double>::uniform(Shape{1, 1, 8, 8}, -1, 1, 123);
    Tape<double> t;
    auto spec = ad::dft2_op(t.input(img));
    CHECK(spec.shape() == Shape{1, 1, 2, 8, 8});
    TensorND<double> plane(Shape{8, 8});
    std::copy(img.data.begin(), img.data.end(), plane.data.begin());
    auto oracle = spectral::dft2(plane);
    for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c) {
            CHECK(spec.val()[std::size_t(r) * 8 + c] == doctest::Approx(oracle.at(r, c).real()).epsilon(1e-9));
            CHECK(spec.val()[64 + std::size_t(r) * 8 + c] == doctest::Approx(oracle.at(r, c).imag()).epsilon(1e-9));
        }
}

TEST_CASE("gradcheck: squared maximum mean discrepancy") {
    for (int trial = 0; trial < kTrials; ++trial) {
        Parameter<double> x("x", random_signed(Shape{4, 3}, 11000 + std::uint64_t(trial)));
        Parameter<double> y("y", random_signed(Shape{5, 3}, 11100 + std::uint64_t(trial)));
        auto res = ad::check_gradients([&](Tape<double>& t) { return ad::mmd2(t.param(x), t.param(y), 1.3); }, {&x, &y});
        CHECK(res.max_rel_err < kTol);
    }
}

TEST_CASE("mmd2 of a distribution against itself is zero") {
    Tape<double> t;
    auto x = t.input(TensorND<double>::uniform(Shape{6, 4}, -1, 1, 9));
    auto v = ad::mmd2(x, x, 1.0);
    CHECK(std::abs(v.scalar()) < 1e-12);
}

// ==== Adam =================================================================

TEST_CASE("adam leaves parameters unchanged under zero gradients") {
    Parameter<float> p("p", TensorND<float>::uniform(Shape{4}, -1, 1, 3));
    auto before = p.value.data;
    Adam<float> opt({&p}, {.lr = 1e-3});
    opt.zero_grad();
    opt.step();
    CHECK(p.value.data == before);
}

TEST_CASE("adam per-step displacement approaches the learning rate under constant gradient") {
    Parameter<double> p("p", TensorND<double>(Shape{1}, {0.0}));
    AdamConfig cfg{.lr = 1e-3};
    Adam<double> opt({&p}, cfg);
    double prev = 0.0, delta = 0.0;
    for (int i = 0; i < 500; ++i) {
        p.grad.data[0] = 0.3;
        opt.step();
        delta = std::abs(p.value.data[0] - prev);
        prev = p.value.data[0];
    }
    CHECK(delta == doctest::Approx(cfg.lr).epsilon(0.01));
}

TEST_CASE("identical seeds give bit-identical training trajectories") {
    auto run = [] {
        nn::Linear<float> fc("fc", 3, 2, 42);
        std::vector<Parameter<float>*> ps;
        fc.collect(ps);
        Adam<float> opt(ps, {.lr = 1e-2});
        auto x = TensorND<float>::uniform(Shape{4, 3}, -1, 1, 17);
        for (int step = 0; step < 5; ++step) {
            Tape<float> t;
            auto loss = ad::sum_all(ad::square(fc(t, t.input(x))));
            opt.zero_grad();
            t.backward(loss);
            opt.step();
        }
        return std::pair{fc.w.value.data, fc.b.value.data};
    };
    auto a = run(), b = run();
    CHECK(a.first == b.first);
    CHECK(a.second == b.second);
}

TEST_CASE("kaiming fan-in bound holds") {
    nn::Conv2d<float> conv("c", 4, 8, 3, 1, 1, 5);
    const float bound = std::sqrt(6.0f / (4 * 3 * 3));
    for (float v : conv.w.value.data) {
        CHECK(v <= bound);
        CHECK(v >= -bound);
    }
    for (float v : conv.b.value.data) CHECK(v == 0.0f);
}
