#pragma once

// Central finite-difference validation sweep over every differentiable op and
// the four fingerprint loss terms. Shared by the CLI `gradcheck` command and
// the acceptance suite: both need one named max-relative-error per op.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "gmparse/fingerprint.hpp"
#include "gmparse/ops.hpp"

namespace gmparse {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;  // worst element over all trials
};

namespace gradcheck_detail {

// Uniform magnitudes bounded away from zero, random signs: keeps kinked ops
// (ReLU, leaky ReLU, max) at differentiable points.
inline TensorND<double> signed_uniform(const Shape& s, std::uint64_t seed) {
    auto t = TensorND<double>::uniform(s, 0.15, 1.0, seed);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    for (auto& v : t.data)
        if (rng() & 1) v = -v;
    return t;
}

}  // namespace gradcheck_detail

// Runs `trials` random restarts of each check and keeps the worst relative
// error. 64-bit throughout; runtime is a few seconds at the default budget.
inline std::vector<GradCheckEntry> gradcheck_suite(int trials = 5, std::uint64_t seed = 77) {
    using ad::Parameter;
    using ad::Tape;
    using ad::Var;
    using gradcheck_detail::signed_uniform;
    if (trials < 1) throw ValueError("gradcheck_suite: need at least one trial");

    std::vector<GradCheckEntry> out;
    // `fn(trial_seed)` builds fresh parameters and returns one check's error.
    auto run = [&](const std::string& name, auto&& fn) {
        GradCheckEntry e{name, 0.0};
        for (int trial = 0; trial < trials; ++trial)
            e.max_rel_err = std::max(e.max_rel_err, fn(seed + std::uint64_t(trial) * 1000003ull));
        out.push_back(std::move(e));
    };

    // --- elementwise unaries (probe product breaks even symmetry) ---
    auto unary = [&](const std::string& name, auto&& op) {
        run(name, [&](std::uint64_t s) {
            Parameter<double> x("x", signed_uniform(Shape{3, 4}, s));
            const auto probe = signed_uniform(Shape{3, 4}, s + 7);
            return ad::check_gradients(
                       [&](Tape<double>& t) { return ad::sum_all(ad::mul(op(t.param(x)), t.input(probe))); }, {&x})
                .max_rel_err;
        });
    };
    unary("relu", [](Var<double> v) { return ad::relu(v); });
    unary("leaky_relu", [](Var<double> v) { return ad::leaky_relu(v, 0.2); });
    unary("tanh", [](Var<double> v) { return ad::tanh_op(v); });
    unary("sigmoid", [](Var<double> v) { return ad::sigmoid(v); });
    unary("square", [](Var<double> v) { return ad::square(v); });
    unary("neg", [](Var<double> v) { return ad::neg(v); });
    unary("scale", [](Var<double> v) { return ad::scale(v, 1.7); });
    unary("affine", [](Var<double> v) { return ad::affine(v, 1.7, -0.4); });
    unary("log_clamped", [](Var<double> v) { return ad::log_clamped(ad::affine(ad::square(v), 1.0, 0.5)); });
    unary("log_sigmoid_clamped", [](Var<double> v) { return ad::log_sigmoid_clamped(v); });

    // --- binary elementwise ---
    auto binary = [&](const std::string& name, auto&& op) {
        run(name, [&](std::uint64_t s) {
            Parameter<double> a("a", signed_uniform(Shape{2, 5}, s));
            Parameter<double> b("b", signed_uniform(Shape{2, 5}, s + 11));
            const auto probe = signed_uniform(Shape{2, 5}, s + 13);
            return ad::check_gradients(
                       [&](Tape<double>& t) {
                           return ad::sum_all(ad::mul(op(t.param(a), t.param(b)), t.input(probe)));
                       },
                       {&a, &b})
                .max_rel_err;
        });
    };
    binary("add", [](Var<double> a, Var<double> b) { return ad::add(a, b); });
    binary("sub", [](Var<double> a, Var<double> b) { return ad::sub(a, b); });
    binary("mul", [](Var<double> a, Var<double> b) { return ad::mul(a, b); });

    // --- movement ---
    run("reshape", [&](std::uint64_t s) {
        Parameter<double> x("x", signed_uniform(Shape{2, 3, 4}, s));
        const auto probe = signed_uniform(Shape{6, 4}, s + 7);
        return ad::check_gradients(
                   [&](Tape<double>& t) {
                       return ad::sum_all(ad::mul(ad::reshape(t.param(x), Shape{6, 4}), t.input(probe)));
                   },
                   {&x})
            .max_rel_err;
    });
    run("transpose_hw", [&](std::uint64_t s) {
        Parameter<double> x("x", signed_uniform(Shape{2, 3, 4, 4}, s));
        const auto probe = signed_uniform(Shape{2, 3, 4, 4}, s + 7);
        return ad::check_gradients(
                   [&](Tape<double>& t) { return ad::sum_all(ad::mul(ad::transpose_hw(t.param(x)), t.input(probe))); },
                   {&x})
            .max_rel_err;
    });
    run("gather_cols", [&](std::uint64_t s) {
        Parameter<double> x("x", signed_uniform(Shape{3, 5}, s));
        const auto probe = signed_uniform(Shape{3, 4}, s + 7);
        return ad::check_gradients(
                   [&](Tape<double>& t) {
                       return ad::sum_all(ad::mul(ad::gather_cols(t.param(x), {4, 0, 0, 2}), t.input(probe)));
                   },
                   {&x})
            .max_rel_err;
    });

    // --- reductions ---
    run("sum_all", [&](std::uint64_t s) {
        Parameter<double> x("x", signed_uniform(Shape{2, 3, 4}, s));
        return ad::check_gradients([&](Tape<double>& t) { return ad::sum_all(ad::square(t.param(x))); }, {&x})
            .max_rel_err;
    });
    run("mean_all", [&](std::uint64_t s) {
        Parameter<double> x("x", signed_uniform(Shape{2, 3, 4}, s));
        return ad::check_gradients([&](Tape<double>& t) { return ad::mean_all(ad::square(t.param(x))); }, {&x})
            .max_rel_err;
    });
    run("max_all", [&](std::uint64_t s) {
        Parameter<double> x("x", signed_uniform(Shape{2, 3, 4}, s));
        return ad::check_gradients([&](Tape<double>& t) { return ad::max_all(t.param(x)); }, {&x}).max_rel_err;
    });

    // --- dense / convolution / resampling ---
    run("linear", [&](std::uint64_t s) {
        Parameter<double> x("x", signed_uniform(Shape{3, 4}, s));
        Parameter<double> w("w", signed_uniform(Shape{2, 4}, s + 1));
        Parameter<double> b("b", signed_uniform(Shape{2}, s + 2));
        return ad::check_gradients(
                   [&](Tape<double>& t) {
                       return ad::sum_all(ad::square(ad::linear(t.param(x), t.param(w), t.param(b))));
                   },
                   {&x, &w, &b})
            .max_rel_err;
    });
    for (auto [stride, pad] : {std::pair{1, 1}, std::pair{2, 0}, std::pair{2, 1}}) {
        run("conv2d_s" + std::to_string(stride) + "p" + std::to_string(pad), [&, stride, pad](std::uint64_t s) {
            Parameter<double> x("x", signed_uniform(Shape{2, 2, 5, 5}, s));
            Parameter<double> w("w", signed_uniform(Shape{3, 2, 3, 3}, s + 1));
            Parameter<double> b("b", signed_uniform(Shape{3}, s + 2));
            return ad::check_gradients(
                       [&](Tape<double>& t) {
                           return ad::sum_all(ad::square(ad::conv2d(t.param(x), t.param(w), t.param(b), stride, pad)));
                       },
                       {&x, &w, &b})
                .max_rel_err;
        });
    }
    for (auto [stride, pad] : {std::pair{1, 0}, std::pair{2, 1}}) {
        run("conv_transpose2d_s" + std::to_string(stride) + "p" + std::to_string(pad),
            [&, stride, pad](std::uint64_t s) {
                Parameter<double> x("x", signed_uniform(Shape{2, 3, 3, 3}, s));
                Parameter<double> w("w", signed_uniform(Shape{3, 2, 3, 3}, s + 1));
                Parameter<double> b("b", signed_uniform(Shape{2}, s + 2));
                return ad::check_gradients(
                           [&](Tape<double>& t) {
                               return ad::sum_all(
                                   ad::square(ad::conv_transpose2d(t.param(x), t.param(w), t.param(b), stride, pad)));
                           },
                           {&x, &w, &b})
                    .max_rel_err;
            });
    }
    run("maxpool2d", [&](std::uint64_t s) {
        Parameter<double> x("x", signed_uniform(Shape{2, 2, 4, 4}, s));
        return ad::check_gradients(
                   [&](Tape<double>& t) { return ad::sum_all(ad::square(ad::maxpool2d(t.param(x), 2, 2))); }, {&x})
            .max_rel_err;
    });
    run("avgpool2d", [&](std::uint64_t s) {
        Parameter<double> x("x", signed_uniform(Shape{2, 2, 4, 4}, s));
        return ad::check_gradients(
                   [&](Tape<double>& t) { return ad::sum_all(ad::square(ad::avgpool2d(t.param(x), 2, 2))); }, {&x})
            .max_rel_err;
    });
    run("upsample_nearest2", [&](std::uint64_t s) {
        Parameter<double> x("x", signed_uniform(Shape{2, 2, 4, 4}, s));
        const auto probe = signed_uniform(Shape{2, 2, 8, 8}, s + 7);
        return ad::check_gradients(
                   [&](Tape<double>& t) {
                       return ad::sum_all(ad::mul(ad::upsample_nearest2(t.param(x), 2), t.input(probe)));
                   },
                   {&x})
            .max_rel_err;
    });

    // --- normalizers (probe product: a bare sum of squares of normalized
    //     values is constant in x) ---
    auto normed = [&](const std::string& name, auto&& op) {
        run(name, [&](std::uint64_t s) {
            Parameter<double> x("x", TensorND<double>::uniform(Shape{3, 2, 4, 4}, -2, 2, s));
            Parameter<double> g("g", TensorND<double>::uniform(Shape{2}, 0.5, 1.5, s + 1));
            Parameter<double> be("be", TensorND<double>::uniform(Shape{2}, -0.5, 0.5, s + 2));
            const auto probe = TensorND<double>::uniform(Shape{3, 2, 4, 4}, -1, 1, s + 3);
            return ad::check_gradients(
                       [&](Tape<double>& t) {
                           return ad::sum_all(
                               ad::square(ad::mul(op(t, t.param(x), t.param(g), t.param(be)), t.input(probe))));
                       },
                       {&x, &g, &be})
                .max_rel_err;
        });
    };
    normed("batch_norm", [](Tape<double>&, Var<double> x, Var<double> g, Var<double> b) {
        return ad::batch_norm(x, g, b, nullptr, nullptr, true);
    });
    normed("instance_norm", [](Tape<double>&, Var<double> x, Var<double> g, Var<double> b) {
        return ad::instance_norm(x, g, b);
    });
    normed("layer_norm", [](Tape<double>&, Var<double> x, Var<double> g, Var<double> b) {
        return ad::layer_norm(x, g, b);
    });

    run("log_softmax", [&](std::uint64_t s) {
        Parameter<double> x("x", signed_uniform(Shape{4, 5}, s));
        return ad::check_gradients(
                   [&](Tape<double>& t) {
                       return ad::sum_all(ad::mul(ad::log_softmax(t.param(x)), ad::tanh_op(t.param(x))));
                   },
                   {&x})
            .max_rel_err;
    });

    // --- spectral ---
    run("dft2", [&](std::uint64_t s) {
        Parameter<double> x("x", signed_uniform(Shape{2, 1, 4, 4}, s));
        return ad::check_gradients(
                   [&](Tape<double>& t) { return ad::sum_all(ad::square(ad::dft2_op(t.param(x)))); }, {&x})
            .max_rel_err;
    });
    run("mul_mask2d", [&](std::uint64_t s) {
        Parameter<double> x("x", signed_uniform(Shape{2, 1, 4, 4}, s));
        const auto lp = spectral::low_pass_mask(4, 4, 2);
        return ad::check_gradients(
                   [&](Tape<double>& t) {
                       return ad::sum_all(ad::square(ad::mul_mask2d(ad::dft2_op(t.param(x)), lp, 4, 4)));
                   },
                   {&x})
            .max_rel_err;
    });
    run("neg_max_mag_mean", [&](std::uint64_t s) {
        Parameter<double> x("x", signed_uniform(Shape{2, 1, 4, 4}, s));
        return ad::check_gradients([&](Tape<double>& t) { return ad::neg_max_mag_mean(ad::dft2_op(t.param(x))); },
                                   {&x})
            .max_rel_err;
    });
    run("mmd2", [&](std::uint64_t s) {
        Parameter<double> x("x", signed_uniform(Shape{4, 3}, s));
        Parameter<double> y("y", signed_uniform(Shape{5, 3}, s + 1));
        return ad::check_gradients([&](Tape<double>& t) { return ad::mmd2(t.param(x), t.param(y), 1.3); }, {&x, &y})
            .max_rel_err;
    });

    // --- the four fingerprint constraints, each as a function of the
    //     fingerprint batch itself ---
    auto fingerprint_term = [&](const std::string& name, auto&& pick) {
        run(name, [&](std::uint64_t s) {
            Parameter<double> fp("fp", signed_uniform(Shape{2, 1, 8, 8}, s));
            return ad::check_gradients(
                       [&](Tape<double>& t) { return pick(fingerprint_loss(t.param(fp))); }, {&fp})
                .max_rel_err;
        });
    };
    fingerprint_term("fingerprint_magnitude",
                     [](const FingerprintLossTerms<double>& v) { return v.magnitude; });
    fingerprint_term("fingerprint_low_freq", [](const FingerprintLossTerms<double>& v) { return v.low_freq; });
    fingerprint_term("fingerprint_peak", [](const FingerprintLossTerms<double>& v) { return v.peak; });
    fingerprint_term("fingerprint_asymmetry",
                     [](const FingerprintLossTerms<double>& v) { return v.asymmetry; });

    return out;
}

}  // namespace gmparse
