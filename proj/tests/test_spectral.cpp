#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "gmparse/spectral.hpp"

using namespace gmparse;

namespace {

TensorND<double> random_image(int h, int w, std::uint64_t seed) {
    return TensorND<double>::uniform(Shape{h, w}, -1.0, 1.0, seed);
}

double spatial_energy(const TensorND<double>& x) {
    double e = 0;
    for (double v : x.data) e += v * v;
    return e;
}

double spectral_energy(const spectral::Spectrum<double>& s) {
    double e = 0;
    for (auto z : s.bins) e += std::norm(z);
    return e;
}

}  // namespace

// ==== forward transform ====================================================

TEST_CASE("constant image transforms to a single DC bin of value c*H*W") {
    const int h = 6, w = 4;
    const double c = 0.37;
    auto img = TensorND<double>::full(Shape{h, w}, c);
    auto s = spectral::dft2(img);
    for (int r = 0; r < h; ++r)
        for (int col = 0; col < w; ++col) {
            const double expect = (r == h / 2 && col == w / 2) ? c * h * w : 0.0;
            CHECK(std::abs(s.at(r, col) - std::complex<double>(expect, 0)) < 1e-9);
        }
}

TEST_CASE("single-pixel impulse has magnitude 1 at every bin") {
    for (auto [h, w] : {std::pair{8, 8}, std::pair{5, 7}}) {
        auto img = TensorND<double>::zeros(Shape{h, w});
        img.data[std::size_t(2) * w + 1] = 1.0;
        auto s = spectral::dft2(img);
        for (auto z : s.bins) CHECK(std::abs(z) == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("fast transform matches the brute-force oracle") {
    for (auto [h, w] : {std::pair{8, 8}, std::pair{4, 16}, std::pair{6, 6}, std::pair{5, 9}, std::pair{3, 8}}) {
        auto img = random_image(h, w, 100 + std::uint64_t(h) * w);
        auto fast = spectral::dft2(img);
        auto ref = spectral::dft2_reference(img);
        for (std::size_t i = 0; i < fast.bins.size(); ++i) CHECK(std::abs(fast.bins[i] - ref.bins[i]) < 1e-8);
    }
}

TEST_CASE("Parseval identity holds on random 8x8 images") {
    for (int trial = 0; trial < 20; ++trial) {
        auto img = random_image(8, 8, 7000 + std::uint64_t(trial));
        auto s = spectral::dft2(img);
        const double lhs = spatial_energy(img);
        const double rhs = spectral_energy(s) / (8.0 * 8.0);
        CHECK(std::abs(lhs - rhs) / std::max(lhs, 1.0) < 1e-6);
    }
}

TEST_CASE("linearity of the transform") {
    auto x = random_image(8, 8, 21), y = random_image(8, 8, 22);
    const double a = 1.7, b = -0.3;
    TensorND<double> z(Shape{8, 8});
    for (std::size_t i = 0; i < z.data.size(); ++i) z.data[i] = a * x.data[i] + b * y.data[i];
    auto sz = spectral::dft2(z), sx = spectral::dft2(x), sy = spectral::dft2(y);
    for (std::size_t i = 0; i < sz.bins.size(); ++i)
        CHECK(std::abs(sz.bins[i] - (a * sx.bins[i] + b * sy.bins[i])) < 1e-6);
}

TEST_CASE("real input gives Hermitian-symmetric unshifted spectrum") {
    const int h = 8, w = 8;
    auto img = random_image(h, w, 33);
    auto s = spectral::dft2(img);
    // Centered convention: bin (r,c) holds raw frequency (r - h/2, c - w/2);
    // Hermitian symmetry pairs (u,v) with (-u mod h, -v mod w).
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            const int u = r - h / 2, v = c - w / 2;
            const int ru = ((-u % h) + h) % h + h / 2, rv = ((-v % w) + w) % w + w / 2;
            const auto mate = s.at(ru % h, rv % w);
            CHECK(std::abs(s.at(r, c) - std::conj(mate)) < 1e-8);
        }
}

TEST_CASE("transform rejects degenerate inputs") {
    CHECK_THROWS_AS((void)spectral::dft2(TensorND<double>::zeros(Shape{1, 8})), ShapeError);
    CHECK_THROWS_AS((void)spectral::dft2(TensorND<double>::zeros(Shape{8})), ShapeError);
}

// ==== inverse transform ====================================================

TEST_CASE("round trip reconstructs the image") {
    for (auto [h, w] : {std::pair{8, 8}, std::pair{6, 10}, std::pair{5, 5}}) {
        auto img = random_image(h, w, 51 + std::uint64_t(h));
        auto back = spectral::idft2(spectral::dft2(img));
        for (std::size_t i = 0; i < img.data.size(); ++i) CHECK(std::abs(back.data[i] - img.data[i]) < 1e-6);
    }
}

TEST_CASE("zero spectrum inverts to zero image") {
    spectral::Spectrum<double> s(4, 4);
    auto img = spectral::idft2(s);
    for (double v : img.data) CHECK(v == 0.0);
}

TEST_CASE("DC-only spectrum inverts to a constant image v/(H*W)") {
    const int h = 4, w = 6;
    const double v = 3.6;
    spectral::Spectrum<double> s(h, w);
    s.at(h / 2, w / 2) = v;
    auto img = spectral::idft2(s);
    for (double p : img.data) CHECK(p == doctest::Approx(v / (h * w)).epsilon(1e-12));
}

TEST_CASE("non-Hermitian spectrum with large residue is rejected") {
    const int h = 4, w = 4;
    spectral::Spectrum<double> s(h, w);
    // A single off-center bin without its conjugate mate gives a complex image.
    s.at(1, 2) = {0.0, 5.0};
    CHECK_THROWS_AS((void)spectral::idft2(s), ValueError);
}

// ==== masks ================================================================

TEST_CASE("low-pass with full window is the identity") {
    auto img = random_image(6, 6, 77);
    auto s = spectral::dft2(img);
    auto lp = spectral::low_pass(s, 6);
    for (std::size_t i = 0; i < s.bins.size(); ++i) CHECK(lp.bins[i] == s.bins[i]);
}

TEST_CASE("low-pass k=1 keeps only the DC bin") {
    auto img = random_image(6, 6, 78);
    auto s = spectral::dft2(img);
    auto lp = spectral::low_pass(s, 1);
    for (int r = 0; r < 6; ++r)
        for (int c = 0; c < 6; ++c) {
            if (r == 3 && c == 3)
                CHECK(lp.at(r, c) == s.at(r, c));
            else
                CHECK(lp.at(r, c) == std::complex<double>(0, 0));
        }
}

TEST_CASE("4x4 all-ones spectrum, k=2: low-pass keeps 4 ones at rows/cols {1,2}") {
    spectral::Spectrum<double> s(4, 4);
    for (auto& z : s.bins) z = 1.0;
    auto lp = spectral::low_pass(s, 2);
    int kept = 0;
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c)
            if (lp.at(r, c) != std::complex<double>(0, 0)) {
                ++kept;
                CHECK((r == 1 || r == 2));
                CHECK((c == 1 || c == 2));
                CHECK(lp.at(r, c) == std::complex<double>(1, 0));
            }
    CHECK(kept == 4);
    auto hp = spectral::high_pass(s, 2);
    int survivors = 0;
    for (auto z : hp.bins) survivors += z != std::complex<double>(0, 0) ? 1 : 0;
    CHECK(survivors == 12);
}

TEST_CASE("high-pass with full window zeroes everything") {
    auto s = spectral::dft2(random_image(6, 6, 79));
    auto hp = spectral::high_pass(s, 6);
    for (auto z : hp.bins) CHECK(z == std::complex<double>(0, 0));
}

TEST_CASE("low-pass + high-pass reconstructs the spectrum bit-exactly") {
    for (int k = 1; k <= 8; ++k) {
        auto s = spectral::dft2(random_image(8, 8, 90 + std::uint64_t(k)));
        auto lp = spectral::low_pass(s, k), hp = spectral::high_pass(s, k);
        for (std::size_t i = 0; i < s.bins.size(); ++i) CHECK(lp.bins[i] + hp.bins[i] == s.bins[i]);
    }
}

TEST_CASE("masks are complementary and idempotent") {
    const auto m = spectral::low_pass_mask(8, 8, 3);
    int count = 0;
    for (auto v : m) count += v;
    CHECK(count == 9);
    auto s = spectral::dft2(random_image(8, 8, 91));
    auto lp2 = spectral::low_pass(spectral::low_pass(s, 3), 3);
    auto lp1 = spectral::low_pass(s, 3);
    for (std::size_t i = 0; i < s.bins.size(); ++i) CHECK(lp1.bins[i] == lp2.bins[i]);
    auto cross = spectral::high_pass(spectral::low_pass(s, 3), 3);
    for (auto z : cross.bins) CHECK(z == std::complex<double>(0, 0));
}

TEST_CASE("window indexing: 16x16 with k=6 spans rows/cols 5..10") {
    const auto m = spectral::low_pass_mask(16, 16, 6);
    for (int r = 0; r < 16; ++r)
        for (int c = 0; c < 16; ++c) {
            const bool inside = r >= 5 && r <= 10 && c >= 5 && c <= 10;
            CHECK(int(m[std::size_t(r) * 16 + c]) == (inside ? 1 : 0));
        }
}

TEST_CASE("mask rejects out-of-range window sizes") {
    CHECK_THROWS_AS((void)spectral::low_pass_mask(8, 8, 0), ValueError);
    CHECK_THROWS_AS((void)spectral::low_pass_mask(8, 8, 9), ValueError);
}

// ==== magnitude export =====================================================

TEST_CASE("magnitude image: zero spectrum, modulus, 3-4-5") {
    spectral::Spectrum<double> s(2, 2);
    auto zero = spectral::spectrum_magnitude_image(s, false);
    for (double v : zero.data) CHECK(v == 0.0);
    s.at(0, 0) = {-3.0, 0.0};
    s.at(1, 1) = {3.0, 4.0};
    auto img = spectral::spectrum_magnitude_image(s, false);
    // Normalized to [0,1]: the 3+4i bin has modulus 5 and becomes the peak.
    CHECK(img.data[0] == doctest::Approx(3.0 / 5.0));
    CHECK(img.data[3] == doctest::Approx(1.0));
}

// ==== randomized identity sweep ===========================================

TEST_CASE("1000-trial randomized spectral identities") {
    std::mt19937_64 rng(424242);
    const int sides[] = {4, 5, 8, 16};
    for (int trial = 0; trial < 1000; ++trial) {
        const int h = sides[rng() % 4], w = sides[rng() % 4];
        auto img = random_image(h, w, rng());
        auto s = spectral::dft2(img);
        const double lhs = spatial_energy(img);
        const double rhs = spectral_energy(s) / double(h * w);
        CHECK(std::abs(lhs - rhs) / std::max(lhs, 1.0) < 1e-6);
        auto back = spectral::idft2(s);
        double md = 0;
        for (std::size_t i = 0; i < img.data.size(); ++i) md = std::max(md, std::abs(back.data[i] - img.data[i]));
        CHECK(md < 1e-6);
        const int k = 1 + int(rng() % std::min(h, w));
        auto lp = spectral::low_pass(s, k), hp = spectral::high_pass(s, k);
        for (std::size_t i = 0; i < s.bins.size(); ++i) CHECK(lp.bins[i] + hp.bins[i] == s.bins[i]);
    }
}
