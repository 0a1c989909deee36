#pragma once

#include <cmath>
#include <complex>

#include "gmparse/tensor.hpp"

namespace gmparse::spectral {

// Centered 2-D Fourier spectrum. The DC bin sits at (h/2, w/2) (floor), i.e.
// the array stores shift(DFT(x)) for the unnormalized forward transform.
template <class T>
struct Spectrum {
    int h = 0, w = 0;
    std::vector<std::complex<T>> bins;  // row-major h*w

    Spectrum() = default;
    Spectrum(int h_, int w_) : h(h_), w(w_), bins(std::size_t(h_) * w_) {}

    std::complex<T>& at(int r, int c) { return bins[std::size_t(r) * w + c]; }
    const std::complex<T>& at(int r, int c) const { return bins[std::size_t(r) * w + c]; }
};

namespace detail {

inline bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

// Iterative radix-2 complex FFT along a contiguous line. sign=-1 forward,
// sign=+1 inverse (unscaled).
template <class T>
void fft_pow2(std::complex<T>* a, int n, int sign) {
    for (int i = 1, j = 0; i < n; ++i) {
        int bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (int len = 2; len <= n; len <<= 1) {
        const double ang = sign * 2.0 * M_PI / len;
        const std::complex<T> wl(T(std::cos(ang)), T(std::sin(ang)));
        for (int i = 0; i < n; i += len) {
            std::complex<T> w(1);
            for (int k = 0; k < len / 2; ++k) {
                std::complex<T> u = a[i + k];
                std::complex<T> v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wl;
            }
        }
    }
}

// Direct O(n^2) transform for non power-of-two lines. Also used as the test
// oracle against the fast path.
template <class T>
void dft_direct(const std::complex<T>* in, std::complex<T>* out, int n, int sign) {
    for (int k = 0; k < n; ++k) {
        std::complex<double> acc(0, 0);
        for (int t = 0; t < n; ++t) {
            const double ang = sign * 2.0 * M_PI * double(k) * double(t) / double(n);
            acc += std::complex<double>(in[t].real(), in[t].imag()) *
                   std::complex<double>(std::cos(ang), std::sin(ang));
        }
        out[k] = std::complex<T>(T(acc.real()), T(acc.imag()));
    }
}

template <class T>
void transform_line(std::complex<T>* a, int n, int sign) {
    if (is_pow2(n)) {
        fft_pow2(a, n, sign);
    } else {
        std::vector<std::complex<T>> tmp(a, a + n);
        dft_direct(tmp.data(), a, n, sign);
    }
}

// Row-column 2-D transform in place, unnormalized.
template <class T>
void transform2(std::vector<std::complex<T>>& a, int h, int w, int sign) {
    for (int r = 0; r < h; ++r) transform_line(a.data() + std::size_t(r) * w, w, sign);
    std::vector<std::complex<T>> col(h);
    for (int c = 0; c < w; ++c) {
        for (int r = 0; r < h; ++r) col[r] = a[std::size_t(r) * w + c];
        transform_line(col.data(), h, sign);
        for (int r = 0; r < h; ++r) a[std::size_t(r) * w + c] = col[r];
    }
}

}  // namespace detail

// Brute-force reference DFT used by tests; O(H^2 W^2), never called from the
// training path.
template <class T>
Spectrum<T> dft2_reference(const TensorND<T>& img) {
    const int h = img.shape[img.shape.size() - 2];
    const int w = img.shape[img.shape.size() - 1];
    Spectrum<T> out(h, w);
    for (int u = 0; u < h; ++u) {
        for (int v = 0; v < w; ++v) {
            std::complex<double> acc(0, 0);
            for (int n = 0; n < h; ++n)
                for (int m = 0; m < w; ++m) {
                    const double ang = -2.0 * M_PI * (double(u) * n / h + double(v) * m / w);
                    acc += double(img.data[std::size_t(n) * w + m]) *
                           std::complex<double>(std::cos(ang), std::sin(ang));
                }
            out.at((u + h / 2) % h, (v + w / 2) % w) = std::complex<T>(T(acc.real()), T(acc.imag()));
        }
    }
    return out;
}

// Forward transform of a real H x W image, DC shifted to (h/2, w/2).
template <class T>
Spectrum<T> dft2(const TensorND<T>& img) {
    if (img.shape.size() != 2) throw ShapeError("dft2: input must be 2-D, got " + shape_str(img.shape));
    const int h = img.shape[img.shape.size() - 2];
    const int w = img.shape[img.shape.size() - 1];
    if (h < 2 || w < 2) throw ShapeError("dft2: image sides must be >= 2, got " + shape_str(img.shape));
    std::vector<std::complex<T>> a(std::size_t(h) * w);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::complex<T>(img.data[i], T(0));
    detail::transform2(a, h, w, -1);
    Spectrum<T> out(h, w);
    for (int u = 0; u < h; ++u)
        for (int v = 0; v < w; ++v)
            out.at((u + h / 2) % h, (v + w / 2) % w) = a[std::size_t(u) * w + v];
    return out;
}

// Inverse transform back to a real image. The imaginary residue is measured
// relative to the largest component magnitude; inputs that are not close to
// Hermitian-symmetric are rejected.
template <class T>
TensorND<T> idft2(const Spectrum<T>& spec) {
    const int h = spec.h, w = spec.w;
    if (h < 2 || w < 2) throw ShapeError("idft2: empty spectrum");
    std::vector<std::complex<T>> a(std::size_t(h) * w);
    for (int u = 0; u < h; ++u)
        for (int v = 0; v < w; ++v)
            a[std::size_t(u) * w + v] = spec.at((u + h / 2) % h, (v + w / 2) % w);
    detail::transform2(a, h, w, +1);
    const T scale = T(1) / T(std::size_t(h) * w);
    T max_re = 0, max_im = 0;
    for (auto& z : a) {
        max_re = std::max(max_re, std::abs(z.real()));
        max_im = std::max(max_im, std::abs(z.imag()));
    }
    const T residue = max_im * scale / std::max(max_re * scale, T(1));
    if (residue > T(1e-4))
        throw ValueError("idft2: non-Hermitian spectrum, imaginary residue " + std::to_string(double(residue)));
    TensorND<T> out(Shape{h, w});
    for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = a[i].real() * scale;
    return out;
}

// 0/1 mask of the centered k x k window: rows h/2 - k/2 ... h/2 + (k+1)/2 - 1,
// same for columns.
inline std::vector<unsigned char> low_pass_mask(int h, int w, int k) {
    if (k < 1 || k > std::min(h, w))
        throw ValueError("low/high pass: k=" + std::to_string(k) + " out of range for " +
                         std::to_string(h) + "x" + std::to_string(w));
    std::vector<unsigned char> mask(std::size_t(h) * w, 0);
    const int r0 = h / 2 - k / 2, r1 = h / 2 + (k + 1) / 2;  // [r0, r1)
    const int c0 = w / 2 - k / 2, c1 = w / 2 + (k + 1) / 2;
    for (int r = r0; r < r1; ++r)
        for (int c = c0; c < c1; ++c) mask[std::size_t(r) * w + c] = 1;
    return mask;
}

template <class T>
Spectrum<T> low_pass(const Spectrum<T>& s, int k) {
    const auto mask = low_pass_mask(s.h, s.w, k);
    Spectrum<T> out(s.h, s.w);
    for (std::size_t i = 0; i < s.bins.size(); ++i)
        out.bins[i] = mask[i] ? s.bins[i] : std::complex<T>(0, 0);
    return out;
}

template <class T>
Spectrum<T> high_pass(const Spectrum<T>& s, int k) {
    const auto mask = low_pass_mask(s.h, s.w, k);
    Spectrum<T> out(s.h, s.w);
    for (std::size_t i = 0; i < s.bins.size(); ++i)
        out.bins[i] = mask[i] ? std::complex<T>(0, 0) : s.bins[i];
    return out;
}

// Per-bin magnitude (optionally log(1+|z|)), rescaled to [0,1] for export.
template <class T>
TensorND<T> spectrum_magnitude_image(const Spectrum<T>& s, bool log_scale) {
    TensorND<T> out(Shape{s.h, s.w});
    T peak = 0;
    for (std::size_t i = 0; i < s.bins.size(); ++i) {
        T m = std::abs(s.bins[i]);
        if (log_scale) m = std::log1p(m);
        out.data[i] = m;
        peak = std::max(peak, m);
    }
    if (peak > 0)
        for (auto& v : out.data) v /= peak;
    return out;
}

}  // namespace gmparse::spectral
