#pragma once

#include "gmparse/nets.hpp"

// Fingerprint estimation: a residual-denoiser-shaped network maps an image to
// a same-size fingerprint map, trained without labels under four spectral
// objectives: keep overall magnitude small, suppress low-frequency content,
// reward a dominant high-frequency peak, and penalize spectral asymmetry.

namespace gmparse {

struct FenConfig {
    int in_channels = 1;
    int channels = 64;
    int blocks = 8;  // interior conv+BN+ReLU blocks between the stem and the output conv
};

template <class T>
struct Fen {
    FenConfig cfg;
    nn::Conv2d<T> stem1, stem2;
    std::vector<nn::Conv2d<T>> convs;
    std::vector<nn::BatchNorm2d<T>> bns;
    nn::Conv2d<T> out;

    Fen() = default;
    Fen(const FenConfig& c, std::uint64_t master_seed, const std::string& name = "fen") : cfg(c) {
        if (c.channels < 1 || c.blocks < 0 || c.in_channels < 1) throw ValueError("fen: bad config");
        stem1 = nn::Conv2d<T>(name + ".stem1", c.in_channels, c.channels, 3, 1, 1, derive_seed(master_seed, name + ".stem1"));
        stem2 = nn::Conv2d<T>(name + ".stem2", c.channels, c.channels, 3, 1, 1, derive_seed(master_seed, name + ".stem2"));
        for (int i = 0; i < c.blocks; ++i) {
            const std::string bname = name + ".block" + std::to_string(i);
            convs.emplace_back(bname + ".conv", c.channels, c.channels, 3, 1, 1, derive_seed(master_seed, bname + ".conv"));
            bns.emplace_back(bname + ".bn", c.channels);
        }
        out = nn::Conv2d<T>(name + ".out", c.channels, c.in_channels, 3, 1, 1, derive_seed(master_seed, name + ".out"));
    }

    // [N, C, H, W] -> fingerprint of the same shape.
    nn::Var<T> operator()(nn::Tape<T>& t, nn::Var<T> x, bool training, bool update_running = true) {
        auto h = ad::relu(stem1(t, x));
        h = ad::relu(stem2(t, h));
        for (std::size_t i = 0; i < convs.size(); ++i) h = ad::relu(bns[i](t, convs[i](t, h), training, update_running));
        return out(t, h);
    }

    std::vector<ad::Parameter<T>*> parameters() {
        std::vector<ad::Parameter<T>*> p;
        stem1.collect(p);
        stem2.collect(p);
        for (std::size_t i = 0; i < convs.size(); ++i) {
            convs[i].collect(p);
            bns[i].collect(p);
        }
        out.collect(p);
        return p;
    }
    NamedTensors<T> tensors() {
        NamedTensors<T> t;
        stem1.tensors(t);
        stem2.tensors(t);
        for (std::size_t i = 0; i < convs.size(); ++i) {
            convs[i].tensors(t);
            bns[i].tensors(t);
        }
        out.tensors(t);
        return t;
    }
};

// ---------------------------------------------------------------------------
// Spectral objectives
// ---------------------------------------------------------------------------

// Low-pass window side for an HxW image: round(50/128 * min(H, W)).
inline int default_low_pass_k(int h, int w) {
    return int(std::lround(50.0 / 128.0 * std::min(h, w)));
}

struct FingerprintLossConfig {
    double w_magnitude = 0.05;
    double w_low_freq = 0.001;
    double w_peak = 0.1;
    double w_asymmetry = 1.0;
    int k = 0;  // low-pass window side; 0 selects default_low_pass_k
};

template <class T>
struct FingerprintLossTerms {
    ad::Var<T> magnitude;  // mean over (N, C) of the sum of squared fingerprint values
    ad::Var<T> low_freq;   // mean squared-magnitude energy inside the low-pass window
    ad::Var<T> peak;       // negated largest high-pass bin magnitude (mean over N, C)
    ad::Var<T> asymmetry;  // mean squared distance between the spectrum and its transpose
    ad::Var<T> total;
};

// fp: fingerprint batch [N, C, H, W]. The asymmetry term requires H == W.
template <class T>
FingerprintLossTerms<T> fingerprint_loss(ad::Var<T> fp, const FingerprintLossConfig& cfg = {}) {
    const Shape& s = fp.shape();
    if (s.size() != 4) throw ShapeError("fingerprint_loss: need [N,C,H,W], got " + shape_str(s));
    const int N = s[0], C = s[1], H = s[2], W = s[3];
    if (H != W) throw ShapeError("fingerprint_loss: asymmetry term needs square images, got " + shape_str(s));
    const int k = cfg.k > 0 ? cfg.k : default_low_pass_k(H, W);
    const auto lp = spectral::low_pass_mask(H, W, k);
    auto hp = lp;
    for (auto& m : hp) m = m ? 0 : 1;
    const T inv_nc = T(1) / T(std::size_t(N) * C);

    FingerprintLossTerms<T> terms;
    terms.magnitude = ad::scale(ad::sum_all(ad::square(fp)), inv_nc);
    auto spec = ad::dft2_op(fp);  // [N, C, 2, H, W]
    terms.low_freq = ad::scale(ad::sum_all(ad::square(ad::mul_mask2d(spec, lp, H, W))), inv_nc);
    terms.peak = ad::neg_max_mag_mean(ad::mul_mask2d(spec, hp, H, W));
    terms.asymmetry = ad::scale(ad::sum_all(ad::square(ad::sub(spec, ad::transpose_hw(spec)))), inv_nc);
    terms.total = ad::add(ad::add(ad::scale(terms.magnitude, T(cfg.w_magnitude)), ad::scale(terms.low_freq, T(cfg.w_low_freq))),
                          ad::add(ad::scale(terms.peak, T(cfg.w_peak)), ad::scale(terms.asymmetry, T(cfg.w_asymmetry))));
    return terms;
}

struct FingerprintLossValues {
    double magnitude = 0, low_freq = 0, peak = 0, asymmetry = 0, total = 0;
};

// One optimizer step on an image batch; returns the loss values.
template <class T>
FingerprintLossValues fingerprint_train_step(Fen<T>& fen, Adam<T>& opt, const TensorND<T>& batch,
                                             const FingerprintLossConfig& cfg = {}) {
    ad::Tape<T> tape;
    auto x = tape.input(batch);
    auto fp = fen(tape, x, /*training=*/true);
    auto terms = fingerprint_loss(fp, cfg);
    opt.zero_grad();
    tape.backward(terms.total);
    opt.step();
    return {double(terms.magnitude.scalar()), double(terms.low_freq.scalar()), double(terms.peak.scalar()),
            double(terms.asymmetry.scalar()), double(terms.total.scalar())};
}

// Fingerprint of a batch without recording gradients (eval-mode statistics).
template <class T>
TensorND<T> extract_fingerprint(Fen<T>& fen, const TensorND<T>& batch) {
    ad::Tape<T> tape;
    auto x = tape.input(batch);
    auto fp = fen(tape, x, /*training=*/false);
    return TensorND<T>(fp.shape(), fp.val());
}

}  // namespace gmparse
