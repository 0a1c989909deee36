#pragma once

#include "gmparse/fingerprint.hpp"
#include "gmparse/gm_zoo.hpp"

// Transfer applications on top of the fingerprint extractor: genuine-vs-fake
// detection, closed-set source attribution, and a content-independence probe.
// Every head consumes fingerprints only, never raw images.

namespace gmparse::apps {

using ad::Tape;
using ad::Var;

namespace detail {

// -mean_n log p(class_n) for logits [N, K].
template <class T>
Var<T> cross_entropy(Tape<T>& t, Var<T> logits, const std::vector<int>& cls) {
    const int n = logits.shape()[0], k = logits.shape()[1];
    if (int(cls.size()) != n) throw ShapeError("cross_entropy: one label per row required");
    TensorND<T> onehot(Shape{n, k});
    for (int i = 0; i < n; ++i) {
        if (cls[std::size_t(i)] < 0 || cls[std::size_t(i)] >= k) throw ValueError("cross_entropy: label out of range");
        onehot.data[std::size_t(i) * k + cls[std::size_t(i)]] = T(1);
    }
    Var<T> ls = ad::log_softmax(logits);
    return ad::neg(ad::scale(ad::sum_all(ad::mul(ls, t.input(onehot))), T(1.0 / n)));
}

// Numerically stable softmax over logit values (no tape involved).
template <class T>
std::vector<std::vector<double>> softmax_rows(const TensorND<T>& logits) {
    const int n = logits.shape[0], k = logits.shape[1];
    std::vector<std::vector<double>> out(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(k)));
    for (int i = 0; i < n; ++i) {
        double mx = logits.data[std::size_t(i) * k];
        for (int j = 1; j < k; ++j) mx = std::max(mx, double(logits.data[std::size_t(i) * k + j]));
        double z = 0.0;
        for (int j = 0; j < k; ++j) {
            out[std::size_t(i)][std::size_t(j)] = std::exp(double(logits.data[std::size_t(i) * k + j]) - mx);
            z += out[std::size_t(i)][std::size_t(j)];
        }
        for (auto& v : out[std::size_t(i)]) v /= z;
    }
    return out;
}

template <class T>
TensorND<T> take_rows(const TensorND<T>& batch, const std::vector<int>& idx) {
    if (batch.shape.empty() || idx.empty()) throw ValueError("take_rows: empty batch or index list");
    const std::size_t row = batch.data.size() / std::size_t(batch.shape[0]);
    Shape s = batch.shape;
    s[0] = int(idx.size());
    TensorND<T> out(s);
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy_n(batch.data.begin() + std::size_t(idx[i]) * row, row, out.data.begin() + i * row);
    return out;
}

}  // namespace detail

// Procedural target renders standing in for camera images: the first half of
// the batch draws from the blobs family, the rest from stripes, each with its
// own derived seed.
inline TensorND<float> render_genuine(int n, int size, std::uint64_t seed) {
    if (n < 1) throw ValueError("render_genuine: need a positive count");
    const int nb = n / 2, ns = n - nb;
    TensorND<float> out(Shape{n, 1, size, size});
    const std::size_t row = std::size_t(size) * size;
    if (nb > 0) {
        const auto blobs = zoo::render_batch("blobs", zoo::draw_scenes("blobs", nb, derive_seed(seed, "genuine:blobs")), size);
        std::copy(blobs.data.begin(), blobs.data.end(), out.data.begin());
    }
    const auto stripes =
        zoo::render_batch("stripes", zoo::draw_scenes("stripes", ns, derive_seed(seed, "genuine:stripes")), size);
    std::copy(stripes.data.begin(), stripes.data.end(), out.data.begin() + std::size_t(nb) * row);
    return out;
}

// ==========================================================================
// Heads
// ==========================================================================

// Five convolutions and two fully connected layers over the fingerprint,
// producing genuine/fake logits.
template <class T>
struct DetectorHead {
    nn::Conv2d<T> c1, c2, c3, c4, c5;
    nn::Linear<T> f1, f2;

    DetectorHead() = default;
    DetectorHead(int in_channels, int h, int w, int channels, int hidden, std::uint64_t seed,
                 const std::string& name = "detector") {
        if (h % 4 != 0 || w % 4 != 0) throw ValueError("detector head: fingerprint sides must be divisible by 4");
        c1 = nn::Conv2d<T>(name + ".c1", in_channels, channels, 3, 1, 1, derive_seed(seed, name + ":c1"));
        c2 = nn::Conv2d<T>(name + ".c2", channels, channels, 3, 2, 1, derive_seed(seed, name + ":c2"));
        c3 = nn::Conv2d<T>(name + ".c3", channels, 2 * channels, 3, 1, 1, derive_seed(seed, name + ":c3"));
        c4 = nn::Conv2d<T>(name + ".c4", 2 * channels, 2 * channels, 3, 2, 1, derive_seed(seed, name + ":c4"));
        c5 = nn::Conv2d<T>(name + ".c5", 2 * channels, 2 * channels, 3, 1, 1, derive_seed(seed, name + ":c5"));
        const int flat = 2 * channels * (h / 4) * (w / 4);
        f1 = nn::Linear<T>(name + ".f1", flat, hidden, derive_seed(seed, name + ":f1"));
        f2 = nn::Linear<T>(name + ".f2", hidden, 2, derive_seed(seed, name + ":f2"));
    }

    // fingerprint [N, C, H, W] -> logits [N, 2]; class 1 = fake.
    Var<T> operator()(Tape<T>& t, Var<T> fingerprint) {
        auto x = ad::relu(c1(t, fingerprint));
        x = ad::relu(c2(t, x));
        x = ad::relu(c3(t, x));
        x = ad::relu(c4(t, x));
        x = ad::relu(c5(t, x));
        x = ad::reshape(x, Shape{x.shape()[0], x.shape()[1] * x.shape()[2] * x.shape()[3]});
        return f2(t, ad::relu(f1(t, x)));
    }

    std::vector<ad::Parameter<T>*> parameters() {
        std::vector<ad::Parameter<T>*> p;
        c1.collect(p);
        c2.collect(p);
        c3.collect(p);
        c4.collect(p);
        c5.collect(p);
        f1.collect(p);
        f2.collect(p);
        return p;
    }
    NamedTensors<T> tensors() {
        NamedTensors<T> t;
        c1.tensors(t);
        c2.tensors(t);
        c3.tensors(t);
        c4.tensors(t);
        c5.tensors(t);
        f1.tensors(t);
        f2.tensors(t);
        return t;
    }
};

// Two convolutions and two fully connected layers over the fingerprint,
// producing one logit per source class; the class count is fixed here.
template <class T>
struct AttributionHead {
    nn::Conv2d<T> c1, c2;
    nn::Linear<T> f1, f2;
    int classes = 0;

    AttributionHead() = default;
    AttributionHead(int in_channels, int h, int w, int n_classes, int channels, int hidden, std::uint64_t seed,
                    const std::string& name = "attribution")
        : classes(n_classes) {
        if (n_classes < 2) throw ValueError("attribution head: need at least two classes");
        if (h % 4 != 0 || w % 4 != 0) throw ValueError("attribution head: fingerprint sides must be divisible by 4");
        c1 = nn::Conv2d<T>(name + ".c1", in_channels, channels, 3, 2, 1, derive_seed(seed, name + ":c1"));
        c2 = nn::Conv2d<T>(name + ".c2", channels, 2 * channels, 3, 2, 1, derive_seed(seed, name + ":c2"));
        const int flat = 2 * channels * (h / 4) * (w / 4);
        f1 = nn::Linear<T>(name + ".f1", flat, hidden, derive_seed(seed, name + ":f1"));
        f2 = nn::Linear<T>(name + ".f2", hidden, n_classes, derive_seed(seed, name + ":f2"));
    }

    Var<T> operator()(Tape<T>& t, Var<T> fingerprint) {
        auto x = ad::relu(c1(t, fingerprint));
        x = ad::relu(c2(t, x));
        x = ad::reshape(x, Shape{x.shape()[0], x.shape()[1] * x.shape()[2] * x.shape()[3]});
        return f2(t, ad::relu(f1(t, x)));
    }

    std::vector<ad::Parameter<T>*> parameters() {
        std::vector<ad::Parameter<T>*> p;
        c1.collect(p);
        c2.collect(p);
        f1.collect(p);
        f2.collect(p);
        return p;
    }
    NamedTensors<T> tensors() {
        NamedTensors<T> t;
        c1.tensors(t);
        c2.tensors(t);
        f1.tensors(t);
        f2.tensors(t);
        return t;
    }
};

// ==========================================================================
// Genuine-vs-fake detector
// ==========================================================================

struct DetectorTrainConfig {
    int steps = 200;
    int batch = 16;
    double lr = 1e-3;
    FingerprintLossConfig fingerprint{};  // constraint weights, fake images only
    std::uint64_t seed = 0;
};

struct DetectorStepValues {
    double ce = 0.0;
    double fingerprint_total = 0.0;  // computed from the fake rows only
    double total = 0.0;
};

// Joint training of the extractor and the detector head: cross entropy on all
// images plus the fingerprint constraints evaluated on the fake rows only.
inline std::vector<DetectorStepValues> train_detector(Fen<float>& fen, DetectorHead<float>& head,
                                                      const TensorND<float>& genuine, const TensorND<float>& fake,
                                                      const DetectorTrainConfig& cfg) {
    if (genuine.shape.size() != 4 || fake.shape.size() != 4 || genuine.shape[0] < 1 || fake.shape[0] < 1)
        throw ValueError("train_detector: need non-empty genuine and fake image batches");
    const int ng = genuine.shape[0], nf = fake.shape[0];
    auto params = fen.parameters();
    for (auto* p : head.parameters()) params.push_back(p);
    Adam<float> opt(params, {.lr = cfg.lr});

    std::vector<DetectorStepValues> history;
    history.reserve(std::size_t(cfg.steps));
    for (int step = 0; step < cfg.steps; ++step) {
        std::mt19937_64 rng(derive_seed(cfg.seed, "detector:batch", std::uint64_t(step)));
        std::uniform_int_distribution<int> pick(0, ng + nf - 1);
        std::vector<int> gi, fi;
        for (int attempt = 0; attempt < 1000 && (gi.empty() || fi.empty()); ++attempt) {
            gi.clear();
            fi.clear();
            for (int b = 0; b < cfg.batch; ++b) {
                const int i = pick(rng);
                (i < ng ? gi : fi).push_back(i < ng ? i : i - ng);
            }
        }
        if (gi.empty() || fi.empty()) throw ValueError("train_detector: could not draw a mixed batch");

        Tape<float> t;
        auto xg = t.input(detail::take_rows(genuine, gi));
        auto xf = t.input(detail::take_rows(fake, fi));
        auto fpg = fen(t, xg, /*training=*/true);
        auto fpf = fen(t, xf, /*training=*/true);
        auto ce_g = detail::cross_entropy(t, head(t, fpg), std::vector<int>(gi.size(), 0));
        auto ce_f = detail::cross_entropy(t, head(t, fpf), std::vector<int>(fi.size(), 1));
        const float wg = float(gi.size()) / float(cfg.batch), wf = float(fi.size()) / float(cfg.batch);
        auto ce = ad::add(ad::scale(ce_g, wg), ad::scale(ce_f, wf));
        auto jf = fingerprint_loss(fpf, cfg.fingerprint);
        auto total = ad::add(ce, jf.total);
        t.backward(total);
        opt.step();

        DetectorStepValues v;
        v.ce = double(ce.val()[0]);
        v.fingerprint_total = double(jf.total.val()[0]);
        v.total = double(total.val()[0]);
        history.push_back(v);
    }
    return history;
}

// Fake-class probability per image, from running-statistics inference.
inline std::vector<double> detect(Fen<float>& fen, DetectorHead<float>& head, const TensorND<float>& images) {
    Tape<float> t;
    auto fp = fen(t, t.input(images), /*training=*/false);
    auto logits = head(t, fp);
    TensorND<float> vals(logits.shape(), logits.val());
    const auto probs = detail::softmax_rows(vals);
    std::vector<double> out(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) out[i] = probs[i][1];
    return out;
}

// ==========================================================================
// Closed-set attribution
// ==========================================================================

struct AttributionTrainConfig {
    int steps = 300;
    int batch = 16;
    double lr = 1e-3;
    std::uint64_t seed = 0;
};

// class_images[c] holds the training images of class c; the caller fixes the
// class order. Trains extractor and head jointly with cross entropy, drawing
// classes uniformly so unequal pools stay balanced.
inline std::vector<double> train_attribution(Fen<float>& fen, AttributionHead<float>& head,
                                             const std::vector<TensorND<float>>& class_images,
                                             const AttributionTrainConfig& cfg) {
    if (int(class_images.size()) != head.classes)
        throw ValueError("train_attribution: class count does not match the head");
    for (const auto& c : class_images)
        if (c.shape.size() != 4 || c.shape[0] < 1) throw ValueError("train_attribution: every class needs images");
    auto params = fen.parameters();
    for (auto* p : head.parameters()) params.push_back(p);
    Adam<float> opt(params, {.lr = cfg.lr});

    std::vector<double> history;
    history.reserve(std::size_t(cfg.steps));
    const int h = class_images[0].shape[2], w = class_images[0].shape[3];
    for (int step = 0; step < cfg.steps; ++step) {
        std::mt19937_64 rng(derive_seed(cfg.seed, "attribution:batch", std::uint64_t(step)));
        std::uniform_int_distribution<int> pick_class(0, head.classes - 1);
        TensorND<float> batch(Shape{cfg.batch, class_images[0].shape[1], h, w});
        std::vector<int> labels(std::size_t(cfg.batch));
        const std::size_t row = batch.data.size() / std::size_t(cfg.batch);
        for (int b = 0; b < cfg.batch; ++b) {
            const int c = pick_class(rng);
            std::uniform_int_distribution<int> pick_img(0, class_images[std::size_t(c)].shape[0] - 1);
            const int i = pick_img(rng);
            labels[std::size_t(b)] = c;
            std::copy_n(class_images[std::size_t(c)].data.begin() + std::size_t(i) * row, row,
                        batch.data.begin() + std::size_t(b) * row);
        }
        Tape<float> t;
        auto fp = fen(t, t.input(batch), /*training=*/true);
        auto ce = detail::cross_entropy(t, head(t, fp), labels);
        t.backward(ce);
        opt.step();
        history.push_back(double(ce.val()[0]));
    }
    return history;
}

struct AttributionResult {
    std::vector<int> label;
    std::vector<std::vector<double>> probs;  // rows sum to one
};

inline AttributionResult attribute(Fen<float>& fen, AttributionHead<float>& head, const TensorND<float>& images) {
    Tape<float> t;
    auto fp = fen(t, t.input(images), /*training=*/false);
    auto logits = head(t, fp);
    TensorND<float> vals(logits.shape(), logits.val());
    AttributionResult r;
    r.probs = detail::softmax_rows(vals);
    r.label.resize(r.probs.size());
    for (std::size_t i = 0; i < r.probs.size(); ++i)
        r.label[i] = int(std::max_element(r.probs[i].begin(), r.probs[i].end()) - r.probs[i].begin());
    return r;
}

// ==========================================================================
// Content-independence probe
// ==========================================================================

struct ProbeConfig {
    int steps = 200;
    int batch = 16;
    double lr = 1e-3;
    int channels = 8;
    int hidden = 32;
    std::uint64_t seed = 0;
};

struct ProbeReport {
    double accuracy = 0.0;
    int n = 0;                    // evaluation set size
    double half_width = 0.0;      // 1.96 * sqrt(0.25 / n)
    bool within_chance = false;   // |accuracy - 0.5| <= half_width
    std::vector<double> losses;   // probe-head training curve
};

// Freezes the extractor, trains a shallow attribution-style head to recover a
// binary content label from fingerprints, and reports held-out accuracy with
// its 95% binomial chance interval. A content-free fingerprint keeps the
// probe at chance level.
inline ProbeReport content_probe(Fen<float>& fen, const TensorND<float>& train_images,
                                 const std::vector<int>& train_labels, const TensorND<float>& eval_images,
                                 const std::vector<int>& eval_labels, const ProbeConfig& cfg) {
    if (train_images.shape.size() != 4 || int(train_labels.size()) != train_images.shape[0])
        throw ValueError("content_probe: one label per training image required");
    if (eval_images.shape.size() != 4 || int(eval_labels.size()) != eval_images.shape[0])
        throw ValueError("content_probe: one label per evaluation image required");
    for (int v : train_labels)
        if (v != 0 && v != 1) throw ValueError("content_probe: labels must be binary");

    // The extractor stays frozen: fingerprints become fixed inputs below.
    const auto fp_train = extract_fingerprint(fen, train_images);
    const auto fp_eval = extract_fingerprint(fen, eval_images);

    AttributionHead<float> head(fp_train.shape[1], fp_train.shape[2], fp_train.shape[3], 2, cfg.channels, cfg.hidden,
                                derive_seed(cfg.seed, "probe:init"), "probe");
    Adam<float> opt(head.parameters(), {.lr = cfg.lr});

    ProbeReport report;
    const int n_train = fp_train.shape[0];
    for (int step = 0; step < cfg.steps; ++step) {
        std::mt19937_64 rng(derive_seed(cfg.seed, "probe:batch", std::uint64_t(step)));
        std::uniform_int_distribution<int> pick(0, n_train - 1);
        std::vector<int> idx(std::size_t(cfg.batch));
        std::vector<int> labels(std::size_t(cfg.batch));
        for (int b = 0; b < cfg.batch; ++b) {
            idx[std::size_t(b)] = pick(rng);
            labels[std::size_t(b)] = train_labels[std::size_t(idx[std::size_t(b)])];
        }
        Tape<float> t;
        auto ce = detail::cross_entropy(t, head(t, t.input(detail::take_rows(fp_train, idx))), labels);
        t.backward(ce);
        opt.step();
        report.losses.push_back(double(ce.val()[0]));
    }

    Tape<float> t;
    auto logits = head(t, t.input(fp_eval));
    TensorND<float> vals(logits.shape(), logits.val());
    const auto probs = detail::softmax_rows(vals);
    int correct = 0;
    for (std::size_t i = 0; i < probs.size(); ++i)
        correct += (probs[i][1] > probs[i][0] ? 1 : 0) == eval_labels[i];
    report.n = int(probs.size());
    report.accuracy = double(correct) / report.n;
    report.half_width = 1.96 * std::sqrt(0.25 / report.n);
    report.within_chance = std::abs(report.accuracy - 0.5) <= report.half_width;
    return report;
}

}  // namespace gmparse::apps
