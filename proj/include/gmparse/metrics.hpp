#pragma once

#include <functional>
#include <numeric>
#include <random>
#include <utility>

#include "gmparse/parser_net.hpp"

// Evaluation metrics and reference baselines: per-parameter regression error,
// macro-averaged F1, ranking AUC, multi-image prediction aggregation,
// fingerprint similarity, occlusion saliency, and two chance baselines
// (label shuffling and uniform random guessing).

namespace gmparse::metrics {

// ==========================================================================
// Classification metrics
// ==========================================================================

inline double f1_from_counts(long tp, long fp, long fn) {
    if (tp + fp + fn == 0) throw ValueError("f1_from_counts: class has no support and no predictions");
    return 2.0 * double(tp) / double(2 * tp + fp + fn);
}

// Macro F1 over the classes that appear in the ground truth or the
// predictions; classes absent from both are left out of the mean, so a small
// evaluation set is not penalized for classes it cannot contain.
inline double macro_f1(const std::vector<int>& pred, const std::vector<int>& truth, int n_classes) {
    if (pred.size() != truth.size() || pred.empty()) throw ValueError("macro_f1: need matching non-empty label vectors");
    double sum = 0.0;
    int used = 0;
    for (int c = 0; c < n_classes; ++c) {
        long tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            if (pred[i] < 0 || pred[i] >= n_classes || truth[i] < 0 || truth[i] >= n_classes)
                throw ValueError("macro_f1: label out of range");
            tp += pred[i] == c && truth[i] == c;
            fp += pred[i] == c && truth[i] != c;
            fn += pred[i] != c && truth[i] == c;
        }
        if (tp + fp + fn == 0) continue;
        sum += f1_from_counts(tp, fp, fn);
        ++used;
    }
    if (used == 0) throw ValueError("macro_f1: no class has support or predictions");
    return sum / used;
}

// Per-flag binary F1 averaged over the flags that occur in the truth or the
// predictions (same inclusion rule as macro_f1).
template <std::size_t K>
double multilabel_macro_f1(const std::vector<std::array<int, K>>& pred, const std::vector<std::array<int, K>>& truth) {
    if (pred.size() != truth.size() || pred.empty())
        throw ValueError("multilabel_macro_f1: need matching non-empty flag sets");
    double sum = 0.0;
    int used = 0;
    for (std::size_t k = 0; k < K; ++k) {
        long tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            tp += pred[i][k] != 0 && truth[i][k] != 0;
            fp += pred[i][k] != 0 && truth[i][k] == 0;
            fn += pred[i][k] == 0 && truth[i][k] != 0;
        }
        if (tp + fp + fn == 0) continue;
        sum += f1_from_counts(tp, fp, fn);
        ++used;
    }
    if (used == 0) throw ValueError("multilabel_macro_f1: no flag has support or predictions");
    return sum / used;
}

// Rows are predicted classes, columns are ground-truth classes.
inline std::vector<std::vector<long>> confusion_matrix(const std::vector<int>& pred, const std::vector<int>& truth,
                                                       int n_classes) {
    if (pred.size() != truth.size()) throw ValueError("confusion_matrix: size mismatch");
    std::vector<std::vector<long>> m(std::size_t(n_classes), std::vector<long>(std::size_t(n_classes), 0));
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] < 0 || pred[i] >= n_classes || truth[i] < 0 || truth[i] >= n_classes)
            throw ValueError("confusion_matrix: label out of range");
        ++m[std::size_t(pred[i])][std::size_t(truth[i])];
    }
    return m;
}

// Mann-Whitney statistic: probability that a positive outscores a negative,
// ties counted half.
inline double mann_whitney_auc(const std::vector<double>& pos, const std::vector<double>& neg) {
    if (pos.empty() || neg.empty()) throw ValueError("mann_whitney_auc: need both positive and negative scores");
    double wins = 0.0;
    for (double p : pos)
        for (double n : neg) wins += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
    return wins / (double(pos.size()) * double(neg.size()));
}

// ==========================================================================
// Regression metrics and whole-prediction scoring
// ==========================================================================

template <std::size_t K>
std::array<double, K> per_param_l1(const std::vector<std::array<double, K>>& pred,
                                   const std::vector<std::array<double, K>>& truth) {
    if (pred.size() != truth.size() || pred.empty()) throw ValueError("per_param_l1: need matching non-empty rows");
    std::array<double, K> out{};
    for (std::size_t i = 0; i < pred.size(); ++i)
        for (std::size_t k = 0; k < K; ++k) out[k] += std::abs(pred[i][k] - truth[i][k]);
    for (auto& v : out) v /= double(pred.size());
    return out;
}

struct ParsingScores {
    std::array<double, kContinuousCount> l1{};
    double l1_mean = 0.0;      // mean of the per-parameter L1 errors
    double discrete_f1 = 0.0;  // mean over the 6 discrete heads of macro F1
    double fine_f1 = 0.0;      // multilabel macro F1 over the 8 fine flags
};

// Scores a batch of predictions (one per evaluated model) against ground
// truth; continuous targets are in normalized space.
inline ParsingScores score_predictions(const std::vector<PredictionRecord>& pred,
                                       const std::vector<std::array<double, kContinuousCount>>& cont_gt,
                                       const std::vector<ArchitectureTargets>& arch_gt,
                                       const std::vector<LossTargets>& loss_gt) {
    const std::size_t n = pred.size();
    if (n == 0 || cont_gt.size() != n || arch_gt.size() != n || loss_gt.size() != n)
        throw ValueError("score_predictions: size mismatch");
    ParsingScores s;
    std::vector<std::array<double, kContinuousCount>> cont_pred(n);
    for (std::size_t i = 0; i < n; ++i) cont_pred[i] = pred[i].continuous;
    s.l1 = per_param_l1(cont_pred, cont_gt);
    for (double v : s.l1) s.l1_mean += v;
    s.l1_mean /= kContinuousCount;

    for (int k = 0; k < kDiscreteCount; ++k) {
        std::vector<int> p(n), t(n);
        for (std::size_t i = 0; i < n; ++i) {
            p[i] = pred[i].discrete[std::size_t(k)];
            t[i] = arch_gt[i].discrete[std::size_t(k)];
        }
        s.discrete_f1 += macro_f1(p, t, kDiscreteCardinality[std::size_t(k)]);
    }
    s.discrete_f1 /= kDiscreteCount;

    std::vector<std::array<int, kFineTypeCount>> fp(n), ft(n);
    for (std::size_t i = 0; i < n; ++i) {
        fp[i] = pred[i].fine_flags;
        ft[i] = loss_gt[i].fine;
    }
    s.fine_f1 = multilabel_macro_f1(fp, ft);
    return s;
}

// ==========================================================================
// Aggregation of image-level predictions for one model
// ==========================================================================

// Continuous outputs and probabilities are averaged; categorical outputs take
// the majority vote with ties resolved toward the lower index.
inline PredictionRecord aggregate_predictions(const std::vector<PredictionRecord>& recs) {
    if (recs.empty()) throw ValueError("aggregate_predictions: empty input");
    PredictionRecord out;
    const double n = double(recs.size());
    for (const auto& r : recs) {
        for (int j = 0; j < kContinuousCount; ++j) out.continuous[std::size_t(j)] += r.continuous[std::size_t(j)] / n;
        for (int g = 0; g < kCoarseGroupCount; ++g) out.coarse[std::size_t(g)] += r.coarse[std::size_t(g)] / n;
        for (int m = 0; m < kFineTypeCount; ++m) out.fine[std::size_t(m)] += r.fine[std::size_t(m)] / n;
    }
    const auto vote = [](const std::vector<int>& counts) {
        int best = 0;
        for (int c = 1; c < int(counts.size()); ++c)
            if (counts[std::size_t(c)] > counts[std::size_t(best)]) best = c;
        return best;
    };
    for (int k = 0; k < kDiscreteCount; ++k) {
        std::vector<int> counts(std::size_t(kDiscreteCardinality[std::size_t(k)]), 0);
        for (const auto& r : recs) ++counts[std::size_t(r.discrete[std::size_t(k)])];
        out.discrete[std::size_t(k)] = vote(counts);
    }
    for (int m = 0; m < kFineTypeCount; ++m) {
        std::vector<int> counts(2, 0);
        for (const auto& r : recs) ++counts[std::size_t(r.fine_flags[std::size_t(m)] != 0)];
        out.fine_flags[std::size_t(m)] = vote(counts);
    }
    return out;
}

// ==========================================================================
// Fingerprint similarity
// ==========================================================================

namespace detail {
template <class T>
double pearson_slice(const TensorND<T>& a, std::size_t ia, const TensorND<T>& b, std::size_t ib, std::size_t len) {
    double ma = 0, mb = 0;
    for (std::size_t k = 0; k < len; ++k) {
        ma += a.data[ia * len + k];
        mb += b.data[ib * len + k];
    }
    ma /= double(len);
    mb /= double(len);
    double cov = 0, va = 0, vb = 0;
    for (std::size_t k = 0; k < len; ++k) {
        const double da = a.data[ia * len + k] - ma, db = b.data[ib * len + k] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if (va == 0.0 || vb == 0.0) return 0.0;
    return cov / std::sqrt(va * vb);
}
}  // namespace detail

template <class T>
double pearson(const TensorND<T>& a, const TensorND<T>& b) {
    if (a.shape != b.shape || a.data.empty()) throw ShapeError("pearson: need matching non-empty tensors");
    return detail::pearson_slice(a, 0, b, 0, a.data.size());
}

// Mean correlation between fingerprints sampled from model i and model j,
// `pairs` random pairs per cell; diagonal cells pair distinct images.
template <class T>
TensorND<double> similarity_matrix(const std::vector<TensorND<T>>& fingerprints, int pairs, std::uint64_t seed) {
    const int g = int(fingerprints.size());
    if (g == 0 || pairs < 1) throw ValueError("similarity_matrix: need fingerprints and a positive pair count");
    TensorND<double> m(Shape{g, g});
    for (int i = 0; i < g; ++i) {
        for (int j = 0; j < g; ++j) {
            const auto& fa = fingerprints[std::size_t(i)];
            const auto& fb = fingerprints[std::size_t(j)];
            const int na = fa.shape[0], nb = fb.shape[0];
            if (i == j && na < 2) throw ValueError("similarity_matrix: diagonal cells need at least two fingerprints");
            const std::size_t len = fa.data.size() / std::size_t(na);
            if (fb.data.size() / std::size_t(nb) != len) throw ShapeError("similarity_matrix: fingerprint shape mismatch");
            std::mt19937_64 rng(derive_seed(seed, "sim", std::uint64_t(i) * std::uint64_t(g) + std::uint64_t(j)));
            std::uniform_int_distribution<int> da(0, na - 1), db(0, nb - 1);
            double acc = 0.0;
            for (int p = 0; p < pairs; ++p) {
                const int a = da(rng);
                int b = db(rng);
                while (i == j && b == a) b = db(rng);
                acc += detail::pearson_slice(fa, std::size_t(a), fb, std::size_t(b), len);
            }
            m.data[std::size_t(i) * g + j] = acc / pairs;
        }
    }
    return m;
}

// mean(diagonal) - mean(off-diagonal); positive when same-model fingerprints
// correlate more strongly than cross-model ones.
inline double diag_offdiag_gap(const TensorND<double>& m) {
    if (m.shape.size() != 2 || m.shape[0] != m.shape[1] || m.shape[0] < 2)
        throw ShapeError("diag_offdiag_gap: need a square matrix of size >= 2");
    const int g = m.shape[0];
    double diag = 0, off = 0;
    for (int i = 0; i < g; ++i)
        for (int j = 0; j < g; ++j) (i == j ? diag : off) += m.data[std::size_t(i) * g + j];
    return diag / g - off / (double(g) * g - g);
}

// ==========================================================================
// Occlusion saliency
// ==========================================================================

// Slides a patch x patch occluder (stride = patch size) over the image,
// replaces the window with `fill`, and records |score(occluded) - score(base)|.
template <class T>
TensorND<double> occlusion_heatmap(const std::function<double(const TensorND<T>&)>& score, const TensorND<T>& image,
                                   int patch, double fill) {
    if (image.shape.size() != 3) throw ShapeError("occlusion_heatmap: need [C,H,W], got " + shape_str(image.shape));
    const int c = image.shape[0], h = image.shape[1], w = image.shape[2];
    if (patch < 1 || patch > h || patch > w) throw ValueError("occlusion_heatmap: patch does not fit the image");
    const int ny = (h - patch) / patch + 1, nx = (w - patch) / patch + 1;
    const double base = score(image);
    TensorND<double> heat(Shape{ny, nx});
    for (int gy = 0; gy < ny; ++gy) {
        for (int gx = 0; gx < nx; ++gx) {
            TensorND<T> occluded = image;
            for (int ch = 0; ch < c; ++ch)
                for (int y = gy * patch; y < gy * patch + patch; ++y)
                    for (int x = gx * patch; x < gx * patch + patch; ++x)
                        occluded.data[(std::size_t(ch) * h + y) * w + x] = T(fill);
            heat.data[std::size_t(gy) * nx + gx] = std::abs(score(occluded) - base);
        }
    }
    return heat;
}

// ==========================================================================
// Chance baselines
// ==========================================================================

namespace detail {

// Applies an independent random permutation to one label column; permutations
// that leave a non-constant column unchanged are redrawn.
template <class V>
void shuffle_column(std::vector<V>& column, std::mt19937_64& rng) {
    bool constant = true;
    for (const auto& v : column) constant = constant && v == column.front();
    if (constant) return;
    std::vector<std::size_t> idx(column.size());
    std::iota(idx.begin(), idx.end(), std::size_t(0));
    for (int attempt = 0; attempt < 256; ++attempt) {
        std::shuffle(idx.begin(), idx.end(), rng);
        bool identity = true;
        for (std::size_t i = 0; i < idx.size(); ++i) identity = identity && column[idx[i]] == column[i];
        if (!identity) {
            std::vector<V> out(column.size());
            for (std::size_t i = 0; i < idx.size(); ++i) out[i] = column[idx[i]];
            column = std::move(out);
            return;
        }
    }
    throw ValueError("shuffle_column: failed to draw a non-identity permutation");
}

}  // namespace detail

// Shuffled-label chance baseline: every parameter's labels are permuted
// independently across the set, breaking the image-label association while
// preserving each parameter's marginal distribution. Coarse flags are
// re-derived from the shuffled fine flags. Draws are retried until the
// shuffled labels still admit class weighting.
inline std::pair<std::vector<ArchitectureTargets>, std::vector<LossTargets>> shuffled_targets(
    const std::vector<ArchitectureTargets>& arch, const std::vector<LossTargets>& loss, std::uint64_t seed) {
    if (arch.size() != loss.size() || arch.size() < 2) throw ValueError("shuffled_targets: need >= 2 labelled models");
    const std::size_t n = arch.size();
    for (int attempt = 0; attempt < 64; ++attempt) {
        std::mt19937_64 rng(derive_seed(seed, "shuffle", std::uint64_t(attempt)));
        auto sa = arch;
        auto sl = loss;
        for (int j = 0; j < kContinuousCount; ++j) {
            std::vector<double> col(n);
            for (std::size_t i = 0; i < n; ++i) col[i] = sa[i].continuous_raw[std::size_t(j)];
            detail::shuffle_column(col, rng);
            for (std::size_t i = 0; i < n; ++i) sa[i].continuous_raw[std::size_t(j)] = col[i];
        }
        for (int k = 0; k < kDiscreteCount; ++k) {
            std::vector<int> col(n);
            for (std::size_t i = 0; i < n; ++i) col[i] = sa[i].discrete[std::size_t(k)];
            detail::shuffle_column(col, rng);
            for (std::size_t i = 0; i < n; ++i) sa[i].discrete[std::size_t(k)] = col[i];
        }
        for (int m = 0; m < kFineTypeCount; ++m) {
            std::vector<int> col(n);
            for (std::size_t i = 0; i < n; ++i) col[i] = sl[i].fine[std::size_t(m)];
            detail::shuffle_column(col, rng);
            for (std::size_t i = 0; i < n; ++i) sl[i].fine[std::size_t(m)] = col[i];
        }
        for (auto& l : sl) l.coarse = coarse_from_fine(l.fine);
        try {
            (void)compute_class_weights(sa, sl);
            return {std::move(sa), std::move(sl)};
        } catch (const ValueError&) {
            continue;  // a class lost both sides; redraw the whole shuffle
        }
    }
    throw ValueError("shuffled_targets: no draw admitted class weighting after 64 attempts");
}

struct RandomGuessBaseline {
    std::array<double, kContinuousCount> continuous_l1{};
    double l1_mean = 0.0;
    double discrete_f1 = 0.0;
    double fine_f1 = 0.0;
};

// Monte-Carlo estimate of the scores a uniform random guesser achieves on the
// given ground truth: continuous values uniform on [0,1], discrete classes
// uniform over their cardinality, fine flags by fair coin.
inline RandomGuessBaseline mc_random_guess(const std::vector<std::array<double, kContinuousCount>>& cont_gt,
                                           const std::vector<ArchitectureTargets>& arch_gt,
                                           const std::vector<LossTargets>& loss_gt, long draws, std::uint64_t seed) {
    const std::size_t n = cont_gt.size();
    if (n == 0 || arch_gt.size() != n || loss_gt.size() != n || draws < 1)
        throw ValueError("mc_random_guess: need ground truth and a positive draw count");
    std::mt19937_64 rng(derive_seed(seed, "mc"));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::array<std::uniform_int_distribution<int>, kDiscreteCount> cls;
    for (int k = 0; k < kDiscreteCount; ++k)
        cls[std::size_t(k)] = std::uniform_int_distribution<int>(0, kDiscreteCardinality[std::size_t(k)] - 1);
    std::uniform_int_distribution<int> coin(0, 1);

    RandomGuessBaseline out;
    std::vector<PredictionRecord> recs(n);
    for (long d = 0; d < draws; ++d) {
        for (auto& r : recs) {
            for (auto& v : r.continuous) v = unit(rng);
            for (int k = 0; k < kDiscreteCount; ++k) r.discrete[std::size_t(k)] = cls[std::size_t(k)](rng);
            for (auto& f : r.fine_flags) f = coin(rng);
        }
        const auto s = score_predictions(recs, cont_gt, arch_gt, loss_gt);
        for (int j = 0; j < kContinuousCount; ++j) out.continuous_l1[std::size_t(j)] += s.l1[std::size_t(j)];
        out.l1_mean += s.l1_mean;
        out.discrete_f1 += s.discrete_f1;
        out.fine_f1 += s.fine_f1;
    }
    for (auto& v : out.continuous_l1) v /= double(draws);
    out.l1_mean /= double(draws);
    out.discrete_f1 /= double(draws);
    out.fine_f1 /= double(draws);
    return out;
}

}  // namespace gmparse::metrics
