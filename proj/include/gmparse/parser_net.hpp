#pragma once

#include <array>

#include "gmparse/fingerprint.hpp"

// Parsing network: a shared encoder over the fingerprint feeding a continuous
// regression head, six per-parameter classifiers, and a hierarchical
// coarse/fine loss-type predictor.

namespace gmparse {

// ---------------------------------------------------------------------------
// Target schema
// ---------------------------------------------------------------------------

inline constexpr int kContinuousCount = 9;
inline constexpr int kDiscreteCount = 6;
inline constexpr int kFineTypeCount = 8;
inline constexpr int kCoarseGroupCount = 3;
inline constexpr std::array<int, kDiscreteCount> kDiscreteCardinality{4, 4, 4, 2, 2, 2};

inline constexpr std::array<const char*, kContinuousCount> kContinuousNames{
    "layers", "conv_layers", "fc_layers", "pool_layers", "norm_layers",
    "filters", "parameters", "blocks", "layers_per_block"};
inline constexpr std::array<const char*, kDiscreteCount> kDiscreteNames{
    "norm_type", "block_nonlinearity", "last_nonlinearity", "upsampling", "skip_connections", "downsampling"};
inline constexpr std::array<const char*, kFineTypeCount> kFineNames{"l1", "l2", "mse", "mmd", "wgan", "kl", "adv", "ce"};
inline constexpr std::array<const char*, kCoarseGroupCount> kCoarseNames{"pixel", "discriminator", "classification"};

// Fine type -> coarse group: pixel {l1,l2,mse,mmd}, discriminator {wgan,kl,adv},
// classification {ce}.
inline constexpr std::array<int, kFineTypeCount> kFineGroup{0, 0, 0, 0, 1, 1, 1, 2};

enum class FineLossType { l1 = 0, l2 = 1, mse = 2, mmd = 3, wgan = 4, kl = 5, adv = 6, ce = 7 };

struct ArchitectureTargets {
    std::array<double, kContinuousCount> continuous_raw{};
    std::array<int, kDiscreteCount> discrete{};
};

struct LossTargets {
    std::array<int, kFineTypeCount> fine{};
    std::array<int, kCoarseGroupCount> coarse{};
};

// Coarse flags are the OR of their group's fine flags.
inline std::array<int, kCoarseGroupCount> coarse_from_fine(const std::array<int, kFineTypeCount>& fine) {
    std::array<int, kCoarseGroupCount> coarse{};
    for (int m = 0; m < kFineTypeCount; ++m)
        if (fine[std::size_t(m)]) coarse[std::size_t(kFineGroup[std::size_t(m)])] = 1;
    return coarse;
}

inline LossTargets make_loss_targets(const std::array<int, kFineTypeCount>& fine) {
    LossTargets t;
    t.fine = fine;
    t.coarse = coarse_from_fine(fine);
    bool any = false;
    for (int f : fine) any = any || f;
    if (!any) throw ValueError("loss targets: at least one fine flag must be set");
    return t;
}

// ---------------------------------------------------------------------------
// Class weights  (w = N / N_class, from the training split only)
// ---------------------------------------------------------------------------

struct ClassWeights {
    std::array<std::vector<double>, kDiscreteCount> discrete;    // per classifier, size M_k
    std::array<std::array<double, 2>, kCoarseGroupCount> coarse;  // [absent, present]
    std::array<std::array<double, 2>, kFineTypeCount> fine;

    static ClassWeights unit() {
        ClassWeights w;
        for (int k = 0; k < kDiscreteCount; ++k)
            w.discrete[std::size_t(k)].assign(std::size_t(kDiscreteCardinality[std::size_t(k)]), 1.0);
        for (auto& c : w.coarse) c = {1.0, 1.0};
        for (auto& f : w.fine) f = {1.0, 1.0};
        return w;
    }
};

// One label record per training sample.
inline ClassWeights compute_class_weights(const std::vector<ArchitectureTargets>& arch,
                                          const std::vector<LossTargets>& loss) {
    if (arch.empty() || arch.size() != loss.size())
        throw ValueError("compute_class_weights: need matching non-empty label lists");
    const double n = double(arch.size());
    ClassWeights w;
    for (int k = 0; k < kDiscreteCount; ++k) {
        std::vector<double> counts(std::size_t(kDiscreteCardinality[std::size_t(k)]), 0.0);
        for (const auto& a : arch) {
            const int c = a.discrete[std::size_t(k)];
            if (c < 0 || c >= kDiscreteCardinality[std::size_t(k)])
                throw ValueError(std::string("compute_class_weights: label out of range for ") + kDiscreteNames[std::size_t(k)]);
            counts[std::size_t(c)] += 1.0;
        }
        w.discrete[std::size_t(k)].resize(counts.size());
        for (std::size_t c = 0; c < counts.size(); ++c) {
            if (counts[c] == 0)
                throw ValueError(std::string("compute_class_weights: class ") + std::to_string(c) + " of " +
                                 kDiscreteNames[std::size_t(k)] + " is absent from the training split; redesign the split");
            w.discrete[std::size_t(k)][c] = n / counts[c];
        }
    }
    auto binary = [n](double positives, const char* what) {
        if (positives == 0 || positives == n)
            throw ValueError(std::string("compute_class_weights: ") + what + " has a single class in the training split; redesign the split");
        return std::array<double, 2>{n / (n - positives), n / positives};
    };
    for (int g = 0; g < kCoarseGroupCount; ++g) {
        double pos = 0;
        for (const auto& l : loss) pos += l.coarse[std::size_t(g)];
        w.coarse[std::size_t(g)] = binary(pos, kCoarseNames[std::size_t(g)]);
    }
    for (int m = 0; m < kFineTypeCount; ++m) {
        double pos = 0;
        for (const auto& l : loss) pos += l.fine[std::size_t(m)];
        w.fine[std::size_t(m)] = binary(pos, kFineNames[std::size_t(m)]);
    }
    return w;
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

struct PnConfig {
    int in_channels = 1;
    int in_h = 16, in_w = 16;
    std::vector<int> encoder_channels{32, 64, 128, 256, 512};  // five conv blocks
    int feature_dim = 512;                                     // fixed by the shared-encoder contract
    int head_hidden = 128;                                     // hidden width of the 3-layer classifier heads
};

template <class T>
struct PnOutputs {
    ad::Var<T> feature;                                  // [N, 512]
    ad::Var<T> continuous;                               // [N, 9]
    std::array<ad::Var<T>, kDiscreteCount> discrete;     // [N, M_k] logits
    ad::Var<T> coarse;                                   // [N, 3] logits
    ad::Var<T> fine;                                     // [N, 8] logits
};

template <class T>
struct Pn {
    PnConfig cfg;
    nn::ConvStack<T> encoder;
    nn::Mlp<T> trunk;  // two fully connected layers emitting the feature
    nn::Mlp<T> cont_head;
    std::array<nn::Mlp<T>, kDiscreteCount> discrete_heads;
    nn::Mlp<T> coarse_head, fine_head;

    Pn() = default;
    Pn(const PnConfig& c, std::uint64_t master_seed, const std::string& name = "pn") : cfg(c) {
        if (c.feature_dim != 512) throw ValueError("pn: the shared feature is fixed at 512 dimensions");
        if (c.encoder_channels.size() != 5) throw ValueError("pn: encoder has exactly five convolution blocks");
        encoder = nn::ConvStack<T>(name + ".enc", c.in_channels, c.in_h, c.in_w, c.encoder_channels, master_seed);
        trunk = nn::Mlp<T>(name + ".trunk", {encoder.flat_dim(), c.feature_dim, c.feature_dim}, master_seed);
        cont_head = nn::Mlp<T>(name + ".cont", {c.feature_dim, c.feature_dim, kContinuousCount}, master_seed);
        for (int k = 0; k < kDiscreteCount; ++k)
            discrete_heads[std::size_t(k)] = nn::Mlp<T>(
                name + ".disc_" + kDiscreteNames[std::size_t(k)],
                {c.feature_dim, c.head_hidden, c.head_hidden, kDiscreteCardinality[std::size_t(k)]}, master_seed);
        coarse_head = nn::Mlp<T>(name + ".coarse", {c.feature_dim, c.head_hidden, c.head_hidden, kCoarseGroupCount}, master_seed);
        fine_head = nn::Mlp<T>(name + ".fine", {c.feature_dim, c.head_hidden, c.head_hidden, kFineTypeCount}, master_seed);
    }

    PnOutputs<T> operator()(nn::Tape<T>& t, ad::Var<T> fp) {
        PnOutputs<T> out;
        out.feature = ad::relu(trunk(t, encoder(t, fp)));
        out.continuous = cont_head(t, out.feature);
        for (int k = 0; k < kDiscreteCount; ++k) out.discrete[std::size_t(k)] = discrete_heads[std::size_t(k)](t, out.feature);
        out.coarse = coarse_head(t, out.feature);
        out.fine = fine_head(t, out.feature);
        return out;
    }

    std::vector<ad::Parameter<T>*> parameters() {
        std::vector<ad::Parameter<T>*> p;
        encoder.collect(p);
        trunk.collect(p);
        cont_head.collect(p);
        for (auto& h : discrete_heads) h.collect(p);
        coarse_head.collect(p);
        fine_head.collect(p);
        return p;
    }
    NamedTensors<T> tensors() {
        NamedTensors<T> t;
        encoder.tensors(t);
        trunk.tensors(t);
        cont_head.tensors(t);
        for (auto& h : discrete_heads) h.tensors(t);
        coarse_head.tensors(t);
        fine_head.tensors(t);
        return t;
    }
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Precomputed per-batch target tensors: one-hot weight masks so the loss
// graphs stay small.
template <class T>
struct PnBatchTargets {
    TensorND<T> continuous;                                 // [N, 9] normalized
    std::array<TensorND<T>, kDiscreteCount> discrete_mask;  // [N, M_k]: w_k[c] at the true class
    TensorND<T> coarse_pos, coarse_neg;                     // [N, 3]: w1*y and w0*(1-y)
    TensorND<T> fine_pos, fine_neg;                         // [N, 8]
};

template <class T>
PnBatchTargets<T> make_batch_targets(const std::vector<std::array<double, kContinuousCount>>& cont_norm,
                                     const std::vector<ArchitectureTargets>& arch,
                                     const std::vector<LossTargets>& loss, const ClassWeights& w) {
    const int n = int(cont_norm.size());
    if (n == 0 || arch.size() != cont_norm.size() || loss.size() != cont_norm.size())
        throw ValueError("make_batch_targets: inconsistent batch");
    PnBatchTargets<T> out;
    out.continuous = TensorND<T>(Shape{n, kContinuousCount});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < kContinuousCount; ++j)
            out.continuous.data[std::size_t(i) * kContinuousCount + j] = T(cont_norm[std::size_t(i)][std::size_t(j)]);
    for (int k = 0; k < kDiscreteCount; ++k) {
        const int mk = kDiscreteCardinality[std::size_t(k)];
        out.discrete_mask[std::size_t(k)] = TensorND<T>::zeros(Shape{n, mk});
        for (int i = 0; i < n; ++i) {
            const int c = arch[std::size_t(i)].discrete[std::size_t(k)];
            out.discrete_mask[std::size_t(k)].data[std::size_t(i) * mk + c] = T(w.discrete[std::size_t(k)][std::size_t(c)]);
        }
    }
    out.coarse_pos = TensorND<T>::zeros(Shape{n, kCoarseGroupCount});
    out.coarse_neg = TensorND<T>::zeros(Shape{n, kCoarseGroupCount});
    out.fine_pos = TensorND<T>::zeros(Shape{n, kFineTypeCount});
    out.fine_neg = TensorND<T>::zeros(Shape{n, kFineTypeCount});
    for (int i = 0; i < n; ++i) {
        for (int g = 0; g < kCoarseGroupCount; ++g) {
            const bool y = loss[std::size_t(i)].coarse[std::size_t(g)] != 0;
            (y ? out.coarse_pos : out.coarse_neg).data[std::size_t(i) * kCoarseGroupCount + g] =
                T(w.coarse[std::size_t(g)][y ? 1 : 0]);
        }
        for (int m = 0; m < kFineTypeCount; ++m) {
            const bool y = loss[std::size_t(i)].fine[std::size_t(m)] != 0;
            (y ? out.fine_pos : out.fine_neg).data[std::size_t(i) * kFineTypeCount + m] = T(w.fine[std::size_t(m)][y ? 1 : 0]);
        }
    }
    return out;
}

// Squared error summed over the 9 parameters, averaged over the batch.
template <class T>
ad::Var<T> continuous_loss(ad::Var<T> pred, ad::Var<T> target) {
    if (pred.shape() != target.shape() || pred.shape().size() != 2 || pred.shape()[1] != kContinuousCount)
        throw ShapeError("continuous_loss: need matching [N,9] tensors");
    const int n = pred.shape()[0];
    return ad::scale(ad::sum_all(ad::square(ad::sub(pred, target))), T(1) / T(n));
}

// Weighted sigmoid cross-entropy over the true class only, summed across the
// six classifiers, averaged over the batch. mask[k] = w_k[c] at the true class.
template <class T>
ad::Var<T> discrete_loss(nn::Tape<T>& t, const std::array<ad::Var<T>, kDiscreteCount>& logits,
                         const std::array<TensorND<T>, kDiscreteCount>& mask) {
    ad::Var<T> total;
    for (int k = 0; k < kDiscreteCount; ++k) {
        auto term = ad::sum_all(ad::mul(ad::log_sigmoid_clamped(logits[std::size_t(k)]), t.input(mask[std::size_t(k)])));
        total = k == 0 ? term : ad::add(total, term);
    }
    const int n = logits[0].shape()[0];
    return ad::scale(total, T(-1) / T(n));
}

// Two-term weighted sigmoid cross-entropy on single-logit categories.
template <class T>
ad::Var<T> coarse_loss(nn::Tape<T>& t, ad::Var<T> logits, const TensorND<T>& pos, const TensorND<T>& neg) {
    const int n = logits.shape()[0];
    auto on = ad::sum_all(ad::mul(ad::log_sigmoid_clamped(logits), t.input(pos)));
    auto off = ad::sum_all(ad::mul(ad::log_sigmoid_clamped(ad::neg(logits)), t.input(neg)));
    return ad::scale(ad::add(on, off), T(-1) / T(n));
}

// composed[m] = sigmoid(coarse at the group of m) * sigmoid(fine at m).
template <class T>
ad::Var<T> hierarchical_compose(ad::Var<T> coarse_logits, ad::Var<T> fine_logits) {
    std::vector<int> groups(kFineGroup.begin(), kFineGroup.end());
    return ad::mul(ad::gather_cols(ad::sigmoid(coarse_logits), groups), ad::sigmoid(fine_logits));
}

// Two-term weighted cross-entropy on the composed probabilities.
template <class T>
ad::Var<T> fine_loss(nn::Tape<T>& t, ad::Var<T> composed, const TensorND<T>& pos, const TensorND<T>& neg) {
    const int n = composed.shape()[0];
    auto on = ad::sum_all(ad::mul(ad::log_clamped(composed), t.input(pos)));
    auto off = ad::sum_all(ad::mul(ad::log_clamped(ad::affine(composed, T(-1), T(1))), t.input(neg)));
    return ad::scale(ad::add(on, off), T(-1) / T(n));
}

struct ParsingLossWeights {
    double arch = 5.0;    // continuous + discrete architecture terms
    double coarse = 5.0;  // coarse loss-group term
    double fine = 5.0;    // composed fine-type term
};

template <class T>
struct ParsingLossTerms {
    ad::Var<T> continuous, discrete, architecture, coarse, fine, total;
};

template <class T>
ParsingLossTerms<T> parsing_loss(nn::Tape<T>& t, const PnOutputs<T>& out, const PnBatchTargets<T>& targets,
                                 const ParsingLossWeights& g = {}) {
    ParsingLossTerms<T> terms;
    terms.continuous = continuous_loss(out.continuous, t.input(targets.continuous));
    terms.discrete = discrete_loss(t, out.discrete, targets.discrete_mask);
    terms.architecture = ad::add(terms.continuous, terms.discrete);
    terms.coarse = coarse_loss(t, out.coarse, targets.coarse_pos, targets.coarse_neg);
    terms.fine = fine_loss(t, hierarchical_compose(out.coarse, out.fine), targets.fine_pos, targets.fine_neg);
    terms.total = ad::add(ad::add(ad::scale(terms.architecture, T(g.arch)), ad::scale(terms.coarse, T(g.coarse))),
                          ad::scale(terms.fine, T(g.fine)));
    return terms;
}

// ---------------------------------------------------------------------------
// Training / prediction
// ---------------------------------------------------------------------------

struct TrainStepValues {
    FingerprintLossValues fingerprint;
    double continuous = 0, discrete = 0, coarse = 0, fine = 0, parsing = 0, total = 0;
};

struct EndToEndConfig {
    FingerprintLossConfig fingerprint;
    ParsingLossWeights parsing;
    bool use_fingerprint_losses = true;  // ablation switch: drop the spectral objectives
};

// One optimizer step on both networks against the joint objective.
template <class T>
TrainStepValues train_step(Fen<T>& fen, Pn<T>& pn, Adam<T>& fen_opt, Adam<T>& pn_opt, const TensorND<T>& images,
                           const PnBatchTargets<T>& targets, const EndToEndConfig& cfg = {}) {
    ad::Tape<T> tape;
    auto x = tape.input(images);
    auto fp = fen(tape, x, /*training=*/true);
    auto out = pn(tape, fp);
    auto pterms = parsing_loss(tape, out, targets, cfg.parsing);
    TrainStepValues vals;
    ad::Var<T> total = pterms.total;
    if (cfg.use_fingerprint_losses) {
        auto fterms = fingerprint_loss(fp, cfg.fingerprint);
        total = ad::add(fterms.total, pterms.total);
        vals.fingerprint = {double(fterms.magnitude.scalar()), double(fterms.low_freq.scalar()),
                            double(fterms.peak.scalar()), double(fterms.asymmetry.scalar()),
                            double(fterms.total.scalar())};
    }
    vals.continuous = double(pterms.continuous.scalar());
    vals.discrete = double(pterms.discrete.scalar());
    vals.coarse = double(pterms.coarse.scalar());
    vals.fine = double(pterms.fine.scalar());
    vals.parsing = double(pterms.total.scalar());
    vals.total = double(total.scalar());
    if (!std::isfinite(vals.total))
        throw NonFiniteError("train_step: non-finite joint objective");
    fen_opt.zero_grad();
    pn_opt.zero_grad();
    tape.backward(total);
    fen_opt.step();
    pn_opt.step();
    return vals;
}

struct PredictionRecord {
    std::array<double, kContinuousCount> continuous{};  // normalized space
    std::array<int, kDiscreteCount> discrete{};
    std::array<double, kCoarseGroupCount> coarse{};  // probabilities
    std::array<double, kFineTypeCount> fine{};       // composed probabilities
    std::array<int, kFineTypeCount> fine_flags{};    // fine[m] > 0.5
};

// Batched prediction; one record per image.
template <class T>
std::vector<PredictionRecord> predict(Fen<T>& fen, Pn<T>& pn, const TensorND<T>& images) {
    ad::Tape<T> tape;
    auto x = tape.input(images);
    auto fp = fen(tape, x, /*training=*/false);
    auto out = pn(tape, fp);
    const int n = images.shape[0];
    std::vector<PredictionRecord> recs(static_cast<std::size_t>(n));
    auto sigmoid = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    for (int i = 0; i < n; ++i) {
        auto& r = recs[std::size_t(i)];
        // Targets are min-max normalized, so [0, 1] is the valid parameter
        // range; project the regression output onto it (the decision rule for
        // the continuous heads, as argmax is for the discrete ones).
        for (int j = 0; j < kContinuousCount; ++j)
            r.continuous[std::size_t(j)] =
                std::clamp(double(out.continuous.val()[std::size_t(i) * kContinuousCount + j]), 0.0, 1.0);
        for (int k = 0; k < kDiscreteCount; ++k) {
            const int mk = kDiscreteCardinality[std::size_t(k)];
            const auto& v = out.discrete[std::size_t(k)].val();
            int best = 0;
            for (int c = 1; c < mk; ++c)
                if (v[std::size_t(i) * mk + c] > v[std::size_t(i) * mk + best]) best = c;
            r.discrete[std::size_t(k)] = best;
        }
        for (int g = 0; g < kCoarseGroupCount; ++g)
            r.coarse[std::size_t(g)] = sigmoid(double(out.coarse.val()[std::size_t(i) * kCoarseGroupCount + g]));
        for (int m = 0; m < kFineTypeCount; ++m) {
            const double pf = sigmoid(double(out.fine.val()[std::size_t(i) * kFineTypeCount + m]));
            r.fine[std::size_t(m)] = r.coarse[std::size_t(kFineGroup[std::size_t(m)])] * pf;
            r.fine_flags[std::size_t(m)] = r.fine[std::size_t(m)] > 0.5 ? 1 : 0;
        }
    }
    return recs;
}

}  // namespace gmparse
