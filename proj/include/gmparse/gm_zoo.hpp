#pragma once

#include <memory>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "gmparse/adam.hpp"
#include "gmparse/nets.hpp"
#include "gmparse/ops.hpp"
#include "gmparse/parser_net.hpp"

// Synthetic generative-model zoo: 12 small decoder networks ("GMs") with fully
// known architecture hyperparameters and training-loss sets. Each GM is
// trained on procedurally rendered scenes (Gaussian blobs or sinusoidal
// stripe patterns) so the zoo is self-contained and every ground-truth label
// is exact by construction.

namespace gmparse::zoo {

using ad::Parameter;
using ad::Tape;
using ad::Var;

// ==========================================================================
// Class dictionaries (index -> meaning) for the six discrete parameters
// ==========================================================================

inline const std::array<const char*, 4> kNormClasses = {"none", "batch", "instance", "layer"};
inline const std::array<const char*, 4> kBlockActClasses = {"relu", "leaky_relu", "tanh", "sigmoid"};
inline const std::array<const char*, 4> kLastActClasses = {"tanh", "sigmoid", "identity", "leaky_relu"};
inline const std::array<const char*, 2> kUpsampleClasses = {"nearest_conv", "transposed_conv"};
inline const std::array<const char*, 2> kBinaryClasses = {"no", "yes"};

inline nn::Activation block_act_of_class(int c) {
    switch (c) {
        case 0: return nn::Activation::relu;
        case 1: return nn::Activation::leaky_relu;
        case 2: return nn::Activation::tanh;
        case 3: return nn::Activation::sigmoid;
    }
    throw ValueError("block activation class out of range: " + std::to_string(c));
}

inline nn::Activation last_act_of_class(int c) {
    switch (c) {
        case 0: return nn::Activation::tanh;
        case 1: return nn::Activation::sigmoid;
        case 2: return nn::Activation::identity;
        case 3: return nn::Activation::leaky_relu;
    }
    throw ValueError("last activation class out of range: " + std::to_string(c));
}

enum class LatentKind { spatial, vector };

inline std::string to_string(LatentKind k) { return k == LatentKind::spatial ? "spatial" : "vector"; }
inline LatentKind latent_from_string(const std::string& s) {
    if (s == "spatial") return LatentKind::spatial;
    if (s == "vector") return LatentKind::vector;
    throw ValueError("unknown latent kind: " + s);
}

// Latent layout constants: a spatial latent has kSpatialLatentChannels
// channels at the first feature-map resolution; a vector latent has
// kVectorLatentDim dims. Leading dims/channels carry normalized scene
// parameters, the rest are unit-normal noise.
inline constexpr int kSpatialLatentChannels = 6;
inline constexpr int kVectorLatentDim = 16;

// ==========================================================================
// GM specification record: ground truth is a pure function of this struct
// ==========================================================================

struct GmSpec {
    std::string id;
    std::string family;  // "blobs" | "stripes"
    int blocks = 2;
    int layers_per_block = 1;
    int filters = 8;
    int norm_class = 0;       // index into kNormClasses
    int block_act_class = 0;  // index into kBlockActClasses
    int last_act_class = 0;   // index into kLastActClasses
    int upsample_class = 0;   // index into kUpsampleClasses
    int skip_class = 0;       // 0/1
    int downsample_class = 0; // 0/1
    LatentKind latent = LatentKind::vector;
    std::array<int, 8> fine_losses{};  // order: l1,l2,mse,mmd,wgan,kl,adv,ce
    int image_size = 16;
    int train_steps = 300;
    int batch = 16;
    double lr = 2e-3;
    std::uint64_t seed = 0;

    nn::NormKind norm_kind() const { return static_cast<nn::NormKind>(norm_class); }
    nn::Activation block_act() const { return block_act_of_class(block_act_class); }
    nn::Activation last_act() const { return last_act_of_class(last_act_class); }
    bool transposed_upsample() const { return upsample_class == 1; }
    bool skip() const { return skip_class == 1; }
    bool downsample() const { return downsample_class == 1; }
    bool has_loss(FineLossType t) const { return fine_losses[std::size_t(t)] == 1; }
    // Spatial size of the first feature map (image_size halves once per
    // up-block; a downsampling GM starts one octave larger and pools once).
    int entry_size() const {
        int h = image_size >> blocks;
        if (downsample()) h *= 2;
        return h;
    }
    int theta_dims() const { return family == "blobs" ? 3 : 4; }
};

inline nlohmann::json spec_to_json(const GmSpec& s) {
    nlohmann::json j;
    j["id"] = s.id;
    j["family"] = s.family;
    j["blocks"] = s.blocks;
    j["layers_per_block"] = s.layers_per_block;
    j["filters"] = s.filters;
    j["norm"] = s.norm_class;
    j["block_act"] = s.block_act_class;
    j["last_act"] = s.last_act_class;
    j["upsample"] = s.upsample_class;
    j["skip"] = s.skip_class;
    j["downsample"] = s.downsample_class;
    j["latent"] = to_string(s.latent);
    j["losses"] = s.fine_losses;
    j["image_size"] = s.image_size;
    j["train_steps"] = s.train_steps;
    j["batch"] = s.batch;
    j["lr"] = s.lr;
    j["seed"] = s.seed;
    return j;
}

inline GmSpec spec_from_json(const nlohmann::json& j) {
    GmSpec s;
    s.id = j.at("id").get<std::string>();
    s.family = j.at("family").get<std::string>();
    s.blocks = j.at("blocks").get<int>();
    s.layers_per_block = j.at("layers_per_block").get<int>();
    s.filters = j.at("filters").get<int>();
    s.norm_class = j.at("norm").get<int>();
    s.block_act_class = j.at("block_act").get<int>();
    s.last_act_class = j.at("last_act").get<int>();
    s.upsample_class = j.at("upsample").get<int>();
    s.skip_class = j.at("skip").get<int>();
    s.downsample_class = j.at("downsample").get<int>();
    s.latent = latent_from_string(j.at("latent").get<std::string>());
    const auto losses = j.at("losses").get<std::vector<int>>();
    if (losses.size() != 8) throw ValueError("losses array must have 8 entries");
    std::copy(losses.begin(), losses.end(), s.fine_losses.begin());
    s.image_size = j.at("image_size").get<int>();
    s.train_steps = j.at("train_steps").get<int>();
    s.batch = j.at("batch").get<int>();
    s.lr = j.at("lr").get<double>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
}

// ==========================================================================
// Ground truth derived from the spec
// ==========================================================================

inline ArchitectureTargets architecture_targets(const GmSpec& s) {
    const int B = s.blocks, L = s.layers_per_block, f = s.filters;
    const int layers = 2 + B * L;  // weighted layers: 2 stem + L per block
    const int fc = s.latent == LatentKind::vector ? 1 : 0;
    const int norm_layers = s.norm_kind() == nn::NormKind::none ? 0 : layers - 1;

    // Trainable parameter count, mirroring the construction rules below
    // (norm running statistics are buffers, not trainable parameters).
    const int h = s.entry_size();
    long long params = 0;
    if (s.latent == LatentKind::vector) {
        const long long out = (long long)f * h * h;
        params += (long long)kVectorLatentDim * out + out;  // stem fc
    } else {
        params += (long long)kSpatialLatentChannels * f * 9 + f;  // stem conv a
    }
    params += (long long)f * f * 9 + f;  // stem conv b
    if (s.norm_kind() != nn::NormKind::none) params += (long long)norm_layers * 2 * f;
    for (int b = 0; b < B; ++b) {
        const bool last_block = b == B - 1;
        const int up_out = (last_block && L == 1) ? 1 : f;
        const int kk = s.transposed_upsample() ? 16 : 9;  // 4x4 vs 3x3 kernels
        params += (long long)f * up_out * kk + up_out;
        for (int j = 1; j < L; ++j) {
            const int out = (last_block && j == L - 1) ? 1 : f;
            params += (long long)f * out * 9 + out;
        }
    }

    ArchitectureTargets t;
    t.continuous_raw = {double(layers), double(layers - fc), double(fc),
                        double(s.downsample() ? 1 : 0), double(norm_layers),
                        double(f), double(params), double(B), double(L)};
    t.discrete = {s.norm_class, s.block_act_class, s.last_act_class,
                  s.upsample_class, s.skip_class, s.downsample_class};
    return t;
}

inline LossTargets loss_targets(const GmSpec& s) { return make_loss_targets(s.fine_losses); }

// ==========================================================================
// The default 12-GM zoo
// ==========================================================================

inline std::array<int, 8> loss_set(std::initializer_list<FineLossType> types) {
    std::array<int, 8> v{};
    for (auto t : types) v[std::size_t(t)] = 1;
    return v;
}

inline std::vector<GmSpec> default_zoo(std::uint64_t master_seed) {
    using FL = FineLossType;
    using LK = LatentKind;
    struct Row {
        const char* id;
        const char* family;
        int blocks, lpb, filters;
        int norm, block_act, last_act, upsample, skip, down;
        LK latent;
        std::array<int, 8> losses;
    };
    // Hand-balanced so that every class of every discrete parameter and every
    // fine loss type is present in at least two specs with both-family spread
    // wherever removal of one GM per family could otherwise empty a class.
    // skip=yes only on specs with layers_per_block >= 2 (the flag must have a
    // structural effect); kl only on vector-latent specs (the posterior
    // encoder reparameterizes vector noise dims).
    const std::vector<Row> rows = {
        {"B0", "blobs", 2, 2, 8, 0, 0, 0, 1, 1, 0, LK::vector, loss_set({FL::l2, FL::kl})},
        {"B1", "blobs", 3, 1, 12, 1, 1, 1, 0, 0, 0, LK::spatial, loss_set({FL::adv})},
        {"B2", "blobs", 2, 3, 12, 2, 2, 2, 1, 0, 1, LK::vector, loss_set({FL::mse, FL::adv})},
        {"B3", "blobs", 3, 2, 16, 3, 3, 3, 0, 1, 0, LK::spatial, loss_set({FL::l1, FL::mse})},
        {"B4", "blobs", 2, 1, 8, 0, 1, 0, 1, 0, 0, LK::vector, loss_set({FL::wgan})},
        {"B5", "blobs", 3, 3, 16, 1, 0, 1, 0, 0, 0, LK::spatial, loss_set({FL::l2, FL::mmd, FL::ce})},
        {"S0", "stripes", 2, 2, 12, 2, 3, 0, 1, 0, 0, LK::spatial, loss_set({FL::mmd})},
        {"S1", "stripes", 3, 1, 8, 3, 2, 2, 0, 0, 1, LK::vector, loss_set({FL::l1, FL::kl})},
        {"S2", "stripes", 2, 3, 8, 0, 1, 3, 1, 0, 0, LK::spatial, loss_set({FL::adv, FL::ce})},
        {"S3", "stripes", 3, 2, 12, 1, 0, 1, 0, 1, 0, LK::vector, loss_set({FL::l1, FL::mse, FL::wgan})},
        {"S4", "stripes", 2, 1, 16, 2, 3, 2, 1, 0, 0, LK::spatial, loss_set({FL::l2, FL::wgan, FL::ce})},
        {"S5", "stripes", 3, 3, 16, 3, 2, 3, 0, 0, 1, LK::vector, loss_set({FL::mmd, FL::kl})},
    };
    std::vector<GmSpec> specs;
    for (const auto& r : rows) {
        GmSpec s;
        s.id = r.id;
        s.family = r.family;
        s.blocks = r.blocks;
        s.layers_per_block = r.lpb;
        s.filters = r.filters;
        s.norm_class = r.norm;
        s.block_act_class = r.block_act;
        s.last_act_class = r.last_act;
        s.upsample_class = r.upsample;
        s.skip_class = r.skip;
        s.downsample_class = r.down;
        s.latent = r.latent;
        s.fine_losses = r.losses;
        s.seed = derive_seed(master_seed, std::string("gm:") + r.id);
        specs.push_back(s);
    }
    return specs;
}

// Verifies class coverage: each class value of each discrete parameter and
// each fine loss type must occur in at least `min_count` specs.
inline void validate_zoo(const std::vector<GmSpec>& specs, int min_count = 2) {
    if (specs.empty()) throw ValueError("zoo is empty");
    std::set<std::string> ids;
    for (const auto& s : specs) {
        if (!ids.insert(s.id).second) throw ValueError("duplicate gm id: " + s.id);
        if (s.family != "blobs" && s.family != "stripes") throw ValueError("unknown family: " + s.family);
        if (s.has_loss(FineLossType::kl) && s.latent != LatentKind::vector)
            throw ValueError("gm " + s.id + ": kl loss requires a vector latent");
        if (s.skip() && s.layers_per_block < 2)
            throw ValueError("gm " + s.id + ": skip connections need layers_per_block >= 2");
        int nloss = 0;
        for (int v : s.fine_losses) nloss += v;
        if (nloss == 0) throw ValueError("gm " + s.id + ": no training loss set");
    }
    for (int k = 0; k < kDiscreteCount; ++k) {
        std::vector<int> count(std::size_t(kDiscreteCardinality[std::size_t(k)]), 0);
        for (const auto& s : specs) ++count[std::size_t(architecture_targets(s).discrete[std::size_t(k)])];
        for (std::size_t c = 0; c < count.size(); ++c)
            if (count[c] < min_count)
                throw ValueError(std::string("zoo class coverage: parameter ") + kDiscreteNames[std::size_t(k)] +
                                 " class " + std::to_string(c) + " occurs in " + std::to_string(count[c]) +
                                 " specs (need >= " + std::to_string(min_count) + ")");
    }
    for (int k = 0; k < kFineTypeCount; ++k) {
        int count = 0;
        for (const auto& s : specs) count += s.fine_losses[std::size_t(k)];
        if (count < min_count)
            throw ValueError(std::string("zoo class coverage: loss type ") + kFineNames[std::size_t(k)] +
                             " set in " + std::to_string(count) + " specs (need >= " + std::to_string(min_count) + ")");
    }
}

// ==========================================================================
// Procedural scene rendering (training targets with known parameters)
// ==========================================================================

struct Scene {
    std::vector<double> raw;   // family-specific parameters
    std::vector<double> norm;  // same parameters mapped to [-1, 1]
    int attr = 0;              // binary attribute used by the ce loss
};

inline Scene draw_scene(const std::string& family, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u{0.0, 1.0};
    Scene sc;
    if (family == "blobs") {
        const double cx = 5.0 + 5.0 * u(rng);
        const double cy = 5.0 + 5.0 * u(rng);
        const double amp = 0.7 + 0.3 * u(rng);
        sc.raw = {cx, cy, amp};
        sc.norm = {(cx - 7.5) / 2.5, (cy - 7.5) / 2.5, (amp - 0.85) / 0.15};
        sc.attr = cx >= 7.5 ? 1 : 0;
    } else {
        const double pi = 3.14159265358979323846;
        const double phi = pi * u(rng);
        const double psi = 2.0 * pi * u(rng);
        const double lambda = 5.0 + 4.0 * u(rng);
        const double amp = 0.6 + 0.4 * u(rng);
        sc.raw = {phi, psi, lambda, amp};
        sc.norm = {2.0 * phi / pi - 1.0, psi / pi - 1.0, (lambda - 7.0) / 2.0, (amp - 0.8) / 0.2};
        sc.attr = phi < pi / 2.0 ? 0 : 1;
    }
    return sc;
}

inline TensorND<float> render_scene(const std::string& family, const std::vector<double>& raw, int size) {
    TensorND<float> img(Shape{1, size, size});
    if (family == "blobs") {
        const double cx = raw[0], cy = raw[1], amp = raw[2], s2 = 2.0 * 3.0 * 3.0;
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const double g = std::exp(-((x - cx) * (x - cx) + (y - cy) * (y - cy)) / s2);
                img.data[std::size_t(y) * size + x] = float(amp * (2.0 * g - 1.0));
            }
    } else {
        const double pi = 3.14159265358979323846;
        const double phi = raw[0], psi = raw[1], lambda = raw[2], amp = raw[3];
        const double kx = std::cos(phi) * 2.0 * pi / lambda, ky = std::sin(phi) * 2.0 * pi / lambda;
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x)
                img.data[std::size_t(y) * size + x] = float(amp * std::sin(kx * x + ky * y + psi));
    }
    return img;
}

inline std::vector<Scene> draw_scenes(const std::string& family, int n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<Scene> out;
    out.reserve(std::size_t(n));
    for (int i = 0; i < n; ++i) out.push_back(draw_scene(family, rng));
    return out;
}

inline TensorND<float> render_batch(const std::string& family, const std::vector<Scene>& scenes, int size) {
    const int n = int(scenes.size());
    TensorND<float> batch(Shape{n, 1, size, size});
    for (int i = 0; i < n; ++i) {
        const auto img = render_scene(family, scenes[std::size_t(i)].raw, size);
        std::copy(img.data.begin(), img.data.end(), batch.data.begin() + std::size_t(i) * img.data.size());
    }
    return batch;
}

// Latent with scene parameters in the leading dims/channels and unit-normal
// noise in the rest.
inline TensorND<float> make_latent(const GmSpec& s, const std::vector<Scene>& scenes, std::uint64_t noise_seed) {
    const int n = int(scenes.size());
    const int p = s.theta_dims();
    std::mt19937_64 rng(noise_seed);
    std::normal_distribution<double> g{0.0, 1.0};
    if (s.latent == LatentKind::vector) {
        TensorND<float> z(Shape{n, kVectorLatentDim});
        for (int i = 0; i < n; ++i)
            for (int d = 0; d < kVectorLatentDim; ++d)
                z.data[std::size_t(i) * kVectorLatentDim + d] =
                    d < p ? float(scenes[std::size_t(i)].norm[std::size_t(d)]) : float(g(rng));
        return z;
    }
    const int h = s.entry_size();
    TensorND<float> z(Shape{n, kSpatialLatentChannels, h, h});
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < kSpatialLatentChannels; ++c)
            for (int q = 0; q < h * h; ++q)
                z.data[(std::size_t(i) * kSpatialLatentChannels + c) * h * h + q] =
                    c < p ? float(scenes[std::size_t(i)].norm[std::size_t(c)]) : float(g(rng));
    return z;
}

// ==========================================================================
// The generator network
// ==========================================================================

template <class T>
struct ToyGenerator {
    GmSpec spec;
    int h_in = 0;
    nn::Linear<T> stem_fc;      // vector latent only
    nn::Conv2d<T> stem_conv_a;  // spatial latent only
    nn::NormLayer<T> stem_norm_a;
    nn::Conv2d<T> stem_conv_b;
    nn::NormLayer<T> stem_norm_b;
    struct UpBlock {
        nn::Conv2d<T> conv;            // nearest_conv path
        nn::ConvTranspose2d<T> tconv;  // transposed path
        nn::NormLayer<T> norm;
        std::vector<nn::Conv2d<T>> mids;
        std::vector<nn::NormLayer<T>> mid_norms;
    };
    std::vector<UpBlock> ups;
    // Forward-order record of weighted/norm/pool elements, for count audits:
    // entries are "fc", "conv", "norm", "pool".
    std::vector<std::string> walk;

    ToyGenerator() = default;

    explicit ToyGenerator(const GmSpec& s) : spec(s), h_in(s.entry_size()) {
        const int f = s.filters, B = s.blocks, L = s.layers_per_block;
        const auto norm = s.norm_kind();
        const auto seed_of = [&](const std::string& tag) { return derive_seed(s.seed, "init:" + tag); };
        if (s.latent == LatentKind::vector) {
            stem_fc = nn::Linear<T>("g.stem.fc", kVectorLatentDim, f * h_in * h_in, seed_of("stem.fc"));
            walk.push_back("fc");
        } else {
            stem_conv_a = nn::Conv2d<T>("g.stem.conv_a", kSpatialLatentChannels, f, 3, 1, 1, seed_of("stem.conv_a"));
            walk.push_back("conv");
        }
        stem_norm_a = nn::NormLayer<T>("g.stem.norm_a", f, norm);
        if (norm != nn::NormKind::none) walk.push_back("norm");
        stem_conv_b = nn::Conv2d<T>("g.stem.conv_b", f, f, 3, 1, 1, seed_of("stem.conv_b"));
        walk.push_back("conv");
        stem_norm_b = nn::NormLayer<T>("g.stem.norm_b", f, norm);
        if (norm != nn::NormKind::none) walk.push_back("norm");
        if (s.downsample()) walk.push_back("pool");
        for (int b = 0; b < B; ++b) {
            const bool last_block = b == B - 1;
            UpBlock blk;
            const std::string base = "g.b" + std::to_string(b);
            const int up_out = (last_block && L == 1) ? 1 : f;
            if (s.transposed_upsample())
                blk.tconv = nn::ConvTranspose2d<T>(base + ".up", f, up_out, 4, 2, 1, seed_of(base + ".up"));
            else
                blk.conv = nn::Conv2d<T>(base + ".up", f, up_out, 3, 1, 1, seed_of(base + ".up"));
            walk.push_back("conv");
            const bool up_is_final = last_block && L == 1;
            if (!up_is_final) {
                blk.norm = nn::NormLayer<T>(base + ".up_norm", f, norm);
                if (norm != nn::NormKind::none) walk.push_back("norm");
            }
            for (int j = 1; j < L; ++j) {
                const bool is_final = last_block && j == L - 1;
                const int out = is_final ? 1 : f;
                const std::string mname = base + ".m" + std::to_string(j);
                blk.mids.emplace_back(mname, f, out, 3, 1, 1, seed_of(mname));
                walk.push_back("conv");
                if (!is_final) {
                    blk.mid_norms.emplace_back(mname + "_norm", f, norm);
                    if (norm != nn::NormKind::none) walk.push_back("norm");
                }
            }
            ups.push_back(std::move(blk));
        }
    }

    Var<T> forward(Tape<T>& t, Var<T> z, bool training) {
        const auto act = spec.block_act();
        const int f = spec.filters, B = spec.blocks, L = spec.layers_per_block;
        Var<T> x = [&] {
            if (spec.latent == LatentKind::vector) {
                Var<T> h = stem_fc(t, z);
                return ad::reshape(h, Shape{z.shape()[0], f, h_in, h_in});
            }
            return stem_conv_a(t, z);
        }();
        x = nn::apply_activation(stem_norm_a(t, x, training), act);
        x = nn::apply_activation(stem_norm_b(t, stem_conv_b(t, x), training), act);
        if (spec.downsample()) x = ad::maxpool2d(x, 2, 2);
        for (int b = 0; b < B; ++b) {
            auto& blk = ups[std::size_t(b)];
            const bool last_block = b == B - 1;
            Var<T> u = spec.transposed_upsample() ? blk.tconv(t, x)
                                                  : blk.conv(t, ad::upsample_nearest2(x, 2));
            if (last_block && L == 1) return nn::apply_activation(u, spec.last_act());
            u = nn::apply_activation(blk.norm(t, u, training), act);
            // Channel-preserving interior convs; the final image conv of the
            // last block stays outside the (optional) additive skip.
            const int run_len = int(blk.mid_norms.size());
            Var<T> v = u;
            for (int j = 0; j < run_len; ++j)
                v = nn::apply_activation(blk.mid_norms[std::size_t(j)](t, blk.mids[std::size_t(j)](t, v), training), act);
            if (spec.skip() && run_len > 0) v = ad::add(v, u);
            if (last_block) {
                Var<T> out = blk.mids.back()(t, v);
                return nn::apply_activation(out, spec.last_act());
            }
            x = v;
        }
        throw ValueError("generator has no blocks");
    }

    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> out;
        if (spec.latent == LatentKind::vector) stem_fc.collect(out);
        else stem_conv_a.collect(out);
        stem_norm_a.collect(out);
        stem_conv_b.collect(out);
        stem_norm_b.collect(out);
        for (std::size_t b = 0; b < ups.size(); ++b) {
            auto& blk = ups[b];
            const bool up_is_final = b + 1 == ups.size() && spec.layers_per_block == 1;
            if (spec.transposed_upsample()) blk.tconv.collect(out);
            else blk.conv.collect(out);
            if (!up_is_final) blk.norm.collect(out);
            for (auto& m : blk.mids) m.collect(out);
            for (auto& n : blk.mid_norms) n.collect(out);
        }
        return out;
    }

    NamedTensors<T> tensors() {
        NamedTensors<T> out;
        if (spec.latent == LatentKind::vector) stem_fc.tensors(out);
        else stem_conv_a.tensors(out);
        stem_norm_a.tensors(out);
        stem_conv_b.tensors(out);
        stem_norm_b.tensors(out);
        for (std::size_t b = 0; b < ups.size(); ++b) {
            auto& blk = ups[b];
            const bool up_is_final = b + 1 == ups.size() && spec.layers_per_block == 1;
            if (spec.transposed_upsample()) blk.tconv.tensors(out);
            else blk.conv.tensors(out);
            if (!up_is_final) blk.norm.tensors(out);
            for (auto& m : blk.mids) m.tensors(out);
            for (auto& n : blk.mid_norms) n.tensors(out);
        }
        return out;
    }

    long long trainable_parameter_count() {
        long long n = 0;
        for (auto* p : parameters()) n += (long long)p->value.data.size();
        return n;
    }

    // Eval-mode forward without gradients; raw network output.
    TensorND<T> generate(const TensorND<T>& latent) {
        Tape<T> t;
        Var<T> z = t.input(latent);
        Var<T> img = forward(t, z, /*training=*/false);
        return TensorND<T>(img.shape(), img.val());
    }
};

// ==========================================================================
// Auxiliary training networks (not part of the generator's ground truth)
// ==========================================================================

// 3-layer critic / discriminator: two strided convs + linear head.
template <class T>
struct ToyCritic {
    nn::Conv2d<T> c1, c2;
    nn::Linear<T> fc;
    ToyCritic() = default;
    ToyCritic(const std::string& name, int image_size, std::uint64_t seed)
        : c1(name + ".c1", 1, 8, 3, 2, 1, derive_seed(seed, name + ".c1")),
          c2(name + ".c2", 8, 16, 3, 2, 1, derive_seed(seed, name + ".c2")),
          fc(name + ".fc", 16 * (image_size / 4) * (image_size / 4), 1, derive_seed(seed, name + ".fc")) {}
    Var<T> operator()(Tape<T>& t, Var<T> x) {
        Var<T> h = ad::leaky_relu(c1(t, x), T(0.2));
        h = ad::leaky_relu(c2(t, h), T(0.2));
        const Shape& hs = h.shape();
        h = ad::reshape(h, Shape{hs[0], hs[1] * hs[2] * hs[3]});
        return fc(t, h);  // [N, 1] logits / scores
    }
    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> out;
        c1.collect(out); c2.collect(out); fc.collect(out);
        return out;
    }
};

// Posterior encoder for the kl loss: image -> (mu, sigma) over the full
// vector-latent width; only noise dims enter the latent and the kl term.
template <class T>
struct ToyEncoder {
    nn::Conv2d<T> c1, c2;
    nn::Linear<T> fc;
    ToyEncoder() = default;
    ToyEncoder(const std::string& name, int image_size, std::uint64_t seed)
        : c1(name + ".c1", 1, 8, 3, 2, 1, derive_seed(seed, name + ".c1")),
          c2(name + ".c2", 8, 16, 3, 2, 1, derive_seed(seed, name + ".c2")),
          fc(name + ".fc", 16 * (image_size / 4) * (image_size / 4), 2 * kVectorLatentDim,
             derive_seed(seed, name + ".fc")) {}
    // Returns (mu, sigma), each [N, kVectorLatentDim]; sigma in (0, 2).
    std::pair<Var<T>, Var<T>> operator()(Tape<T>& t, Var<T> x) {
        Var<T> h = ad::relu(c1(t, x));
        h = ad::relu(c2(t, h));
        const Shape& hs = h.shape();
        h = ad::reshape(h, Shape{hs[0], hs[1] * hs[2] * hs[3]});
        Var<T> out = fc(t, h);
        std::vector<int> mu_idx(kVectorLatentDim), sg_idx(kVectorLatentDim);
        for (int d = 0; d < kVectorLatentDim; ++d) { mu_idx[std::size_t(d)] = d; sg_idx[std::size_t(d)] = kVectorLatentDim + d; }
        Var<T> mu = ad::gather_cols(out, mu_idx);
        Var<T> sigma = ad::scale(ad::sigmoid(ad::gather_cols(out, sg_idx)), T(2));
        return {mu, sigma};
    }
    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> out;
        c1.collect(out); c2.collect(out); fc.collect(out);
        return out;
    }
};

// Binary attribute classifier for the ce loss.
template <class T>
struct ToyAttrNet {
    nn::Conv2d<T> c1, c2;
    nn::Linear<T> fc;
    ToyAttrNet() = default;
    ToyAttrNet(const std::string& name, int image_size, std::uint64_t seed)
        : c1(name + ".c1", 1, 8, 3, 2, 1, derive_seed(seed, name + ".c1")),
          c2(name + ".c2", 8, 16, 3, 2, 1, derive_seed(seed, name + ".c2")),
          fc(name + ".fc", 16 * (image_size / 4) * (image_size / 4), 2, derive_seed(seed, name + ".fc")) {}
    Var<T> operator()(Tape<T>& t, Var<T> x) {
        Var<T> h = ad::relu(c1(t, x));
        h = ad::relu(c2(t, h));
        const Shape& hs = h.shape();
        h = ad::reshape(h, Shape{hs[0], hs[1] * hs[2] * hs[3]});
        return fc(t, h);  // [N, 2]
    }
    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> out;
        c1.collect(out); c2.collect(out); fc.collect(out);
        return out;
    }
};

// ==========================================================================
// Toy training
// ==========================================================================

namespace detail {

template <class T>
Var<T> abs_op(Var<T> x) { return ad::add(ad::relu(x), ad::relu(ad::neg(x))); }

// -mean_n log p(class_n) for logits [N, K] and per-sample class indices.
template <class T>
Var<T> nll_loss(Tape<T>& t, Var<T> logits, const std::vector<int>& cls) {
    const int n = logits.shape()[0], k = logits.shape()[1];
    TensorND<T> onehot(Shape{n, k});
    for (int i = 0; i < n; ++i) onehot.data[std::size_t(i) * k + cls[std::size_t(i)]] = T(1);
    Var<T> ls = ad::log_softmax(logits);
    return ad::neg(ad::scale(ad::sum_all(ad::mul(ls, t.input(onehot))), T(1.0 / n)));
}

}  // namespace detail

inline constexpr double kKlWeight = 0.1;
inline constexpr double kMmdSigma = 8.0;
inline constexpr double kWganClip = 0.05;

struct TrainedGm {
    ToyGenerator<float> gen;
    std::vector<double> loss_history;  // generator-side total per step
};

inline TrainedGm train_toy_gm(const GmSpec& spec) {
    using FL = FineLossType;
    TrainedGm out;
    out.gen = ToyGenerator<float>(spec);
    auto& gen = out.gen;

    AdamConfig cfg;
    cfg.lr = float(spec.lr);
    Adam<float> gen_opt(gen.parameters(), cfg);

    const bool use_adv = spec.has_loss(FL::adv);
    const bool use_wgan = spec.has_loss(FL::wgan);
    const bool use_kl = spec.has_loss(FL::kl);
    const bool use_ce = spec.has_loss(FL::ce);

    ToyCritic<float> critic;
    std::unique_ptr<Adam<float>> critic_opt;
    if (use_adv || use_wgan) {
        critic = ToyCritic<float>("d", spec.image_size, derive_seed(spec.seed, "critic"));
        critic_opt = std::make_unique<Adam<float>>(critic.parameters(), cfg);
    }
    ToyEncoder<float> encoder;
    ToyAttrNet<float> attr_net;
    std::vector<Parameter<float>*> aux_params;
    if (use_kl) {
        encoder = ToyEncoder<float>("e", spec.image_size, derive_seed(spec.seed, "encoder"));
        for (auto* p : encoder.parameters()) aux_params.push_back(p);
    }
    if (use_ce) {
        attr_net = ToyAttrNet<float>("a", spec.image_size, derive_seed(spec.seed, "attr"));
        for (auto* p : attr_net.parameters()) aux_params.push_back(p);
    }
    std::unique_ptr<Adam<float>> aux_opt;
    if (!aux_params.empty()) aux_opt = std::make_unique<Adam<float>>(aux_params, cfg);

    const int n = spec.batch, hw = spec.image_size * spec.image_size;
    const int p = spec.theta_dims();

    for (int step = 0; step < spec.train_steps; ++step) {
        const auto scenes = draw_scenes(spec.family, n, derive_seed(spec.seed, "scene", std::size_t(step)));
        const TensorND<float> targets = render_batch(spec.family, scenes, spec.image_size);
        const TensorND<float> latent = make_latent(spec, scenes, derive_seed(spec.seed, "noise", std::size_t(step)));

        try {
            // --- critic update on detached fake images ---
            if (use_adv || use_wgan) {
                const TensorND<float> fake = [&] {
                    Tape<float> ft;
                    Var<float> fv = gen.forward(ft, ft.input(latent), /*training=*/false);
                    return TensorND<float>(fv.shape(), fv.val());
                }();
                Tape<float> dt;
                Var<float> d_real = critic(dt, dt.input(targets));
                Var<float> d_fake = critic(dt, dt.input(fake));
                Var<float> d_loss = use_wgan
                    ? ad::sub(ad::mean_all(d_fake), ad::mean_all(d_real))
                    : ad::add(ad::neg(ad::mean_all(ad::log_sigmoid_clamped(d_real))),
                              ad::neg(ad::mean_all(ad::log_sigmoid_clamped(ad::neg(d_fake)))));
                critic_opt->zero_grad();
                dt.backward(d_loss);
                critic_opt->step();
                if (use_wgan)
                    for (auto* prm : critic.parameters())
                        for (auto& v : prm->value.data) v = std::clamp(v, float(-kWganClip), float(kWganClip));
            }

            // --- generator (+ auxiliary nets) update ---
            Tape<float> t;
            Var<float> target_v = t.input(targets);
            Var<float> kl_term;
            Var<float> imgs = [&]() -> Var<float> {
                if (!use_kl) return gen.forward(t, t.input(latent), /*training=*/true);
                // Reparameterized noise dims: z = theta + mask * (mu + sigma * eps)
                TensorND<float> theta_only(Shape{n, kVectorLatentDim});
                TensorND<float> noise_mask(Shape{n, kVectorLatentDim});
                for (int i = 0; i < n; ++i)
                    for (int d = 0; d < kVectorLatentDim; ++d) {
                        theta_only.data[std::size_t(i) * kVectorLatentDim + d] =
                            d < p ? float(scenes[std::size_t(i)].norm[std::size_t(d)]) : 0.0f;
                        noise_mask.data[std::size_t(i) * kVectorLatentDim + d] = d < p ? 0.0f : 1.0f;
                    }
                const auto eps = TensorND<float>::normal(Shape{n, kVectorLatentDim}, 0.0f, 1.0f,
                                                         derive_seed(spec.seed, "eps", std::size_t(step)));
                auto [mu, sigma] = encoder(t, target_v);
                Var<float> zn = ad::add(mu, ad::mul(sigma, t.input(eps)));
                Var<float> z = ad::add(t.input(theta_only), ad::mul(t.input(noise_mask), zn));
                // kl(q || N(0,1)) restricted to noise dims, mean over batch
                Var<float> lg2 = ad::scale(ad::log_clamped(sigma), 2.0f);
                Var<float> inner = ad::sub(ad::sub(ad::add(t.input(TensorND<float>::full(Shape{n, kVectorLatentDim}, 1.0f)), lg2),
                                                   ad::square(mu)),
                                           ad::square(sigma));
                kl_term = ad::scale(ad::sum_all(ad::mul(t.input(noise_mask), inner)), float(-0.5 / n));
                return gen.forward(t, z, /*training=*/true);
            }();

            std::vector<Var<float>> terms;
            Var<float> diff = ad::sub(imgs, target_v);
            if (spec.has_loss(FL::l1)) terms.push_back(ad::mean_all(detail::abs_op(diff)));
            if (spec.has_loss(FL::l2)) terms.push_back(ad::scale(ad::sum_all(ad::square(diff)), float(1.0 / n)));
            if (spec.has_loss(FL::mse)) terms.push_back(ad::mean_all(ad::square(diff)));
            if (spec.has_loss(FL::mmd))
                terms.push_back(ad::mmd2(ad::reshape(imgs, Shape{n, hw}), ad::reshape(target_v, Shape{n, hw}),
                                         float(kMmdSigma)));
            if (use_wgan) terms.push_back(ad::neg(ad::mean_all(critic(t, imgs))));
            if (use_adv) terms.push_back(ad::neg(ad::mean_all(ad::log_sigmoid_clamped(critic(t, imgs)))));
            if (use_kl) terms.push_back(ad::scale(kl_term, float(kKlWeight)));
            if (use_ce) {
                std::vector<int> attrs(static_cast<std::size_t>(n));
                for (int i = 0; i < n; ++i) attrs[std::size_t(i)] = scenes[std::size_t(i)].attr;
                terms.push_back(detail::nll_loss(t, attr_net(t, imgs), attrs));
                terms.push_back(detail::nll_loss(t, attr_net(t, target_v), attrs));
            }
            Var<float> total = terms[0];
            for (std::size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);

            gen_opt.zero_grad();
            if (critic_opt) critic_opt->zero_grad();
            if (aux_opt) aux_opt->zero_grad();
            t.backward(total);
            gen_opt.step();
            if (aux_opt) aux_opt->step();
            out.loss_history.push_back(double(total.scalar()));
        } catch (const NonFiniteError& e) {
            throw NonFiniteError("gm " + spec.id + " diverged at step " + std::to_string(step) +
                                 " (seed " + std::to_string(spec.seed) + "): " + e.what());
        }
    }
    return out;
}

// Draws n images from a trained GM; output clamped to [-1, 1].
inline TensorND<float> sample_images(ToyGenerator<float>& gen, int n, std::uint64_t seed) {
    const auto scenes = draw_scenes(gen.spec.family, n, derive_seed(seed, "scene"));
    const auto latent = make_latent(gen.spec, scenes, derive_seed(seed, "noise"));
    TensorND<float> imgs = gen.generate(latent);
    for (auto& v : imgs.data) v = std::clamp(v, -1.0f, 1.0f);
    return imgs;
}

}  // namespace gmparse::zoo
