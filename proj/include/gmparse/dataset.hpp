#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "gmparse/gm_zoo.hpp"
#include "gmparse/image_io.hpp"
#include "gmparse/parallel.hpp"

// On-disk datasets sampled from the zoo, label normalization, and
// leave-one-pair-out fold splits.

namespace gmparse::data {

// ==========================================================================
// Manifest
// ==========================================================================

struct GmEntry {
    zoo::GmSpec spec;
    std::vector<std::string> images;  // paths relative to the dataset root
};

struct Manifest {
    int version = 1;
    std::uint64_t master_seed = 0;
    int image_size = 16;
    int images_per_gm = 0;
    std::vector<GmEntry> gms;

    const GmEntry& entry(const std::string& id) const {
        for (const auto& e : gms)
            if (e.spec.id == id) return e;
        throw ValueError("manifest has no gm with id " + id);
    }
};

inline nlohmann::json manifest_to_json(const Manifest& m) {
    nlohmann::json j;
    j["version"] = m.version;
    j["master_seed"] = m.master_seed;
    j["image_size"] = m.image_size;
    j["images_per_gm"] = m.images_per_gm;
    j["gms"] = nlohmann::json::array();
    for (const auto& e : m.gms) j["gms"].push_back({{"spec", zoo::spec_to_json(e.spec)}, {"images", e.images}});
    return j;
}

inline Manifest manifest_from_json(const nlohmann::json& j) {
    Manifest m;
    m.version = j.at("version").get<int>();
    if (m.version != 1) throw ValueError("unsupported manifest version " + std::to_string(m.version));
    m.master_seed = j.at("master_seed").get<std::uint64_t>();
    m.image_size = j.at("image_size").get<int>();
    m.images_per_gm = j.at("images_per_gm").get<int>();
    for (const auto& e : j.at("gms")) {
        GmEntry entry;
        entry.spec = zoo::spec_from_json(e.at("spec"));
        entry.images = e.at("images").get<std::vector<std::string>>();
        m.gms.push_back(std::move(entry));
    }
    return m;
}

inline void save_manifest(const std::string& root, const Manifest& m) {
    std::filesystem::create_directories(root);
    std::ofstream f(std::filesystem::path(root) / "manifest.json");
    if (!f) throw IoError("cannot write manifest under " + root);
    f << manifest_to_json(m).dump(2) << "\n";
}

inline Manifest load_manifest(const std::string& root) {
    const auto path = std::filesystem::path(root) / "manifest.json";
    std::ifstream f(path);
    if (!f) throw IoError("cannot open manifest: " + path.string());
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValueError("malformed manifest " + path.string() + ": " + e.what());
    }
    return manifest_from_json(j);
}

// ==========================================================================
// Dataset building
// ==========================================================================

// Trains every GM in the list and samples `images_per_gm` images from each,
// written as PGM files under root/images/<id>/. Deterministic in the spec
// seeds; files on disk (with their 8-bit quantization) ARE the dataset.
// `jobs` worker threads split the per-GM training; each GM's pipeline is
// seeded independently, so the output does not depend on the thread count.
inline Manifest build_dataset(const std::string& root, const std::vector<zoo::GmSpec>& specs, int images_per_gm,
                              std::uint64_t master_seed, int jobs = 1) {
    if (specs.empty() || images_per_gm < 1) throw ValueError("build_dataset: need specs and a positive image count");
    Manifest m;
    m.master_seed = master_seed;
    m.image_size = specs.front().image_size;
    m.images_per_gm = images_per_gm;
    for (const auto& spec : specs)
        if (spec.image_size != m.image_size) throw ValueError("build_dataset: mixed image sizes");

    std::vector<TensorND<float>> batches(specs.size());
    parallel_for(int(specs.size()), jobs, [&](int i) {
        const auto& spec = specs[std::size_t(i)];
        auto trained = zoo::train_toy_gm(spec);
        batches[std::size_t(i)] = zoo::sample_images(trained.gen, images_per_gm, derive_seed(spec.seed, "dataset"));
    });

    for (std::size_t si = 0; si < specs.size(); ++si) {
        const auto& spec = specs[si];
        const auto& batch = batches[si];
        GmEntry entry;
        entry.spec = spec;
        const auto dir = std::filesystem::path(root) / "images" / spec.id;
        std::filesystem::create_directories(dir);
        for (int i = 0; i < images_per_gm; ++i) {
            char name[32];
            std::snprintf(name, sizeof name, "%05d.pgm", i);
            TensorND<float> img(Shape{1, m.image_size, m.image_size});
            std::copy_n(batch.data.begin() + std::size_t(i) * img.data.size(), img.data.size(), img.data.begin());
            write_image((dir / name).string(), img);
            entry.images.push_back((std::filesystem::path("images") / spec.id / name).generic_string());
        }
        m.gms.push_back(std::move(entry));
    }
    save_manifest(root, m);
    return m;
}

// Loads every image of one GM as a batch [n, 1, H, W].
inline TensorND<float> load_gm_images(const std::string& root, const GmEntry& entry, int limit = 0) {
    const int n = limit > 0 ? std::min<int>(limit, int(entry.images.size())) : int(entry.images.size());
    if (n == 0) throw ValueError("gm " + entry.spec.id + " has no images");
    TensorND<float> first = read_image<float>((std::filesystem::path(root) / entry.images[0]).string());
    const int h = first.shape[1], w = first.shape[2];
    TensorND<float> batch(Shape{n, 1, h, w});
    std::copy(first.data.begin(), first.data.end(), batch.data.begin());
    for (int i = 1; i < n; ++i) {
        auto img = read_image<float>((std::filesystem::path(root) / entry.images[std::size_t(i)]).string());
        if (img.shape != first.shape) throw ValueError("inconsistent image shapes for gm " + entry.spec.id);
        std::copy(img.data.begin(), img.data.end(), batch.data.begin() + std::size_t(i) * img.data.size());
    }
    return batch;
}

// ==========================================================================
// Continuous-label normalization (min-max from the training split only)
// ==========================================================================

struct NormalizationStats {
    std::array<double, kContinuousCount> lo{}, hi{};
};

inline NormalizationStats compute_normalization(const std::vector<ArchitectureTargets>& train) {
    if (train.empty()) throw ValueError("compute_normalization: empty training split");
    NormalizationStats s;
    for (int j = 0; j < kContinuousCount; ++j) {
        double lo = train[0].continuous_raw[std::size_t(j)], hi = lo;
        for (const auto& a : train) {
            lo = std::min(lo, a.continuous_raw[std::size_t(j)]);
            hi = std::max(hi, a.continuous_raw[std::size_t(j)]);
        }
        if (lo == hi)
            throw ValueError(std::string("compute_normalization: parameter ") + kContinuousNames[std::size_t(j)] +
                             " is constant across the training split");
        s.lo[std::size_t(j)] = lo;
        s.hi[std::size_t(j)] = hi;
    }
    return s;
}

// Training values land in [0, 1] by construction; out-of-range values (unseen
// test GMs) are clamped when `clamp` is set.
inline std::array<double, kContinuousCount> normalize(const NormalizationStats& s,
                                                      const std::array<double, kContinuousCount>& raw, bool clamp) {
    std::array<double, kContinuousCount> out{};
    for (int j = 0; j < kContinuousCount; ++j) {
        double v = (raw[std::size_t(j)] - s.lo[std::size_t(j)]) / (s.hi[std::size_t(j)] - s.lo[std::size_t(j)]);
        if (clamp) v = std::clamp(v, 0.0, 1.0);
        out[std::size_t(j)] = v;
    }
    return out;
}

inline std::array<double, kContinuousCount> denormalize(const NormalizationStats& s,
                                                        const std::array<double, kContinuousCount>& norm) {
    std::array<double, kContinuousCount> out{};
    for (int j = 0; j < kContinuousCount; ++j)
        out[std::size_t(j)] = s.lo[std::size_t(j)] + norm[std::size_t(j)] * (s.hi[std::size_t(j)] - s.lo[std::size_t(j)]);
    return out;
}

inline nlohmann::json normalization_to_json(const NormalizationStats& s) {
    nlohmann::json j;
    for (int i = 0; i < kContinuousCount; ++i) {
        j["lo"].push_back(s.lo[std::size_t(i)]);
        j["hi"].push_back(s.hi[std::size_t(i)]);
    }
    return j;
}

inline NormalizationStats normalization_from_json(const nlohmann::json& j) {
    NormalizationStats s;
    for (int i = 0; i < kContinuousCount; ++i) {
        s.lo[std::size_t(i)] = j.at("lo").at(std::size_t(i)).get<double>();
        s.hi[std::size_t(i)] = j.at("hi").at(std::size_t(i)).get<double>();
    }
    return s;
}

// ==========================================================================
// Fold splits: each fold holds out one GM per family
// ==========================================================================

struct FoldSplit {
    std::vector<std::string> train_ids;
    std::vector<std::string> test_ids;  // one blob, one stripe
};

inline std::vector<FoldSplit> make_folds(const std::vector<zoo::GmSpec>& specs, std::uint64_t seed) {
    std::vector<std::string> blobs, stripes;
    for (const auto& s : specs) (s.family == "blobs" ? blobs : stripes).push_back(s.id);
    std::sort(blobs.begin(), blobs.end());
    std::sort(stripes.begin(), stripes.end());
    if (blobs.empty() || blobs.size() != stripes.size())
        throw ValueError("make_folds: need the same positive number of specs per family");
    std::mt19937_64 rb(derive_seed(seed, "folds:blobs")), rs(derive_seed(seed, "folds:stripes"));
    std::shuffle(blobs.begin(), blobs.end(), rb);
    std::shuffle(stripes.begin(), stripes.end(), rs);
    std::vector<FoldSplit> folds(blobs.size());
    for (std::size_t i = 0; i < blobs.size(); ++i) {
        auto& f = folds[i];
        f.test_ids = {blobs[i], stripes[i]};
        for (const auto& s : specs)
            if (s.id != blobs[i] && s.id != stripes[i]) f.train_ids.push_back(s.id);
    }
    return folds;
}

}  // namespace gmparse::data
