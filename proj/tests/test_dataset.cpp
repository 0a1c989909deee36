#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>

#include "doctest.h"
#include "gmparse/dataset.hpp"

using namespace gmparse;
using namespace gmparse::data;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("gmparse_dataset_tests" + std::string("/") + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(bool(f));
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

ArchitectureTargets uniform_targets(double v) {
    ArchitectureTargets a;
    a.continuous_raw.fill(v);
    return a;
}

}  // namespace

// ==== byte codec ====

TEST_CASE("byte codec is exact on the 8-bit lattice and clamps outside the range") {
    CHECK(to_byte(-1.0) == 0);
    CHECK(to_byte(1.0) == 255);
    CHECK(to_byte(0.0) == 128);  // round(127.5) rounds away from zero
    CHECK(to_byte(7.5) == 255);
    CHECK(to_byte(-2.0) == 0);
    CHECK(from_byte(0) == doctest::Approx(-1.0));
    CHECK(from_byte(255) == doctest::Approx(1.0));
    for (int b = 0; b < 256; ++b) CHECK(to_byte(from_byte(static_cast<unsigned char>(b))) == b);
}

// ==== pgm / ppm round trips ====

TEST_CASE("pgm write/read round trip is lossless for quantized samples") {
    const auto dir = fresh_dir("roundtrip");
    TensorND<float> img(Shape{1, 5, 4});
    for (std::size_t i = 0; i < img.data.size(); ++i)
        img.data[i] = float(from_byte(static_cast<unsigned char>((i * 37 + 11) % 256)));
    const auto path = (dir / "a.pgm").string();
    write_image(path, img);

    const auto raw = slurp(path);
    CHECK(raw.substr(0, 11) == "P5\n4 5\n255\n");  // width before height
    CHECK(raw.size() == 11 + 20);

    const auto back = read_image<float>(path);
    REQUIRE(back.shape == img.shape);
    for (std::size_t i = 0; i < img.data.size(); ++i) CHECK(back.data[i] == img.data[i]);

    // A second encode of already-quantized data reproduces the file bytes.
    const auto path2 = (dir / "b.pgm").string();
    write_image(path2, back);
    CHECK(slurp(path2) == raw);
}

TEST_CASE("ppm stores three planar channels as interleaved pixels") {
    const auto dir = fresh_dir("ppm");
    TensorND<double> img(Shape{3, 2, 2});
    for (std::size_t i = 0; i < img.data.size(); ++i)
        img.data[i] = from_byte(static_cast<unsigned char>(20 * i + 5));
    const auto path = (dir / "c.ppm").string();
    write_image(path, img);

    const auto raw = slurp(path);
    CHECK(raw.substr(0, 11) == "P6\n2 2\n255\n");
    CHECK(raw.size() == 11 + 12);
    // First pixel: channel bytes of planar offsets 0, 4, 8.
    CHECK(static_cast<unsigned char>(raw[11]) == to_byte(img.data[0]));
    CHECK(static_cast<unsigned char>(raw[12]) == to_byte(img.data[4]));
    CHECK(static_cast<unsigned char>(raw[13]) == to_byte(img.data[8]));

    const auto back = read_image<double>(path);
    REQUIRE(back.shape == img.shape);
    for (std::size_t i = 0; i < img.data.size(); ++i) CHECK(back.data[i] == img.data[i]);
}

TEST_CASE("image io rejects bad shapes, headers, and truncated payloads") {
    const auto dir = fresh_dir("errors");
    CHECK_THROWS_AS((void)read_image<float>((dir / "missing.pgm").string()), IoError);

    TensorND<float> two(Shape{2, 3, 3});
    CHECK_THROWS_AS(write_image((dir / "two.pgm").string(), two), ShapeError);

    TensorND<float> ok(Shape{1, 3, 3});
    const auto trunc = dir / "trunc.pgm";
    write_image(trunc.string(), ok);
    fs::resize_file(trunc, 11 + 5);
    CHECK_THROWS_AS((void)read_image<float>(trunc.string()), IoError);

    {
        std::ofstream f(dir / "magic.pgm", std::ios::binary);
        f << "P4\n3 3\n255\n123456789";
    }
    CHECK_THROWS_AS((void)read_image<float>((dir / "magic.pgm").string()), IoError);

    {
        std::ofstream f(dir / "depth.pgm", std::ios::binary);
        f << "P5\n3 3\n127\n123456789";
    }
    CHECK_THROWS_AS((void)read_image<float>((dir / "depth.pgm").string()), IoError);
}

TEST_CASE("unit-range grayscale export clamps and quantizes") {
    const auto dir = fresh_dir("unit");
    TensorND<double> img(Shape{2, 2});
    img.data = {0.0, 1.0, 0.5, 1.5};
    const auto path = (dir / "u.pgm").string();
    write_pgm_unit(path, img);
    const auto raw = slurp(path);
    CHECK(raw.size() == 11 + 4);
    CHECK(static_cast<unsigned char>(raw[11]) == 0);
    CHECK(static_cast<unsigned char>(raw[12]) == 255);
    CHECK(static_cast<unsigned char>(raw[13]) == 128);
    CHECK(static_cast<unsigned char>(raw[14]) == 255);  // clamped
}

// ==== continuous-label normalization ====

TEST_CASE("min-max normalization maps the training range onto the unit interval") {
    const std::vector<ArchitectureTargets> train = {uniform_targets(5.0), uniform_targets(95.0)};
    const auto stats = compute_normalization(train);
    for (int j = 0; j < kContinuousCount; ++j) {
        CHECK(stats.lo[std::size_t(j)] == 5.0);
        CHECK(stats.hi[std::size_t(j)] == 95.0);
    }

    const auto mid = normalize(stats, uniform_targets(50.0).continuous_raw, false);
    for (double v : mid) CHECK(v == 0.5);
    const auto lo = normalize(stats, uniform_targets(5.0).continuous_raw, false);
    const auto hi = normalize(stats, uniform_targets(95.0).continuous_raw, false);
    for (double v : lo) CHECK(v == 0.0);
    for (double v : hi) CHECK(v == 1.0);
}

TEST_CASE("out-of-range values clamp only when requested") {
    const std::vector<ArchitectureTargets> train = {uniform_targets(5.0), uniform_targets(95.0)};
    const auto stats = compute_normalization(train);

    const auto over = normalize(stats, uniform_targets(120.0).continuous_raw, true);
    const auto under = normalize(stats, uniform_targets(-10.0).continuous_raw, true);
    for (double v : over) CHECK(v == 1.0);
    for (double v : under) CHECK(v == 0.0);

    const auto raw_over = normalize(stats, uniform_targets(120.0).continuous_raw, false);
    for (double v : raw_over) CHECK(v == doctest::Approx(115.0 / 90.0).epsilon(1e-12));

    const auto round = denormalize(stats, normalize(stats, uniform_targets(42.0).continuous_raw, false));
    for (double v : round) CHECK(v == doctest::Approx(42.0).epsilon(1e-12));
}

TEST_CASE("a training parameter with no spread is rejected by name") {
    auto a = uniform_targets(5.0);
    auto b = uniform_targets(95.0);
    b.continuous_raw[0] = 5.0;  // "layers" becomes constant
    const std::vector<ArchitectureTargets> train = {a, b};
    CHECK_THROWS_WITH_AS(compute_normalization(train), doctest::Contains("layers"), ValueError);
    CHECK_THROWS_AS(compute_normalization({}), ValueError);
}

TEST_CASE("normalization stats survive a json round trip") {
    const std::vector<ArchitectureTargets> train = {uniform_targets(2.0), uniform_targets(7.0)};
    auto stats = compute_normalization(train);
    stats.lo[3] = -1.25;
    const auto back = normalization_from_json(normalization_to_json(stats));
    CHECK(back.lo == stats.lo);
    CHECK(back.hi == stats.hi);
}

// ==== fold splits ====

TEST_CASE("folds hold out one gm per family and cover every gm exactly once") {
    const auto specs = zoo::default_zoo(7);
    std::map<std::string, std::string> family_of;
    for (const auto& s : specs) family_of[s.id] = s.family;

    const auto folds = make_folds(specs, 3);
    REQUIRE(folds.size() == 6);
    std::map<std::string, int> tested;
    for (const auto& f : folds) {
        REQUIRE(f.test_ids.size() == 2);
        CHECK(f.train_ids.size() == 10);
        CHECK(family_of.at(f.test_ids[0]) != family_of.at(f.test_ids[1]));
        for (const auto& id : f.test_ids) {
            ++tested[id];
            for (const auto& t : f.train_ids) CHECK(t != id);
        }
    }
    CHECK(tested.size() == 12);
    for (const auto& [id, n] : tested) {
        (void)id;
        CHECK(n == 1);
    }

    const auto again = make_folds(specs, 3);
    for (std::size_t i = 0; i < folds.size(); ++i) {
        CHECK(again[i].test_ids == folds[i].test_ids);
        CHECK(again[i].train_ids == folds[i].train_ids);
    }

    const auto other = make_folds(specs, 4);
    bool differs = false;
    for (std::size_t i = 0; i < folds.size(); ++i) differs = differs || other[i].test_ids != folds[i].test_ids;
    CHECK(differs);

    auto blobs_only = specs;
    blobs_only.erase(std::remove_if(blobs_only.begin(), blobs_only.end(),
                                    [](const zoo::GmSpec& s) { return s.family == "stripes"; }),
                     blobs_only.end());
    CHECK_THROWS_AS(make_folds(blobs_only, 0), ValueError);
}

TEST_CASE("every fold's training split supports class weighting at any seed") {
    const auto specs = zoo::default_zoo(7);
    std::map<std::string, zoo::GmSpec> by_id;
    for (const auto& s : specs) by_id[s.id] = s;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        for (const auto& fold : make_folds(specs, seed)) {
            std::vector<ArchitectureTargets> arch;
            std::vector<LossTargets> loss;
            for (const auto& id : fold.train_ids) {
                arch.push_back(zoo::architecture_targets(by_id.at(id)));
                loss.push_back(zoo::loss_targets(by_id.at(id)));
            }
            CHECK_NOTHROW((void)compute_class_weights(arch, loss));
            CHECK_NOTHROW((void)compute_normalization(arch));
        }
    }
}

// ==== dataset building ====

TEST_CASE("dataset build writes a reloadable manifest and lattice-quantized images") {
    const auto dir = fresh_dir("build");
    auto specs = zoo::default_zoo(11);
    std::vector<zoo::GmSpec> small = {specs[0], specs[6]};  // one per family
    for (auto& s : small) s.train_steps = 4;

    const auto m = build_dataset(dir.string(), small, 3, 123);
    CHECK(m.image_size == 16);
    CHECK(m.images_per_gm == 3);
    REQUIRE(m.gms.size() == 2);
    CHECK(fs::exists(dir / "manifest.json"));
    for (const auto& e : m.gms) {
        REQUIRE(e.images.size() == 3);
        for (const auto& rel : e.images) CHECK(fs::exists(dir / rel));
    }

    const auto loaded = load_manifest(dir.string());
    CHECK(manifest_to_json(loaded) == manifest_to_json(m));
    CHECK(loaded.entry(small[0].id).images[0] == m.gms[0].images[0]);
    CHECK_THROWS_AS((void)loaded.entry("nope"), ValueError);

    const auto batch = load_gm_images(dir.string(), loaded.entry(small[0].id));
    REQUIRE(batch.shape == Shape{3, 1, 16, 16});
    for (float v : batch.data) {
        CHECK(v >= -1.0f);
        CHECK(v <= 1.0f);
        CHECK(float(from_byte(to_byte(v))) == v);  // values sit on the byte lattice
    }

    const auto head = load_gm_images(dir.string(), loaded.entry(small[0].id), 2);
    REQUIRE(head.shape == Shape{2, 1, 16, 16});
    for (std::size_t i = 0; i < head.data.size(); ++i) CHECK(head.data[i] == batch.data[i]);
}

TEST_CASE("dataset build is byte-identical across reruns") {
    const auto dir_a = fresh_dir("rerun_a");
    const auto dir_b = fresh_dir("rerun_b");
    auto specs = zoo::default_zoo(11);
    std::vector<zoo::GmSpec> small = {specs[1], specs[7]};
    for (auto& s : small) s.train_steps = 3;

    const auto ma = build_dataset(dir_a.string(), small, 2, 9);
    const auto mb = build_dataset(dir_b.string(), small, 2, 9);
    CHECK(slurp(dir_a / "manifest.json") == slurp(dir_b / "manifest.json"));
    for (std::size_t g = 0; g < ma.gms.size(); ++g)
        for (std::size_t i = 0; i < ma.gms[g].images.size(); ++i)
            CHECK(slurp(dir_a / ma.gms[g].images[i]) == slurp(dir_b / mb.gms[g].images[i]));
}

TEST_CASE("manifest loading reports missing or malformed files") {
    const auto dir = fresh_dir("manifest_errors");
    CHECK_THROWS_AS((void)load_manifest(dir.string()), IoError);
    {
        std::ofstream f(dir / "manifest.json");
        f << "{ not json";
    }
    CHECK_THROWS_AS((void)load_manifest(dir.string()), ValueError);
    {
        std::ofstream f(dir / "manifest.json");
        f << R"({"version": 2, "master_seed": 0, "image_size": 16, "images_per_gm": 1, "gms": []})";
    }
    CHECK_THROWS_AS((void)load_manifest(dir.string()), ValueError);
}
