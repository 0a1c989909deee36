#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>

#include "doctest.h"
#include "gmparse/experiment.hpp"

using namespace gmparse;
using namespace gmparse::experiment;
namespace fs = std::filesystem;

namespace {

// One tiny on-disk dataset shared by the whole suite: all 12 generators at a
// reduced training budget, a handful of images each.
struct Fixture {
    std::string root;
    data::Manifest manifest;
    std::vector<data::FoldSplit> folds;
};

const Fixture& fixture() {
    static const Fixture f = [] {
        Fixture fx;
        const auto dir = fs::temp_directory_path() / "gmparse_experiment_tests";
        fs::remove_all(dir);
        fx.root = dir.string();
        auto specs = zoo::default_zoo(7);
        for (auto& s : specs) s.train_steps = 25;
        fx.manifest = data::build_dataset(fx.root, specs, 8, 7);
        fx.folds = data::make_folds(specs, 3);
        return fx;
    }();
    return f;
}

ParsingRunConfig tiny_cfg() {
    ParsingRunConfig cfg;
    cfg.fen.channels = 4;
    cfg.fen.blocks = 1;
    cfg.steps = 25;
    cfg.batch = 8;
    cfg.eval_images = 4;
    cfg.aggregate_n = 4;
    cfg.seed = 11;
    return cfg;
}

}  // namespace

// ==== single fold ====

TEST_CASE("a parsing fold trains, evaluates the held-out pair, and is deterministic") {
    const auto& fx = fixture();
    const auto cfg = tiny_cfg();
    const auto fold = run_parsing_fold(fx.root, fx.manifest, fx.folds[0], cfg);

    REQUIRE(int(fold.loss_curve.size()) == cfg.steps);
    for (double v : fold.loss_curve) CHECK(std::isfinite(v));

    CHECK(fold.image_level.l1_mean >= 0.0);
    CHECK(fold.image_level.discrete_f1 >= 0.0);
    CHECK(fold.image_level.discrete_f1 <= 1.0);
    CHECK(fold.image_level.fine_f1 >= 0.0);
    CHECK(fold.image_level.fine_f1 <= 1.0);
    CHECK(fold.parsing_f1_image ==
          doctest::Approx(0.5 * (fold.image_level.discrete_f1 + fold.image_level.fine_f1)).epsilon(1e-12));
    REQUIRE(fold.per_gm_aggregate.size() == 2);

    // Confusion matrices count every evaluated image exactly once per head.
    for (int k = 0; k < kDiscreteCount; ++k) {
        long total = 0;
        for (const auto& row : fold.confusion[std::size_t(k)])
            for (long v : row) total += v;
        CHECK(total == 2 * cfg.eval_images);
    }

    // Two-sided flags match the ground truth of the held-out pair.
    for (int k = 0; k < kDiscreteCount; ++k) {
        const int a = zoo::architecture_targets(fx.manifest.entry(fx.folds[0].test_ids[0]).spec).discrete[std::size_t(k)];
        const int b = zoo::architecture_targets(fx.manifest.entry(fx.folds[0].test_ids[1]).spec).discrete[std::size_t(k)];
        CHECK(fold.truth_two_sided[std::size_t(k)] == (a != b));
    }

    const auto again = run_parsing_fold(fx.root, fx.manifest, fx.folds[0], cfg);
    CHECK(again.loss_curve == fold.loss_curve);
    CHECK(again.image_level.l1_mean == fold.image_level.l1_mean);
    CHECK(again.image_level.discrete_f1 == fold.image_level.discrete_f1);
    CHECK(again.aggregated.l1_mean == fold.aggregated.l1_mean);
}

TEST_CASE("shuffled training labels change the run but evaluation stays against real truth") {
    const auto& fx = fixture();
    const auto cfg = tiny_cfg();
    const auto& split = fx.folds[1];

    std::vector<ArchitectureTargets> arch;
    std::vector<LossTargets> loss;
    for (const auto& id : split.train_ids) {
        arch.push_back(zoo::architecture_targets(fx.manifest.entry(id).spec));
        loss.push_back(zoo::loss_targets(fx.manifest.entry(id).spec));
    }
    const auto [sa, sl] = metrics::shuffled_targets(arch, loss, 19);
    LabelMap override_labels;
    for (std::size_t i = 0; i < split.train_ids.size(); ++i) override_labels[split.train_ids[i]] = {sa[i], sl[i]};

    const auto real = run_parsing_fold(fx.root, fx.manifest, split, cfg);
    const auto shuffled = run_parsing_fold(fx.root, fx.manifest, split, cfg, &override_labels);
    CHECK(shuffled.loss_curve != real.loss_curve);
    // Normalization statistics are permutation-invariant, so both runs score
    // in the same continuous space and the values stay comparable.
    CHECK(std::isfinite(shuffled.image_level.l1_mean));
    CHECK(shuffled.image_level.discrete_f1 >= 0.0);
}

TEST_CASE("the collapse detector flags single-row confusion matrices only") {
    CHECK(head_collapsed({{0, 0}, {3, 2}}));
    CHECK(head_collapsed({{5, 1}, {0, 0}}));
    CHECK(!head_collapsed({{2, 0}, {0, 2}}));
    CHECK(!head_collapsed({{1, 1}, {1, 0}}));
    CHECK(!head_collapsed({{0, 0}, {0, 0}}));  // no predictions at all
}

// ==== experiment with baselines ====

TEST_CASE("the experiment aggregates folds, baselines, and is thread-count invariant") {
    const auto& fx = fixture();
    auto cfg = tiny_cfg();
    cfg.seed = 23;
    const std::vector<data::FoldSplit> two_folds = {fx.folds[0], fx.folds[1]};

    const auto serial = run_parsing_experiment(fx.root, fx.manifest, two_folds, cfg, 1, 2000, 1);
    REQUIRE(serial.outcomes.size() == 2);

    // Fold means are plain averages of the per-fold image-level scores.
    double l1 = 0, f1 = 0;
    for (const auto& o : serial.outcomes) {
        l1 += o.run.image_level.l1_mean / 2.0;
        f1 += o.run.image_level.discrete_f1 / 2.0;
        CHECK(o.random.discrete_f1 > 0.0);
        CHECK(o.random.discrete_f1 < 1.0);
        CHECK(o.random.l1_mean > 0.1);
        CHECK(o.shuffled.l1_mean >= 0.0);
    }
    CHECK(serial.l1_mean == doctest::Approx(l1).epsilon(1e-12));
    CHECK(serial.discrete_f1 == doctest::Approx(f1).epsilon(1e-12));

    const auto parallel = run_parsing_experiment(fx.root, fx.manifest, two_folds, cfg, 1, 2000, 4);
    const auto js = report_json(serial, cfg, 1, 2000);
    const auto jp = report_json(parallel, cfg, 1, 2000);
    CHECK(js.dump(2) == jp.dump(2));
}

TEST_CASE("the report serializes byte-identically across repeated runs") {
    const auto& fx = fixture();
    auto cfg = tiny_cfg();
    cfg.seed = 29;
    const std::vector<data::FoldSplit> one_fold = {fx.folds[2]};

    const auto a = run_parsing_experiment(fx.root, fx.manifest, one_fold, cfg, 1, 1000, 2);
    const auto b = run_parsing_experiment(fx.root, fx.manifest, one_fold, cfg, 1, 1000, 2);
    const auto da = report_json(a, cfg, 1, 1000).dump(2);
    const auto db = report_json(b, cfg, 1, 1000).dump(2);
    CHECK(da == db);

    const auto j = report_json(a, cfg, 1, 1000);
    CHECK(j.contains("config"));
    CHECK(j.contains("folds"));
    CHECK(j.contains("fold_mean"));
    CHECK(j.contains("margins"));
    CHECK(j["config"]["seed"] == 29);
    CHECK(j["folds"].size() == 1);
    CHECK(j["folds"][0]["test_ids"].size() == 2);
}
