#pragma once

#include <map>
#include <set>

#include "gmparse/dataset.hpp"
#include "gmparse/metrics.hpp"
#include "gmparse/parallel.hpp"

// Cross-validation orchestration: trains the extractor and parser on each
// fold's training generators, evaluates on the held-out pair, and compares
// against shuffled-label and random-guess chance levels. All runs are
// deterministic in their seeds; fold outcomes are independent, so they may be
// executed on worker threads without changing any result.

namespace gmparse::experiment {

// ==========================================================================
// Configuration and per-fold outcome
// ==========================================================================

struct ParsingRunConfig {
    FenConfig fen{};
    PnConfig pn{};
    AdamConfig fen_opt{};
    AdamConfig pn_opt{};
    EndToEndConfig losses{};
    bool weighted_ce = true;  // inverse-frequency class weights (off = negative control)
    int steps = 400;
    int batch = 16;
    int eval_images = 10;  // per held-out generator (0 = all available)
    int aggregate_n = 10;  // images merged into one aggregated prediction
    std::uint64_t seed = 0;
};

struct GmLabels {
    ArchitectureTargets arch;
    LossTargets loss;
};
using LabelMap = std::map<std::string, GmLabels>;

inline LabelMap zoo_labels(const data::Manifest& m) {
    LabelMap labels;
    for (const auto& e : m.gms)
        labels[e.spec.id] = {zoo::architecture_targets(e.spec), zoo::loss_targets(e.spec)};
    return labels;
}

struct FoldRun {
    metrics::ParsingScores image_level;  // every evaluated image scored separately
    metrics::ParsingScores aggregated;   // one merged prediction per held-out generator
    double parsing_f1_image = 0.0;       // mean of discrete and fine F1
    double parsing_f1_aggregated = 0.0;
    std::array<std::vector<std::vector<long>>, kDiscreteCount> confusion;  // image-level, pred x truth
    std::array<bool, kDiscreteCount> truth_two_sided{};  // head has >=2 ground-truth classes in this fold
    std::vector<double> loss_curve;                      // joint objective per step
    std::vector<PredictionRecord> per_gm_aggregate;      // order of split.test_ids
};

// Trained networks plus the label statistics they assume, for checkpointing.
struct TrainedParser {
    Fen<float> fen;
    Pn<float> pn;
    data::NormalizationStats stats;
};

// A confusion matrix collapses when every prediction lands in one row.
inline bool head_collapsed(const std::vector<std::vector<long>>& confusion) {
    int active_rows = 0;
    long total = 0;
    for (const auto& row : confusion) {
        long s = 0;
        for (long v : row) s += v;
        active_rows += s > 0;
        total += s;
    }
    return total > 0 && active_rows <= 1;
}

// ==========================================================================
// One fold
// ==========================================================================

// Trains on the fold's training generators and evaluates on its held-out
// pair. `train_override` substitutes the training labels (used by the
// shuffled-label baseline); evaluation always scores against the real ground
// truth. Normalization statistics and class weights come from the training
// labels only.
inline FoldRun run_parsing_fold(const std::string& root, const data::Manifest& m, const data::FoldSplit& split,
                                const ParsingRunConfig& cfg, const LabelMap* train_override = nullptr,
                                TrainedParser* keep = nullptr) {
    if (split.train_ids.empty() || split.test_ids.empty()) throw ValueError("run_parsing_fold: empty split");

    // --- training labels, statistics, weights ---
    std::vector<const data::GmEntry*> train_entries;
    std::vector<ArchitectureTargets> train_arch;
    std::vector<LossTargets> train_loss;
    for (const auto& id : split.train_ids) {
        const auto& e = m.entry(id);
        train_entries.push_back(&e);
        if (train_override) {
            train_arch.push_back(train_override->at(id).arch);
            train_loss.push_back(train_override->at(id).loss);
        } else {
            train_arch.push_back(zoo::architecture_targets(e.spec));
            train_loss.push_back(zoo::loss_targets(e.spec));
        }
    }
    const auto stats = data::compute_normalization(train_arch);
    const auto weights = cfg.weighted_ce ? compute_class_weights(train_arch, train_loss) : ClassWeights::unit();
    std::vector<std::array<double, kContinuousCount>> train_cont(train_arch.size());
    for (std::size_t i = 0; i < train_arch.size(); ++i)
        train_cont[i] = data::normalize(stats, train_arch[i].continuous_raw, /*clamp=*/false);

    std::vector<TensorND<float>> pools;
    pools.reserve(train_entries.size());
    for (const auto* e : train_entries) pools.push_back(data::load_gm_images(root, *e));

    // --- networks and optimizers ---
    Fen<float> fen(cfg.fen, derive_seed(cfg.seed, "fen"));
    Pn<float> pn(cfg.pn, derive_seed(cfg.seed, "pn"));
    Adam<float> fen_opt(fen.parameters(), cfg.fen_opt);
    Adam<float> pn_opt(pn.parameters(), cfg.pn_opt);

    FoldRun fold;
    fold.loss_curve.reserve(std::size_t(cfg.steps));
    const int h = m.image_size;
    for (int step = 0; step < cfg.steps; ++step) {
        std::mt19937_64 rng(derive_seed(cfg.seed, "batch", std::uint64_t(step)));
        std::uniform_int_distribution<int> pick_gm(0, int(pools.size()) - 1);
        TensorND<float> images(Shape{cfg.batch, 1, h, h});
        std::vector<std::array<double, kContinuousCount>> cont(std::size_t(cfg.batch));
        std::vector<ArchitectureTargets> arch(std::size_t(cfg.batch));
        std::vector<LossTargets> loss(std::size_t(cfg.batch));
        const std::size_t row = std::size_t(h) * h;
        for (int b = 0; b < cfg.batch; ++b) {
            const int g = pick_gm(rng);
            std::uniform_int_distribution<int> pick_img(0, pools[std::size_t(g)].shape[0] - 1);
            const int i = pick_img(rng);
            std::copy_n(pools[std::size_t(g)].data.begin() + std::size_t(i) * row, row,
                        images.data.begin() + std::size_t(b) * row);
            cont[std::size_t(b)] = train_cont[std::size_t(g)];
            arch[std::size_t(b)] = train_arch[std::size_t(g)];
            loss[std::size_t(b)] = train_loss[std::size_t(g)];
        }
        const auto targets = make_batch_targets<float>(cont, arch, loss, weights);
        const auto vals = train_step(fen, pn, fen_opt, pn_opt, images, targets, cfg.losses);
        fold.loss_curve.push_back(vals.total);
    }

    // --- evaluation on the held-out pair (always real ground truth) ---
    for (int k = 0; k < kDiscreteCount; ++k) {
        const int mk = kDiscreteCardinality[std::size_t(k)];
        fold.confusion[std::size_t(k)].assign(std::size_t(mk), std::vector<long>(std::size_t(mk), 0));
    }
    std::vector<PredictionRecord> img_pred, agg_pred;
    std::vector<std::array<double, kContinuousCount>> img_cont, agg_cont;
    std::vector<ArchitectureTargets> img_arch, agg_arch;
    std::vector<LossTargets> img_loss, agg_loss;
    std::array<std::set<int>, kDiscreteCount> truth_classes;
    for (const auto& id : split.test_ids) {
        const auto& e = m.entry(id);
        const auto gt_arch = zoo::architecture_targets(e.spec);
        const auto gt_loss = zoo::loss_targets(e.spec);
        const auto gt_cont = data::normalize(stats, gt_arch.continuous_raw, /*clamp=*/true);
        const auto batch = data::load_gm_images(root, e, cfg.eval_images);
        const auto recs = predict(fen, pn, batch);
        for (const auto& r : recs) {
            img_pred.push_back(r);
            img_cont.push_back(gt_cont);
            img_arch.push_back(gt_arch);
            img_loss.push_back(gt_loss);
            for (int k = 0; k < kDiscreteCount; ++k)
                ++fold.confusion[std::size_t(k)][std::size_t(r.discrete[std::size_t(k)])]
                                [std::size_t(gt_arch.discrete[std::size_t(k)])];
        }
        for (int k = 0; k < kDiscreteCount; ++k) truth_classes[std::size_t(k)].insert(gt_arch.discrete[std::size_t(k)]);
        const int take = cfg.aggregate_n > 0 ? std::min<int>(cfg.aggregate_n, int(recs.size())) : int(recs.size());
        const std::vector<PredictionRecord> head(recs.begin(), recs.begin() + take);
        agg_pred.push_back(metrics::aggregate_predictions(head));
        agg_cont.push_back(gt_cont);
        agg_arch.push_back(gt_arch);
        agg_loss.push_back(gt_loss);
    }
    for (int k = 0; k < kDiscreteCount; ++k) fold.truth_two_sided[std::size_t(k)] = truth_classes[std::size_t(k)].size() >= 2;
    fold.per_gm_aggregate = agg_pred;
    fold.image_level = metrics::score_predictions(img_pred, img_cont, img_arch, img_loss);
    fold.aggregated = metrics::score_predictions(agg_pred, agg_cont, agg_arch, agg_loss);
    fold.parsing_f1_image = 0.5 * (fold.image_level.discrete_f1 + fold.image_level.fine_f1);
    fold.parsing_f1_aggregated = 0.5 * (fold.aggregated.discrete_f1 + fold.aggregated.fine_f1);
    if (keep) {
        keep->fen = std::move(fen);
        keep->pn = std::move(pn);
        keep->stats = stats;
    }
    return fold;
}

// ==========================================================================
// Full experiment with chance baselines
// ==========================================================================

struct ChanceScores {
    double l1_mean = 0.0;
    double discrete_f1 = 0.0;
    double fine_f1 = 0.0;
};

struct FoldOutcome {
    data::FoldSplit split;
    FoldRun run;
    ChanceScores shuffled;  // mean over the label-shuffle repetitions
    ChanceScores random;    // Monte-Carlo uniform-guess level on this fold's eval set
};

struct ParsingExperimentResult {
    std::vector<FoldOutcome> outcomes;
    // Fold means, image-level scoring.
    double l1_mean = 0.0;
    double discrete_f1 = 0.0;
    double fine_f1 = 0.0;
    ChanceScores shuffled_mean, random_mean;
};

// Runs every fold (real labels), `n_shuffles` shuffled-label repetitions per
// fold, and the per-fold Monte-Carlo guess level. `jobs` worker threads split
// the runs; results do not depend on the thread count.
inline ParsingExperimentResult run_parsing_experiment(const std::string& root, const data::Manifest& m,
                                                      const std::vector<data::FoldSplit>& folds,
                                                      const ParsingRunConfig& cfg, int n_shuffles = 3,
                                                      long mc_draws = 100000, int jobs = 1) {
    if (folds.empty() || n_shuffles < 0) throw ValueError("run_parsing_experiment: need folds");
    const int nf = int(folds.size());
    ParsingExperimentResult res;
    res.outcomes.resize(std::size_t(nf));
    for (int i = 0; i < nf; ++i) res.outcomes[std::size_t(i)].split = folds[std::size_t(i)];

    // Task list: per fold one real run plus its shuffled repetitions.
    struct Task {
        int fold;
        int shuffle;  // -1 = real labels
    };
    std::vector<Task> tasks;
    std::vector<std::vector<FoldRun>> shuffle_runs(static_cast<std::size_t>(nf));
    for (int i = 0; i < nf; ++i) {
        tasks.push_back({i, -1});
        shuffle_runs[std::size_t(i)].resize(std::size_t(n_shuffles));
        for (int s = 0; s < n_shuffles; ++s) tasks.push_back({i, s});
    }

    parallel_for(int(tasks.size()), jobs, [&](int ti) {
        const auto task = tasks[std::size_t(ti)];
        const auto& split = folds[std::size_t(task.fold)];
        auto run_cfg = cfg;
        if (task.shuffle < 0) {
            run_cfg.seed = derive_seed(cfg.seed, "fold", std::uint64_t(task.fold));
            res.outcomes[std::size_t(task.fold)].run = run_parsing_fold(root, m, split, run_cfg);
            return;
        }
        std::vector<ArchitectureTargets> arch;
        std::vector<LossTargets> loss;
        for (const auto& id : split.train_ids) {
            const auto& spec = m.entry(id).spec;
            arch.push_back(zoo::architecture_targets(spec));
            loss.push_back(zoo::loss_targets(spec));
        }
        const auto [sa, sl] = metrics::shuffled_targets(
            arch, loss, derive_seed(cfg.seed, "shuffle-labels", std::uint64_t(task.fold * 64 + task.shuffle)));
        LabelMap override_labels;
        for (std::size_t i = 0; i < split.train_ids.size(); ++i)
            override_labels[split.train_ids[i]] = {sa[i], sl[i]};
        run_cfg.seed = derive_seed(cfg.seed, "shuffle-fold", std::uint64_t(task.fold * 64 + task.shuffle));
        shuffle_runs[std::size_t(task.fold)][std::size_t(task.shuffle)] =
            run_parsing_fold(root, m, split, run_cfg, &override_labels);
    });

    // Monte-Carlo guess level on each fold's image-level evaluation multiset.
    for (int i = 0; i < nf; ++i) {
        const auto& split = folds[std::size_t(i)];
        std::vector<ArchitectureTargets> train_arch;
        for (const auto& id : split.train_ids) train_arch.push_back(zoo::architecture_targets(m.entry(id).spec));
        const auto stats = data::compute_normalization(train_arch);
        std::vector<std::array<double, kContinuousCount>> cont_gt;
        std::vector<ArchitectureTargets> arch_gt;
        std::vector<LossTargets> loss_gt;
        for (const auto& id : split.test_ids) {
            const auto& e = m.entry(id);
            const auto arch = zoo::architecture_targets(e.spec);
            const int n_images = int(e.images.size());
            const int reps = cfg.eval_images > 0 ? std::min<int>(cfg.eval_images, n_images) : n_images;
            for (int r = 0; r < reps; ++r) {
                cont_gt.push_back(data::normalize(stats, arch.continuous_raw, /*clamp=*/true));
                arch_gt.push_back(arch);
                loss_gt.push_back(zoo::loss_targets(e.spec));
            }
        }
        const auto mc =
            metrics::mc_random_guess(cont_gt, arch_gt, loss_gt, mc_draws, derive_seed(cfg.seed, "mc", std::uint64_t(i)));
        auto& out = res.outcomes[std::size_t(i)];
        out.random = {mc.l1_mean, mc.discrete_f1, mc.fine_f1};
        for (int s = 0; s < n_shuffles; ++s) {
            const auto& r = shuffle_runs[std::size_t(i)][std::size_t(s)].image_level;
            out.shuffled.l1_mean += r.l1_mean / n_shuffles;
            out.shuffled.discrete_f1 += r.discrete_f1 / n_shuffles;
            out.shuffled.fine_f1 += r.fine_f1 / n_shuffles;
        }
    }

    for (const auto& o : res.outcomes) {
        res.l1_mean += o.run.image_level.l1_mean / nf;
        res.discrete_f1 += o.run.image_level.discrete_f1 / nf;
        res.fine_f1 += o.run.image_level.fine_f1 / nf;
        res.shuffled_mean.l1_mean += o.shuffled.l1_mean / nf;
        res.shuffled_mean.discrete_f1 += o.shuffled.discrete_f1 / nf;
        res.shuffled_mean.fine_f1 += o.shuffled.fine_f1 / nf;
        res.random_mean.l1_mean += o.random.l1_mean / nf;
        res.random_mean.discrete_f1 += o.random.discrete_f1 / nf;
        res.random_mean.fine_f1 += o.random.fine_f1 / nf;
    }
    return res;
}

// ==========================================================================
// Report serialization (stable key order, no timestamps)
// ==========================================================================

inline nlohmann::json scores_to_json(const metrics::ParsingScores& s) {
    nlohmann::json j;
    j["l1"] = s.l1;
    j["l1_mean"] = s.l1_mean;
    j["discrete_f1"] = s.discrete_f1;
    j["fine_f1"] = s.fine_f1;
    return j;
}

inline nlohmann::json chance_to_json(const ChanceScores& s) {
    return {{"l1_mean", s.l1_mean}, {"discrete_f1", s.discrete_f1}, {"fine_f1", s.fine_f1}};
}

inline nlohmann::json report_json(const ParsingExperimentResult& res, const ParsingRunConfig& cfg, int n_shuffles,
                                  long mc_draws) {
    nlohmann::json j;
    j["config"] = {{"fen_channels", cfg.fen.channels},
                   {"fen_blocks", cfg.fen.blocks},
                   {"steps", cfg.steps},
                   {"batch", cfg.batch},
                   {"fen_lr", cfg.fen_opt.lr},
                   {"pn_lr", cfg.pn_opt.lr},
                   {"eval_images", cfg.eval_images},
                   {"aggregate_n", cfg.aggregate_n},
                   {"weighted_ce", cfg.weighted_ce},
                   {"use_fingerprint_losses", cfg.losses.use_fingerprint_losses},
                   {"n_shuffles", n_shuffles},
                   {"mc_draws", mc_draws},
                   {"seed", cfg.seed}};
    j["folds"] = nlohmann::json::array();
    for (const auto& o : res.outcomes) {
        nlohmann::json f;
        f["test_ids"] = o.split.test_ids;
        f["image_level"] = scores_to_json(o.run.image_level);
        f["aggregated"] = scores_to_json(o.run.aggregated);
        f["parsing_f1_image"] = o.run.parsing_f1_image;
        f["parsing_f1_aggregated"] = o.run.parsing_f1_aggregated;
        f["shuffled"] = chance_to_json(o.shuffled);
        f["random"] = chance_to_json(o.random);
        j["folds"].push_back(std::move(f));
    }
    j["fold_mean"] = {{"l1_mean", res.l1_mean},
                      {"discrete_f1", res.discrete_f1},
                      {"fine_f1", res.fine_f1},
                      {"shuffled", chance_to_json(res.shuffled_mean)},
                      {"random", chance_to_json(res.random_mean)}};
    j["margins"] = {{"l1_vs_shuffled", res.shuffled_mean.l1_mean - res.l1_mean},
                    {"l1_vs_random", res.random_mean.l1_mean - res.l1_mean},
                    {"discrete_f1_vs_shuffled", res.discrete_f1 - res.shuffled_mean.discrete_f1},
                    {"discrete_f1_vs_random", res.discrete_f1 - res.random_mean.discrete_f1}};
    return j;
}

}  // namespace gmparse::experiment
