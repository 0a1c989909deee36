// Command-line front end: builds the generative-model zoo, trains and
// evaluates the parser, runs chance baselines, extracts fingerprints, and
// drives the detection/attribution applications. Every run directory gets a
// config.json snapshot sufficient to reproduce its outputs bit-identically.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gmparse/apps.hpp"
#include "gmparse/checkpoint.hpp"
#include "gmparse/experiment.hpp"
#include "gmparse/gradcheck_suite.hpp"
#include "gmparse/metrics.hpp"

namespace fs = std::filesystem;
using namespace gmparse;

namespace {

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

void write_json_file(const fs::path& path, const nlohmann::json& j) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << j.dump(2) << "\n";
    if (!f) throw IoError("short write: " + path.string());
}

nlohmann::json read_json_file(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open: " + path.string());
    auto j = nlohmann::json::parse(f, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded()) throw IoError("not valid JSON: " + path.string());
    return j;
}

// Creates the run directory and stores the exact configuration snapshot.
fs::path init_run_dir(const std::string& out, const nlohmann::json& config) {
    fs::path dir(out);
    fs::create_directories(dir);
    write_json_file(dir / "config.json", config);
    return dir;
}

void write_csv(const fs::path& path, const std::string& header, const std::vector<std::string>& rows) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << header << "\n";
    for (const auto& r : rows) f << r << "\n";
    if (!f) throw IoError("short write: " + path.string());
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

// Reconstructs an extractor from a run directory (config.json + fen.ckpt).
Fen<float> load_fen(const fs::path& run_dir) {
    const auto cfg = read_json_file(run_dir / "config.json");
    FenConfig fc;
    fc.in_channels = 1;
    fc.channels = cfg.at("fen_channels").get<int>();
    fc.blocks = cfg.at("fen_blocks").get<int>();
    Fen<float> fen(fc, 0);
    load_checkpoint((run_dir / "fen.ckpt").string(), fen.tensors());
    return fen;
}

// Matrix [H, W] scaled by its largest magnitude into [0, 1] for PGM export.
void write_pgm_scaled(const fs::path& path, const TensorND<double>& m) {
    double peak = 0.0;
    for (double v : m.data) peak = std::max(peak, std::abs(v));
    TensorND<float> img(m.shape);
    for (std::size_t i = 0; i < m.data.size(); ++i)
        img.data[i] = peak > 0 ? float(std::abs(m.data[i]) / peak) : 0.0f;
    write_pgm_unit(path.string(), img);
}

std::vector<zoo::GmSpec> manifest_specs(const data::Manifest& m) {
    std::vector<zoo::GmSpec> specs;
    for (const auto& e : m.gms) specs.push_back(e.spec);
    return specs;
}

data::FoldSplit pick_fold(const data::Manifest& m, int fold, std::uint64_t folds_seed) {
    const auto folds = data::make_folds(manifest_specs(m), folds_seed);
    if (fold < 0 || fold >= int(folds.size()))
        throw ValueError("fold " + std::to_string(fold) + " out of range [0, " + std::to_string(folds.size()) + ")");
    return folds[std::size_t(fold)];
}

// Image-level and aggregated scoring of a trained parser on named generators.
struct EvalResult {
    metrics::ParsingScores image_level, aggregated;
    std::vector<std::string> csv_rows;  // one per image: gm,image,predictions
};

EvalResult evaluate_parser(Fen<float>& fen, Pn<float>& pn, const data::NormalizationStats& stats,
                           const std::string& root, const data::Manifest& m, const std::vector<std::string>& ids,
                           int images_per_gm) {
    EvalResult out;
    std::vector<PredictionRecord> img_pred, agg_pred;
    std::vector<std::array<double, kContinuousCount>> img_cont, agg_cont;
    std::vector<ArchitectureTargets> img_arch, agg_arch;
    std::vector<LossTargets> img_loss, agg_loss;
    for (const auto& id : ids) {
        const auto& e = m.entry(id);
        const auto gt_arch = zoo::architecture_targets(e.spec);
        const auto gt_loss = zoo::loss_targets(e.spec);
        const auto gt_cont = data::normalize(stats, gt_arch.continuous_raw, /*clamp=*/true);
        const auto batch = data::load_gm_images(root, e, images_per_gm);
        const auto recs = predict(fen, pn, batch);
        for (std::size_t i = 0; i < recs.size(); ++i) {
            img_pred.push_back(recs[i]);
            img_cont.push_back(gt_cont);
            img_arch.push_back(gt_arch);
            img_loss.push_back(gt_loss);
            std::string row = id + "," + e.images[i];
            for (double v : recs[i].continuous) row += "," + fmt(v);
            for (int v : recs[i].discrete) row += "," + std::to_string(v);
            for (int v : recs[i].fine_flags) row += "," + std::to_string(v);
            out.csv_rows.push_back(std::move(row));
        }
        agg_pred.push_back(metrics::aggregate_predictions(recs));
        agg_cont.push_back(gt_cont);
        agg_arch.push_back(gt_arch);
        agg_loss.push_back(gt_loss);
    }
    out.image_level = metrics::score_predictions(img_pred, img_cont, img_arch, img_loss);
    out.aggregated = metrics::score_predictions(agg_pred, agg_cont, agg_arch, agg_loss);
    return out;
}

std::string predictions_csv_header() {
    std::string h = "gm,image";
    for (const char* n : kContinuousNames) h += std::string(",cont_") + n;
    for (const char* n : kDiscreteNames) h += std::string(",disc_") + n;
    for (const char* n : kFineNames) h += std::string(",loss_") + n;
    return h;
}

// Concatenates every training generator's images into one fake pool.
TensorND<float> fake_pool(const std::string& root, const data::Manifest& m, const std::vector<std::string>& ids) {
    std::vector<TensorND<float>> batches;
    int total = 0;
    for (const auto& id : ids) {
        batches.push_back(data::load_gm_images(root, m.entry(id)));
        total += batches.back().shape[0];
    }
    TensorND<float> pool(Shape{total, 1, m.image_size, m.image_size});
    std::size_t off = 0;
    for (const auto& b : batches) {
        std::copy(b.data.begin(), b.data.end(), pool.data.begin() + off);
        off += b.data.size();
    }
    return pool;
}

// ---------------------------------------------------------------------------
// Command options
// ---------------------------------------------------------------------------

struct ZooBuildOpts {
    std::string out;
    int images_per_gm = 40;
    int train_steps = 0;  // 0 keeps each spec's own budget
    std::uint64_t seed = 0;
    int jobs = 1;
};

struct ParseTrainOpts {
    std::string data, out;
    int fold = 0;
    std::uint64_t folds_seed = 0;
    int steps = 400, batch = 32;
    int fen_channels = 16, fen_blocks = 3, pn_hidden = 128;
    double fen_lr = 1e-4, pn_lr = 1e-3;
    int eval_images = 10, aggregate_n = 10;
    bool unweighted_ce = false, no_fingerprint_losses = false;
    std::uint64_t seed = 0;
};

struct ParseEvalOpts {
    std::string data, model, out;
    int images_per_gm = 10;
};

struct FingerprintExtractOpts {
    std::string model, image, out;
    bool spectrum = false;
};

struct BaselineOpts {
    std::string data, out;
    int fold = 0;
    std::uint64_t folds_seed = 0;
    int shuffles = 3;
    long mc_draws = 100000;
    int steps = 400, batch = 32;
    int fen_channels = 16, fen_blocks = 3, pn_hidden = 128;
    double fen_lr = 1e-4, pn_lr = 1e-3;
    int eval_images = 10, aggregate_n = 10;
    std::uint64_t seed = 0;
};

struct SimilarityOpts {
    std::string data, model, out;
    int images_per_gm = 10, pairs = 64;
    std::uint64_t seed = 0;
};

struct DeepfakeTrainOpts {
    std::string data, holdout, out;
    int fen_channels = 8, fen_blocks = 2;
    int head_channels = 8, head_hidden = 32;
    int steps = 200, batch = 16;
    double lr = 1e-3;
    std::uint64_t seed = 0;
};

struct DeepfakeEvalOpts {
    std::string data, model, out;
    std::vector<std::string> gms;  // defaults to the model's holdout
    int genuine = 40;
    std::uint64_t seed = 1;
};

struct AttributeTrainOpts {
    std::string data, out;
    std::vector<std::string> gms;
    int train_images = 30;
    int fen_channels = 8, fen_blocks = 2;
    int head_channels = 8, head_hidden = 32;
    int steps = 300, batch = 16;
    double lr = 1e-3;
    std::uint64_t seed = 0;
};

struct AttributeEvalOpts {
    std::string data, model, out;
    int eval_images = 0;  // per class; 0 = every image beyond the training slice
    std::uint64_t seed = 1;
};

struct HeatmapOpts {
    std::string model, image, out;
    int patch = 4;
    double fill = 0.5;
};

struct GradcheckOpts {
    int trials = 5;
    double tol = 1e-4;
    std::uint64_t seed = 77;
};

// ---------------------------------------------------------------------------
// Command bodies
// ---------------------------------------------------------------------------

void cmd_zoo_build(const ZooBuildOpts& o) {
    auto specs = zoo::default_zoo(o.seed);
    if (o.train_steps > 0)
        for (auto& s : specs) s.train_steps = o.train_steps;
    zoo::validate_zoo(specs);
    const auto dir = init_run_dir(o.out, {{"command", "zoo build"},
                                          {"images_per_gm", o.images_per_gm},
                                          {"train_steps", o.train_steps},
                                          {"seed", o.seed}});
    const auto m = data::build_dataset(o.out, specs, o.images_per_gm, o.seed, o.jobs);
    std::cout << "built " << m.gms.size() << " generators x " << m.images_per_gm << " images under " << dir.string()
              << "\n";
}

nlohmann::json parsing_config_json(const char* command, const std::string& data, int fold, std::uint64_t folds_seed,
                                   const experiment::ParsingRunConfig& rc) {
    return {{"command", command},
            {"data", data},
            {"fold", fold},
            {"folds_seed", folds_seed},
            {"steps", rc.steps},
            {"batch", rc.batch},
            {"fen_channels", rc.fen.channels},
            {"fen_blocks", rc.fen.blocks},
            {"pn_hidden", rc.pn.head_hidden},
            {"fen_lr", rc.fen_opt.lr},
            {"pn_lr", rc.pn_opt.lr},
            {"eval_images", rc.eval_images},
            {"aggregate_n", rc.aggregate_n},
            {"weighted_ce", rc.weighted_ce},
            {"use_fingerprint_losses", rc.losses.use_fingerprint_losses},
            {"seed", rc.seed}};
}

experiment::ParsingRunConfig parsing_run_config(const data::Manifest& m, int steps, int batch, int channels,
                                                int blocks, int pn_hidden, double fen_lr, double pn_lr, int eval_images,
                                                int aggregate_n, bool weighted_ce, bool use_fp, std::uint64_t seed) {
    experiment::ParsingRunConfig rc;
    rc.fen.channels = channels;
    rc.fen.blocks = blocks;
    rc.pn.in_h = m.image_size;
    rc.pn.in_w = m.image_size;
    rc.pn.head_hidden = pn_hidden;
    rc.fen_opt.lr = fen_lr;
    rc.pn_opt.lr = pn_lr;
    rc.losses.use_fingerprint_losses = use_fp;
    rc.weighted_ce = weighted_ce;
    rc.steps = steps;
    rc.batch = batch;
    rc.eval_images = eval_images;
    rc.aggregate_n = aggregate_n;
    rc.seed = seed;
    return rc;
}

void cmd_parse_train(const ParseTrainOpts& o) {
    const auto m = data::load_manifest(o.data);
    const auto split = pick_fold(m, o.fold, o.folds_seed);
    const auto rc = parsing_run_config(m, o.steps, o.batch, o.fen_channels, o.fen_blocks, o.pn_hidden, o.fen_lr,
                                       o.pn_lr, o.eval_images, o.aggregate_n, !o.unweighted_ce,
                                       !o.no_fingerprint_losses, o.seed);
    const auto dir = init_run_dir(o.out, parsing_config_json("parse train", o.data, o.fold, o.folds_seed, rc));

    experiment::TrainedParser nets;
    const auto run = experiment::run_parsing_fold(o.data, m, split, rc, nullptr, &nets);

    save_checkpoint((dir / "fen.ckpt").string(), nets.fen.tensors(),
                    {{"kind", "fen"}, {"channels", rc.fen.channels}, {"blocks", rc.fen.blocks}});
    save_checkpoint((dir / "pn.ckpt").string(), nets.pn.tensors(),
                    {{"kind", "pn"}, {"in_h", m.image_size}, {"in_w", m.image_size}, {"head_hidden", o.pn_hidden}});
    write_json_file(dir / "norm.json", data::normalization_to_json(nets.stats));

    std::vector<std::string> curve;
    for (std::size_t i = 0; i < run.loss_curve.size(); ++i)
        curve.push_back(std::to_string(i) + "," + fmt(run.loss_curve[i]));
    write_csv(dir / "loss_curve.csv", "step,total_loss", curve);

    nlohmann::json rep;
    rep["fold"] = o.fold;
    rep["train_ids"] = split.train_ids;
    rep["test_ids"] = split.test_ids;
    rep["image_level"] = experiment::scores_to_json(run.image_level);
    rep["aggregated"] = experiment::scores_to_json(run.aggregated);
    rep["parsing_f1_image"] = run.parsing_f1_image;
    rep["parsing_f1_aggregated"] = run.parsing_f1_aggregated;
    rep["final_loss"] = run.loss_curve.empty() ? 0.0 : run.loss_curve.back();
    write_json_file(dir / "report.json", rep);

    std::cout << "fold " << o.fold << " held-out {";
    for (std::size_t i = 0; i < split.test_ids.size(); ++i) std::cout << (i ? ", " : "") << split.test_ids[i];
    std::cout << "}: L1 " << fmt(run.image_level.l1_mean) << ", discrete F1 " << fmt(run.image_level.discrete_f1)
              << ", loss-type F1 " << fmt(run.image_level.fine_f1) << "\n";
}

void cmd_parse_eval(const ParseEvalOpts& o) {
    const auto mc = read_json_file(fs::path(o.model) / "config.json");
    const auto m = data::load_manifest(o.data);
    const auto split = pick_fold(m, mc.at("fold").get<int>(), mc.at("folds_seed").get<std::uint64_t>());

    auto fen = load_fen(o.model);
    PnConfig pc;
    pc.in_channels = 1;
    pc.in_h = m.image_size;
    pc.in_w = m.image_size;
    pc.head_hidden = mc.at("pn_hidden").get<int>();
    Pn<float> pn(pc, 0);
    load_checkpoint((fs::path(o.model) / "pn.ckpt").string(), pn.tensors());
    const auto stats = data::normalization_from_json(read_json_file(fs::path(o.model) / "norm.json"));

    const auto dir = init_run_dir(o.out, {{"command", "parse eval"},
                                          {"data", o.data},
                                          {"model", o.model},
                                          {"images_per_gm", o.images_per_gm}});
    const auto res = evaluate_parser(fen, pn, stats, o.data, m, split.test_ids, o.images_per_gm);
    write_csv(dir / "predictions.csv", predictions_csv_header(), res.csv_rows);

    nlohmann::json rep;
    rep["fold"] = mc.at("fold");
    rep["test_ids"] = split.test_ids;
    rep["images_per_gm"] = o.images_per_gm;
    rep["image_level"] = experiment::scores_to_json(res.image_level);
    rep["aggregated"] = experiment::scores_to_json(res.aggregated);
    rep["parsing_f1_image"] = 0.5 * (res.image_level.discrete_f1 + res.image_level.fine_f1);
    rep["parsing_f1_aggregated"] = 0.5 * (res.aggregated.discrete_f1 + res.aggregated.fine_f1);
    write_json_file(dir / "report.json", rep);

    std::cout << "evaluated " << res.csv_rows.size() << " images; image-level L1 " << fmt(res.image_level.l1_mean)
              << ", aggregated L1 " << fmt(res.aggregated.l1_mean) << ", aggregated discrete F1 "
              << fmt(res.aggregated.discrete_f1) << "\n";
}

void cmd_fingerprint_extract(const FingerprintExtractOpts& o) {
    auto fen = load_fen(o.model);
    const auto img = read_image<float>(o.image);
    TensorND<float> batch(Shape{1, img.shape[0], img.shape[1], img.shape[2]});
    std::copy(img.data.begin(), img.data.end(), batch.data.begin());
    const auto fp = extract_fingerprint(fen, batch);

    const auto dir = init_run_dir(o.out, {{"command", "fingerprint extract"},
                                          {"model", o.model},
                                          {"image", o.image},
                                          {"spectrum", o.spectrum}});
    std::ofstream raw(dir / "fingerprint.bin", std::ios::binary);
    if (!raw) throw IoError("cannot open for writing: " + (dir / "fingerprint.bin").string());
    raw.write(reinterpret_cast<const char*>(fp.data.data()), std::streamsize(fp.data.size() * sizeof(float)));
    if (!raw) throw IoError("short write: " + (dir / "fingerprint.bin").string());
    write_json_file(dir / "fingerprint.json", {{"shape", std::vector<int>{img.shape[0], img.shape[1], img.shape[2]}},
                                               {"dtype", "float32"},
                                               {"layout", "row-major"}});
    if (o.spectrum) {
        TensorND<float> plane(Shape{img.shape[1], img.shape[2]});
        std::copy_n(fp.data.begin(), plane.data.size(), plane.data.begin());
        const auto spec = spectral::dft2(plane);
        write_pgm_unit((dir / "spectrum.pgm").string(), spectral::spectrum_magnitude_image(spec, /*log_scale=*/true));
    }
    std::cout << "fingerprint [" << img.shape[0] << ", " << img.shape[1] << ", " << img.shape[2] << "] written to "
              << dir.string() << "\n";
}

void cmd_baseline_random_gt(const BaselineOpts& o) {
    const auto m = data::load_manifest(o.data);
    const auto split = pick_fold(m, o.fold, o.folds_seed);
    auto rc = parsing_run_config(m, o.steps, o.batch, o.fen_channels, o.fen_blocks, o.pn_hidden, o.fen_lr, o.pn_lr,
                                 o.eval_images, o.aggregate_n, /*weighted_ce=*/true, /*use_fp=*/true, o.seed);
    auto config = parsing_config_json("baseline random-gt", o.data, o.fold, o.folds_seed, rc);
    config["shuffles"] = o.shuffles;
    config["mc_draws"] = o.mc_draws;
    const auto dir = init_run_dir(o.out, config);

    std::vector<ArchitectureTargets> arch;
    std::vector<LossTargets> loss;
    for (const auto& id : split.train_ids) {
        arch.push_back(zoo::architecture_targets(m.entry(id).spec));
        loss.push_back(zoo::loss_targets(m.entry(id).spec));
    }

    nlohmann::json rep;
    rep["fold"] = o.fold;
    rep["test_ids"] = split.test_ids;
    rep["shuffled_runs"] = nlohmann::json::array();
    experiment::ChanceScores mean;
    for (int s = 0; s < o.shuffles; ++s) {
        const auto [sa, sl] = metrics::shuffled_targets(arch, loss, derive_seed(o.seed, "shuffle-labels", std::uint64_t(s)));
        experiment::LabelMap override_labels;
        for (std::size_t i = 0; i < split.train_ids.size(); ++i)
            override_labels[split.train_ids[i]] = {sa[i], sl[i]};
        auto run_cfg = rc;
        run_cfg.seed = derive_seed(o.seed, "shuffle-fold", std::uint64_t(s));
        const auto run = experiment::run_parsing_fold(o.data, m, split, run_cfg, &override_labels);
        rep["shuffled_runs"].push_back(experiment::scores_to_json(run.image_level));
        mean.l1_mean += run.image_level.l1_mean / o.shuffles;
        mean.discrete_f1 += run.image_level.discrete_f1 / o.shuffles;
        mean.fine_f1 += run.image_level.fine_f1 / o.shuffles;
    }
    rep["shuffled_mean"] = experiment::chance_to_json(mean);

    // Uniform-guess level on the identical evaluation item multiset.
    const auto stats = data::compute_normalization(arch);
    std::vector<std::array<double, kContinuousCount>> cont_gt;
    std::vector<ArchitectureTargets> arch_gt;
    std::vector<LossTargets> loss_gt;
    for (const auto& id : split.test_ids) {
        const auto& e = m.entry(id);
        const auto a = zoo::architecture_targets(e.spec);
        const int n_images = int(e.images.size());
        const int reps = o.eval_images > 0 ? std::min<int>(o.eval_images, n_images) : n_images;
        for (int r = 0; r < reps; ++r) {
            cont_gt.push_back(data::normalize(stats, a.continuous_raw, /*clamp=*/true));
            arch_gt.push_back(a);
            loss_gt.push_back(zoo::loss_targets(e.spec));
        }
    }
    const auto guess = metrics::mc_random_guess(cont_gt, arch_gt, loss_gt, o.mc_draws, derive_seed(o.seed, "mc"));
    rep["random"] = {{"l1_mean", guess.l1_mean}, {"discrete_f1", guess.discrete_f1}, {"fine_f1", guess.fine_f1}};
    write_json_file(dir / "report.json", rep);

    std::cout << "fold " << o.fold << " chance levels: shuffled-label L1 " << fmt(mean.l1_mean) << " / F1 "
              << fmt(mean.discrete_f1) << "; uniform guess L1 " << fmt(guess.l1_mean) << " / F1 "
              << fmt(guess.discrete_f1) << "\n";
}

void cmd_similarity(const SimilarityOpts& o) {
    auto fen = load_fen(o.model);
    const auto m = data::load_manifest(o.data);
    const auto dir = init_run_dir(o.out, {{"command", "similarity"},
                                          {"data", o.data},
                                          {"model", o.model},
                                          {"images_per_gm", o.images_per_gm},
                                          {"pairs", o.pairs},
                                          {"seed", o.seed}});
    std::vector<std::string> ids;
    std::vector<TensorND<float>> fps;
    for (const auto& e : m.gms) {
        ids.push_back(e.spec.id);
        fps.push_back(extract_fingerprint(fen, data::load_gm_images(o.data, e, o.images_per_gm)));
    }
    const auto sim = metrics::similarity_matrix(fps, o.pairs, o.seed);
    const int g = sim.shape[0];
    double diag = 0.0, off = 0.0;
    for (int i = 0; i < g; ++i)
        for (int j = 0; j < g; ++j) (i == j ? diag : off) += sim.data[std::size_t(i) * g + j];
    diag /= g;
    off /= double(g) * (g - 1);

    std::vector<std::string> rows;
    std::string header = "id";
    for (const auto& id : ids) header += "," + id;
    for (int i = 0; i < g; ++i) {
        std::string row = ids[std::size_t(i)];
        for (int j = 0; j < g; ++j) row += "," + fmt(sim.data[std::size_t(i) * g + j]);
        rows.push_back(std::move(row));
    }
    write_csv(dir / "similarity.csv", header, rows);

    TensorND<float> img(sim.shape);
    for (std::size_t i = 0; i < sim.data.size(); ++i) img.data[i] = float((sim.data[i] + 1.0) / 2.0);
    write_pgm_unit((dir / "similarity.pgm").string(), img);

    write_json_file(dir / "report.json", {{"ids", ids},
                                          {"mean_diagonal", diag},
                                          {"mean_off_diagonal", off},
                                          {"gap", diag - off}});
    std::cout << "similarity over " << g << " generators: mean diagonal " << fmt(diag) << ", off-diagonal " << fmt(off)
              << ", gap " << fmt(diag - off) << "\n";
}

void cmd_deepfake_train(const DeepfakeTrainOpts& o) {
    const auto m = data::load_manifest(o.data);
    (void)m.entry(o.holdout);  // must exist
    std::vector<std::string> train_ids;
    for (const auto& e : m.gms)
        if (e.spec.id != o.holdout) train_ids.push_back(e.spec.id);
    if (train_ids.empty()) throw ValueError("deepfake train: no training generators besides the holdout");

    const auto dir = init_run_dir(o.out, {{"command", "deepfake train"},
                                          {"data", o.data},
                                          {"holdout", o.holdout},
                                          {"fen_channels", o.fen_channels},
                                          {"fen_blocks", o.fen_blocks},
                                          {"head_channels", o.head_channels},
                                          {"head_hidden", o.head_hidden},
                                          {"steps", o.steps},
                                          {"batch", o.batch},
                                          {"lr", o.lr},
                                          {"seed", o.seed}});
    const auto fake = fake_pool(o.data, m, train_ids);
    const auto genuine = apps::render_genuine(fake.shape[0], m.image_size, derive_seed(o.seed, "genuine:train"));

    Fen<float> fen({1, o.fen_channels, o.fen_blocks}, derive_seed(o.seed, "fen"));
    apps::DetectorHead<float> head(1, m.image_size, m.image_size, o.head_channels, o.head_hidden,
                                   derive_seed(o.seed, "head"));
    apps::DetectorTrainConfig tc;
    tc.steps = o.steps;
    tc.batch = o.batch;
    tc.lr = o.lr;
    tc.seed = derive_seed(o.seed, "train");
    const auto hist = apps::train_detector(fen, head, genuine, fake, tc);

    save_checkpoint((dir / "fen.ckpt").string(), fen.tensors(),
                    {{"kind", "fen"}, {"channels", o.fen_channels}, {"blocks", o.fen_blocks}});
    save_checkpoint((dir / "detector.ckpt").string(), head.tensors(), {{"kind", "detector"}});
    std::vector<std::string> rows;
    for (std::size_t i = 0; i < hist.size(); ++i)
        rows.push_back(std::to_string(i) + "," + fmt(hist[i].ce) + "," + fmt(hist[i].fingerprint_total) + "," +
                       fmt(hist[i].total));
    write_csv(dir / "losses.csv", "step,cross_entropy,fingerprint,total", rows);
    write_json_file(dir / "report.json", {{"train_gms", train_ids},
                                          {"n_fake", fake.shape[0]},
                                          {"n_genuine", genuine.shape[0]},
                                          {"final_ce", hist.empty() ? 0.0 : hist.back().ce},
                                          {"final_total", hist.empty() ? 0.0 : hist.back().total}});
    std::cout << "detector trained on " << train_ids.size() << " generators (holdout " << o.holdout << "), final loss "
              << fmt(hist.empty() ? 0.0 : hist.back().total) << "\n";
}

void cmd_deepfake_eval(const DeepfakeEvalOpts& o) {
    const auto mc = read_json_file(fs::path(o.model) / "config.json");
    const auto m = data::load_manifest(o.data);
    auto fen = load_fen(o.model);
    apps::DetectorHead<float> head(1, m.image_size, m.image_size, mc.at("head_channels").get<int>(),
                                   mc.at("head_hidden").get<int>(), 0);
    load_checkpoint((fs::path(o.model) / "detector.ckpt").string(), head.tensors());

    auto gms = o.gms;
    if (gms.empty()) gms.push_back(mc.at("holdout").get<std::string>());
    const auto dir = init_run_dir(o.out, {{"command", "deepfake eval"},
                                          {"data", o.data},
                                          {"model", o.model},
                                          {"gms", gms},
                                          {"genuine", o.genuine},
                                          {"seed", o.seed}});

    std::vector<std::string> rows;
    std::vector<double> fake_scores, genuine_scores;
    for (const auto& id : gms) {
        const auto& e = m.entry(id);
        const auto scores = apps::detect(fen, head, data::load_gm_images(o.data, e));
        for (std::size_t i = 0; i < scores.size(); ++i) {
            fake_scores.push_back(scores[i]);
            rows.push_back(e.images[i] + "," + fmt(scores[i]) + ",1");
        }
    }
    const auto genuine = apps::render_genuine(o.genuine, m.image_size, derive_seed(o.seed, "genuine:eval"));
    const auto gscores = apps::detect(fen, head, genuine);
    for (std::size_t i = 0; i < gscores.size(); ++i) {
        genuine_scores.push_back(gscores[i]);
        rows.push_back("genuine/" + std::to_string(i) + "," + fmt(gscores[i]) + ",0");
    }
    write_csv(dir / "scores.csv", "path,score,label", rows);

    const double auc = metrics::mann_whitney_auc(fake_scores, genuine_scores);
    write_json_file(dir / "report.json",
                    {{"auc", auc}, {"n_fake", fake_scores.size()}, {"n_genuine", genuine_scores.size()}, {"gms", gms}});
    std::cout << "genuine-vs-fake AUC " << fmt(auc) << " (" << fake_scores.size() << " fake, " << genuine_scores.size()
              << " genuine)\n";
}

void cmd_attribute_train(const AttributeTrainOpts& o) {
    const auto m = data::load_manifest(o.data);
    if (o.gms.size() < 1) throw ValueError("attribute train: need at least one generator id");
    const auto dir = init_run_dir(o.out, {{"command", "attribute train"},
                                          {"data", o.data},
                                          {"gms", o.gms},
                                          {"train_images", o.train_images},
                                          {"fen_channels", o.fen_channels},
                                          {"fen_blocks", o.fen_blocks},
                                          {"head_channels", o.head_channels},
                                          {"head_hidden", o.head_hidden},
                                          {"steps", o.steps},
                                          {"batch", o.batch},
                                          {"lr", o.lr},
                                          {"seed", o.seed}});
    std::vector<TensorND<float>> class_images;
    for (const auto& id : o.gms) class_images.push_back(data::load_gm_images(o.data, m.entry(id), o.train_images));
    class_images.push_back(apps::render_genuine(o.train_images, m.image_size, derive_seed(o.seed, "genuine:train")));

    Fen<float> fen({1, o.fen_channels, o.fen_blocks}, derive_seed(o.seed, "fen"));
    apps::AttributionHead<float> head(1, m.image_size, m.image_size, int(o.gms.size()) + 1, o.head_channels,
                                      o.head_hidden, derive_seed(o.seed, "head"));
    apps::AttributionTrainConfig tc;
    tc.steps = o.steps;
    tc.batch = o.batch;
    tc.lr = o.lr;
    tc.seed = derive_seed(o.seed, "train");
    const auto hist = apps::train_attribution(fen, head, class_images, tc);

    save_checkpoint((dir / "fen.ckpt").string(), fen.tensors(),
                    {{"kind", "fen"}, {"channels", o.fen_channels}, {"blocks", o.fen_blocks}});
    save_checkpoint((dir / "attribution.ckpt").string(), head.tensors(),
                    {{"kind", "attribution"}, {"classes", int(o.gms.size()) + 1}});
    std::vector<std::string> rows;
    for (std::size_t i = 0; i < hist.size(); ++i) rows.push_back(std::to_string(i) + "," + fmt(hist[i]));
    write_csv(dir / "losses.csv", "step,cross_entropy", rows);
    write_json_file(dir / "report.json",
                    {{"classes", int(o.gms.size()) + 1}, {"final_ce", hist.empty() ? 0.0 : hist.back()}});
    std::cout << "attribution head trained over " << o.gms.size() << " generators + genuine, final loss "
              << fmt(hist.empty() ? 0.0 : hist.back()) << "\n";
}

void cmd_attribute_eval(const AttributeEvalOpts& o) {
    const auto mc = read_json_file(fs::path(o.model) / "config.json");
    const auto m = data::load_manifest(o.data);
    const auto gms = mc.at("gms").get<std::vector<std::string>>();
    const int train_images = mc.at("train_images").get<int>();
    auto fen = load_fen(o.model);
    apps::AttributionHead<float> head(1, m.image_size, m.image_size, int(gms.size()) + 1,
                                      mc.at("head_channels").get<int>(), mc.at("head_hidden").get<int>(), 0);
    load_checkpoint((fs::path(o.model) / "attribution.ckpt").string(), head.tensors());

    const auto dir = init_run_dir(o.out, {{"command", "attribute eval"},
                                          {"data", o.data},
                                          {"model", o.model},
                                          {"eval_images", o.eval_images},
                                          {"seed", o.seed}});
    std::vector<int> pred, truth;
    int n_genuine = 0;
    for (std::size_t c = 0; c < gms.size(); ++c) {
        const auto& e = m.entry(gms[c]);
        const int avail = int(e.images.size()) - train_images;
        if (avail < 1) throw ValueError("attribute eval: no held-out images for " + gms[c]);
        const int take = o.eval_images > 0 ? std::min(o.eval_images, avail) : avail;
        n_genuine = std::max(n_genuine, take);
        const auto all = data::load_gm_images(o.data, e);
        std::vector<int> idx;
        for (int i = 0; i < take; ++i) idx.push_back(train_images + i);
        const auto res = apps::attribute(fen, head, apps::detail::take_rows(all, idx));
        for (int lbl : res.label) {
            pred.push_back(lbl);
            truth.push_back(int(c));
        }
    }
    const auto genuine = apps::render_genuine(n_genuine, m.image_size, derive_seed(o.seed, "genuine:eval"));
    const auto res = apps::attribute(fen, head, genuine);
    for (int lbl : res.label) {
        pred.push_back(lbl);
        truth.push_back(int(gms.size()));
    }

    long correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == truth[i];
    const double accuracy = double(correct) / double(pred.size());
    const auto confusion = metrics::confusion_matrix(pred, truth, int(gms.size()) + 1);
    std::vector<std::string> rows;
    std::string header = "pred";
    auto class_name = [&](std::size_t i) { return i < gms.size() ? gms[i] : std::string("genuine"); };
    for (std::size_t j = 0; j <= gms.size(); ++j) header += ",true_" + class_name(j);
    for (std::size_t i = 0; i <= gms.size(); ++i) {
        std::string row = class_name(i);
        for (std::size_t j = 0; j <= gms.size(); ++j) row += "," + std::to_string(confusion[i][j]);
        rows.push_back(std::move(row));
    }
    write_csv(dir / "confusion.csv", header, rows);
    write_json_file(dir / "report.json",
                    {{"accuracy", accuracy}, {"n", pred.size()}, {"classes", int(gms.size()) + 1}});
    std::cout << "attribution accuracy " << fmt(accuracy) << " over " << pred.size() << " held-out images\n";
}

void cmd_heatmap(const HeatmapOpts& o) {
    const auto mc = read_json_file(fs::path(o.model) / "config.json");
    auto fen = load_fen(o.model);
    const auto img = read_image<float>(o.image);
    apps::DetectorHead<float> head(1, img.shape[1], img.shape[2], mc.at("head_channels").get<int>(),
                                   mc.at("head_hidden").get<int>(), 0);
    load_checkpoint((fs::path(o.model) / "detector.ckpt").string(), head.tensors());

    const auto dir = init_run_dir(o.out, {{"command", "heatmap"},
                                          {"model", o.model},
                                          {"image", o.image},
                                          {"patch", o.patch},
                                          {"fill", o.fill}});
    auto score = [&](const TensorND<float>& x) {
        TensorND<float> batch(Shape{1, x.shape[0], x.shape[1], x.shape[2]});
        std::copy(x.data.begin(), x.data.end(), batch.data.begin());
        return apps::detect(fen, head, batch)[0];
    };
    const double base = score(img);
    const auto heat = metrics::occlusion_heatmap<float>(score, img, o.patch, o.fill);

    std::vector<std::string> rows;
    for (int y = 0; y < heat.shape[0]; ++y) {
        std::string row;
        for (int x = 0; x < heat.shape[1]; ++x)
            row += (x ? "," : "") + fmt(heat.data[std::size_t(y) * heat.shape[1] + x]);
        rows.push_back(std::move(row));
    }
    std::ofstream csv(dir / "heatmap.csv");
    if (!csv) throw IoError("cannot open for writing: " + (dir / "heatmap.csv").string());
    for (const auto& r : rows) csv << r << "\n";
    write_pgm_scaled(dir / "heatmap.pgm", heat);

    double peak = 0.0;
    for (double v : heat.data) peak = std::max(peak, v);
    write_json_file(dir / "report.json", {{"base_score", base}, {"max_delta", peak}, {"patch", o.patch}});
    std::cout << "occlusion heatmap " << heat.shape[0] << "x" << heat.shape[1] << ", base score " << fmt(base)
              << ", max delta " << fmt(peak) << "\n";
}

int cmd_gradcheck(const GradcheckOpts& o) {
    const auto entries = gradcheck_suite(o.trials, o.seed);
    bool all_ok = true;
    for (const auto& e : entries) {
        const bool ok = e.max_rel_err < o.tol;
        all_ok = all_ok && ok;
        std::printf("%-26s %11.3e  %s\n", e.name.c_str(), e.max_rel_err, ok ? "ok" : "FAIL");
    }
    std::printf("%zu checks, tolerance %.1e: %s\n", entries.size(), o.tol, all_ok ? "all passed" : "FAILURES");
    return all_ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Generative-model fingerprint extraction and architecture parsing toolkit"};
    app.require_subcommand(1);
    int exit_code = 0;

    // ---- zoo build ----
    ZooBuildOpts zb;
    auto* zoo_cmd = app.add_subcommand("zoo", "Synthetic generative-model zoo");
    zoo_cmd->require_subcommand(1);
    auto* zoo_build = zoo_cmd->add_subcommand("build", "Train every zoo generator and sample a dataset");
    zoo_build->add_option("--out", zb.out, "dataset directory")->required();
    zoo_build->add_option("--images-per-gm", zb.images_per_gm, "images sampled per generator");
    zoo_build->add_option("--train-steps", zb.train_steps, "override per-generator training steps (0 = spec default)");
    zoo_build->add_option("--seed", zb.seed, "master seed")->envname("GMPARSE_SEED");
    zoo_build->add_option("--jobs", zb.jobs, "worker threads across generators");
    zoo_build->callback([&] { cmd_zoo_build(zb); });

    // ---- parse train/eval ----
    ParseTrainOpts pt;
    auto* parse_cmd = app.add_subcommand("parse", "Architecture and loss-type parsing");
    parse_cmd->require_subcommand(1);
    auto* parse_train = parse_cmd->add_subcommand("train", "Train extractor and parser on one fold");
    parse_train->add_option("--data", pt.data, "dataset directory")->required();
    parse_train->add_option("--out", pt.out, "run directory")->required();
    parse_train->add_option("--fold", pt.fold, "fold index");
    parse_train->add_option("--folds-seed", pt.folds_seed, "fold shuffling seed");
    parse_train->add_option("--steps", pt.steps, "training steps");
    parse_train->add_option("--batch", pt.batch, "batch size");
    parse_train->add_option("--channels", pt.fen_channels, "extractor channels");
    parse_train->add_option("--blocks", pt.fen_blocks, "extractor interior blocks");
    parse_train->add_option("--pn-hidden", pt.pn_hidden, "parser head hidden width");
    parse_train->add_option("--fen-lr", pt.fen_lr, "extractor learning rate");
    parse_train->add_option("--pn-lr", pt.pn_lr, "parser learning rate");
    parse_train->add_option("--eval-images", pt.eval_images, "held-out images scored per generator (0 = all)");
    parse_train->add_option("--aggregate-n", pt.aggregate_n, "images merged into the aggregated prediction");
    parse_train->add_flag("--unweighted-ce", pt.unweighted_ce, "disable inverse-frequency class weights");
    parse_train->add_flag("--no-fingerprint-losses", pt.no_fingerprint_losses, "ablation: drop the spectral constraints");
    parse_train->add_option("--seed", pt.seed, "master seed")->envname("GMPARSE_SEED");
    parse_train->callback([&] { cmd_parse_train(pt); });

    ParseEvalOpts pe;
    auto* parse_eval = parse_cmd->add_subcommand("eval", "Evaluate a trained parser on its held-out generators");
    parse_eval->add_option("--data", pe.data, "dataset directory")->required();
    parse_eval->add_option("--model", pe.model, "run directory from `parse train`")->required();
    parse_eval->add_option("--out", pe.out, "output directory")->required();
    parse_eval->add_option("--images-per-gm", pe.images_per_gm, "images per generator (also the aggregation width)");
    parse_eval->callback([&] { cmd_parse_eval(pe); });

    // ---- fingerprint extract ----
    FingerprintExtractOpts fe;
    auto* fp_cmd = app.add_subcommand("fingerprint", "Fingerprint extraction");
    fp_cmd->require_subcommand(1);
    auto* fp_extract = fp_cmd->add_subcommand("extract", "Write one image's fingerprint as raw floats + sidecar");
    fp_extract->add_option("--model", fe.model, "run directory holding fen.ckpt")->required();
    fp_extract->add_option("--image", fe.image, "input image (PGM/PPM)")->required();
    fp_extract->add_option("--out", fe.out, "output directory")->required();
    fp_extract->add_flag("--spectrum", fe.spectrum, "also write the log-magnitude spectrum as PGM");
    fp_extract->callback([&] { cmd_fingerprint_extract(fe); });

    // ---- baseline random-gt ----
    BaselineOpts bl;
    auto* baseline_cmd = app.add_subcommand("baseline", "Chance baselines");
    baseline_cmd->require_subcommand(1);
    auto* baseline_rgt = baseline_cmd->add_subcommand("random-gt", "Retrain against shuffled labels + uniform guessing");
    baseline_rgt->add_option("--data", bl.data, "dataset directory")->required();
    baseline_rgt->add_option("--out", bl.out, "run directory")->required();
    baseline_rgt->add_option("--fold", bl.fold, "fold index");
    baseline_rgt->add_option("--folds-seed", bl.folds_seed, "fold shuffling seed");
    baseline_rgt->add_option("--shuffles", bl.shuffles, "label-shuffle repetitions");
    baseline_rgt->add_option("--mc-draws", bl.mc_draws, "Monte-Carlo draws for the uniform-guess level");
    baseline_rgt->add_option("--steps", bl.steps, "training steps");
    baseline_rgt->add_option("--batch", bl.batch, "batch size");
    baseline_rgt->add_option("--channels", bl.fen_channels, "extractor channels");
    baseline_rgt->add_option("--blocks", bl.fen_blocks, "extractor interior blocks");
    baseline_rgt->add_option("--pn-hidden", bl.pn_hidden, "parser head hidden width");
    baseline_rgt->add_option("--fen-lr", bl.fen_lr, "extractor learning rate");
    baseline_rgt->add_option("--pn-lr", bl.pn_lr, "parser learning rate");
    baseline_rgt->add_option("--eval-images", bl.eval_images, "held-out images scored per generator (0 = all)");
    baseline_rgt->add_option("--aggregate-n", bl.aggregate_n, "images merged into the aggregated prediction");
    baseline_rgt->add_option("--seed", bl.seed, "master seed")->envname("GMPARSE_SEED");
    baseline_rgt->callback([&] { cmd_baseline_random_gt(bl); });

    // ---- similarity ----
    SimilarityOpts sm;
    auto* sim_cmd = app.add_subcommand("similarity", "Cross-generator fingerprint correlation matrix");
    sim_cmd->add_option("--data", sm.data, "dataset directory")->required();
    sim_cmd->add_option("--model", sm.model, "run directory holding fen.ckpt")->required();
    sim_cmd->add_option("--out", sm.out, "output directory")->required();
    sim_cmd->add_option("--images-per-gm", sm.images_per_gm, "fingerprints per generator");
    sim_cmd->add_option("--pairs", sm.pairs, "sampled pairs per matrix cell");
    sim_cmd->add_option("--seed", sm.seed, "pair-sampling seed")->envname("GMPARSE_SEED");
    sim_cmd->callback([&] { cmd_similarity(sm); });

    // ---- deepfake train/eval ----
    DeepfakeTrainOpts dt;
    auto* deepfake_cmd = app.add_subcommand("deepfake", "Genuine-vs-fake detection");
    deepfake_cmd->require_subcommand(1);
    auto* df_train = deepfake_cmd->add_subcommand("train", "Train the detector, holding one generator out");
    df_train->add_option("--data", dt.data, "dataset directory")->required();
    df_train->add_option("--holdout", dt.holdout, "generator id excluded from training")->required();
    df_train->add_option("--out", dt.out, "run directory")->required();
    df_train->add_option("--fen-channels", dt.fen_channels, "extractor channels");
    df_train->add_option("--fen-blocks", dt.fen_blocks, "extractor interior blocks");
    df_train->add_option("--head-channels", dt.head_channels, "detector head base channels");
    df_train->add_option("--head-hidden", dt.head_hidden, "detector head hidden width");
    df_train->add_option("--steps", dt.steps, "training steps");
    df_train->add_option("--batch", dt.batch, "batch size");
    df_train->add_option("--lr", dt.lr, "learning rate");
    df_train->add_option("--seed", dt.seed, "master seed")->envname("GMPARSE_SEED");
    df_train->callback([&] { cmd_deepfake_train(dt); });

    DeepfakeEvalOpts de;
    auto* df_eval = deepfake_cmd->add_subcommand("eval", "Score held-out generators against fresh genuine renders");
    df_eval->add_option("--data", de.data, "dataset directory")->required();
    df_eval->add_option("--model", de.model, "run directory from `deepfake train`")->required();
    df_eval->add_option("--out", de.out, "output directory")->required();
    df_eval->add_option("--gms", de.gms, "generator ids to score (default: the model's holdout)")->delimiter(',');
    df_eval->add_option("--genuine", de.genuine, "genuine renders to score");
    df_eval->add_option("--seed", de.seed, "genuine-render seed")->envname("GMPARSE_SEED");
    df_eval->callback([&] { cmd_deepfake_eval(de); });

    // ---- attribute train/eval ----
    AttributeTrainOpts at;
    auto* attr_cmd = app.add_subcommand("attribute", "Closed-set source attribution");
    attr_cmd->require_subcommand(1);
    auto* at_train = attr_cmd->add_subcommand("train", "Train the attribution head on chosen generators + genuine");
    at_train->add_option("--data", at.data, "dataset directory")->required();
    at_train->add_option("--gms", at.gms, "generator ids forming the closed set")->required()->delimiter(',');
    at_train->add_option("--out", at.out, "run directory")->required();
    at_train->add_option("--train-images", at.train_images, "training images per class");
    at_train->add_option("--fen-channels", at.fen_channels, "extractor channels");
    at_train->add_option("--fen-blocks", at.fen_blocks, "extractor interior blocks");
    at_train->add_option("--head-channels", at.head_channels, "attribution head base channels");
    at_train->add_option("--head-hidden", at.head_hidden, "attribution head hidden width");
    at_train->add_option("--steps", at.steps, "training steps");
    at_train->add_option("--batch", at.batch, "batch size");
    at_train->add_option("--lr", at.lr, "learning rate");
    at_train->add_option("--seed", at.seed, "master seed")->envname("GMPARSE_SEED");
    at_train->callback([&] { cmd_attribute_train(at); });

    AttributeEvalOpts ae;
    auto* at_eval = attr_cmd->add_subcommand("eval", "Accuracy and confusion on held-out images");
    at_eval->add_option("--data", ae.data, "dataset directory")->required();
    at_eval->add_option("--model", ae.model, "run directory from `attribute train`")->required();
    at_eval->add_option("--out", ae.out, "output directory")->required();
    at_eval->add_option("--eval-images", ae.eval_images, "held-out images per class (0 = all remaining)");
    at_eval->add_option("--seed", ae.seed, "genuine-render seed")->envname("GMPARSE_SEED");
    at_eval->callback([&] { cmd_attribute_eval(ae); });

    // ---- heatmap ----
    HeatmapOpts hm;
    auto* heat_cmd = app.add_subcommand("heatmap", "Occlusion-sensitivity map under a trained detector");
    heat_cmd->add_option("--model", hm.model, "run directory from `deepfake train`")->required();
    heat_cmd->add_option("--image", hm.image, "input image (PGM/PPM)")->required();
    heat_cmd->add_option("--out", hm.out, "output directory")->required();
    heat_cmd->add_option("--patch", hm.patch, "occluder side in pixels");
    heat_cmd->add_option("--fill", hm.fill, "occluder fill value");
    heat_cmd->callback([&] { cmd_heatmap(hm); });

    // ---- gradcheck ----
    GradcheckOpts gc;
    auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
    gc_cmd->add_option("--trials", gc.trials, "random restarts per op");
    gc_cmd->add_option("--tol", gc.tol, "max relative error accepted");
    gc_cmd->add_option("--seed", gc.seed, "suite seed")->envname("GMPARSE_SEED");
    gc_cmd->callback([&] { exit_code = cmd_gradcheck(gc); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);  // prints the message and usage hint
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return exit_code;
}
