#define DOCTEST_CONFIG_IMPLEMENT
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "doctest.h"

// End-to-end contract tests for the command-line binary: exit codes, run-dir
// config snapshots, reproducibility across seeds / env overrides / worker
// counts, and the fingerprint export format. The binary path arrives via
// --cli-bin so the test works from any build layout.

namespace fs = std::filesystem;

namespace {

std::string g_cli;      // path to the binary under test
fs::path g_root;        // scratch directory, wiped at startup
bool g_dataset = false; // lazily built tiny dataset

std::string sh_quote(const std::string& s) { return "\"" + s + "\""; }

// Runs the binary through the shell; returns the process exit code.
int run(const std::string& args, const std::string& env_prefix = "") {
    const std::string cmd = env_prefix + sh_quote(g_cli) + " " + args + " >" + sh_quote((g_root / "last.log").string()) +
                            " 2>" + sh_quote((g_root / "last.err").string());
    const int status = std::system(cmd.c_str());
    return status < 0 ? -1 : (status & 0x7f) == 0 ? (status >> 8) & 0xff : -2;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

nlohmann::json load_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

// SHA-agnostic tree fingerprint: relative path + byte content of every file.
std::string tree_digest(const fs::path& root) {
    std::string acc;
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& p : files) {
        acc += fs::relative(p, root).string();
        acc += '\0';
        acc += slurp(p);
        acc += '\1';
    }
    return acc;
}

const fs::path& dataset() {
    static fs::path dir = g_root / "data";
    if (!g_dataset) {
        REQUIRE(run("zoo build --out " + sh_quote(dir.string()) + " --images-per-gm 4 --train-steps 2 --seed 3") == 0);
        g_dataset = true;
    }
    return dir;
}

}  // namespace

TEST_CASE("exit codes separate usage errors from runtime failures") {
    CHECK(run("") == 2);                      // missing subcommand
    CHECK(run("frobnicate") == 2);            // unknown subcommand
    CHECK(run("zoo build --bogus-flag x") == 2);  // unknown flag
    CHECK(run("zoo build") == 2);             // missing required --out
    CHECK(run("--help") == 0);
    CHECK(run("zoo --help") == 0);
    CHECK(run("parse train --help") == 0);
    // Runtime failure: data directory does not exist.
    CHECK(run("parse train --data " + sh_quote((g_root / "nope").string()) + " --out " +
              sh_quote((g_root / "r").string())) == 1);
    CHECK(slurp(g_root / "last.err").find("error:") != std::string::npos);
}

TEST_CASE("zoo build writes a dataset with an exact config snapshot") {
    const auto& dir = dataset();
    REQUIRE(fs::exists(dir / "config.json"));
    REQUIRE(fs::exists(dir / "manifest.json"));
    const auto cfg = load_json(dir / "config.json");
    CHECK(cfg.at("command") == "zoo build");
    CHECK(cfg.at("seed") == 3);
    CHECK(cfg.at("images_per_gm") == 4);
    const auto manifest = load_json(dir / "manifest.json");
    REQUIRE(manifest.at("gms").size() == 12);
    int pgms = 0;
    for (const auto& e : fs::recursive_directory_iterator(dir / "images"))
        pgms += e.path().extension() == ".pgm";
    CHECK(pgms == 12 * 4);
}

TEST_CASE("identical seeds reproduce the dataset byte for byte") {
    dataset();
    const auto again = g_root / "data_again";
    const auto other = g_root / "data_other";
    REQUIRE(run("zoo build --out " + sh_quote(again.string()) + " --images-per-gm 4 --train-steps 2 --seed 3 --jobs 3") ==
            0);
    REQUIRE(run("zoo build --out " + sh_quote(other.string()) + " --images-per-gm 4 --train-steps 2 --seed 4") == 0);
    CHECK(tree_digest(g_root / "data") == tree_digest(again));  // same seed, more workers
    CHECK(tree_digest(g_root / "data") != tree_digest(other));  // different seed
}

TEST_CASE("the seed environment variable fills in and the flag overrides it") {
    dataset();
    const auto via_env = g_root / "data_env";
    const auto flag_wins = g_root / "data_flagwins";
    REQUIRE(run("zoo build --out " + sh_quote(via_env.string()) + " --images-per-gm 4 --train-steps 2",
                "GMPARSE_SEED=3 ") == 0);
    CHECK(tree_digest(g_root / "data") == tree_digest(via_env));
    REQUIRE(run("zoo build --out " + sh_quote(flag_wins.string()) + " --images-per-gm 4 --train-steps 2 --seed 3",
                "GMPARSE_SEED=99 ") == 0);
    CHECK(tree_digest(g_root / "data") == tree_digest(flag_wins));
}

TEST_CASE("parse train emits checkpoints and parse eval reproduces its scores") {
    const auto& dir = dataset();
    const auto trained = g_root / "run0";
    REQUIRE(run("parse train --data " + sh_quote(dir.string()) + " --fold 0 --steps 3 --batch 4 --channels 4" +
                " --blocks 1 --eval-images 2 --aggregate-n 2 --seed 11 --out " + sh_quote(trained.string())) == 0);
    for (const char* f : {"config.json", "fen.ckpt", "pn.ckpt", "norm.json", "report.json", "loss_curve.csv"})
        CHECK(fs::exists(trained / f));
    const auto trep = load_json(trained / "report.json");
    REQUIRE(trep.at("test_ids").size() == 2);

    const auto evald = g_root / "eval0";
    REQUIRE(run("parse eval --model " + sh_quote(trained.string()) + " --data " + sh_quote(dir.string()) +
                " --images-per-gm 2 --out " + sh_quote(evald.string())) == 0);
    const auto erep = load_json(evald / "report.json");
    // Same images, same weights through the checkpoint round trip.
    CHECK(erep.at("image_level").at("l1_mean") == trep.at("image_level").at("l1_mean"));
    CHECK(erep.at("image_level").at("discrete_f1") == trep.at("image_level").at("discrete_f1"));
    CHECK(erep.at("aggregated").at("fine_f1") == trep.at("aggregated").at("fine_f1"));
    const auto csv = slurp(evald / "predictions.csv");
    CHECK(csv.rfind("gm,image,cont_layers", 0) == 0);
}

TEST_CASE("fingerprint extract writes raw floats with a JSON sidecar") {
    const auto& dir = dataset();
    const auto trained = g_root / "run0";  // built by the previous case
    REQUIRE(fs::exists(trained / "fen.ckpt"));
    const auto out = g_root / "fp0";
    const auto image = dir / "images" / "B0" / "00000.pgm";
    REQUIRE(run("fingerprint extract --model " + sh_quote(trained.string()) + " --image " + sh_quote(image.string()) +
                " --out " + sh_quote(out.string()) + " --spectrum") == 0);
    const auto side = load_json(out / "fingerprint.json");
    CHECK(side.at("dtype") == "float32");
    CHECK(side.at("layout") == "row-major");
    REQUIRE(side.at("shape") == nlohmann::json({1, 16, 16}));
    CHECK(fs::file_size(out / "fingerprint.bin") == 1u * 16u * 16u * sizeof(float));
    CHECK(slurp(out / "spectrum.pgm").rfind("P5", 0) == 0);
}

TEST_CASE("gradcheck succeeds and reports one line per operation") {
    REQUIRE(run("gradcheck --trials 1 --seed 9") == 0);
    const auto log = slurp(g_root / "last.log");
    CHECK(log.find("conv2d") != std::string::npos);
    CHECK(log.find("fingerprint_asymmetry") != std::string::npos);
    CHECK(log.find("all passed") != std::string::npos);
    CHECK(log.find("FAIL") == std::string::npos);
}

int main(int argc, char** argv) {
    for (int i = 1; i + 1 < argc; ++i)
        if (std::string(argv[i]) == "--cli-bin") g_cli = argv[i + 1];
    if (g_cli.empty()) {
        std::fprintf(stderr, "usage: test_cli --cli-bin <path-to-binary>\n");
        return 1;
    }
    g_root = fs::absolute("cli_test_tmp");
    fs::remove_all(g_root);
    fs::create_directories(g_root);

    doctest::Context ctx;
    ctx.applyCommandLine(1, argv);  // doctest flags are not used; --cli-bin is ours
    return ctx.run();
}
