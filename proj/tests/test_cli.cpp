#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

struct CmdResult {
    int exit_code = 0;
    std::string output;
};

CmdResult run_cli(const std::string& args) {
    std::string cmd = std::string(TOTEM_CLI_PATH) + " " + args + " 2>&1";
    std::array<char, 4096> buf{};
    CmdResult r;
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    while (fgets(buf.data(), (int)buf.size(), pipe)) r.output += buf.data();
    int status = pclose(pipe);
    r.exit_code = WEXITSTATUS(status);
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

/// Byte-compare two directory trees, ignoring manifest.json (it carries
/// timestamps by design).
bool trees_identical(const fs::path& a, const fs::path& b) {
    std::vector<fs::path> rel;
    for (const auto& e : fs::recursive_directory_iterator(a))
        if (e.is_regular_file() && e.path().filename() != "manifest.json")
            rel.push_back(fs::relative(e.path(), a));
    for (const auto& r : rel) {
        if (!fs::exists(b / r)) return false;
        if (slurp(a / r) != slurp(b / r)) return false;
    }
    return true;
}

fs::path work_dir() {
    fs::path d = fs::temp_directory_path() / "totem_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

fs::path write_config(const fs::path& dir, const std::string& name, const std::string& body) {
    fs::path p = dir / name;
    std::ofstream os(p);
    os << body;
    return p;
}

std::string mini_synth_args(const fs::path& d, const fs::path& out, int seed) {
    fs::path cfg = write_config(d, "synth.cfg",
                                "grid_h=8\ngrid_w=8\nchannels=8\n"
                                "train_classes=1\ntest_classes=1\n"
                                "train_seqs_per_class=2\ntest_seqs_per_class=1\n"
                                "frames_per_sequence=6\nmin_target=2\nmax_target=4\n");
    std::ostringstream os;
    os << "synth --seed " << seed << " --out " << out.string() << " --config " << cfg.string();
    return os.str();
}

}  // namespace

TEST_CASE("synth requires an explicit seed") {
    fs::path d = work_dir();
    CmdResult r = run_cli("synth --out " + (d / "ds").string());
    CHECK(r.exit_code != 0);
    CHECK(r.output.find("seed") != std::string::npos);
}

TEST_CASE("synth is byte-identical across reruns of the same seed") {
    fs::path d = work_dir();
    CHECK(run_cli(mini_synth_args(d, d / "a", 5)).exit_code == 0);
    CHECK(run_cli(mini_synth_args(d, d / "b", 5)).exit_code == 0);
    CHECK(trees_identical(d / "a", d / "b"));
    CHECK(run_cli(mini_synth_args(d, d / "c", 6)).exit_code == 0);
    CHECK(!trees_identical(d / "a", d / "c"));
    fs::remove_all(d);
}

TEST_CASE("synth writes a manifest recording command and seed") {
    fs::path d = work_dir();
    REQUIRE(run_cli(mini_synth_args(d, d / "ds", 9)).exit_code == 0);
    std::string manifest = slurp(d / "ds" / "manifest.json");
    CHECK(manifest.find("\"seed\"") != std::string::npos);
    CHECK(manifest.find("synth") != std::string::npos);
    fs::remove_all(d);
}

TEST_CASE("train/track/eval pipeline produces the documented artifacts") {
    fs::path d = work_dir();
    REQUIRE(run_cli(mini_synth_args(d, d / "ds", 11)).exit_code == 0);

    fs::path tcfg = write_config(d, "train.cfg",
                                 "epochs=2\ntriplets_per_epoch=4\nbatch_size=2\n");
    CmdResult tr = run_cli("train --dataset " + (d / "ds").string() + " --seed 3 --out " +
                           (d / "run").string() + " --mode two_step --config " +
                           tcfg.string());
    INFO(tr.output);
    REQUIRE(tr.exit_code == 0);
    CHECK(fs::exists(d / "run" / "checkpoint.totm"));
    std::string log = slurp(d / "run" / "loss_log.csv");
    CHECK(log.find("step_boundary:step1->step2") != std::string::npos);

    CmdResult trk = run_cli("track --checkpoint " + (d / "run" / "checkpoint.totm").string() +
                            " --dataset " + (d / "ds").string() + " --out " +
                            (d / "pred").string());
    INFO(trk.output);
    REQUIRE(trk.exit_code == 0);

    // One predictions file per test sequence; line count equals frame count;
    // first predicted box equals the init box.
    int files = 0;
    for (const auto& e : fs::directory_iterator(d / "pred")) {
        if (e.path().extension() != ".txt") continue;
        ++files;
        std::ifstream is(e.path());
        std::string line;
        int lines = 0;
        std::string first;
        while (std::getline(is, line))
            if (!line.empty()) {
                if (lines == 0) first = line;
                ++lines;
            }
        CHECK(lines == 6);
        std::string gt_first;
        std::ifstream gt(d / "ds" / e.path().stem() / "groundtruth.txt");
        std::getline(gt, gt_first);
        CHECK(first == gt_first);
    }
    CHECK(files == 1);

    // Track rerun is byte-identical.
    REQUIRE(run_cli("track --checkpoint " + (d / "run" / "checkpoint.totm").string() +
                    " --dataset " + (d / "ds").string() + " --out " + (d / "pred2").string())
                .exit_code == 0);
    CHECK(trees_identical(d / "pred", d / "pred2"));

    CmdResult ev = run_cli("eval --gt-dir " + (d / "ds").string() + " --pred-dirs model=" +
                           (d / "pred").string() + " --out " + (d / "eval").string());
    INFO(ev.output);
    REQUIRE(ev.exit_code == 0);
    std::string report = slurp(d / "eval" / "report.json");
    CHECK(report.find("\"All\"") != std::string::npos);
    CHECK(fs::exists(d / "eval" / "curves.csv"));
    fs::remove_all(d);
}

TEST_CASE("evaluating ground truth against itself hits the strict-edge AUCs") {
    fs::path d = work_dir();
    REQUIRE(run_cli(mini_synth_args(d, d / "ds", 13)).exit_code == 0);
    // Use the ground-truth files as predictions.
    fs::create_directories(d / "pred");
    for (const auto& e : fs::directory_iterator(d / "ds")) {
        if (!e.is_directory()) continue;
        if (!fs::exists(e.path() / "groundtruth.txt")) continue;
        fs::copy_file(e.path() / "groundtruth.txt", d / "pred" / (e.path().filename().string() + ".txt"));
    }
    CmdResult ev = run_cli("eval --gt-dir " + (d / "ds").string() + " --pred-dirs gt=" +
                           (d / "pred").string() + " --out " + (d / "eval").string());
    INFO(ev.output);
    REQUIRE(ev.exit_code == 0);
    std::string report = slurp(d / "eval" / "report.json");
    CHECK(report.find("0.952380952") != std::string::npos);  // 20/21
    fs::remove_all(d);
}

TEST_CASE("train rejects ffn_fuse with two-step mode") {
    fs::path d = work_dir();
    REQUIRE(run_cli(mini_synth_args(d, d / "ds", 17)).exit_code == 0);
    CmdResult r = run_cli("train --dataset " + (d / "ds").string() +
                          " --seed 3 --out " + (d / "run").string() +
                          " --variant ffn_fuse --mode two_step");
    CHECK(r.exit_code != 0);
    CHECK(r.output.find("two-step") != std::string::npos);
    fs::remove_all(d);
}

TEST_CASE("gradcheck command passes and lists the primitives") {
    CmdResult r = run_cli("gradcheck --scope all");
    INFO(r.output);
    CHECK(r.exit_code == 0);
    for (const char* op : {"matmul", "softmax", "linear", "instance_norm", "fuse_path",
                           "predict_loss_path"})
        CHECK(r.output.find(op) != std::string::npos);
}

TEST_CASE("unknown config keys are rejected with the key named") {
    fs::path d = work_dir();
    fs::path cfg = write_config(d, "bad.cfg", "no_such_key=3\n");
    CmdResult r = run_cli("synth --seed 1 --out " + (d / "ds").string() +
                          " --config " + cfg.string());
    CHECK(r.exit_code != 0);
    CHECK(r.output.find("no_such_key") != std::string::npos);
    fs::remove_all(d);
}
