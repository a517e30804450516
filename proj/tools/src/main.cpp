#include <charconv>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "totem/ablation.hpp"
#include "totem/checkpoint.hpp"
#include "totem/gradcheck.hpp"
#include "totem/metrics.hpp"
#include "totem/rng.hpp"
#include "totem/synthdata.hpp"
#include "totem/tracker.hpp"
#include "totem/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "totem-0.1.0";

std::size_t totem_threads() {
    const char* env = std::getenv("TOTEM_THREADS");
    if (!env) return 1;
    std::size_t v = 0;
    auto res = std::from_chars(env, env + std::strlen(env), v);
    if (res.ec != std::errc{} || v == 0)
        throw totem::ContractError("TOTEM_THREADS must be a positive integer");
    return v;
}

std::map<std::string, std::string> parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw totem::ContractError("cannot open config file " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw totem::ContractError(path + ": line " + std::to_string(lineno) +
                                       " is not key=value");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

double parse_num(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw totem::ContractError("config key " + key + ": cannot parse value '" + v + "'");
    }
}

void apply_synth_config(totem::SynthConfig& cfg,
                        const std::map<std::string, std::string>& kv) {
    for (const auto& [k, v] : kv) {
        if (k == "grid_h") cfg.grid_h = (std::size_t)parse_num(k, v);
        else if (k == "grid_w") cfg.grid_w = (std::size_t)parse_num(k, v);
        else if (k == "channels") cfg.channels = (std::size_t)parse_num(k, v);
        else if (k == "train_classes") cfg.train_classes = (std::size_t)parse_num(k, v);
        else if (k == "test_classes") cfg.test_classes = (std::size_t)parse_num(k, v);
        else if (k == "train_seqs_per_class")
            cfg.train_seqs_per_class = (std::size_t)parse_num(k, v);
        else if (k == "test_seqs_per_class")
            cfg.test_seqs_per_class = (std::size_t)parse_num(k, v);
        else if (k == "frames_per_sequence")
            cfg.frames_per_sequence = (std::size_t)parse_num(k, v);
        else if (k == "min_target") cfg.min_target = parse_num(k, v);
        else if (k == "max_target") cfg.max_target = parse_num(k, v);
        else if (k == "max_step") cfg.max_step = parse_num(k, v);
        else if (k == "appearance_snr") cfg.appearance_snr = parse_num(k, v);
        else if (k == "transparency_snr") cfg.transparency_snr = parse_num(k, v);
        else if (k == "shared_snr") cfg.shared_snr = parse_num(k, v);
        else if (k == "snr_jitter") cfg.snr_jitter = parse_num(k, v);
        else if (k == "appearance_dropout") cfg.appearance_dropout = parse_num(k, v);
        else if (k == "inject_attributes") cfg.inject_attributes = v == "true" || v == "1";
        else throw totem::ContractError("unknown synth config key: " + k);
    }
}

void apply_train_config(totem::TrainConfig& cfg,
                        const std::map<std::string, std::string>& kv) {
    for (const auto& [k, v] : kv) {
        if (k == "epochs") cfg.epochs = (std::size_t)parse_num(k, v);
        else if (k == "triplets_per_epoch")
            cfg.triplets_per_epoch = (std::size_t)parse_num(k, v);
        else if (k == "batch_size") cfg.batch_size = (std::size_t)parse_num(k, v);
        else if (k == "learning_rate") cfg.learning_rate = parse_num(k, v);
        else if (k == "weight_decay") cfg.weight_decay = parse_num(k, v);
        else if (k == "beta1") cfg.beta1 = parse_num(k, v);
        else if (k == "beta2") cfg.beta2 = parse_num(k, v);
        else if (k == "eps") cfg.eps = parse_num(k, v);
        else throw totem::ContractError("unknown train config key: " + k);
    }
}

struct ManifestWriter {
    json j;
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

    ManifestWriter(const std::string& command, std::uint64_t seed) {
        j["command"] = command;
        j["seed"] = seed;
        j["version"] = kVersion;
        j["threads"] = totem_threads();
    }
    void write(const std::string& out_dir) {
        j["duration_seconds"] = std::chrono::duration<double>(
                                    std::chrono::steady_clock::now() - start)
                                    .count();
        totem::write_file_atomic((fs::path(out_dir) / "manifest.json").string(),
                                 j.dump(2) + "\n");
    }
};

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

/// Model scale inferred from a dataset's feature dimensions.
void scale_from_dataset(const totem::SynthDataset& data, totem::TrackerConfig& tcfg,
                        totem::FusionConfig& fcfg) {
    tcfg.grid_h = data.config.grid_h;
    tcfg.grid_w = data.config.grid_w;
    tcfg.channels = data.config.channels;
    tcfg.label_amplitude = 10.0;  // calibrated training label scale
    fcfg.channels = data.config.channels;
    if (tcfg.channels < 64) {
        // Small feature spaces (test fixtures) keep the layer counts modest.
        fcfg.num_encoder_layers = 2;
    }
}

totem::Checkpoint pretrain_for(const totem::SynthDataset& data,
                               const totem::TrackerConfig& tcfg,
                               const totem::FusionConfig& fcfg,
                               const totem::TrainConfig& train_cfg, std::uint64_t seed) {
    totem::AblationScale scale;
    scale.synth = data.config;
    scale.tracker = tcfg;
    scale.fusion = fcfg;
    scale.train = train_cfg;
    scale.pretrain = train_cfg;
    scale.pretrain.epochs = std::max<std::size_t>(1, train_cfg.epochs / 2);
    return totem::pretrain_shared_predictor(scale, seed);
}

int cmd_synth(const std::string& config_path, const std::string& out, std::uint64_t seed) {
    totem::SynthConfig cfg = totem::SynthConfig::transparent_regime(seed);
    std::map<std::string, std::string> kv;
    if (!config_path.empty()) kv = parse_config_file(config_path);
    apply_synth_config(cfg, kv);
    cfg.seed = seed;

    ManifestWriter manifest("synth", seed);
    for (const auto& [k, v] : kv) manifest.j["config"][k] = v;

    totem::SynthDataset ds = totem::generate(cfg);
    totem::export_dataset(ds, out);
    manifest.j["artifacts"] = {out};
    manifest.write(out);
    std::cout << "wrote " << ds.train_ids.size() << " train + " << ds.test_ids.size()
              << " test sequences to " << out << "\n";
    return 0;
}

int cmd_train(const std::string& dataset_dir, const std::string& mode_str,
              const std::string& variant, const std::string& config_path,
              const std::string& out, std::uint64_t seed) {
    if (!fs::exists(dataset_dir))
        throw totem::ContractError("dataset directory not found: " + dataset_dir);
    totem::StepMode mode = totem::parse_step_mode(mode_str);
    if (variant == "ffn_fuse" && mode != totem::StepMode::one_step)
        throw totem::ContractError(
            "--variant ffn_fuse supports only --mode one_step: two-step training is defined "
            "for the transformer fusion; step 1 has no meaning for concat-FFN input");

    totem::SynthDataset data = totem::import_dataset(dataset_dir);
    totem::TrackerConfig tcfg;
    totem::FusionConfig fcfg;
    scale_from_dataset(data, tcfg, fcfg);
    fcfg = totem::variant_fusion_config(variant, fcfg);

    totem::TrainConfig train_cfg;
    std::map<std::string, std::string> kv;
    if (!config_path.empty()) kv = parse_config_file(config_path);
    apply_train_config(train_cfg, kv);
    train_cfg.seed = seed;

    ManifestWriter manifest("train", seed);
    manifest.j["dataset"] = dataset_dir;
    manifest.j["mode"] = mode_str;
    manifest.j["variant"] = variant;
    for (const auto& [k, v] : kv) manifest.j["config"][k] = v;

    totem::Checkpoint pretrained = pretrain_for(data, tcfg, fcfg, train_cfg, seed);
    totem::TotemModel model(tcfg, fcfg, totem::derive_seed(seed, "model/" + variant));
    totem::load_predictor_weights(model, pretrained);

    std::ostringstream log_csv;
    log_csv << "epoch,step,L1,L2,total\n";
    std::string last_phase;
    auto on_epoch = [&](const totem::LossLogEntry& e) {
        if (!last_phase.empty() && e.phase != last_phase)
            log_csv << "-,step_boundary:" << last_phase << "->" << e.phase << ",-,-,-\n";
        last_phase = e.phase;
        log_csv << e.epoch << ',' << e.phase << ',' << format_double(e.l1) << ','
                << format_double(e.l2) << ',' << format_double(e.loss) << '\n';
        std::cout << "epoch " << e.epoch << " [" << e.phase << "] loss " << e.loss << "\n";
    };

    totem::TrainResult result;
    switch (mode) {
        case totem::StepMode::one_step:
            result = totem::train_one_step(model, data, train_cfg, on_epoch);
            break;
        case totem::StepMode::two_step:
            result = totem::train_two_step(model, data, train_cfg, on_epoch);
            break;
        case totem::StepMode::two_step_plus_finetune: {
            result = totem::train_two_step(model, data, train_cfg, on_epoch);
            if (!result.diverged) {
                auto ft = totem::finetune_end_to_end(model, data, train_cfg, on_epoch);
                ft.log.insert(ft.log.begin(), result.log.begin(), result.log.end());
                result = std::move(ft);
            }
            break;
        }
    }

    fs::create_directories(out);
    result.checkpoint.save((fs::path(out) / "checkpoint.totm").string());
    totem::write_file_atomic((fs::path(out) / "loss_log.csv").string(), log_csv.str());
    manifest.j["artifacts"] = {(fs::path(out) / "checkpoint.totm").string(),
                               (fs::path(out) / "loss_log.csv").string()};
    manifest.j["diverged"] = result.diverged;
    manifest.write(out);
    if (result.diverged) {
        std::cerr << "training diverged; checkpoint holds the last finite state\n";
        return 1;
    }
    std::cout << "checkpoint written to " << out << "\n";
    return 0;
}

int cmd_track(const std::string& checkpoint_path, const std::string& dataset_dir,
              const std::string& split, const std::string& variant, const std::string& out) {
    totem::SynthDataset data = totem::import_dataset(dataset_dir);
    totem::TrackerConfig tcfg;
    totem::FusionConfig fcfg;
    scale_from_dataset(data, tcfg, fcfg);
    fcfg = totem::variant_fusion_config(variant, fcfg);
    totem::TotemModel model(tcfg, fcfg, 0);
    totem::Checkpoint ckpt = totem::Checkpoint::load(checkpoint_path);
    totem::restore(model, ckpt);  // verifies the config hash

    ManifestWriter manifest("track", 0);
    manifest.j["checkpoint"] = checkpoint_path;
    manifest.j["dataset"] = dataset_dir;
    manifest.j["split"] = split;
    manifest.j["variant"] = variant;

    fs::create_directories(out);
    std::vector<std::string> artifacts;
    for (const auto* seq : data.split(split == "train")) {
        auto boxes = totem::track_sequence(model, seq->frames, seq->boxes.front());
        std::string txt;
        for (const auto& b : boxes)
            txt += format_double(b.x) + "," + format_double(b.y) + "," + format_double(b.w) +
                   "," + format_double(b.h) + "\n";
        std::string path = (fs::path(out) / (seq->id + ".txt")).string();
        totem::write_file_atomic(path, txt);
        artifacts.push_back(path);
    }
    manifest.j["artifacts"] = artifacts;
    manifest.write(out);
    std::cout << "tracked " << artifacts.size() << " sequences into " << out << "\n";
    return 0;
}

int cmd_eval(const std::string& gt_dir, const std::vector<std::string>& pred_specs,
             const std::string& out) {
    totem::SynthDataset data = totem::import_dataset(gt_dir);

    struct Entry {
        std::string name;
        totem::MetricReport report;
    };
    std::vector<Entry> entries;
    for (const auto& spec : pred_specs) {
        auto eq = spec.find('=');
        if (eq == std::string::npos)
            throw totem::ContractError("--pred-dirs entries must be name=path, got: " + spec);
        const std::string name = spec.substr(0, eq), dir = spec.substr(eq + 1);
        std::vector<totem::SequenceResult> results;
        for (const auto* seq : data.split(/*train=*/false)) {
            totem::SequenceResult r;
            r.id = seq->id;
            r.gt = seq->boxes;
            r.attributes = seq->attributes;
            r.pred =
                totem::parse_annotation_file((fs::path(dir) / (seq->id + ".txt")).string());
            if (r.pred.size() != r.gt.size())
                throw totem::ContractError("sequence " + r.id + ": " + name + " has " +
                                           std::to_string(r.pred.size()) + " frames, gt has " +
                                           std::to_string(r.gt.size()));
            results.push_back(std::move(r));
        }
        entries.push_back({name, totem::attribute_report(results)});
    }
    // Legend order: descending success AUC.
    std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
        return a.report.overall.suc_auc > b.report.overall.suc_auc;
    });

    json j;
    j["attribute_columns"] = json::array();
    j["attribute_columns"].push_back("All");
    for (const auto& tag : totem::kAttributeTags) j["attribute_columns"].push_back(tag);
    std::string csv;
    for (const auto& e : entries) {
        j["trackers"].push_back(json::parse(totem::report_to_json(e.report, e.name)));
        csv += totem::curves_to_csv(e.report.overall, e.name);
    }
    fs::create_directories(out);
    ManifestWriter manifest("eval", 0);
    manifest.j["gt_dir"] = gt_dir;
    totem::write_file_atomic((fs::path(out) / "report.json").string(), j.dump(2) + "\n");
    totem::write_file_atomic((fs::path(out) / "curves.csv").string(), csv);
    manifest.j["artifacts"] = {(fs::path(out) / "report.json").string(),
                               (fs::path(out) / "curves.csv").string()};
    manifest.write(out);
    for (const auto& e : entries)
        std::cout << e.name << " SUC " << e.report.overall.suc_auc << " PRE "
                  << e.report.overall.pre_auc << " NPRE " << e.report.overall.npre_auc << "\n";
    return 0;
}

int cmd_gradcheck(const std::string& scope) {
    auto results = totem::run_gradcheck(scope);
    bool all_passed = true;
    for (const auto& r : results) {
        std::cout << (r.passed ? "PASS" : "FAIL") << "  " << r.op << "  max_rel_error "
                  << r.max_rel_error << "\n";
        all_passed = all_passed && r.passed;
    }
    std::cout << (all_passed ? "gradcheck: all ops passed\n" : "gradcheck: FAILURES above\n");
    return all_passed ? 0 : 1;
}

int cmd_ablate(const std::string& dataset_dir, const std::string& scale_name,
               const std::vector<std::uint64_t>& seeds, const std::string& out) {
    totem::AblationScale scale =
        scale_name == "desk" ? totem::AblationScale::desk() : totem::AblationScale::mini();
    totem::SynthDataset fixed;
    const totem::SynthDataset* fixed_ptr = nullptr;
    if (!dataset_dir.empty()) {
        fixed = totem::import_dataset(dataset_dir);
        scale.synth = fixed.config;
        scale.tracker.grid_h = fixed.config.grid_h;
        scale.tracker.grid_w = fixed.config.grid_w;
        scale.tracker.channels = fixed.config.channels;
        scale.fusion.channels = fixed.config.channels;
        fixed_ptr = &fixed;
    }
    ManifestWriter manifest("ablate", seeds.empty() ? 0 : seeds.front());
    manifest.j["seeds"] = seeds;
    manifest.j["scale"] = scale_name;
    if (!dataset_dir.empty()) manifest.j["dataset"] = dataset_dir;

    auto table = totem::run_ablation(scale, seeds, fixed_ptr);
    fs::create_directories(out);
    totem::write_file_atomic((fs::path(out) / "ablation.csv").string(),
                             totem::ablation_to_csv(table));
    manifest.j["artifacts"] = {(fs::path(out) / "ablation.csv").string()};
    manifest.write(out);
    bool ok = true;
    for (const auto& c : table.checks) {
        std::cout << (c.passed ? "PASS" : "FAIL") << "  " << c.name << "  (" << c.lhs << " vs "
                  << c.rhs << ")\n";
        if (c.name.rfind("mean:", 0) == 0) ok = ok && c.passed;
    }
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"TOTEM transparent-object tracking toolkit"};
    app.require_subcommand(1);

    std::string config_path, out, dataset, mode = "two_step", variant = "totem";
    std::string checkpoint_path, split = "test", gt_dir, scope = "all", scale_name = "mini";
    std::vector<std::string> pred_specs;
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    std::uint64_t seed = 0;
    bool seed_set = false;

    auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
    synth->add_option("--config", config_path, "key=value config file");
    synth->add_option("--out", out, "output directory")->required();
    synth->add_option("--seed", seed, "master seed (required for reproducibility)")
        ->required();

    auto* train = app.add_subcommand("train", "Train a tracker");
    train->add_option("--dataset", dataset)->required();
    train->add_option("--mode", mode)->check(CLI::IsMember({"one_step", "two_step", "finetune"}));
    train->add_option("--variant", variant)
        ->check(CLI::IsMember({"totem", "totem_t", "ffn_fuse", "no_query", "no_phi"}));
    train->add_option("--config", config_path);
    train->add_option("--out", out)->required();
    train->add_option("--seed", seed)->required();

    auto* track = app.add_subcommand("track", "Run tracking on a dataset split");
    track->add_option("--checkpoint", checkpoint_path)->required();
    track->add_option("--dataset", dataset)->required();
    track->add_option("--split", split)->check(CLI::IsMember({"train", "test"}));
    track->add_option("--variant", variant)
        ->check(CLI::IsMember({"totem", "totem_t", "ffn_fuse", "no_query", "no_phi"}));
    track->add_option("--out", out)->required();

    auto* eval = app.add_subcommand("eval", "Evaluate predictions against ground truth");
    eval->add_option("--gt-dir", gt_dir)->required();
    eval->add_option("--pred-dirs", pred_specs, "name=path entries")->required();
    eval->add_option("--out", out)->required();

    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient check");
    gradcheck->add_option("--scope", scope)->check(CLI::IsMember({"fusion", "tracker", "all"}));

    auto* ablate = app.add_subcommand("ablate", "Train and evaluate all ablation variants");
    ablate->add_option("--dataset", dataset, "optional fixed dataset directory");
    ablate->add_option("--scale", scale_name)->check(CLI::IsMember({"mini", "desk"}));
    ablate->add_option("--seeds", seeds, "seeds for the sweep");
    ablate->add_option("--out", out)->required();

    (void)seed_set;
    CLI11_PARSE(app, argc, argv);

    try {
        totem_threads();  // validate the env var up front
        if (synth->parsed()) return cmd_synth(config_path, out, seed);
        if (train->parsed()) return cmd_train(dataset, mode, variant, config_path, out, seed);
        if (track->parsed())
            return cmd_track(checkpoint_path, dataset, split, variant, out);
        if (eval->parsed()) return cmd_eval(gt_dir, pred_specs, out);
        if (gradcheck->parsed()) return cmd_gradcheck(scope);
        if (ablate->parsed()) return cmd_ablate(dataset, scale_name, seeds, out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
