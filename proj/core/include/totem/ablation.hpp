#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "totem/metrics.hpp"
#include "totem/synthdata.hpp"
#include "totem/training.hpp"

namespace totem {

/// Variant names accepted by training and ablation commands.
extern const std::vector<std::string> kVariantNames;  // totem totem_t ffn_fuse no_query no_phi

FusionConfig variant_fusion_config(const std::string& variant, FusionConfig base);
/// Table row label for a variant ("TOTEM", "TOTEM-T", "TOTEM-FFNFuse", ...).
std::string variant_row_label(const std::string& variant);

/// Everything one ablation run needs: generator, model, and optimizer scale.
struct AblationScale {
    SynthConfig synth;
    TrackerConfig tracker;
    FusionConfig fusion;
    TrainConfig train;
    TrainConfig pretrain;
    // End-to-end finetuning runs at a reduced learning rate so it refines the
    // pretrained predictor instead of overwriting it.
    TrainConfig finetune;
    // The predictor pretrains on its own opaque-regime dataset with a wide
    // class pool so it generalizes to the unseen test classes.
    std::size_t pretrain_classes = 48;
    std::size_t pretrain_seqs_per_class = 2;

    /// Desk preset (16x16 grid, c=64, 20x200 epochs) for single full runs.
    static AblationScale desk();
    /// Reduced preset for multi-seed sweeps (smaller grid, fewer epochs).
    static AblationScale mini();
};

struct AblationRow {
    std::string label;
    std::uint64_t seed = 0;
    double suc = 0.0, pre = 0.0, npre = 0.0;
};

struct DirectionalCheck {
    std::string name;
    bool passed = false;
    double lhs = 0.0, rhs = 0.0;
};

struct AblationTable {
    std::vector<AblationRow> rows;            // one per (variant x seed)
    std::vector<AblationRow> means;           // per-variant mean over seeds
    std::vector<DirectionalCheck> checks;     // per-seed and mean orderings
};

/// Trains the predictor on opaque-regime data with fusion bypassed and
/// freezes it; the stand-in for pretrained tracker weights.
Checkpoint pretrain_shared_predictor(const AblationScale& scale, std::uint64_t seed);
void load_predictor_weights(TotemModel& model, const Checkpoint& pretrained);

/// Trains one variant/mode and evaluates tracking on the test split.
/// `mode` is one of one_step, two_step, finetune. The fusion-variant table
/// rows all use one_step so they are comparable to each other.
TrackerMetrics run_variant(const AblationScale& scale, const SynthDataset& data,
                           const Checkpoint& pretrained, const std::string& variant,
                           StepMode mode, std::uint64_t seed);

/// Full table over the 8 rows (5 fusion variants + 3 training modes) for each
/// seed, plus per-variant means and directional checks. By default each seed
/// generates its own dataset; passing `fixed_dataset` evaluates every seed on
/// that dataset instead.
AblationTable run_ablation(const AblationScale& scale, const std::vector<std::uint64_t>& seeds,
                           const SynthDataset* fixed_dataset = nullptr);

std::string ablation_to_csv(const AblationTable& table);

/// Tracks every test-split sequence from its first ground-truth box.
std::vector<SequenceResult> track_test_split(TotemModel& model, const SynthDataset& data);

}  // namespace totem
