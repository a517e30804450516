#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "totem/checkpoint.hpp"
#include "totem/synthdata.hpp"
#include "totem/tracker.hpp"

namespace totem {

enum class StepMode { one_step, two_step, two_step_plus_finetune };

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t triplets_per_epoch = 200;
    std::size_t batch_size = 8;
    double learning_rate = 1e-4;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t seed = 0;
    StepMode step_mode = StepMode::two_step;

    /// Full-size hyperparameters: 25 epochs x 4000 triplets, batch 18,
    /// lr 0.0001. Kept for documentation parity; not runnable at desk scale.
    static TrainConfig paper_reference();
};

StepMode parse_step_mode(const std::string& s);
std::string step_mode_name(StepMode m);

struct AdamWState {
    std::map<std::string, Tensor> m, v;
    std::uint64_t step = 0;
};

/// One decoupled-weight-decay Adam update over the trainable params.
/// Frozen params are skipped entirely (no moments allocated).
void adamw_step(const std::vector<Param*>& params, AdamWState& state, const TrainConfig& cfg);

void freeze_all_except_fusion(TotemModel& model);
void unfreeze_all(TotemModel& model);

std::vector<FrameTriplet> sample_triplets(const SynthDataset& data, const TrackerConfig& tcfg,
                                          std::uint64_t epoch_seed, std::size_t count);

/// One row of the training log: epoch-mean loss, tagged with the phase
/// ("pretrain", "step1", "step2", "one_step", "finetune").
struct LossLogEntry {
    std::string phase;
    std::size_t epoch = 0;
    double l1 = 0.0;
    double l2 = 0.0;
    double loss = 0.0;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<LossLogEntry> log;
    bool diverged = false;
};

using EpochCallback = std::function<void(const LossLogEntry&)>;

/// Trains the predictor alone (fusion bypassed) on opaque-regime data, the
/// desk-scale stand-in for pretrained tracker weights.
TrainResult pretrain_predictor(TotemModel& model, const SynthDataset& data,
                               const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// One-step regime: fusion trained with both streams live throughout.
TrainResult train_one_step(TotemModel& model, const SynthDataset& data, const TrainConfig& cfg,
                           const EpochCallback& on_epoch = {});

/// Two-step regime: first half of the epochs with the original stream cut
/// off, second half with both streams live; optimizer state resets at the
/// boundary. Divergence (non-finite loss) aborts with the last finite state.
TrainResult train_two_step(TotemModel& model, const SynthDataset& data, const TrainConfig& cfg,
                           const EpochCallback& on_epoch = {});

/// Continues from the model's current weights with every parameter trainable.
TrainResult finetune_end_to_end(TotemModel& model, const SynthDataset& data,
                                const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Mean triplet loss over a fixed batch, no gradients.
double evaluate_loss(TotemModel& model, const std::vector<FrameTriplet>& batch,
                     bool use_fusion = true);

/// Named-tensor snapshot of the model parameters (checkpoint payload).
Checkpoint snapshot(TotemModel& model);
void restore(TotemModel& model, const Checkpoint& ckpt);

}  // namespace totem
