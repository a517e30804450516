#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "totem/box.hpp"
#include "totem/tensor.hpp"
#include "totem/tracker.hpp"

namespace totem {

/// The 12 challenge attribute tags, in report column order.
extern const std::array<std::string, 12> kAttributeTags;

struct SynthConfig {
    std::size_t grid_h = 16;
    std::size_t grid_w = 16;
    std::size_t channels = 64;
    std::size_t train_classes = 3;
    std::size_t test_classes = 12;
    std::size_t train_seqs_per_class = 15;
    std::size_t test_seqs_per_class = 5;
    std::size_t frames_per_sequence = 15;
    double min_target = 3.0;
    double max_target = 6.0;
    double max_step = 1.2;
    double appearance_snr = 0.4;
    double transparency_snr = 4.0;
    /// Strength of the dataset-wide transparency direction painted into x'
    /// for every class: the shared statistic transparent targets have in
    /// common, and what lets fusion generalize to unseen classes.
    double shared_snr = 2.0;
    /// Per-frame multiplier on the in-box x' signal, uniform in
    /// [1 - snr_jitter, 1 + snr_jitter]: transparency visibility varies from
    /// frame to frame, so fused features must stay amplitude-calibrated
    /// between the memory frames and the test frame.
    double snr_jitter = 0.5;
    /// Probability that a frame's appearance stream loses the target
    /// entirely (the in-box x signal is not painted): transparent objects
    /// flicker in and out of the appearance features depending on the
    /// background, so fusion must decide per frame which stream to trust.
    double appearance_dropout = 0.0;
    bool inject_attributes = false;
    std::uint64_t seed = 0;

    /// Default benchmark preset: appearance features barely see the target,
    /// transparency features see it clearly.
    static SynthConfig transparent_regime(std::uint64_t seed);
    /// Pretraining preset: the target is plainly visible in the appearance
    /// stream (stand-in for opaque-object tracking data).
    static SynthConfig opaque_regime(std::uint64_t seed);

    void validate() const;
};

struct SynthSequence {
    std::string id;
    std::size_t class_index = 0;
    std::uint64_t seq_seed = 0;
    SynthConfig gen_config;  // config the sequence was generated with; regeneration key
    std::vector<FrameFeatures> frames;
    std::vector<BoundingBox> boxes;
    std::vector<std::string> attributes;
};

struct SynthDataset {
    SynthConfig config;
    std::vector<SynthSequence> sequences;
    std::vector<std::string> train_ids, test_ids;

    const SynthSequence& by_id(const std::string& id) const;
    std::vector<const SynthSequence*> split(bool train) const;
};

SynthDataset generate(const SynthConfig& cfg);

/// Re-derives the sequence with the named challenge applied and the tag
/// recorded. Unknown tags raise an error listing the vocabulary.
SynthSequence inject_attribute(const SynthSequence& seq, const std::string& attr);

void export_dataset(const SynthDataset& ds, const std::string& dir);
SynthDataset import_dataset(const std::string& dir);

}  // namespace totem
