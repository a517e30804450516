#pragma once

#include <cstdint>
#include <vector>

#include "totem/box.hpp"
#include "totem/fusion.hpp"
#include "totem/layers.hpp"

namespace totem {

struct TrackerConfig {
    std::size_t grid_h = 16;
    std::size_t grid_w = 16;
    std::size_t channels = 64;
    std::size_t num_heads = 2;
    std::size_t num_encoder_layers = 1;
    std::size_t ffn_hidden_dim = 0;  // 0 -> 4 * channels
    double label_sigma = 1.0;
    double label_amplitude = 1.0;
    double loss_lambda = 1.0;
    double confidence_threshold = 0.5;
    double norm_eps = 1e-5;

    std::size_t pixels() const { return grid_h * grid_w; }
    std::size_t ffn_hidden() const { return ffn_hidden_dim ? ffn_hidden_dim : 4 * channels; }
    bool box_in_grid(const BoundingBox& b) const;

    /// 18x18 stride-16 grid over 288x288 inputs, 256 channels.
    static TrackerConfig paper_reference();
};

/// One frame's feature streams: original x and transparency x', each
/// pixels x channels.
struct FrameFeatures {
    Tensor x;
    Tensor xp;
};

struct FrameTriplet {
    FrameFeatures tr1, tr2, te;
    BoundingBox box1, box2;  // ground truth / memory boxes of the train frames
    BoundingBox gt_te;       // test-frame ground truth (training only)
};

/// Predicted kernel applied per pixel to the encoder features.
struct TargetModel {
    Tensor w_cls;  // 1 x c
    Tensor w_reg;  // 1 x 4c
};

struct TrackerOutput {
    Tensor y_hat;  // pixels x 1 center response
    Tensor d_hat;  // pixels x 4 ltrb offsets, strictly positive
};

// Label-map construction. Cell (i, j) samples the point (j + 0.5, i + 0.5).
Tensor gaussian_label(const TrackerConfig& cfg, const BoundingBox& gt);
Tensor ltrb_target_map(const TrackerConfig& cfg, const BoundingBox& gt);
Tensor target_state_maps(const TrackerConfig& cfg, const BoundingBox& box);  // pixels x 5

/// Argmax decoding: peak cell of y_hat (row-major tie-break), box sides from
/// d_hat at that cell.
BoundingBox localize(const TrackerOutput& out, const TrackerConfig& cfg);
double peak_response(const Tensor& y_hat);

/// Transformer model predictor: state-encoded train branches plus test branch
/// jointly encoded; one decoder query emits the target model.
class Predictor {
public:
    Predictor(const TrackerConfig& cfg, std::uint64_t seed);

    Var encode_target_state(Tape& t, Var features, const BoundingBox& box);

    struct ModelVars {
        Var w_cls;     // 1 x c
        Var w_reg;     // 1 x 4c
        Var enc_test;  // pixels x c, test-branch encoder output
    };
    ModelVars predict_model(Tape& t, Var tr1, Var tr2, Var te, const BoundingBox& box1,
                            const BoundingBox& box2);

    std::vector<Param*> params();
    const TrackerConfig& config() const { return cfg_; }

private:
    TrackerConfig cfg_;
    Param state_w_, state_b_;
    std::vector<EncoderLayer> enc_layers_;
    Param dec_query_, dec_wk_, dec_bk_, dec_wv_, dec_bv_, dec_wo_, dec_bo_;
    Param head_cls_w_, head_cls_b_, head_reg_w_, head_reg_b_;
};

struct AppliedModel {
    Var y;  // pixels x 1
    Var d;  // pixels x 4
};
AppliedModel apply_model(Tape& t, Var enc_test, const Predictor::ModelVars& model,
                         const TrackerConfig& cfg);

struct LossVars {
    Var l1, l2, total;
};
LossVars training_losses(Tape& t, Var y, Var d, const BoundingBox& gt,
                         const TrackerConfig& cfg);

/// Complete tracker: fusion module feeding the frozen model predictor.
class TotemModel {
public:
    TotemModel(TrackerConfig tcfg, FusionConfig fcfg, std::uint64_t seed);

    struct ForwardVars {
        AppliedModel out;
        LossVars loss;
    };
    /// Training forward with losses. When `use_fusion` is false the original
    /// features bypass the fusion module (predictor pretraining).
    ForwardVars forward_triplet(Tape& t, const FrameTriplet& triplet, bool use_fusion = true);

    /// Inference forward: response maps for the test frame of a triplet.
    TrackerOutput infer(const FrameTriplet& triplet, bool use_fusion = true);

    std::vector<Param*> params();
    FusionModule& fusion() { return fusion_; }
    Predictor& predictor() { return predictor_; }
    const TrackerConfig& tracker_config() const { return tcfg_; }
    std::uint64_t config_hash() const;

private:
    TrackerConfig tcfg_;
    FusionModule fusion_;
    Predictor predictor_;
};

/// Frame-by-frame tracking. Memory policy: train frames are the first frame
/// and the most recent frame whose peak response cleared the confidence
/// threshold (first frame duplicated until one exists).
std::vector<BoundingBox> track_sequence(TotemModel& model,
                                        const std::vector<FrameFeatures>& frames,
                                        const BoundingBox& init_box, bool use_fusion = true);

}  // namespace totem
