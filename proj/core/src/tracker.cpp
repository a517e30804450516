#include "totem/tracker.hpp"

#include <cmath>

#include "totem/rng.hpp"

namespace totem {

bool TrackerConfig::box_in_grid(const BoundingBox& b) const {
    return b.x >= 0.0 && b.y >= 0.0 && b.w >= 0.0 && b.h >= 0.0 &&
           b.x + b.w <= (double)grid_w && b.y + b.h <= (double)grid_h;
}

TrackerConfig TrackerConfig::paper_reference() {
    TrackerConfig cfg;
    cfg.grid_h = cfg.grid_w = 18;
    cfg.channels = 256;
    cfg.num_heads = 8;
    return cfg;
}

Tensor gaussian_label(const TrackerConfig& cfg, const BoundingBox& gt) {
    Tensor label = Tensor::zeros({cfg.pixels(), 1});
    const double s2 = 2.0 * cfg.label_sigma * cfg.label_sigma;
    for (std::size_t i = 0; i < cfg.grid_h; ++i) {
        for (std::size_t j = 0; j < cfg.grid_w; ++j) {
            const double dx = (double)j + 0.5 - gt.cx();
            const double dy = (double)i + 0.5 - gt.cy();
            label.data[i * cfg.grid_w + j] =
                cfg.label_amplitude * std::exp(-(dx * dx + dy * dy) / s2);
        }
    }
    return label;
}

Tensor ltrb_target_map(const TrackerConfig& cfg, const BoundingBox& gt) {
    Tensor m = Tensor::zeros({cfg.pixels(), 4});
    for (std::size_t i = 0; i < cfg.grid_h; ++i) {
        for (std::size_t j = 0; j < cfg.grid_w; ++j) {
            const double cx = (double)j + 0.5, cy = (double)i + 0.5;
            double* row = m.data.data() + (i * cfg.grid_w + j) * 4;
            row[0] = cx - gt.x;
            row[1] = cy - gt.y;
            row[2] = gt.x + gt.w - cx;
            row[3] = gt.y + gt.h - cy;
        }
    }
    return m;
}

Tensor target_state_maps(const TrackerConfig& cfg, const BoundingBox& box) {
    Tensor ltrb = ltrb_target_map(cfg, box);
    // the encoded score map always peaks at 1; label_amplitude only rescales
    // the regression target used by the loss
    TrackerConfig unit = cfg;
    unit.label_amplitude = 1.0;
    Tensor gauss = gaussian_label(unit, box);
    Tensor m = Tensor::zeros({cfg.pixels(), 5});
    for (std::size_t p = 0; p < cfg.pixels(); ++p) {
        for (int k = 0; k < 4; ++k) m.data[p * 5 + k] = ltrb.data[p * 4 + k];
        m.data[p * 5 + 4] = gauss.data[p];
    }
    return m;
}

BoundingBox localize(const TrackerOutput& out, const TrackerConfig& cfg) {
    std::size_t best = 0;
    for (std::size_t p = 1; p < out.y_hat.size(); ++p)
        if (out.y_hat.data[p] > out.y_hat.data[best]) best = p;
    const std::size_t i = best / cfg.grid_w, j = best % cfg.grid_w;
    const double cx = (double)j + 0.5, cy = (double)i + 0.5;
    const double* d = out.d_hat.data.data() + best * 4;
    return BoundingBox{cx - d[0], cy - d[1], d[0] + d[2], d[1] + d[3]};
}

double peak_response(const Tensor& y_hat) {
    double mx = -HUGE_VAL;
    for (double v : y_hat.data) mx = std::max(mx, v);
    return mx;
}

Predictor::Predictor(const TrackerConfig& cfg, std::uint64_t seed)
    : cfg_(cfg),
      state_w_(make_linear_weight("predictor/state_w", 5, cfg.channels, seed)),
      state_b_(make_zero_bias("predictor/state_b", cfg.channels)),
      dec_query_("predictor/dec_query",
                 xavier_init(1, cfg.channels, derive_seed(seed, "predictor/dec_query"))),
      dec_wk_(make_linear_weight("predictor/dec_wk", cfg.channels, cfg.channels, seed)),
      dec_bk_(make_zero_bias("predictor/dec_bk", cfg.channels)),
      dec_wv_(make_linear_weight("predictor/dec_wv", cfg.channels, cfg.channels, seed)),
      dec_bv_(make_zero_bias("predictor/dec_bv", cfg.channels)),
      dec_wo_(make_linear_weight("predictor/dec_wo", cfg.channels, cfg.channels, seed)),
      dec_bo_(make_zero_bias("predictor/dec_bo", cfg.channels)),
      head_cls_w_(make_linear_weight("predictor/head_cls_w", cfg.channels, cfg.channels, seed)),
      head_cls_b_(make_zero_bias("predictor/head_cls_b", cfg.channels)),
      head_reg_w_(make_linear_weight("predictor/head_reg_w", cfg.channels, 4 * cfg.channels,
                                     seed)),
      head_reg_b_(make_zero_bias("predictor/head_reg_b", 4 * cfg.channels)) {
    for (std::size_t l = 0; l < cfg.num_encoder_layers; ++l)
        enc_layers_.emplace_back("predictor/enc" + std::to_string(l), cfg.channels,
                                 cfg.ffn_hidden(), seed);
}

Var Predictor::encode_target_state(Tape& t, Var features, const BoundingBox& box) {
    if (!cfg_.box_in_grid(box))
        throw ContractError("encode_target_state: box outside the feature grid");
    Var state = t.leaf(target_state_maps(cfg_, box));
    Var emb = t.linear(state, t.param(state_w_), t.param(state_b_));
    return t.add(features, emb);
}

Predictor::ModelVars Predictor::predict_model(Tape& t, Var tr1, Var tr2, Var te,
                                              const BoundingBox& box1, const BoundingBox& box2) {
    const std::size_t P = cfg_.pixels();
    Var tr1e = encode_target_state(t, tr1, box1);
    Var tr2e = encode_target_state(t, tr2, box2);
    Var tokens = t.concat_rows({tr1e, tr2e, te});
    const std::size_t group = 3 * P;
    for (auto& layer : enc_layers_)
        tokens = layer.forward(t, tokens, group, cfg_.num_heads, true, cfg_.norm_eps);
    Var k = t.linear(tokens, t.param(dec_wk_), t.param(dec_bk_));
    Var v = t.linear(tokens, t.param(dec_wv_), t.param(dec_bv_));
    Var dec = t.grouped_cross_attention(t.param(dec_query_), k, v, group, cfg_.num_heads);
    dec = t.linear(dec, t.param(dec_wo_), t.param(dec_bo_));
    ModelVars out;
    out.w_cls = t.linear(dec, t.param(head_cls_w_), t.param(head_cls_b_));
    out.w_reg = t.linear(dec, t.param(head_reg_w_), t.param(head_reg_b_));
    out.enc_test = t.slice_rows(tokens, 2 * P, P);
    return out;
}

std::vector<Param*> Predictor::params() {
    std::vector<Param*> out{&state_w_, &state_b_};
    for (auto& l : enc_layers_) l.collect(out);
    for (Param* p : {&dec_query_, &dec_wk_, &dec_bk_, &dec_wv_, &dec_bv_, &dec_wo_, &dec_bo_,
                     &head_cls_w_, &head_cls_b_, &head_reg_w_, &head_reg_b_})
        out.push_back(p);
    return out;
}

AppliedModel apply_model(Tape& t, Var enc_test, const Predictor::ModelVars& model,
                         const TrackerConfig& cfg) {
    const std::size_t c = cfg.channels;
    if (t.val(enc_test).cols() != c)
        throw DimensionError("apply_model: channel mismatch " +
                             shape_str(t.val(enc_test).shape));
    AppliedModel out;
    out.y = t.matmul(enc_test, t.reshape(model.w_cls, {c, 1}));
    out.d = t.softplus(t.matmul(enc_test, t.reshape(model.w_reg, {c, 4})));
    return out;
}

LossVars training_losses(Tape& t, Var y, Var d, const BoundingBox& gt,
                         const TrackerConfig& cfg) {
    if (!cfg.box_in_grid(gt)) throw ContractError("training_losses: gt box outside grid");
    Tensor label = gaussian_label(cfg, gt);
    double mx = peak_response(label);
    Tensor mask = Tensor::zeros({cfg.pixels(), 4});
    for (std::size_t p = 0; p < cfg.pixels(); ++p)
        if (label.data[p] > 0.5 * mx)
            for (int k = 0; k < 4; ++k) mask.data[p * 4 + k] = 1.0;
    LossVars l;
    l.l1 = t.mse_loss(y, label);
    l.l2 = t.masked_mae_loss(d, ltrb_target_map(cfg, gt), mask);
    l.total = t.add(l.l1, t.scale(l.l2, cfg.loss_lambda));
    return l;
}

TotemModel::TotemModel(TrackerConfig tcfg, FusionConfig fcfg, std::uint64_t seed)
    : tcfg_(tcfg),
      fusion_(fcfg, derive_seed(seed, "fusion")),
      predictor_(tcfg, derive_seed(seed, "predictor")) {
    if (fcfg.channels != tcfg.channels)
        throw ContractError("model: fusion and tracker channel counts differ");
}

TotemModel::ForwardVars TotemModel::forward_triplet(Tape& t, const FrameTriplet& triplet,
                                                    bool use_fusion) {
    const std::size_t P = tcfg_.pixels();
    Var tr1, tr2, te;
    if (use_fusion) {
        Var x_all = t.concat_rows(
            {t.leaf(triplet.tr1.x), t.leaf(triplet.tr2.x), t.leaf(triplet.te.x)});
        Var xp_all = t.concat_rows(
            {t.leaf(triplet.tr1.xp), t.leaf(triplet.tr2.xp), t.leaf(triplet.te.xp)});
        Var fused = fusion_.fuse(t, x_all, xp_all, 3);
        tr1 = t.slice_rows(fused, 0, P);
        tr2 = t.slice_rows(fused, P, P);
        te = t.slice_rows(fused, 2 * P, P);
    } else {
        tr1 = t.leaf(triplet.tr1.x);
        tr2 = t.leaf(triplet.tr2.x);
        te = t.leaf(triplet.te.x);
    }
    auto model = predictor_.predict_model(t, tr1, tr2, te, triplet.box1, triplet.box2);
    ForwardVars fv;
    fv.out = apply_model(t, model.enc_test, model, tcfg_);
    fv.loss = training_losses(t, fv.out.y, fv.out.d, triplet.gt_te, tcfg_);
    return fv;
}

TrackerOutput TotemModel::infer(const FrameTriplet& triplet, bool use_fusion) {
    Tape t;
    const std::size_t P = tcfg_.pixels();
    Var tr1, tr2, te;
    if (use_fusion) {
        Var x_all = t.concat_rows(
            {t.leaf(triplet.tr1.x), t.leaf(triplet.tr2.x), t.leaf(triplet.te.x)});
        Var xp_all = t.concat_rows(
            {t.leaf(triplet.tr1.xp), t.leaf(triplet.tr2.xp), t.leaf(triplet.te.xp)});
        Var fused = fusion_.fuse(t, x_all, xp_all, 3);
        tr1 = t.slice_rows(fused, 0, P);
        tr2 = t.slice_rows(fused, P, P);
        te = t.slice_rows(fused, 2 * P, P);
    } else {
        tr1 = t.leaf(triplet.tr1.x);
        tr2 = t.leaf(triplet.tr2.x);
        te = t.leaf(triplet.te.x);
    }
    auto model = predictor_.predict_model(t, tr1, tr2, te, triplet.box1, triplet.box2);
    auto out = apply_model(t, model.enc_test, model, tcfg_);
    return TrackerOutput{t.val(out.y), t.val(out.d)};
}

std::vector<Param*> TotemModel::params() {
    std::vector<Param*> out = fusion_.params();
    for (Param* p : predictor_.params()) out.push_back(p);
    return out;
}

std::uint64_t TotemModel::config_hash() const {
    std::string desc = "grid=" + std::to_string(tcfg_.grid_h) + "x" +
                       std::to_string(tcfg_.grid_w) + ";c=" + std::to_string(tcfg_.channels) +
                       ";heads=" + std::to_string(tcfg_.num_heads) +
                       ";penc=" + std::to_string(tcfg_.num_encoder_layers) +
                       ";fenc=" + std::to_string(fusion_.config().num_encoder_layers) +
                       ";fheads=" + std::to_string(fusion_.config().num_heads) +
                       ";ffnh=" + std::to_string(fusion_.config().ffn_hidden()) +
                       ";q=" + std::to_string(fusion_.config().use_query_embedding) +
                       ";phi=" + std::to_string(fusion_.config().use_projection_mlp) +
                       ";ffnfuse=" + std::to_string(fusion_.config().ffn_fuse_mode);
    return derive_seed(0x70537e11u, desc);
}

std::vector<BoundingBox> track_sequence(TotemModel& model,
                                        const std::vector<FrameFeatures>& frames,
                                        const BoundingBox& init_box, bool use_fusion) {
    if (frames.empty()) throw ContractError("track_sequence: empty sequence");
    const TrackerConfig& cfg = model.tracker_config();
    if (!cfg.box_in_grid(init_box))
        throw ContractError("track_sequence: init box outside grid");
    std::vector<BoundingBox> boxes;
    boxes.push_back(init_box);
    std::size_t mem_idx = 0;
    BoundingBox mem_box = init_box;
    for (std::size_t f = 1; f < frames.size(); ++f) {
        FrameTriplet triplet;
        triplet.tr1 = frames[0];
        triplet.box1 = init_box;
        triplet.tr2 = frames[mem_idx];
        triplet.box2 = mem_box;
        triplet.te = frames[f];
        TrackerOutput out = model.infer(triplet, use_fusion);
        BoundingBox pred = localize(out, cfg);
        boxes.push_back(pred);
        if (peak_response(out.y_hat) >= cfg.confidence_threshold && cfg.box_in_grid(pred)) {
            mem_idx = f;
            mem_box = pred;
        }
    }
    return boxes;
}

}  // namespace totem
