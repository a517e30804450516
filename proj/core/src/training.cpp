#include "totem/training.hpp"

#include <cmath>
#include <iostream>
#include <limits>

#include "totem/rng.hpp"

namespace totem {

TrainConfig TrainConfig::paper_reference() {
    TrainConfig cfg;
    cfg.epochs = 25;
    cfg.triplets_per_epoch = 4000;
    cfg.batch_size = 18;
    cfg.learning_rate = 1e-4;
    return cfg;
}

StepMode parse_step_mode(const std::string& s) {
    if (s == "one_step") return StepMode::one_step;
    if (s == "two_step") return StepMode::two_step;
    if (s == "finetune" || s == "two_step_plus_finetune")
        return StepMode::two_step_plus_finetune;
    throw ContractError("unknown step mode '" + s + "' (one_step|two_step|finetune)");
}

std::string step_mode_name(StepMode m) {
    switch (m) {
        case StepMode::one_step: return "one_step";
        case StepMode::two_step: return "two_step";
        case StepMode::two_step_plus_finetune: return "two_step_plus_finetune";
    }
    return "?";
}

void adamw_step(const std::vector<Param*>& params, AdamWState& state, const TrainConfig& cfg) {
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, (double)state.step);
    const double bc2 = 1.0 - std::pow(cfg.beta2, (double)state.step);
    for (Param* p : params) {
        if (!p->trainable) continue;
        for (double g : p->grad.data)
            if (!std::isfinite(g))
                throw ContractError("adamw_step: non-finite gradient in param " + p->name);
        Tensor& m = state.m.try_emplace(p->name, Tensor::zeros(p->value.shape)).first->second;
        Tensor& v = state.v.try_emplace(p->name, Tensor::zeros(p->value.shape)).first->second;
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double g = p->grad.data[i];
            m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * g;
            v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * g * g;
            const double mhat = m.data[i] / bc1;
            const double vhat = v.data[i] / bc2;
            double& w = p->value.data[i];
            w -= cfg.learning_rate * cfg.weight_decay * w;  // decoupled decay
            w -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

void freeze_all_except_fusion(TotemModel& model) {
    for (Param* p : model.params()) p->trainable = false;
    for (Param* p : model.fusion().params()) p->trainable = true;
}

void unfreeze_all(TotemModel& model) {
    for (Param* p : model.params()) p->trainable = true;
}

std::vector<FrameTriplet> sample_triplets(const SynthDataset& data, const TrackerConfig& tcfg,
                                          std::uint64_t epoch_seed, std::size_t count) {
    std::vector<const SynthSequence*> pool;
    for (const auto* s : data.split(/*train=*/true)) {
        if (s->frames.size() < 3) {
            std::cerr << "warning: sequence " << s->id << " shorter than 3 frames, skipped\n";
            continue;
        }
        pool.push_back(s);
    }
    if (pool.empty()) throw ContractError("sample_triplets: no usable training sequences");
    Rng rng(epoch_seed);
    std::vector<FrameTriplet> out;
    out.reserve(count);
    for (std::size_t n = 0; n < count; ++n) {
        const SynthSequence& seq = *pool[rng.below(pool.size())];
        const std::size_t T = seq.frames.size();
        std::size_t a = rng.below(T), b, c;
        do { b = rng.below(T); } while (b == a);
        do { c = rng.below(T); } while (c == a || c == b);
        FrameTriplet tr;
        tr.tr1 = seq.frames[a];
        tr.tr2 = seq.frames[b];
        tr.te = seq.frames[c];
        tr.box1 = seq.boxes[a];
        tr.box2 = seq.boxes[b];
        tr.gt_te = seq.boxes[c];
        // Train-frame boxes must lie inside the grid for state encoding; keep
        // resampling frames whose box was clipped away (OV sequences).
        if (!tcfg.box_in_grid(tr.box1) || !tcfg.box_in_grid(tr.box2)) {
            --n;
            continue;
        }
        out.push_back(std::move(tr));
    }
    return out;
}

double evaluate_loss(TotemModel& model, const std::vector<FrameTriplet>& batch,
                     bool use_fusion) {
    double total = 0.0;
    for (const auto& tr : batch) {
        Tape tape;
        auto fw = model.forward_triplet(tape, tr, use_fusion);
        total += tape.val(fw.loss.total).data[0];
    }
    return batch.empty() ? 0.0 : total / (double)batch.size();
}

Checkpoint snapshot(TotemModel& model) {
    Checkpoint ckpt;
    for (Param* p : model.params()) ckpt.tensors[p->name] = p->value;
    ckpt.config_hash = model.config_hash();
    return ckpt;
}

void restore(TotemModel& model, const Checkpoint& ckpt) {
    if (ckpt.config_hash != 0 && ckpt.config_hash != model.config_hash())
        throw ContractError(
            "checkpoint config hash mismatch: the checkpoint was trained with a different "
            "configuration; retrain or adjust the config");
    for (Param* p : model.params()) {
        auto it = ckpt.tensors.find(p->name);
        if (it == ckpt.tensors.end())
            throw ContractError("checkpoint missing tensor " + p->name);
        if (!it->second.same_shape(p->value))
            throw ContractError("checkpoint tensor " + p->name + " has wrong shape");
        p->value = it->second;
    }
}

namespace {

/// One training phase: `epochs` epochs of accumulated-gradient AdamW over
/// freshly sampled triplets. Returns false when the loss went non-finite (the
/// model is left at the last finite state).
bool run_phase(TotemModel& model, const SynthDataset& data, const TrainConfig& cfg,
               AdamWState& opt, const std::string& phase, std::size_t epochs,
               std::size_t epoch_offset, bool use_fusion, TrainResult& result,
               const EpochCallback& on_epoch) {
    Checkpoint last_finite = snapshot(model);
    auto params = model.params();
    for (std::size_t e = 0; e < epochs; ++e) {
        const std::uint64_t epoch_seed =
            derive_seed(cfg.seed, phase + "/epoch/" + std::to_string(epoch_offset + e));
        auto triplets = sample_triplets(data, model.tracker_config(), epoch_seed,
                                        cfg.triplets_per_epoch);
        double epoch_loss = 0.0, epoch_l1 = 0.0, epoch_l2 = 0.0;
        bool finite = true;
        std::size_t in_batch = 0;
        for (Param* p : params) p->zero_grad();
        for (const auto& tr : triplets) {
            double loss_val = std::numeric_limits<double>::quiet_NaN();
            try {
                Tape tape;
                auto fw = model.forward_triplet(tape, tr, use_fusion);
                loss_val = tape.val(fw.loss.total).data[0];
                epoch_l1 += tape.val(fw.loss.l1).data[0];
                epoch_l2 += tape.val(fw.loss.l2).data[0];
                tape.backward(fw.loss.total);
            } catch (const ContractError&) {
                // Non-finite values inside the forward/backward pass: treat
                // as divergence rather than a caller error.
            }
            if (!std::isfinite(loss_val)) {
                finite = false;
                break;
            }
            epoch_loss += loss_val;
            if (++in_batch == cfg.batch_size) {
                for (Param* p : params)
                    if (p->trainable)
                        for (double& g : p->grad.data) g /= (double)in_batch;
                adamw_step(params, opt, cfg);
                for (Param* p : params) p->zero_grad();
                in_batch = 0;
            }
        }
        if (finite && in_batch > 0) {
            for (Param* p : params)
                if (p->trainable)
                    for (double& g : p->grad.data) g /= (double)in_batch;
            adamw_step(params, opt, cfg);
            for (Param* p : params) p->zero_grad();
        }
        if (!finite) {
            restore(model, last_finite);
            result.diverged = true;
            result.checkpoint = last_finite;
            std::cerr << "training diverged in phase " << phase << " epoch "
                      << epoch_offset + e << "; restored last finite checkpoint\n";
            return false;
        }
        const double n = (double)triplets.size();
        LossLogEntry entry{phase, epoch_offset + e, epoch_l1 / n, epoch_l2 / n, epoch_loss / n};
        result.log.push_back(entry);
        if (on_epoch) on_epoch(entry);
        last_finite = snapshot(model);
        last_finite.step = opt.step;
    }
    return true;
}

void finish(TotemModel& model, AdamWState& opt, TrainResult& result) {
    if (!result.diverged) {
        result.checkpoint = snapshot(model);
        result.checkpoint.step = opt.step;
    }
}

}  // namespace

TrainResult pretrain_predictor(TotemModel& model, const SynthDataset& data,
                               const TrainConfig& cfg, const EpochCallback& on_epoch) {
    TrainResult result;
    for (Param* p : model.params()) p->trainable = false;
    for (Param* p : model.predictor().params()) p->trainable = true;
    AdamWState opt;
    run_phase(model, data, cfg, opt, "pretrain", cfg.epochs, 0, /*use_fusion=*/false, result,
              on_epoch);
    for (Param* p : model.params()) p->trainable = false;
    finish(model, opt, result);
    return result;
}

TrainResult train_one_step(TotemModel& model, const SynthDataset& data, const TrainConfig& cfg,
                           const EpochCallback& on_epoch) {
    TrainResult result;
    freeze_all_except_fusion(model);
    model.fusion().mutable_config().zero_original_input = false;
    AdamWState opt;
    run_phase(model, data, cfg, opt, "one_step", cfg.epochs, 0, true, result, on_epoch);
    finish(model, opt, result);
    return result;
}

TrainResult train_two_step(TotemModel& model, const SynthDataset& data, const TrainConfig& cfg,
                           const EpochCallback& on_epoch) {
    if (model.fusion().config().ffn_fuse_mode)
        throw ContractError(
            "two-step training is defined only for the transformer fusion module; the "
            "concat-FFN variant has no step-1 input to cut off");
    TrainResult result;
    freeze_all_except_fusion(model);
    const std::size_t step1 = cfg.epochs / 2, step2 = cfg.epochs - step1;
    model.fusion().mutable_config().zero_original_input = true;
    AdamWState opt;
    if (run_phase(model, data, cfg, opt, "step1", step1, 0, true, result, on_epoch)) {
        model.fusion().mutable_config().zero_original_input = false;
        AdamWState opt2;  // fresh moments for the new objective
        run_phase(model, data, cfg, opt2, "step2", step2, step1, true, result, on_epoch);
        opt.step = opt2.step;
    }
    model.fusion().mutable_config().zero_original_input = false;
    finish(model, opt, result);
    return result;
}

TrainResult finetune_end_to_end(TotemModel& model, const SynthDataset& data,
                                const TrainConfig& cfg, const EpochCallback& on_epoch) {
    TrainResult result;
    unfreeze_all(model);
    AdamWState opt;
    run_phase(model, data, cfg, opt, "finetune", cfg.epochs, 0, true, result, on_epoch);
    finish(model, opt, result);
    return result;
}

}  // namespace totem
