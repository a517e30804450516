#include "totem/synthdata.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "totem/checkpoint.hpp"
#include "totem/rng.hpp"

namespace totem {

namespace fs = std::filesystem;

const std::array<std::string, 12> kAttributeTags = {"IV", "POC", "DEF", "MB",  "ROT", "BC",
                                                    "SV", "FOC", "FM",  "OV",  "LR",  "ARC"};

SynthConfig SynthConfig::transparent_regime(std::uint64_t seed) {
    SynthConfig cfg;
    cfg.seed = seed;
    return cfg;
}

SynthConfig SynthConfig::opaque_regime(std::uint64_t seed) {
    SynthConfig cfg;
    cfg.seed = seed;
    cfg.appearance_snr = 4.0;
    cfg.transparency_snr = 0.0;
    cfg.shared_snr = 0.0;
    cfg.snr_jitter = 0.0;
    cfg.appearance_dropout = 0.0;
    return cfg;
}

void SynthConfig::validate() const {
    if (max_target > (double)std::min(grid_h, grid_w))
        throw ContractError("synth config: target larger than grid");
    if (min_target <= 0.0 || min_target > max_target)
        throw ContractError("synth config: bad target size range");
    if (frames_per_sequence == 0) throw ContractError("synth config: zero frames");
    if (snr_jitter < 0.0 || snr_jitter >= 1.0)
        throw ContractError("synth config: snr_jitter must be in [0, 1)");
    if (appearance_dropout < 0.0 || appearance_dropout > 1.0)
        throw ContractError("synth config: appearance_dropout must be in [0, 1]");
}

namespace {

/// Per-attribute perturbation knobs; applied while re-deriving a sequence so
/// geometry and painted features stay consistent.
struct AttrMod {
    double gain0 = 1.0, gain1 = 1.0;  // IV: appearance gain ramp
    int occlusion = 0;                // 1 = partial (POC), 2 = full (FOC)
    double def_wobble = 0.0;          // DEF: w/h wobble amplitude
    double arc_factor = 1.0;          // ARC: aspect-ratio ramp, w*sqrt(f), h/sqrt(f)
    double scale_ramp = 1.0;          // SV: final-size multiplier
    double step_mult = 1.0;           // FM
    bool lowres = false;              // LR
    bool out_of_view = false;         // OV
    bool smear = false;               // MB
    bool rotate_sig = false;          // ROT
    bool bg_confusers = false;        // BC
};

AttrMod attr_mod(const std::string& tag) {
    AttrMod m;
    if (tag == "IV") {
        m.gain0 = 0.7;
        m.gain1 = 1.4;
    } else if (tag == "POC") {
        m.occlusion = 1;
    } else if (tag == "FOC") {
        m.occlusion = 2;
    } else if (tag == "DEF") {
        m.def_wobble = 0.3;
    } else if (tag == "ARC") {
        m.arc_factor = 1.5;
    } else if (tag == "SV") {
        m.scale_ramp = 2.0;
    } else if (tag == "FM") {
        m.step_mult = 3.0;
    } else if (tag == "LR") {
        m.lowres = true;
    } else if (tag == "OV") {
        m.out_of_view = true;
    } else if (tag == "MB") {
        m.smear = true;
    } else if (tag == "ROT") {
        m.rotate_sig = true;
    } else if (tag == "BC") {
        m.bg_confusers = true;
    } else {
        std::string valid;
        for (const auto& t : kAttributeTags) valid += t + " ";
        throw ContractError("inject_attribute: unknown tag '" + tag + "'; valid tags: " + valid);
    }
    return m;
}

Tensor unit_direction(std::uint64_t seed, std::size_t channels) {
    Rng rng(seed);
    Tensor s = Tensor::zeros({1, channels});
    double norm = 0.0;
    for (double& v : s.data) {
        v = rng.gaussian();
        norm += v * v;
    }
    norm = std::sqrt(norm);
    for (double& v : s.data) v /= norm;
    return s;
}

Tensor class_signature(const SynthConfig& cfg, std::size_t class_index) {
    Rng rng(derive_seed(cfg.seed, "class/" + std::to_string(class_index)));
    Tensor s = Tensor::zeros({1, cfg.channels});
    double norm = 0.0;
    for (double& v : s.data) {
        v = rng.gaussian();
        norm += v * v;
    }
    norm = std::sqrt(norm);
    for (double& v : s.data) v /= norm;
    return s;
}

bool cell_in_box(std::size_t i, std::size_t j, const BoundingBox& b) {
    const double cx = (double)j + 0.5, cy = (double)i + 0.5;
    return cx >= b.x && cx < b.x + b.w && cy >= b.y && cy < b.y + b.h;
}

BoundingBox clip_to_grid(const BoundingBox& b, const SynthConfig& cfg) {
    double x0 = std::max(0.0, b.x), y0 = std::max(0.0, b.y);
    double x1 = std::min((double)cfg.grid_w, b.x + b.w);
    double y1 = std::min((double)cfg.grid_h, b.y + b.h);
    if (x1 < x0) x1 = x0 = std::clamp(b.x, 0.0, (double)cfg.grid_w);
    if (y1 < y0) y1 = y0 = std::clamp(b.y, 0.0, (double)cfg.grid_h);
    return BoundingBox{x0, y0, x1 - x0, y1 - y0};
}

SynthSequence generate_sequence(const SynthConfig& cfg, const std::string& id,
                                std::size_t class_index, const AttrMod& mod,
                                const std::string& tag) {
    const std::size_t T = cfg.frames_per_sequence, P = cfg.grid_h * cfg.grid_w,
                      C = cfg.channels;
    SynthSequence seq;
    seq.id = id;
    seq.class_index = class_index;
    seq.seq_seed = derive_seed(cfg.seed, "seq/" + id);
    seq.gen_config = cfg;
    if (!tag.empty()) seq.attributes.push_back(tag);

    Rng rng(seq.seq_seed);
    Tensor sig = class_signature(cfg, class_index);
    // Dataset-wide transparency direction shared by every class.
    Tensor shared = unit_direction(derive_seed(cfg.seed, "shared_dir"), C);
    // Orthogonal companion direction for ROT.
    Tensor ortho = Tensor::zeros({1, C});
    {
        Rng orng(derive_seed(seq.seq_seed, "ortho"));
        double dot = 0.0, norm = 0.0;
        for (double& v : ortho.data) v = orng.gaussian();
        for (std::size_t k = 0; k < C; ++k) dot += ortho.data[k] * sig.data[k];
        for (std::size_t k = 0; k < C; ++k) ortho.data[k] -= dot * sig.data[k];
        for (double v : ortho.data) norm += v * v;
        norm = std::sqrt(norm);
        for (double& v : ortho.data) v /= norm;
    }
    // Per-frame transparency visibility and appearance dropout; dedicated
    // streams so toggling either knob never shifts any other random draw.
    Rng jrng(derive_seed(seq.seq_seed, "snr_jitter"));
    Rng drng(derive_seed(seq.seq_seed, "appearance_dropout"));
    // Per-sequence texture offset.
    Tensor texture = Tensor::zeros({1, C});
    for (double& v : texture.data) v = 0.3 * rng.gaussian();

    double w0 = rng.uniform(cfg.min_target, cfg.max_target);
    double h0 = rng.uniform(cfg.min_target, cfg.max_target);
    double max_wh = std::max(w0, h0) * std::max(mod.scale_ramp, 1.0) *
                    std::sqrt(std::max(mod.arc_factor, 1.0)) * (1.0 + mod.def_wobble);
    max_wh = std::min(max_wh, (double)std::min(cfg.grid_h, cfg.grid_w));
    double cx = rng.uniform(max_wh / 2.0, (double)cfg.grid_w - max_wh / 2.0);
    double cy = rng.uniform(max_wh / 2.0, (double)cfg.grid_h - max_wh / 2.0);

    const std::size_t occl_begin = 2 * T / 3, occl_end = std::min(T, occl_begin + 3);
    const std::size_t ov_begin = T / 3, ov_end = std::min(T, ov_begin + 3);

    Rng brng(derive_seed(seq.seq_seed, "bc"));
    for (std::size_t t = 0; t < T; ++t) {
        const double frac = T > 1 ? (double)t / (double)(T - 1) : 0.0;
        // Frame geometry.
        double wt = w0, ht = h0;
        if (mod.def_wobble > 0.0) {
            wt *= 1.0 + mod.def_wobble * std::sin(2.0 * M_PI * frac);
            ht *= 1.0 - mod.def_wobble * std::sin(2.0 * M_PI * frac);
        }
        if (mod.arc_factor != 1.0) {
            double f = std::pow(mod.arc_factor, frac);
            wt *= std::sqrt(f);
            ht /= std::sqrt(f);
        }
        if (mod.scale_ramp != 1.0) {
            double f = 1.0 + (mod.scale_ramp - 1.0) * frac;
            wt *= f;
            ht *= f;
        }
        wt = std::min(wt, (double)cfg.grid_w);
        ht = std::min(ht, (double)cfg.grid_h);
        double fcx = cx, fcy = cy;
        if (mod.out_of_view && t >= ov_begin && t < ov_end)
            fcx = (double)cfg.grid_w + wt;  // fully outside the grid
        BoundingBox raw{fcx - wt / 2.0, fcy - ht / 2.0, wt, ht};
        BoundingBox gt = clip_to_grid(raw, cfg);
        seq.boxes.push_back(gt);

        const double xp_gain =
            cfg.snr_jitter > 0.0 ? jrng.uniform(1.0 - cfg.snr_jitter, 1.0 + cfg.snr_jitter)
                                 : 1.0;
        const bool x_dropped =
            cfg.appearance_dropout > 0.0 && drng.uniform() < cfg.appearance_dropout;
        const bool occluded_frame = mod.occlusion != 0 && t >= occl_begin && t < occl_end;
        const double gain = mod.gain0 + (mod.gain1 - mod.gain0) * frac;
        // Rotated signature for this frame.
        Tensor fsig = sig;
        if (mod.rotate_sig) {
            const double theta = 0.5 * M_PI * frac;
            for (std::size_t k = 0; k < C; ++k)
                fsig.data[k] = std::cos(theta) * sig.data[k] + std::sin(theta) * ortho.data[k];
        }

        FrameFeatures f;
        f.x = Tensor::zeros({P, C});
        f.xp = Tensor::zeros({P, C});
        for (std::size_t i = 0; i < cfg.grid_h; ++i) {
            for (std::size_t j = 0; j < cfg.grid_w; ++j) {
                const std::size_t p = i * cfg.grid_w + j;
                const bool inside = cell_in_box(i, j, raw);
                // Partial occlusion hides the left half of the box.
                const bool hidden =
                    occluded_frame &&
                    (mod.occlusion == 2 ||
                     ((double)j + 0.5 < raw.x + raw.w / 2.0));
                for (std::size_t k = 0; k < C; ++k) {
                    double bg_x = texture.data[k] + rng.gaussian();
                    double bg_xp = texture.data[k] + rng.gaussian();
                    double vx = bg_x, vxp = bg_xp;
                    if (inside && !hidden) {
                        if (!x_dropped) vx += cfg.appearance_snr * fsig.data[k];
                        vxp += xp_gain * (cfg.transparency_snr * fsig.data[k] +
                                          cfg.shared_snr * shared.data[k]);
                    }
                    f.x.data[p * C + k] = gain * vx;
                    f.xp.data[p * C + k] = vxp;
                }
            }
        }
        if (mod.bg_confusers) {
            // A few background cells carry the signature in both streams.
            for (int n = 0; n < 6; ++n) {
                std::size_t ci = brng.below(cfg.grid_h), cj = brng.below(cfg.grid_w);
                if (cell_in_box(ci, cj, raw)) continue;
                std::size_t p = ci * cfg.grid_w + cj;
                for (std::size_t k = 0; k < C; ++k) {
                    f.x.data[p * C + k] += cfg.appearance_snr * fsig.data[k];
                    f.xp.data[p * C + k] += xp_gain * (cfg.transparency_snr * fsig.data[k] +
                                                       cfg.shared_snr * shared.data[k]);
                }
            }
        }
        if (mod.lowres) {
            // 2x2 average pooling over the target region.
            Tensor pooled_x = f.x, pooled_xp = f.xp;
            for (std::size_t i = 0; i < cfg.grid_h; ++i) {
                for (std::size_t j = 0; j < cfg.grid_w; ++j) {
                    if (!cell_in_box(i, j, raw)) continue;
                    std::size_t i0 = (i / 2) * 2, j0 = (j / 2) * 2;
                    for (std::size_t k = 0; k < C; ++k) {
                        double ax = 0.0, axp = 0.0;
                        int cnt = 0;
                        for (std::size_t di = 0; di < 2; ++di) {
                            for (std::size_t dj = 0; dj < 2; ++dj) {
                                std::size_t ii = std::min(i0 + di, cfg.grid_h - 1);
                                std::size_t jj = std::min(j0 + dj, cfg.grid_w - 1);
                                ax += f.x.data[(ii * cfg.grid_w + jj) * C + k];
                                axp += f.xp.data[(ii * cfg.grid_w + jj) * C + k];
                                ++cnt;
                            }
                        }
                        pooled_x.data[(i * cfg.grid_w + j) * C + k] = ax / cnt;
                        pooled_xp.data[(i * cfg.grid_w + j) * C + k] = axp / cnt;
                    }
                }
            }
            f.x = std::move(pooled_x);
            f.xp = std::move(pooled_xp);
        }
        if (mod.smear && t > 0) {
            for (std::size_t n = 0; n < f.x.size(); ++n) {
                f.x.data[n] = 0.5 * f.x.data[n] + 0.5 * seq.frames.back().x.data[n];
                f.xp.data[n] = 0.5 * f.xp.data[n] + 0.5 * seq.frames.back().xp.data[n];
            }
        }
        seq.frames.push_back(std::move(f));

        // Random walk for the next frame.
        const double step = cfg.max_step * mod.step_mult;
        cx = std::clamp(cx + rng.uniform(-step, step), max_wh / 2.0,
                        (double)cfg.grid_w - max_wh / 2.0);
        cy = std::clamp(cy + rng.uniform(-step, step), max_wh / 2.0,
                        (double)cfg.grid_h - max_wh / 2.0);
    }
    return seq;
}

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

}  // namespace

const SynthSequence& SynthDataset::by_id(const std::string& id) const {
    for (const auto& s : sequences)
        if (s.id == id) return s;
    throw ContractError("dataset: unknown sequence id " + id);
}

std::vector<const SynthSequence*> SynthDataset::split(bool train) const {
    std::vector<const SynthSequence*> out;
    for (const auto& id : train ? train_ids : test_ids) out.push_back(&by_id(id));
    return out;
}

SynthDataset generate(const SynthConfig& cfg) {
    cfg.validate();
    SynthDataset ds;
    ds.config = cfg;
    char idbuf[32];
    std::size_t attr_cursor = 0;
    for (std::size_t c = 0; c < cfg.train_classes + cfg.test_classes; ++c) {
        const bool is_train = c < cfg.train_classes;
        const std::size_t per = is_train ? cfg.train_seqs_per_class : cfg.test_seqs_per_class;
        for (std::size_t s = 0; s < per; ++s) {
            std::snprintf(idbuf, sizeof(idbuf), "c%02zu_s%02zu", c, s);
            std::string id(idbuf);
            std::string tag;
            AttrMod mod;
            if (!is_train && cfg.inject_attributes) {
                tag = kAttributeTags[attr_cursor % kAttributeTags.size()];
                ++attr_cursor;
                mod = attr_mod(tag);
            }
            ds.sequences.push_back(generate_sequence(cfg, id, c, mod, tag));
            (is_train ? ds.train_ids : ds.test_ids).push_back(id);
        }
    }
    return ds;
}

SynthSequence inject_attribute(const SynthSequence& seq, const std::string& attr) {
    AttrMod mod = attr_mod(attr);
    SynthSequence out =
        generate_sequence(seq.gen_config, seq.id, seq.class_index, mod, attr);
    // Keep any previously recorded tags.
    for (const auto& t : seq.attributes)
        if (t != attr) out.attributes.push_back(t);
    return out;
}

void export_dataset(const SynthDataset& ds, const std::string& dir) {
    fs::create_directories(dir);
    std::string split;
    for (const auto& id : ds.train_ids) split += "train " + id + "\n";
    for (const auto& id : ds.test_ids) split += "test " + id + "\n";
    write_file_atomic((fs::path(dir) / "split.txt").string(), split);

    for (const auto& seq : ds.sequences) {
        fs::path sdir = fs::path(dir) / seq.id;
        fs::create_directories(sdir);
        const std::size_t T = seq.frames.size();
        const SynthConfig& cfg = seq.gen_config;
        Tensor x({T, cfg.grid_h, cfg.grid_w, cfg.channels},
                 std::vector<double>(T * cfg.grid_h * cfg.grid_w * cfg.channels));
        Tensor xp = x;
        const std::size_t per = cfg.grid_h * cfg.grid_w * cfg.channels;
        for (std::size_t t = 0; t < T; ++t) {
            std::copy(seq.frames[t].x.data.begin(), seq.frames[t].x.data.end(),
                      x.data.begin() + t * per);
            std::copy(seq.frames[t].xp.data.begin(), seq.frames[t].xp.data.end(),
                      xp.data.begin() + t * per);
        }
        std::ostringstream os(std::ios::binary);
        write_tensor_records(os, {{"x", x}, {"xp", xp}});
        write_file_atomic((sdir / "features.bin").string(), os.str());

        std::string gt;
        for (const auto& b : seq.boxes)
            gt += format_double(b.x) + "," + format_double(b.y) + "," + format_double(b.w) +
                  "," + format_double(b.h) + "\n";
        write_file_atomic((sdir / "groundtruth.txt").string(), gt);

        std::string attrs;
        for (const auto& a : seq.attributes) attrs += a + "\n";
        write_file_atomic((sdir / "attributes.txt").string(), attrs);
    }
}

SynthDataset import_dataset(const std::string& dir) {
    SynthDataset ds;
    std::ifstream split(fs::path(dir) / "split.txt");
    if (!split) throw ContractError("import_dataset: missing split.txt in " + dir);
    std::string kind, id;
    std::vector<std::pair<std::string, bool>> entries;
    while (split >> kind >> id) {
        if (kind != "train" && kind != "test")
            throw ContractError("import_dataset: bad split entry '" + kind + "'");
        entries.emplace_back(id, kind == "train");
    }
    for (const auto& [sid, is_train] : entries) {
        fs::path sdir = fs::path(dir) / sid;
        SynthSequence seq;
        seq.id = sid;
        {
            std::ifstream fb(sdir / "features.bin", std::ios::binary);
            if (!fb) throw ContractError("import_dataset: missing " + (sdir / "features.bin").string());
            auto tensors = read_tensor_records(fb, (sdir / "features.bin").string());
            const Tensor& x = tensors.at("x");
            const Tensor& xp = tensors.at("xp");
            if (x.rank() != 4 || !x.same_shape(xp))
                throw ContractError("import_dataset: bad feature tensors in " + sid);
            const std::size_t T = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3];
            seq.gen_config.grid_h = H;
            seq.gen_config.grid_w = W;
            seq.gen_config.channels = C;
            seq.gen_config.frames_per_sequence = T;
            const std::size_t per = H * W * C;
            for (std::size_t t = 0; t < T; ++t) {
                FrameFeatures f;
                f.x = Tensor::zeros({H * W, C});
                f.xp = Tensor::zeros({H * W, C});
                std::copy(x.data.begin() + t * per, x.data.begin() + (t + 1) * per,
                          f.x.data.begin());
                std::copy(xp.data.begin() + t * per, xp.data.begin() + (t + 1) * per,
                          f.xp.data.begin());
                seq.frames.push_back(std::move(f));
            }
        }
        {
            std::ifstream gt(sdir / "groundtruth.txt");
            if (!gt) throw ContractError("import_dataset: missing groundtruth for " + sid);
            std::string line;
            while (std::getline(gt, line)) {
                if (line.empty()) continue;
                BoundingBox b;
                double* fields[4] = {&b.x, &b.y, &b.w, &b.h};
                const char* p = line.data();
                const char* end = line.data() + line.size();
                for (int k = 0; k < 4; ++k) {
                    auto res = std::from_chars(p, end, *fields[k]);
                    if (res.ec != std::errc{})
                        throw ContractError("import_dataset: bad groundtruth line in " + sid);
                    p = res.ptr;
                    if (k < 3) {
                        if (p >= end || *p != ',')
                            throw ContractError("import_dataset: bad groundtruth line in " + sid);
                        ++p;
                    }
                }
                seq.boxes.push_back(b);
            }
        }
        {
            std::ifstream at(sdir / "attributes.txt");
            std::string line;
            while (at && std::getline(at, line))
                if (!line.empty()) seq.attributes.push_back(line);
        }
        ds.sequences.push_back(std::move(seq));
        (is_train ? ds.train_ids : ds.test_ids).push_back(sid);
    }
    if (!ds.sequences.empty()) ds.config = ds.sequences.front().gen_config;
    return ds;
}

}  // namespace totem
