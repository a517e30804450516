#include "totem/fusion.hpp"

#include <cmath>
#include <cstdlib>

#include "totem/rng.hpp"

namespace totem {

void FusionConfig::validate() const {
    if (channels == 0 || num_heads == 0 || channels % num_heads != 0)
        throw ContractError("fusion config: channels must be divisible by num_heads");
}

FusionConfig FusionConfig::paper_reference() {
    FusionConfig cfg;
    cfg.channels = 256;
    cfg.num_encoder_layers = 4;
    cfg.num_heads = 8;
    return cfg;
}

std::size_t FusionModule::transformer_param_count(const FusionConfig& cfg) {
    const std::size_t c = cfg.channels, f = cfg.ffn_hidden();
    std::size_t per_layer = 4 * (c * c + c)  // q, k, v, out projections
                            + 4 * c          // two layer norms
                            + (c * f + f) + (f * c + c);
    std::size_t n = cfg.num_encoder_layers * per_layer;
    if (cfg.use_query_embedding) n += c;
    if (cfg.use_projection_mlp) n += 2 * (c * c + c);
    return n;
}

namespace {

/// Hidden width for the 8-layer FFN fusion with parameter count closest to
/// the transformer variant: 2c -> d -> ... -> d -> c with 7 hidden layers.
std::size_t ffn_parity_width(std::size_t c, std::size_t target) {
    auto count = [c](std::size_t d) {
        return (2 * c * d + d) + 6 * (d * d + d) + (d * c + c);
    };
    std::size_t best = 1, best_err = SIZE_MAX;
    for (std::size_t d = 1; d < 4096; ++d) {
        std::size_t n = count(d);
        std::size_t err = n > target ? n - target : target - n;
        if (err < best_err) {
            best_err = err;
            best = d;
        }
        if (n > 2 * target) break;
    }
    return best;
}

}  // namespace

FusionModule::FusionModule(FusionConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t c = cfg_.channels;
    if (cfg_.ffn_fuse_mode) {
        std::size_t target = transformer_param_count(cfg_);
        std::size_t d = ffn_parity_width(c, target);
        std::vector<std::size_t> dims;
        dims.push_back(2 * c);
        for (int i = 0; i < 7; ++i) dims.push_back(d);
        dims.push_back(c);
        for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
            std::string base = "fusion/ffn" + std::to_string(i);
            ffn_weights_.push_back(make_linear_weight(base + "/w", dims[i], dims[i + 1], seed));
            ffn_biases_.push_back(make_zero_bias(base + "/b", dims[i + 1]));
        }
        std::size_t mine = param_count();
        double rel = std::abs((double)mine - (double)target) / (double)target;
        if (rel > 0.10)
            throw ContractError("ffn fusion parameter parity violated: " + std::to_string(mine) +
                                " vs " + std::to_string(target));
        return;
    }
    if (cfg_.use_query_embedding) {
        Tensor q = xavier_init(1, c, derive_seed(seed, "fusion/e_query"));
        e_query_ = Param("fusion/e_query", std::move(q));
    }
    for (std::size_t l = 0; l < cfg_.num_encoder_layers; ++l)
        layers_.emplace_back("fusion/enc" + std::to_string(l), c, cfg_.ffn_hidden(), seed);
    if (cfg_.use_projection_mlp) {
        phi_w1_ = make_linear_weight("fusion/phi_w1", c, c, seed);
        phi_b1_ = make_zero_bias("fusion/phi_b1", c);
        phi_w2_ = make_linear_weight("fusion/phi_w2", c, c, seed);
        phi_b2_ = make_zero_bias("fusion/phi_b2", c);
    }
}

Param& FusionModule::query_embedding() {
    if (!cfg_.use_query_embedding || cfg_.ffn_fuse_mode)
        throw ContractError("fusion: no query embedding in this configuration");
    return e_query_;
}

Var FusionModule::project(Tape& t, Var f_interim) {
    if (!cfg_.use_projection_mlp) return f_interim;
    Var h = t.relu(t.linear(f_interim, t.param(phi_w1_), t.param(phi_b1_)));
    return t.linear(h, t.param(phi_w2_), t.param(phi_b2_));
}

namespace {
Var zero_like(Tape& t, const Tensor& like) { return t.leaf(Tensor::zeros(like.shape)); }
}  // namespace

Var FusionModule::fuse(Tape& t, Var x, Var xp, std::size_t samples) {
    const Tensor& X = t.val(x);
    const Tensor& Xp = t.val(xp);
    require_same_shape(X, Xp, "fuse");
    if (X.rank() != 2 || X.cols() != cfg_.channels)
        throw DimensionError("fuse: expected (S*P)x" + std::to_string(cfg_.channels) +
                             " features, got " + shape_str(X.shape));
    if (samples == 0 || X.rows() % samples != 0)
        throw DimensionError("fuse: rows not divisible by sample count");
    const std::size_t pixels = X.rows() / samples;

    if (cfg_.zero_original_input) x = zero_like(t, X);
    if (cfg_.zero_transparency_input) xp = zero_like(t, Xp);

    if (cfg_.ffn_fuse_mode) {
        Var h = t.concat_cols(x, xp);
        for (std::size_t i = 0; i < ffn_weights_.size(); ++i) {
            h = t.linear(h, t.param(ffn_weights_[i]), t.param(ffn_biases_[i]));
            if (i + 1 < ffn_weights_.size()) h = t.relu(h);
        }
        return h;
    }

    Var query = cfg_.use_query_embedding ? t.param(e_query_) : Var{};
    Var tokens = t.build_tokens(x, xp, query);
    const std::size_t group = cfg_.token_group();
    for (auto& layer : layers_)
        tokens = layer.forward(t, tokens, group, cfg_.num_heads, cfg_.use_layer_norm,
                               cfg_.norm_eps);
    // The query token carries the fused output; without a query the
    // transformed x token does.
    const std::size_t out_row = cfg_.use_query_embedding ? 2 : 0;
    Var f_interim = t.take_group_row(tokens, group, out_row);
    Var projected = project(t, f_interim);
    if (cfg_.use_projection_mlp)
        projected = t.instance_norm(projected, pixels, cfg_.norm_eps);
    return projected;
}

Tensor FusionModule::fuse_map(const Tensor& x, const Tensor& xp) {
    Tape t;
    Var out = fuse(t, t.leaf(x), t.leaf(xp), 1);
    return t.val(out);
}

std::vector<Param*> FusionModule::params() {
    std::vector<Param*> out;
    if (cfg_.ffn_fuse_mode) {
        for (auto& w : ffn_weights_) out.push_back(&w);
        for (auto& b : ffn_biases_) out.push_back(&b);
        return out;
    }
    if (cfg_.use_query_embedding) out.push_back(&e_query_);
    for (auto& l : layers_) l.collect(out);
    if (cfg_.use_projection_mlp)
        for (Param* p : {&phi_w1_, &phi_b1_, &phi_w2_, &phi_b2_}) out.push_back(p);
    return out;
}

std::size_t FusionModule::param_count() const {
    std::size_t n = 0;
    for (Param* p : const_cast<FusionModule*>(this)->params()) n += p->value.size();
    return n;
}

Tensor concat_tokens(const Tensor& x_ij, const Tensor& xp_ij, const Tensor& e_query) {
    const std::size_t c = x_ij.size();
    if (xp_ij.size() != c || e_query.size() != c)
        throw DimensionError("concat_tokens: length mismatch " + shape_str(x_ij.shape) + ", " +
                             shape_str(xp_ij.shape) + ", " + shape_str(e_query.shape));
    Tensor z = Tensor::zeros({3, c});
    std::copy(x_ij.data.begin(), x_ij.data.end(), z.data.begin());
    std::copy(xp_ij.data.begin(), xp_ij.data.end(), z.data.begin() + c);
    std::copy(e_query.data.begin(), e_query.data.end(), z.data.begin() + 2 * c);
    return z;
}

}  // namespace totem
