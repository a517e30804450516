#pragma once

#include <cstdint>
#include <vector>

#include "totem/layers.hpp"

namespace totem {

struct FusionConfig {
    std::size_t channels = 64;
    std::size_t num_encoder_layers = 4;
    std::size_t num_heads = 2;
    std::size_t ffn_hidden_dim = 0;  // 0 -> 4 * channels
    bool use_query_embedding = true;
    bool use_projection_mlp = true;
    bool ffn_fuse_mode = false;
    bool zero_original_input = false;
    bool zero_transparency_input = false;
    bool use_layer_norm = true;
    double norm_eps = 1e-5;

    std::size_t ffn_hidden() const { return ffn_hidden_dim ? ffn_hidden_dim : 4 * channels; }
    std::size_t token_group() const { return use_query_embedding ? 3 : 2; }
    void validate() const;

    /// 256 channels, 4 encoder layers — the full-size configuration.
    static FusionConfig paper_reference();
};

/// Pixel-wise fusion of original features x and transparency features x' into
/// a same-shape feature map in the original feature space. Feature maps are
/// passed as (samples*pixels) x channels row matrices.
class FusionModule {
public:
    FusionModule(FusionConfig cfg, std::uint64_t seed);

    /// x and xp are (samples*pixels) x c; each sample's pixels form one
    /// contiguous block and are normalized as one instance.
    Var fuse(Tape& t, Var x, Var xp, std::size_t samples);

    /// Single-map convenience over a scratch tape.
    Tensor fuse_map(const Tensor& x, const Tensor& xp);

    std::vector<Param*> params();
    std::size_t param_count() const;
    const FusionConfig& config() const { return cfg_; }
    FusionConfig& mutable_config() { return cfg_; }
    Param& query_embedding();

    /// Learnable parameter count of the transformer variant of `cfg`
    /// (query + encoder stack + projection MLP), for parity checks.
    static std::size_t transformer_param_count(const FusionConfig& cfg);

private:
    Var project(Tape& t, Var f_interim);

    FusionConfig cfg_;
    Param e_query_;
    std::vector<EncoderLayer> layers_;
    Param phi_w1_, phi_b1_, phi_w2_, phi_b2_;
    std::vector<Param> ffn_weights_, ffn_biases_;
};

/// Stack (x_ij, x'_ij, e_query) into the 3 x c token sequence.
Tensor concat_tokens(const Tensor& x_ij, const Tensor& xp_ij, const Tensor& e_query);

}  // namespace totem
