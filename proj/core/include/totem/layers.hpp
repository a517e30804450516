#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "totem/autodiff.hpp"

namespace totem {

/// One post-norm transformer encoder layer:
/// attention -> add -> layernorm -> FFN -> add -> layernorm.
struct EncoderLayer {
    Param wq, bq, wk, bk, wv, bv, wo, bo;
    Param ln1_gain, ln1_bias, ln2_gain, ln2_bias;
    Param ffn_w1, ffn_b1, ffn_w2, ffn_b2;

    EncoderLayer() = default;
    EncoderLayer(const std::string& prefix, std::size_t channels, std::size_t ffn_hidden,
                 std::uint64_t seed);

    /// tokens is (G*group) x c; attention mixes only within each group.
    Var forward(Tape& t, Var tokens, std::size_t group, std::size_t heads, bool use_layer_norm,
                double eps);

    void collect(std::vector<Param*>& out);
    std::size_t param_count() const;
};

/// Xavier-initialized weight with zero bias, for building linear layers.
Param make_linear_weight(const std::string& name, std::size_t d_in, std::size_t d_out,
                         std::uint64_t seed);
Param make_zero_bias(const std::string& name, std::size_t d);

}  // namespace totem
