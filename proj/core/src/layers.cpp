#include "totem/layers.hpp"

#include "totem/rng.hpp"

namespace totem {

Param make_linear_weight(const std::string& name, std::size_t d_in, std::size_t d_out,
                         std::uint64_t seed) {
    return Param(name, xavier_init(d_in, d_out, derive_seed(seed, name)));
}

Param make_zero_bias(const std::string& name, std::size_t d) {
    return Param(name, Tensor::zeros({1, d}));
}

EncoderLayer::EncoderLayer(const std::string& prefix, std::size_t c, std::size_t ffn_hidden,
                           std::uint64_t seed)
    : wq(make_linear_weight(prefix + "/wq", c, c, seed)),
      bq(make_zero_bias(prefix + "/bq", c)),
      wk(make_linear_weight(prefix + "/wk", c, c, seed)),
      bk(make_zero_bias(prefix + "/bk", c)),
      wv(make_linear_weight(prefix + "/wv", c, c, seed)),
      bv(make_zero_bias(prefix + "/bv", c)),
      wo(make_linear_weight(prefix + "/wo", c, c, seed)),
      bo(make_zero_bias(prefix + "/bo", c)),
      ln1_gain(prefix + "/ln1_gain", Tensor::full({1, c}, 1.0)),
      ln1_bias(make_zero_bias(prefix + "/ln1_bias", c)),
      ln2_gain(prefix + "/ln2_gain", Tensor::full({1, c}, 1.0)),
      ln2_bias(make_zero_bias(prefix + "/ln2_bias", c)),
      ffn_w1(make_linear_weight(prefix + "/ffn_w1", c, ffn_hidden, seed)),
      ffn_b1(make_zero_bias(prefix + "/ffn_b1", ffn_hidden)),
      ffn_w2(make_linear_weight(prefix + "/ffn_w2", ffn_hidden, c, seed)),
      ffn_b2(make_zero_bias(prefix + "/ffn_b2", c)) {}

Var EncoderLayer::forward(Tape& t, Var tokens, std::size_t group, std::size_t heads,
                          bool use_layer_norm, double eps) {
    Var q = t.linear(tokens, t.param(wq), t.param(bq));
    Var k = t.linear(tokens, t.param(wk), t.param(bk));
    Var v = t.linear(tokens, t.param(wv), t.param(bv));
    Var attn = t.grouped_attention(q, k, v, group, heads);
    Var proj = t.linear(attn, t.param(wo), t.param(bo));
    Var res1 = t.add(tokens, proj);
    if (use_layer_norm)
        res1 = t.layer_norm(res1, t.param(ln1_gain),
                            t.param(ln1_bias), eps);
    Var h = t.relu(t.linear(res1, t.param(ffn_w1),
                            t.param(ffn_b1)));
    Var ffn = t.linear(h, t.param(ffn_w2),
                       t.param(ffn_b2));
    Var res2 = t.add(res1, ffn);
    if (use_layer_norm)
        res2 = t.layer_norm(res2, t.param(ln2_gain),
                            t.param(ln2_bias), eps);
    return res2;
}

void EncoderLayer::collect(std::vector<Param*>& out) {
    for (Param* p : {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo, &ln1_gain, &ln1_bias, &ln2_gain,
                     &ln2_bias, &ffn_w1, &ffn_b1, &ffn_w2, &ffn_b2})
        out.push_back(p);
}

std::size_t EncoderLayer::param_count() const {
    std::size_t n = 0;
    for (const Param* p : {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo, &ln1_gain, &ln1_bias,
                           &ln2_gain, &ln2_bias, &ffn_w1, &ffn_b1, &ffn_w2, &ffn_b2})
        n += p->value.size();
    return n;
}

}  // namespace totem
