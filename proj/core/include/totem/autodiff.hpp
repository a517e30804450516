#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "totem/tensor.hpp"

namespace totem {

/// Learnable tensor with gradient accumulator. Optimizers skip it entirely
/// when `trainable` is false.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;

    Param() = default;
    Param(std::string n, Tensor v)
        : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape)) {}

    void zero_grad() { grad.fill(0.0); }
};

class Tape;

/// Handle to a node on a Tape.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

/// Record of forward primitives. Nodes are appended in forward order, so a
/// reverse sweep of the node list is a reverse topological order.
class Tape {
public:
    Var leaf(Tensor v);
    Var param(Param& p);

    // Elementwise / shape
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double s);
    Var relu(Var a);
    Var softplus(Var a);
    Var reshape(Var a, std::vector<std::size_t> shape);

    // Linear algebra
    Var matmul(Var a, Var b);
    Var linear(Var x, Var w, Var b);  // xW + b, b broadcast over rows
    Var softmax_rows(Var a);          // rank-2, along last axis

    // Normalization
    Var layer_norm(Var x, Var gain, Var bias, double eps);
    /// Per-channel normalization over blocks of `rows_per_sample` rows of an
    /// (S*P) x c matrix; each block is one sample's spatial extent.
    Var instance_norm(Var x, std::size_t rows_per_sample, double eps);

    // Row plumbing
    Var concat_rows(const std::vector<Var>& parts);
    Var slice_rows(Var a, std::size_t first, std::size_t count);
    Var concat_cols(Var a, Var b);
    Var tile_rows(Var row, std::size_t count);  // 1 x c -> count x c

    /// Interleave per-pixel token groups: output row layout per pixel is
    /// [x_p ; xp_p ; query] (query row omitted when `query` is invalid).
    Var build_tokens(Var x, Var xp, Var query);
    /// Inverse selection: row `index` of every group of `group` rows.
    Var take_group_row(Var a, std::size_t group, std::size_t index);

    /// Multi-head scaled dot-product attention within consecutive groups of
    /// `group` rows. q, k, v are (G*group) x c; no cross-group mixing.
    Var grouped_attention(Var q, Var k, Var v, std::size_t group, std::size_t heads);
    /// One query row per group attends over that group's k/v rows.
    /// q is G x c, k and v are (G*group) x c; output G x c.
    Var grouped_cross_attention(Var q, Var k, Var v, std::size_t group, std::size_t heads);

    // Reductions / losses
    Var sum(Var a);
    Var mean(Var a);
    Var mse_loss(Var pred, const Tensor& target);
    /// sum(|pred - target| * mask) / sum(mask); zero mask yields a zero loss.
    Var masked_mae_loss(Var pred, const Tensor& target, const Tensor& mask);

    /// Reverse sweep from a scalar loss; accumulates into reachable Params.
    void backward(Var loss);

    const Tensor& val(Var v) const { return nodes_[v.id].value; }
    Tensor& grad_of(Var v) { return nodes_[v.id].grad; }
    std::size_t num_nodes() const { return nodes_.size(); }
    void clear();

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::function<void()> back;  // empty for leaves
        Param* src = nullptr;
    };

    Var push(Tensor value);
    void check_finite(Var v, const char* op) const;

    std::vector<Node> nodes_;
};

}  // namespace totem
