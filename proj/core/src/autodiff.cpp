#include "totem/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace totem {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using CEMap = Eigen::Map<const EMat>;
using StrideMap = Eigen::Map<EMat, 0, Eigen::OuterStride<>>;
using CStrideMap = Eigen::Map<const EMat, 0, Eigen::OuterStride<>>;

EMap emap(Tensor& t, std::size_t r, std::size_t c) {
    return EMap(t.data.data(), (Eigen::Index)r, (Eigen::Index)c);
}
CEMap cemap(const Tensor& t, std::size_t r, std::size_t c) {
    return CEMap(t.data.data(), (Eigen::Index)r, (Eigen::Index)c);
}
EMap emap2(Tensor& t) { return emap(t, t.rows(), t.cols()); }
CEMap cemap2(const Tensor& t) { return cemap(t, t.rows(), t.cols()); }

// Column-major transpose views: a row-major (r x c) buffer read column-major
// is the transpose. Eigen's gemm is fastest on col-major operands, so dense
// products compute O^T = B_op^T * A_op^T through these views.
using CMMap = Eigen::Map<Eigen::MatrixXd>;
using CCMMap = Eigen::Map<const Eigen::MatrixXd>;
CMMap cmT(Tensor& t) {
    return CMMap(t.data.data(), (Eigen::Index)t.cols(), (Eigen::Index)t.rows());
}
CCMMap cmT(const Tensor& t) {
    return CCMMap(t.data.data(), (Eigen::Index)t.cols(), (Eigen::Index)t.rows());
}

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2)
        throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " +
                             shape_str(t.shape));
}

double stable_softplus(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

double sigmoid(double x) {
    if (x >= 0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

Var Tape::push(Tensor value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

void Tape::check_finite(Var v, const char* op) const {
    if (!nodes_[v.id].value.all_finite())
        throw ContractError(std::string(op) + ": non-finite value produced");
}

void Tape::clear() { nodes_.clear(); }

Var Tape::leaf(Tensor v) {
    Var o = push(std::move(v));
    check_finite(o, "leaf");
    return o;
}

Var Tape::param(Param& p) {
    Var v = push(p.value);
    Param* src = &p;
    nodes_[v.id].src = src;
    int id = v.id;
    nodes_[v.id].back = [this, id, src]() {
        Tensor& g = nodes_[id].grad;
        for (std::size_t i = 0; i < g.size(); ++i) src->grad.data[i] += g.data[i];
    };
    check_finite(v, "param");
    return v;
}

Var Tape::add(Var a, Var b) {
    require_same_shape(val(a), val(b), "add");
    Tensor out = val(a);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += val(b).data[i];
    Var o = push(std::move(out));
    int oi = o.id, ai = a.id, bi = b.id;
    nodes_[oi].back = [this, oi, ai, bi]() {
        const Tensor& g = nodes_[oi].grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            nodes_[ai].grad.data[i] += g.data[i];
            nodes_[bi].grad.data[i] += g.data[i];
        }
    };
    check_finite(o, "add");
    return o;
}

Var Tape::sub(Var a, Var b) {
    require_same_shape(val(a), val(b), "sub");
    Tensor out = val(a);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= val(b).data[i];
    Var o = push(std::move(out));
    int oi = o.id, ai = a.id, bi = b.id;
    nodes_[oi].back = [this, oi, ai, bi]() {
        const Tensor& g = nodes_[oi].grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            nodes_[ai].grad.data[i] += g.data[i];
            nodes_[bi].grad.data[i] -= g.data[i];
        }
    };
    check_finite(o, "sub");
    return o;
}

Var Tape::mul(Var a, Var b) {
    require_same_shape(val(a), val(b), "mul");
    Tensor out = val(a);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= val(b).data[i];
    Var o = push(std::move(out));
    int oi = o.id, ai = a.id, bi = b.id;
    nodes_[oi].back = [this, oi, ai, bi]() {
        const Tensor& g = nodes_[oi].grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            nodes_[ai].grad.data[i] += g.data[i] * nodes_[bi].value.data[i];
            nodes_[bi].grad.data[i] += g.data[i] * nodes_[ai].value.data[i];
        }
    };
    check_finite(o, "mul");
    return o;
}

Var Tape::scale(Var a, double s) {
    Tensor out = val(a);
    for (double& v : out.data) v *= s;
    Var o = push(std::move(out));
    int oi = o.id, ai = a.id;
    nodes_[oi].back = [this, oi, ai, s]() {
        const Tensor& g = nodes_[oi].grad;
        for (std::size_t i = 0; i < g.size(); ++i) nodes_[ai].grad.data[i] += s * g.data[i];
    };
    check_finite(o, "scale");
    return o;
}

Var Tape::relu(Var a) {
    Tensor out = val(a);
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    Var o = push(std::move(out));
    int oi = o.id, ai = a.id;
    nodes_[oi].back = [this, oi, ai]() {
        const Tensor& g = nodes_[oi].grad;
        const Tensor& x = nodes_[ai].value;
        for (std::size_t i = 0; i < g.size(); ++i)
            if (x.data[i] > 0.0) nodes_[ai].grad.data[i] += g.data[i];
    };
    return o;
}

Var Tape::softplus(Var a) {
    Tensor out = val(a);
    for (double& v : out.data) v = stable_softplus(v);
    Var o = push(std::move(out));
    int oi = o.id, ai = a.id;
    nodes_[oi].back = [this, oi, ai]() {
        const Tensor& g = nodes_[oi].grad;
        const Tensor& x = nodes_[ai].value;
        for (std::size_t i = 0; i < g.size(); ++i)
            nodes_[ai].grad.data[i] += g.data[i] * sigmoid(x.data[i]);
    };
    check_finite(o, "softplus");
    return o;
}

Var Tape::reshape(Var a, std::vector<std::size_t> shape) {
    Var o = push(val(a).reshaped(std::move(shape)));
    int oi = o.id, ai = a.id;
    nodes_[oi].back = [this, oi, ai]() {
        const Tensor& g = nodes_[oi].grad;
        for (std::size_t i = 0; i < g.size(); ++i) nodes_[ai].grad.data[i] += g.data[i];
    };
    return o;
}

Var Tape::matmul(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows())
        throw DimensionError("matmul: incompatible shapes " + shape_str(A.shape) + " vs " +
                             shape_str(B.shape));
    Tensor out = Tensor::zeros({A.rows(), B.cols()});
    cmT(out).noalias() = cmT(B) * cmT(A);
    Var o = push(std::move(out));
    check_finite(o, "matmul");
    int oi = o.id, ai = a.id, bi = b.id;
    nodes_[oi].back = [this, oi, ai, bi]() {
        const Tensor& g = nodes_[oi].grad;
        const Tensor& A2 = nodes_[ai].value;
        const Tensor& B2 = nodes_[bi].value;
        cmT(nodes_[ai].grad).noalias() += cmT(B2).transpose() * cmT(g);
        cmT(nodes_[bi].grad).noalias() += cmT(g) * cmT(A2).transpose();
    };
    return o;
}

Var Tape::linear(Var x, Var w, Var b) {
    const Tensor& X = val(x);
    const Tensor& W = val(w);
    const Tensor& B = val(b);
    if (X.rank() != 2 || W.rank() != 2 || X.cols() != W.rows())
        throw DimensionError("linear: incompatible shapes " + shape_str(X.shape) + " vs " +
                             shape_str(W.shape));
    std::size_t d_out = W.cols();
    if (B.size() != d_out)
        throw DimensionError("linear: bias length " + std::to_string(B.size()) +
                             " does not match output dim " + std::to_string(d_out));
    Tensor out = Tensor::zeros({X.rows(), d_out});
    cmT(out).noalias() = cmT(W) * cmT(X);
    for (std::size_t i = 0; i < X.rows(); ++i)
        for (std::size_t j = 0; j < d_out; ++j) out.data[i * d_out + j] += B.data[j];
    Var o = push(std::move(out));
    check_finite(o, "linear");
    int oi = o.id, xi = x.id, wi = w.id, bi = b.id;
    nodes_[oi].back = [this, oi, xi, wi, bi]() {
        const Tensor& g = nodes_[oi].grad;
        const Tensor& X2 = nodes_[xi].value;
        const Tensor& W2 = nodes_[wi].value;
        cmT(nodes_[xi].grad).noalias() += cmT(W2).transpose() * cmT(g);
        cmT(nodes_[wi].grad).noalias() += cmT(g) * cmT(X2).transpose();
        Tensor& db = nodes_[bi].grad;
        std::size_t R = g.rows(), C = g.cols();
        for (std::size_t i = 0; i < R; ++i)
            for (std::size_t j = 0; j < C; ++j) db.data[j] += g.data[i * C + j];
    };
    return o;
}

Var Tape::softmax_rows(Var a) {
    require_rank2(val(a), "softmax_rows");
    Var o = push(softmax(val(a), 1));
    int oi = o.id, ai = a.id;
    nodes_[oi].back = [this, oi, ai]() {
        const Tensor& g = nodes_[oi].grad;
        const Tensor& y = nodes_[oi].value;
        std::size_t R = y.rows(), C = y.cols();
        for (std::size_t i = 0; i < R; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < C; ++j) dot += g.data[i * C + j] * y.data[i * C + j];
            for (std::size_t j = 0; j < C; ++j)
                nodes_[ai].grad.data[i * C + j] += y.data[i * C + j] * (g.data[i * C + j] - dot);
        }
    };
    check_finite(o, "softmax_rows");
    return o;
}

Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
    const Tensor& X = val(x);
    require_rank2(X, "layer_norm");
    std::size_t R = X.rows(), C = X.cols();
    if (val(gain).size() != C || val(bias).size() != C)
        throw DimensionError("layer_norm: gain/bias length must equal row width");
    Tensor out = Tensor::zeros({R, C});
    // Save normalized activations and inverse stddevs for backward.
    auto xhat = std::make_shared<Tensor>(Tensor::zeros({R, C}));
    auto istd = std::make_shared<std::vector<double>>(R);
    for (std::size_t i = 0; i < R; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < C; ++j) mu += X.data[i * C + j];
        mu /= (double)C;
        double var = 0.0;
        for (std::size_t j = 0; j < C; ++j) {
            double d = X.data[i * C + j] - mu;
            var += d * d;
        }
        var /= (double)C;
        double is = 1.0 / std::sqrt(var + eps);
        (*istd)[i] = is;
        for (std::size_t j = 0; j < C; ++j) {
            double h = (X.data[i * C + j] - mu) * is;
            xhat->data[i * C + j] = h;
            out.data[i * C + j] = h * val(gain).data[j] + val(bias).data[j];
        }
    }
    Var o = push(std::move(out));
    int oi = o.id, xi = x.id, gi = gain.id, bi = bias.id;
    nodes_[oi].back = [this, oi, xi, gi, bi, xhat, istd]() {
        const Tensor& g = nodes_[oi].grad;
        const Tensor& gn = nodes_[gi].value;
        std::size_t R2 = g.rows(), C2 = g.cols();
        for (std::size_t i = 0; i < R2; ++i) {
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::size_t j = 0; j < C2; ++j) {
                double dh = g.data[i * C2 + j] * gn.data[j];
                mean_dh += dh;
                mean_dh_h += dh * xhat->data[i * C2 + j];
            }
            mean_dh /= (double)C2;
            mean_dh_h /= (double)C2;
            for (std::size_t j = 0; j < C2; ++j) {
                double dh = g.data[i * C2 + j] * gn.data[j];
                nodes_[xi].grad.data[i * C2 + j] +=
                    (*istd)[i] * (dh - mean_dh - xhat->data[i * C2 + j] * mean_dh_h);
                nodes_[gi].grad.data[j] += g.data[i * C2 + j] * xhat->data[i * C2 + j];
                nodes_[bi].grad.data[j] += g.data[i * C2 + j];
            }
        }
    };
    check_finite(o, "layer_norm");
    return o;
}

Var Tape::instance_norm(Var x, std::size_t rows_per_sample, double eps) {
    const Tensor& X = val(x);
    require_rank2(X, "instance_norm");
    std::size_t R = X.rows(), C = X.cols();
    if (rows_per_sample == 0 || R % rows_per_sample != 0)
        throw DimensionError("instance_norm: rows " + std::to_string(R) +
                             " not divisible by rows_per_sample " +
                             std::to_string(rows_per_sample));
    std::size_t S = R / rows_per_sample, P = rows_per_sample;
    Tensor out = Tensor::zeros({R, C});
    auto xhat = std::make_shared<Tensor>(Tensor::zeros({R, C}));
    auto istd = std::make_shared<std::vector<double>>(S * C);
    for (std::size_t s = 0; s < S; ++s) {
        for (std::size_t j = 0; j < C; ++j) {
            double mu = 0.0;
            for (std::size_t p = 0; p < P; ++p) mu += X.data[(s * P + p) * C + j];
            mu /= (double)P;
            double var = 0.0;
            for (std::size_t p = 0; p < P; ++p) {
                double d = X.data[(s * P + p) * C + j] - mu;
                var += d * d;
            }
            var /= (double)P;
            double is = 1.0 / std::sqrt(var + eps);
            (*istd)[s * C + j] = is;
            for (std::size_t p = 0; p < P; ++p) {
                double h = (X.data[(s * P + p) * C + j] - mu) * is;
                xhat->data[(s * P + p) * C + j] = h;
                out.data[(s * P + p) * C + j] = h;
            }
        }
    }
    Var o = push(std::move(out));
    int oi = o.id, xi = x.id;
    nodes_[oi].back = [this, oi, xi, xhat, istd, S, P, C]() {
        const Tensor& g = nodes_[oi].grad;
        for (std::size_t s = 0; s < S; ++s) {
            for (std::size_t j = 0; j < C; ++j) {
                double mean_g = 0.0, mean_gh = 0.0;
                for (std::size_t p = 0; p < P; ++p) {
                    double gv = g.data[(s * P + p) * C + j];
                    mean_g += gv;
                    mean_gh += gv * xhat->data[(s * P + p) * C + j];
                }
                mean_g /= (double)P;
                mean_gh /= (double)P;
                double is = (*istd)[s * C + j];
                for (std::size_t p = 0; p < P; ++p) {
                    double gv = g.data[(s * P + p) * C + j];
                    nodes_[xi].grad.data[(s * P + p) * C + j] +=
                        is * (gv - mean_g - xhat->data[(s * P + p) * C + j] * mean_gh);
                }
            }
        }
    };
    check_finite(o, "instance_norm");
    return o;
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: empty part list");
    std::size_t C = val(parts[0]).cols();
    std::size_t R = 0;
    for (Var p : parts) {
        require_rank2(val(p), "concat_rows");
        if (val(p).cols() != C) throw DimensionError("concat_rows: column mismatch");
        R += val(p).rows();
    }
    Tensor out = Tensor::zeros({R, C});
    std::size_t r0 = 0;
    std::vector<std::pair<int, std::size_t>> spans;
    for (Var p : parts) {
        std::size_t pr = val(p).rows();
        std::copy(val(p).data.begin(), val(p).data.end(), out.data.begin() + r0 * C);
        spans.emplace_back(p.id, r0);
        r0 += pr;
    }
    Var o = push(std::move(out));
    int oi = o.id;
    nodes_[oi].back = [this, oi, spans, C]() {
        const Tensor& g = nodes_[oi].grad;
        for (auto [pid, start] : spans) {
            Tensor& pg = nodes_[pid].grad;
            std::size_t n = pg.size();
            for (std::size_t i = 0; i < n; ++i) pg.data[i] += g.data[start * C + i];
        }
    };
    return o;
}

Var Tape::slice_rows(Var a, std::size_t first, std::size_t count) {
    const Tensor& A = val(a);
    require_rank2(A, "slice_rows");
    if (first + count > A.rows()) throw DimensionError("slice_rows: range out of bounds");
    std::size_t C = A.cols();
    Tensor out = Tensor::zeros({count, C});
    std::copy(A.data.begin() + first * C, A.data.begin() + (first + count) * C, out.data.begin());
    Var o = push(std::move(out));
    int oi = o.id, ai = a.id;
    nodes_[oi].back = [this, oi, ai, first, C]() {
        const Tensor& g = nodes_[oi].grad;
        for (std::size_t i = 0; i < g.size(); ++i) nodes_[ai].grad.data[first * C + i] += g.data[i];
    };
    return o;
}

Var Tape::concat_cols(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    require_rank2(A, "concat_cols");
    require_rank2(B, "concat_cols");
    if (A.rows() != B.rows()) throw DimensionError("concat_cols: row mismatch");
    std::size_t R = A.rows(), Ca = A.cols(), Cb = B.cols();
    Tensor out = Tensor::zeros({R, Ca + Cb});
    for (std::size_t i = 0; i < R; ++i) {
        std::copy(A.data.begin() + i * Ca, A.data.begin() + (i + 1) * Ca,
                  out.data.begin() + i * (Ca + Cb));
        std::copy(B.data.begin() + i * Cb, B.data.begin() + (i + 1) * Cb,
                  out.data.begin() + i * (Ca + Cb) + Ca);
    }
    Var o = push(std::move(out));
    int oi = o.id, ai = a.id, bi = b.id;
    nodes_[oi].back = [this, oi, ai, bi, R, Ca, Cb]() {
        const Tensor& g = nodes_[oi].grad;
        for (std::size_t i = 0; i < R; ++i) {
            for (std::size_t j = 0; j < Ca; ++j)
                nodes_[ai].grad.data[i * Ca + j] += g.data[i * (Ca + Cb) + j];
            for (std::size_t j = 0; j < Cb; ++j)
                nodes_[bi].grad.data[i * Cb + j] += g.data[i * (Ca + Cb) + Ca + j];
        }
    };
    return o;
}

Var Tape::tile_rows(Var row, std::size_t count) {
    const Tensor& Rw = val(row);
    require_rank2(Rw, "tile_rows");
    if (Rw.rows() != 1) throw DimensionError("tile_rows: expected a single row");
    std::size_t C = Rw.cols();
    Tensor out = Tensor::zeros({count, C});
    for (std::size_t i = 0; i < count; ++i)
        std::copy(Rw.data.begin(), Rw.data.end(), out.data.begin() + i * C);
    Var o = push(std::move(out));
    int oi = o.id, ri = row.id;
    nodes_[oi].back = [this, oi, ri, count, C]() {
        const Tensor& g = nodes_[oi].grad;
        for (std::size_t i = 0; i < count; ++i)
            for (std::size_t j = 0; j < C; ++j) nodes_[ri].grad.data[j] += g.data[i * C + j];
    };
    return o;
}

Var Tape::build_tokens(Var x, Var xp, Var query) {
    const Tensor& X = val(x);
    const Tensor& Xp = val(xp);
    require_same_shape(X, Xp, "build_tokens");
    require_rank2(X, "build_tokens");
    std::size_t G = X.rows(), C = X.cols();
    bool with_query = query.valid();
    if (with_query && val(query).size() != C)
        throw DimensionError("build_tokens: query length " + std::to_string(val(query).size()) +
                             " does not match channels " + std::to_string(C));
    std::size_t group = with_query ? 3 : 2;
    Tensor out = Tensor::zeros({G * group, C});
    for (std::size_t p = 0; p < G; ++p) {
        std::copy(X.data.begin() + p * C, X.data.begin() + (p + 1) * C,
                  out.data.begin() + (p * group) * C);
        std::copy(Xp.data.begin() + p * C, Xp.data.begin() + (p + 1) * C,
                  out.data.begin() + (p * group + 1) * C);
        if (with_query)
            std::copy(val(query).data.begin(), val(query).data.end(),
                      out.data.begin() + (p * group + 2) * C);
    }
    Var o = push(std::move(out));
    int oi = o.id, xi = x.id, xpi = xp.id, qi = with_query ? query.id : -1;
    nodes_[oi].back = [this, oi, xi, xpi, qi, G, C, group]() {
        const Tensor& g = nodes_[oi].grad;
        for (std::size_t p = 0; p < G; ++p) {
            for (std::size_t j = 0; j < C; ++j) {
                nodes_[xi].grad.data[p * C + j] += g.data[(p * group) * C + j];
                nodes_[xpi].grad.data[p * C + j] += g.data[(p * group + 1) * C + j];
                if (qi >= 0) nodes_[qi].grad.data[j] += g.data[(p * group + 2) * C + j];
            }
        }
    };
    return o;
}

Var Tape::take_group_row(Var a, std::size_t group, std::size_t index) {
    const Tensor& A = val(a);
    require_rank2(A, "take_group_row");
    if (group == 0 || A.rows() % group != 0 || index >= group)
        throw DimensionError("take_group_row: bad group " + std::to_string(group) + "/" +
                             std::to_string(index) + " for " + shape_str(A.shape));
    std::size_t G = A.rows() / group, C = A.cols();
    Tensor out = Tensor::zeros({G, C});
    for (std::size_t p = 0; p < G; ++p)
        std::copy(A.data.begin() + (p * group + index) * C,
                  A.data.begin() + (p * group + index + 1) * C, out.data.begin() + p * C);
    Var o = push(std::move(out));
    int oi = o.id, ai = a.id;
    nodes_[oi].back = [this, oi, ai, G, C, group, index]() {
        const Tensor& g = nodes_[oi].grad;
        for (std::size_t p = 0; p < G; ++p)
            for (std::size_t j = 0; j < C; ++j)
                nodes_[ai].grad.data[(p * group + index) * C + j] += g.data[p * C + j];
    };
    return o;
}

Var Tape::grouped_attention(Var q, Var k, Var v, std::size_t group, std::size_t heads) {
    const Tensor& Q = val(q);
    const Tensor& K = val(k);
    const Tensor& V = val(v);
    require_same_shape(Q, K, "grouped_attention");
    require_same_shape(Q, V, "grouped_attention");
    require_rank2(Q, "grouped_attention");
    std::size_t R = Q.rows(), C = Q.cols();
    if (group == 0 || R % group != 0)
        throw DimensionError("grouped_attention: rows not divisible by group size");
    if (heads == 0 || C % heads != 0)
        throw DimensionError("grouped_attention: channels not divisible by heads");
    std::size_t G = R / group, n = group, dh = C / heads;
    double scale = 1.0 / std::sqrt((double)dh);
    Tensor out = Tensor::zeros({R, C});
    auto attn = std::make_shared<Tensor>(Tensor::zeros({G * heads, n * n}));
    if (n <= 8) {
        // Small groups (the per-pixel token triplets) are overhead-bound under
        // per-group matrix maps; plain loops over contiguous head slices win.
        const double* qd = Q.data.data();
        const double* kd = K.data.data();
        const double* vd = V.data.data();
        double* od = out.data.data();
        double* ad = attn->data.data();
        for (std::size_t gidx = 0; gidx < G; ++gidx) {
            const std::size_t base = gidx * n * C;
            for (std::size_t h = 0; h < heads; ++h) {
                double* A = ad + (gidx * heads + h) * n * n;
                for (std::size_t i = 0; i < n; ++i) {
                    const double* qi = qd + base + i * C + h * dh;
                    double mx = -std::numeric_limits<double>::infinity();
                    for (std::size_t j = 0; j < n; ++j) {
                        const double* kj = kd + base + j * C + h * dh;
                        double s = 0.0;
                        for (std::size_t d = 0; d < dh; ++d) s += qi[d] * kj[d];
                        s *= scale;
                        A[i * n + j] = s;
                        mx = std::max(mx, s);
                    }
                    double sum = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        double e = std::exp(A[i * n + j] - mx);
                        A[i * n + j] = e;
                        sum += e;
                    }
                    double* oi2 = od + base + i * C + h * dh;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double w = A[i * n + j] / sum;
                        A[i * n + j] = w;
                        const double* vj = vd + base + j * C + h * dh;
                        for (std::size_t d = 0; d < dh; ++d) oi2[d] += w * vj[d];
                    }
                }
            }
        }
        Var o = push(std::move(out));
        check_finite(o, "grouped_attention");
        int oi = o.id, qi = q.id, ki = k.id, vi = v.id;
        nodes_[oi].back = [this, oi, qi, ki, vi, attn, G, n, C, heads, dh, scale]() {
            const double* gd = nodes_[oi].grad.data.data();
            const double* qd2 = nodes_[qi].value.data.data();
            const double* kd2 = nodes_[ki].value.data.data();
            const double* vd2 = nodes_[vi].value.data.data();
            double* dq = nodes_[qi].grad.data.data();
            double* dk = nodes_[ki].grad.data.data();
            double* dv = nodes_[vi].grad.data.data();
            const double* ad2 = attn->data.data();
            double dA[64], dS[64];
            for (std::size_t gidx = 0; gidx < G; ++gidx) {
                const std::size_t base = gidx * n * C;
                for (std::size_t h = 0; h < heads; ++h) {
                    const double* A = ad2 + (gidx * heads + h) * n * n;
                    for (std::size_t i = 0; i < n; ++i) {
                        const double* go = gd + base + i * C + h * dh;
                        // dV rows and dA entries for this query row.
                        double dot = 0.0;
                        for (std::size_t j = 0; j < n; ++j) {
                            const double* vj = vd2 + base + j * C + h * dh;
                            double s = 0.0;
                            for (std::size_t d = 0; d < dh; ++d) s += go[d] * vj[d];
                            dA[j] = s;
                            dot += s * A[i * n + j];
                            double* dvj = dv + base + j * C + h * dh;
                            const double w = A[i * n + j];
                            for (std::size_t d = 0; d < dh; ++d) dvj[d] += w * go[d];
                        }
                        for (std::size_t j = 0; j < n; ++j)
                            dS[j] = A[i * n + j] * (dA[j] - dot);
                        double* dqi = dq + base + i * C + h * dh;
                        const double* qrow = qd2 + base + i * C + h * dh;
                        for (std::size_t j = 0; j < n; ++j) {
                            const double* kj = kd2 + base + j * C + h * dh;
                            double* dkj = dk + base + j * C + h * dh;
                            const double sj = dS[j] * scale;
                            for (std::size_t d = 0; d < dh; ++d) {
                                dqi[d] += sj * kj[d];
                                dkj[d] += sj * qrow[d];
                            }
                        }
                    }
                }
            }
        };
        return o;
    }
    for (std::size_t gidx = 0; gidx < G; ++gidx) {
        for (std::size_t h = 0; h < heads; ++h) {
            CStrideMap Qh(Q.data.data() + gidx * n * C + h * dh, (Eigen::Index)n,
                          (Eigen::Index)dh, Eigen::OuterStride<>((Eigen::Index)C));
            CStrideMap Kh(K.data.data() + gidx * n * C + h * dh, (Eigen::Index)n,
                          (Eigen::Index)dh, Eigen::OuterStride<>((Eigen::Index)C));
            CStrideMap Vh(V.data.data() + gidx * n * C + h * dh, (Eigen::Index)n,
                          (Eigen::Index)dh, Eigen::OuterStride<>((Eigen::Index)C));
            EMap A(attn->data.data() + (gidx * heads + h) * n * n, (Eigen::Index)n,
                   (Eigen::Index)n);
            A.noalias() = Qh * Kh.transpose() * scale;
            // Row softmax with max subtraction.
            for (std::size_t i = 0; i < n; ++i) {
                double mx = A.row((Eigen::Index)i).maxCoeff();
                double sum = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    double e = std::exp(A((Eigen::Index)i, (Eigen::Index)j) - mx);
                    A((Eigen::Index)i, (Eigen::Index)j) = e;
                    sum += e;
                }
                A.row((Eigen::Index)i) /= sum;
            }
            StrideMap Oh(out.data.data() + gidx * n * C + h * dh, (Eigen::Index)n,
                         (Eigen::Index)dh, Eigen::OuterStride<>((Eigen::Index)C));
            Oh.noalias() = A * Vh;
        }
    }
    Var o = push(std::move(out));
    check_finite(o, "grouped_attention");
    int oi = o.id, qi = q.id, ki = k.id, vi = v.id;
    nodes_[oi].back = [this, oi, qi, ki, vi, attn, G, n, C, heads, dh, scale]() {
        const Tensor& g = nodes_[oi].grad;
        const Tensor& Q2 = nodes_[qi].value;
        const Tensor& K2 = nodes_[ki].value;
        const Tensor& V2 = nodes_[vi].value;
        for (std::size_t gidx = 0; gidx < G; ++gidx) {
            for (std::size_t h = 0; h < heads; ++h) {
                Eigen::OuterStride<> stride((Eigen::Index)C);
                CStrideMap Qh(Q2.data.data() + gidx * n * C + h * dh, (Eigen::Index)n,
                              (Eigen::Index)dh, stride);
                CStrideMap Kh(K2.data.data() + gidx * n * C + h * dh, (Eigen::Index)n,
                              (Eigen::Index)dh, stride);
                CStrideMap Vh(V2.data.data() + gidx * n * C + h * dh, (Eigen::Index)n,
                              (Eigen::Index)dh, stride);
                CStrideMap dOh(g.data.data() + gidx * n * C + h * dh, (Eigen::Index)n,
                               (Eigen::Index)dh, stride);
                CEMap A(attn->data.data() + (gidx * heads + h) * n * n, (Eigen::Index)n,
                        (Eigen::Index)n);
                EMat dV = A.transpose() * dOh;
                EMat dA = dOh * Vh.transpose();
                // Softmax backward per row: dS = A o (dA - rowsum(dA o A)).
                EMat dS(n, n);
                for (std::size_t i = 0; i < n; ++i) {
                    double dot = (dA.row((Eigen::Index)i).array() *
                                  A.row((Eigen::Index)i).array())
                                     .sum();
                    dS.row((Eigen::Index)i) =
                        A.row((Eigen::Index)i).array() *
                        (dA.row((Eigen::Index)i).array() - dot);
                }
                StrideMap dQh(nodes_[qi].grad.data.data() + gidx * n * C + h * dh,
                              (Eigen::Index)n, (Eigen::Index)dh, stride);
                StrideMap dKh(nodes_[ki].grad.data.data() + gidx * n * C + h * dh,
                              (Eigen::Index)n, (Eigen::Index)dh, stride);
                StrideMap dVh(nodes_[vi].grad.data.data() + gidx * n * C + h * dh,
                              (Eigen::Index)n, (Eigen::Index)dh, stride);
                dQh.noalias() += dS * Kh * scale;
                dKh.noalias() += dS.transpose() * Qh * scale;
                dVh.noalias() += dV;
            }
        }
    };
    return o;
}

Var Tape::grouped_cross_attention(Var q, Var k, Var v, std::size_t group, std::size_t heads) {
    const Tensor& Q = val(q);
    const Tensor& K = val(k);
    const Tensor& V = val(v);
    require_rank2(Q, "grouped_cross_attention");
    require_same_shape(K, V, "grouped_cross_attention");
    std::size_t S = Q.rows(), C = Q.cols(), n = group;
    if (K.cols() != C || K.rows() != S * n)
        throw DimensionError("grouped_cross_attention: k/v shape " + shape_str(K.shape) +
                             " does not match queries " + shape_str(Q.shape));
    if (heads == 0 || C % heads != 0)
        throw DimensionError("grouped_cross_attention: channels not divisible by heads");
    std::size_t dh = C / heads;
    double scale = 1.0 / std::sqrt((double)dh);
    Tensor out = Tensor::zeros({S, C});
    auto attn = std::make_shared<Tensor>(Tensor::zeros({S * heads, n}));
    for (std::size_t s = 0; s < S; ++s) {
        for (std::size_t h = 0; h < heads; ++h) {
            Eigen::OuterStride<> stride((Eigen::Index)C);
            CStrideMap Kh(K.data.data() + s * n * C + h * dh, (Eigen::Index)n, (Eigen::Index)dh,
                          stride);
            CStrideMap Vh(V.data.data() + s * n * C + h * dh, (Eigen::Index)n, (Eigen::Index)dh,
                          stride);
            const double* qrow = Q.data.data() + s * C + h * dh;
            double* arow = attn->data.data() + (s * heads + h) * n;
            double mx = -HUGE_VAL;
            for (std::size_t j = 0; j < n; ++j) {
                double sc = 0.0;
                for (std::size_t d = 0; d < dh; ++d) sc += qrow[d] * Kh((Eigen::Index)j, (Eigen::Index)d);
                arow[j] = sc * scale;
                mx = std::max(mx, arow[j]);
            }
            double sum = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                arow[j] = std::exp(arow[j] - mx);
                sum += arow[j];
            }
            for (std::size_t j = 0; j < n; ++j) arow[j] /= sum;
            double* orow = out.data.data() + s * C + h * dh;
            for (std::size_t d = 0; d < dh; ++d) {
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) acc += arow[j] * Vh((Eigen::Index)j, (Eigen::Index)d);
                orow[d] = acc;
            }
        }
    }
    Var o = push(std::move(out));
    check_finite(o, "grouped_cross_attention");
    int oi = o.id, qi = q.id, ki = k.id, vi = v.id;
    nodes_[oi].back = [this, oi, qi, ki, vi, attn, S, n, C, heads, dh, scale]() {
        const Tensor& g = nodes_[oi].grad;
        const Tensor& Q2 = nodes_[qi].value;
        const Tensor& K2 = nodes_[ki].value;
        const Tensor& V2 = nodes_[vi].value;
        for (std::size_t s = 0; s < S; ++s) {
            for (std::size_t h = 0; h < heads; ++h) {
                const double* arow = attn->data.data() + (s * heads + h) * n;
                const double* go = g.data.data() + s * C + h * dh;
                const double* qrow = Q2.data.data() + s * C + h * dh;
                std::vector<double> dA(n, 0.0);
                for (std::size_t j = 0; j < n; ++j) {
                    const double* vrow = V2.data.data() + (s * n + j) * C + h * dh;
                    double* dvrow = nodes_[vi].grad.data.data() + (s * n + j) * C + h * dh;
                    double acc = 0.0;
                    for (std::size_t d = 0; d < dh; ++d) {
                        acc += go[d] * vrow[d];
                        dvrow[d] += arow[j] * go[d];
                    }
                    dA[j] = acc;
                }
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += dA[j] * arow[j];
                for (std::size_t j = 0; j < n; ++j) {
                    double ds = arow[j] * (dA[j] - dot) * scale;
                    const double* krow = K2.data.data() + (s * n + j) * C + h * dh;
                    double* dkrow = nodes_[ki].grad.data.data() + (s * n + j) * C + h * dh;
                    double* dqrow = nodes_[qi].grad.data.data() + s * C + h * dh;
                    for (std::size_t d = 0; d < dh; ++d) {
                        dqrow[d] += ds * krow[d];
                        dkrow[d] += ds * qrow[d];
                    }
                }
            }
        }
    };
    return o;
}

Var Tape::sum(Var a) {
    double acc = 0.0;
    for (double v : val(a).data) acc += v;
    Var o = push(Tensor::scalar(acc));
    int oi = o.id, ai = a.id;
    nodes_[oi].back = [this, oi, ai]() {
        double g = nodes_[oi].grad.data[0];
        for (double& d : nodes_[ai].grad.data) d += g;
    };
    check_finite(o, "sum");
    return o;
}

Var Tape::mean(Var a) {
    std::size_t N = val(a).size();
    double acc = 0.0;
    for (double v : val(a).data) acc += v;
    Var o = push(Tensor::scalar(acc / (double)N));
    int oi = o.id, ai = a.id;
    nodes_[oi].back = [this, oi, ai, N]() {
        double g = nodes_[oi].grad.data[0] / (double)N;
        for (double& d : nodes_[ai].grad.data) d += g;
    };
    check_finite(o, "mean");
    return o;
}

Var Tape::mse_loss(Var pred, const Tensor& target) {
    require_same_shape(val(pred), target, "mse_loss");
    std::size_t N = target.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        double d = val(pred).data[i] - target.data[i];
        acc += d * d;
    }
    Var o = push(Tensor::scalar(acc / (double)N));
    check_finite(o, "mse_loss");
    int oi = o.id, pi = pred.id;
    auto tgt = std::make_shared<Tensor>(target);
    nodes_[oi].back = [this, oi, pi, tgt, N]() {
        double g = nodes_[oi].grad.data[0];
        for (std::size_t i = 0; i < N; ++i)
            nodes_[pi].grad.data[i] +=
                g * 2.0 * (nodes_[pi].value.data[i] - tgt->data[i]) / (double)N;
    };
    return o;
}

Var Tape::masked_mae_loss(Var pred, const Tensor& target, const Tensor& mask) {
    require_same_shape(val(pred), target, "masked_mae_loss");
    require_same_shape(val(pred), mask, "masked_mae_loss");
    std::size_t N = target.size();
    double msum = 0.0;
    for (double m : mask.data) msum += m;
    double acc = 0.0;
    if (msum > 0.0)
        for (std::size_t i = 0; i < N; ++i)
            acc += std::abs(val(pred).data[i] - target.data[i]) * mask.data[i];
    Var o = push(Tensor::scalar(msum > 0.0 ? acc / msum : 0.0));
    check_finite(o, "masked_mae_loss");
    int oi = o.id, pi = pred.id;
    auto tgt = std::make_shared<Tensor>(target);
    auto msk = std::make_shared<Tensor>(mask);
    nodes_[oi].back = [this, oi, pi, tgt, msk, msum, N]() {
        if (msum <= 0.0) return;
        double g = nodes_[oi].grad.data[0];
        for (std::size_t i = 0; i < N; ++i) {
            double d = nodes_[pi].value.data[i] - tgt->data[i];
            double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
            nodes_[pi].grad.data[i] += g * s * msk->data[i] / msum;
        }
    };
    return o;
}

void Tape::backward(Var loss) {
    if (!loss.valid() || loss.id >= (int)nodes_.size())
        throw ContractError("backward: invalid loss node");
    if (nodes_[loss.id].value.size() != 1)
        throw ContractError("backward: loss must be scalar, got shape " +
                            shape_str(nodes_[loss.id].value.shape));
    for (int i = 0; i <= loss.id; ++i)
        nodes_[i].grad = Tensor::zeros(nodes_[i].value.shape);
    nodes_[loss.id].grad.data[0] = 1.0;
    for (int i = loss.id; i >= 0; --i)
        if (nodes_[i].back) nodes_[i].back();
}

}  // namespace totem
