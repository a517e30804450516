#include "totem/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace totem {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using CEMap = Eigen::Map<const EMat>;

}  // namespace

Tensor::Tensor(std::vector<std::size_t> s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
    if (shape_product(shape) != data.size())
        throw DimensionError("tensor: shape " + shape_str(shape) + " does not match data length " +
                             std::to_string(data.size()));
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    std::size_t n = shape_product(shape);
    return Tensor{std::move(shape), std::vector<double>(n, 0.0)};
}

Tensor Tensor::full(std::vector<std::size_t> shape, double v) {
    std::size_t n = shape_product(shape);
    return Tensor{std::move(shape), std::vector<double>(n, v)};
}

Tensor Tensor::scalar(double v) { return Tensor{{1}, {v}}; }

Tensor Tensor::row(std::vector<double> v) {
    std::size_t n = v.size();
    return Tensor{{1, n}, std::move(v)};
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::size_t r = rows.size();
    std::size_t c = r ? rows.begin()->size() : 0;
    Tensor t = Tensor::zeros({r, c});
    std::size_t i = 0;
    for (const auto& row : rows) {
        if (row.size() != c) throw DimensionError("tensor: ragged matrix literal");
        std::copy(row.begin(), row.end(), t.data.begin() + i * c);
        ++i;
    }
    return t;
}

Tensor Tensor::identity(std::size_t n) {
    Tensor t = Tensor::zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data[i * n + i] = 1.0;
    return t;
}

std::size_t Tensor::rows() const {
    if (rank() != 2) throw DimensionError("tensor: rows() on rank-" + std::to_string(rank()));
    return shape[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) throw DimensionError("tensor: cols() on rank-" + std::to_string(rank()));
    return shape[1];
}

double& Tensor::at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
double Tensor::at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }

bool Tensor::all_finite() const {
    // Summing is SIMD-friendly and any NaN/Inf poisons the total; element
    // magnitudes here are nowhere near overflowing a finite sum.
    double s = 0.0;
    for (double v : data) s += v;
    return std::isfinite(s);
}

void Tensor::fill(double v) { std::fill(data.begin(), data.end(), v); }

Tensor Tensor::reshaped(std::vector<std::size_t> new_shape) const {
    if (shape_product(new_shape) != data.size())
        throw DimensionError("tensor: cannot reshape " + shape_str(shape) + " to " +
                             shape_str(new_shape));
    return Tensor{std::move(new_shape), data};
}

std::string shape_str(const std::vector<std::size_t>& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                             shape_str(b.shape));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape) + " vs " +
                             shape_str(b.shape));
    Tensor c = Tensor::zeros({a.rows(), b.cols()});
    EMap(c.data.data(), (Eigen::Index)c.rows(), (Eigen::Index)c.cols()).noalias() =
        CEMap(a.data.data(), (Eigen::Index)a.rows(), (Eigen::Index)a.cols()) *
        CEMap(b.data.data(), (Eigen::Index)b.rows(), (Eigen::Index)b.cols());
    return c;
}

Tensor softmax(const Tensor& t, std::size_t axis) {
    if (axis >= t.rank())
        throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                             shape_str(t.shape));
    if (t.rank() == 1) {
        Tensor out = t;
        double mx = *std::max_element(out.data.begin(), out.data.end());
        double sum = 0.0;
        for (double& v : out.data) {
            v = std::exp(v - mx);
            sum += v;
        }
        for (double& v : out.data) v /= sum;
        return out;
    }
    if (t.rank() != 2) throw DimensionError("softmax: rank > 2 unsupported");
    Tensor out = t;
    std::size_t R = t.shape[0], C = t.shape[1];
    if (axis == 1) {
        for (std::size_t i = 0; i < R; ++i) {
            double* row = out.data.data() + i * C;
            double mx = *std::max_element(row, row + C);
            double sum = 0.0;
            for (std::size_t j = 0; j < C; ++j) {
                row[j] = std::exp(row[j] - mx);
                sum += row[j];
            }
            for (std::size_t j = 0; j < C; ++j) row[j] /= sum;
        }
    } else {
        for (std::size_t j = 0; j < C; ++j) {
            double mx = -HUGE_VAL;
            for (std::size_t i = 0; i < R; ++i) mx = std::max(mx, out.data[i * C + j]);
            double sum = 0.0;
            for (std::size_t i = 0; i < R; ++i) {
                double e = std::exp(out.data[i * C + j] - mx);
                out.data[i * C + j] = e;
                sum += e;
            }
            for (std::size_t i = 0; i < R; ++i) out.data[i * C + j] /= sum;
        }
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw DimensionError("transpose: rank != 2");
    Tensor t = Tensor::zeros({a.cols(), a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
    return t;
}

}  // namespace totem
