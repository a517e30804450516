#pragma once

#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace totem {

/// Raised when operand shapes are incompatible. The message names both shapes.
class DimensionError : public std::runtime_error {
public:
    explicit DimensionError(const std::string& what) : std::runtime_error(what) {}
};

/// Raised when an operation's contract is violated (e.g. non-scalar loss).
class ContractError : public std::runtime_error {
public:
    explicit ContractError(const std::string& what) : std::runtime_error(what) {}
};

/// Dense row-major tensor of 64-bit floats. No views, no strides.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::vector<std::size_t> s, std::vector<double> d);

    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor full(std::vector<std::size_t> shape, double v);
    static Tensor scalar(double v);
    static Tensor row(std::vector<double> v);                 // 1 x n
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
    static Tensor identity(std::size_t n);

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }

    // 2-D accessors; most of the library works on row matrices.
    std::size_t rows() const;
    std::size_t cols() const;
    double& at(std::size_t i, std::size_t j);
    double at(std::size_t i, std::size_t j) const;

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const;
    void fill(double v);

    Tensor reshaped(std::vector<std::size_t> new_shape) const;
};

std::string shape_str(const std::vector<std::size_t>& s);
void require_same_shape(const Tensor& a, const Tensor& b, const char* op);

/// C = A * B for 2-D tensors; throws DimensionError naming both shapes.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Max-subtracted softmax along `axis` of a rank-1 or rank-2 tensor.
Tensor softmax(const Tensor& t, std::size_t axis);

Tensor transpose(const Tensor& a);

}  // namespace totem
