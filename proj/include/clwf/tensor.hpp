#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "clwf/errors.hpp"

namespace clwf {

// Dense row-major array of doubles. Values are immutable from the point of
// view of graph nodes; training code mutates parameter tensors it owns.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);

    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor full(std::vector<std::size_t> shape, double value);
    static Tensor scalar(double value);
    static Tensor row_vector(std::vector<double> values);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    double at(std::size_t i) const { return data_[i]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
    double& at(std::size_t i) { return data_[i]; }
    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

    double item() const;

    bool requires_grad() const { return requires_grad_; }
    Tensor& set_requires_grad(bool flag) { requires_grad_ = flag; return *this; }

    const std::optional<std::vector<double>>& grad() const { return grad_; }
    void set_grad(std::vector<double> g);
    void clear_grad() { grad_.reset(); }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;

    std::string shape_str() const;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
    bool requires_grad_ = false;
    std::optional<std::vector<double>> grad_;
};

std::string shape_to_string(const std::vector<std::size_t>& shape);

// Throws NumericError naming `where` if any element is non-finite.
void check_finite(const Tensor& t, const std::string& where);
void check_finite(const std::vector<double>& v, const std::string& where);

// Dense kernels shared by the graph and by direct (non-taped) paths.
// All of them accumulate into `out`, which the caller sizes and zeroes.
namespace kernels {

// out[m,n] += a[m,k] * b[k,n]
void matmul_nn_acc(const double* a, const double* b, double* out,
                   std::size_t m, std::size_t k, std::size_t n);

// out[m,k] += a[m,n] * b[k,n]^T
void matmul_nt_acc(const double* a, const double* b, double* out,
                   std::size_t m, std::size_t n, std::size_t k);

// out[k,n] += a[m,k]^T * b[m,n]
void matmul_tn_acc(const double* a, const double* b, double* out,
                   std::size_t m, std::size_t k, std::size_t n);

} // namespace kernels

} // namespace clwf
