#include "clwf/tensor.hpp"

#include <cmath>
#include <sstream>

namespace clwf {

namespace {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        n *= d;
    }
    return n;
}

} // namespace

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size()) {
        throw ShapeError("tensor: shape " + shape_to_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
    }
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    return Tensor(std::move(shape));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) {
        x = value;
    }
    return t;
}

Tensor Tensor::scalar(double value) {
    return Tensor({1}, {value});
}

Tensor Tensor::row_vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
    return Tensor({rows, cols}, std::move(data));
}

std::size_t Tensor::rows() const {
    if (shape_.size() != 2) {
        throw ShapeError("tensor: rows() on rank-" + std::to_string(shape_.size()) +
                         " tensor " + shape_str());
    }
    return shape_[0];
}

std::size_t Tensor::cols() const {
    if (shape_.size() != 2) {
        throw ShapeError("tensor: cols() on rank-" + std::to_string(shape_.size()) +
                         " tensor " + shape_str());
    }
    return shape_[1];
}

double Tensor::item() const {
    if (numel() != 1) {
        throw ShapeError("tensor: item() on non-scalar " + shape_str());
    }
    return data_[0];
}

void Tensor::set_grad(std::vector<double> g) {
    if (g.size() != data_.size()) {
        throw ShapeError("tensor: gradient size " + std::to_string(g.size()) +
                         " does not match value size " + std::to_string(data_.size()));
    }
    grad_ = std::move(g);
}

bool Tensor::all_finite() const {
    for (double x : data_) {
        if (!std::isfinite(x)) {
            return false;
        }
    }
    return true;
}

std::string Tensor::shape_str() const {
    return shape_to_string(shape_);
}

std::string shape_to_string(const std::vector<std::size_t>& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i > 0) {
            out << ',';
        }
        out << shape[i];
    }
    out << ']';
    return out.str();
}

void check_finite(const std::vector<double>& v, const std::string& where) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw NumericError(where + ": non-finite value");
        }
    }
}

void check_finite(const Tensor& t, const std::string& where) {
    check_finite(t.data(), where);
}

namespace kernels {

void matmul_nn_acc(const double* a, const double* b, double* out,
                   std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* orow = out + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
}

void matmul_nt_acc(const double* a, const double* b, double* out,
                   std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * n;
        double* orow = out + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double* brow = b + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                acc += arow[j] * brow[j];
            }
            orow[p] += acc;
        }
    }
}

void matmul_tn_acc(const double* a, const double* b, double* out,
                   std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            double* orow = out + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
}

} // namespace kernels

} // namespace clwf
