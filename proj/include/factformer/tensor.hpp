#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "factformer/common.hpp"

namespace factformer {

class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (rows_ * cols_ != data_.size())
            throw ContractViolation("Matrix: buffer length " + std::to_string(data_.size()) +
                                    " != rows*cols " + std::to_string(rows_ * cols_));
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& buffer() { return data_; }
    const std::vector<double>& buffer() const { return data_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    std::size_t rows_ = 0, cols_ = 0;
    std::vector<double> data_;
};

// Dense n-way spatial tensor with a trailing channel mode, row-major with the
// channel mode fastest-varying. shape = [S_1, ..., S_n, d].
class FieldTensor {
public:
    FieldTensor() = default;
    explicit FieldTensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)) {
        check_shape();
        data_.assign(numel_from_shape(), 0.0);
    }
    FieldTensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape();
        if (data_.size() != numel_from_shape())
            throw ContractViolation("FieldTensor: buffer length " + std::to_string(data_.size()) +
                                    " != product of extents " + std::to_string(numel_from_shape()));
    }

    // Construction from external (untrusted) data: rejects NaN/Inf.
    static FieldTensor from_external(std::vector<std::size_t> shape, std::vector<double> data) {
        FieldTensor t(std::move(shape), std::move(data));
        for (double v : t.data_)
            if (!std::isfinite(v))
                throw ContractViolation("FieldTensor: non-finite element in external data");
        return t;
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t n_spatial() const { return shape_.size() - 1; }
    std::size_t channels() const { return shape_.back(); }
    std::size_t extent(std::size_t mode) const { return shape_[mode]; }
    std::size_t numel() const { return data_.size(); }
    std::size_t spatial_count() const { return data_.size() / shape_.back(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& buffer() { return data_; }
    const std::vector<double>& buffer() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // Row-major view: spatial positions as rows, channels as columns. The
    // buffer layout makes this a straight copy.
    Matrix as_matrix() const { return Matrix(spatial_count(), channels(), data_); }

    static FieldTensor from_matrix(const Matrix& m, std::vector<std::size_t> shape) {
        return FieldTensor(std::move(shape), m.buffer());
    }

private:
    void check_shape() const {
        if (shape_.size() < 2 || shape_.size() > 4)
            throw ContractViolation("FieldTensor: need 1..3 spatial modes plus a channel mode");
        for (std::size_t e : shape_)
            if (e < 1) throw ContractViolation("FieldTensor: zero extent");
    }
    std::size_t numel_from_shape() const {
        std::size_t n = 1;
        for (std::size_t e : shape_) n *= e;
        return n;
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

inline Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

// C = A * B with ascending inner index per output element.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw ContractViolation("matmul: inner extents disagree: " + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()));
    op_counters().total += static_cast<std::uint64_t>(a.rows()) * a.cols() * b.cols();
    Matrix c(a.rows(), b.cols());
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = c.data();
#pragma omp parallel for schedule(static) if (m * k * n > 65536)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
        double* crow = pc + i * n;
        for (std::size_t l = 0; l < k; ++l) {
            const double av = pa[i * k + l];
            const double* brow = pb + l * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ContractViolation("add: shape mismatch");
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.buffer()[i] += b.buffer()[i];
    return c;
}

inline void scale_inplace(Matrix& a, double s) {
    for (double& v : a.buffer()) v *= s;
}

// Mode-m tensor-matrix product: output extent at `mode` becomes w.rows().
// `mode == n_spatial` contracts the channel mode. Summation runs ascending
// over the contracted index for every output element.
inline FieldTensor mode_product(const FieldTensor& t, const Matrix& w, std::size_t mode) {
    if (mode >= t.shape().size())
        throw ContractViolation("mode_product: mode " + std::to_string(mode) + " out of range");
    const std::size_t sm = t.extent(mode);
    if (w.cols() != sm)
        throw ContractViolation("mode_product: matrix cols " + std::to_string(w.cols()) +
                                " != extent " + std::to_string(sm) + " at mode " +
                                std::to_string(mode));
    std::size_t outer = 1, inner = 1;
    for (std::size_t m = 0; m < mode; ++m) outer *= t.extent(m);
    for (std::size_t m = mode + 1; m < t.shape().size(); ++m) inner *= t.extent(m);

    std::vector<std::size_t> out_shape = t.shape();
    out_shape[mode] = w.rows();
    FieldTensor out(out_shape);

    op_counters().total += static_cast<std::uint64_t>(outer) * w.rows() * sm * inner;

    const double* src = t.data();
    double* dst = out.data();
    const std::size_t j_extent = w.rows();
#pragma omp parallel for schedule(static) collapse(2) if (outer * j_extent * sm * inner > 65536)
    for (std::ptrdiff_t o = 0; o < static_cast<std::ptrdiff_t>(outer); ++o) {
        for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(j_extent); ++j) {
            const double* in_base = src + static_cast<std::size_t>(o) * sm * inner;
            double* out_base = dst + (static_cast<std::size_t>(o) * j_extent + j) * inner;
            for (std::size_t i = 0; i < sm; ++i) {
                const double wv = w(j, i);
                const double* slice = in_base + i * inner;
                for (std::size_t q = 0; q < inner; ++q) out_base[q] += wv * slice[q];
            }
        }
    }
    return out;
}

// Gradient of mode_product w.r.t. the matrix: given Z = X x_m A,
// dA(j, i) = sum over all other indices of dZ[.., j, ..] * X[.., i, ..].
inline Matrix mode_product_grad_matrix(const FieldTensor& grad_out, const FieldTensor& x,
                                       std::size_t mode) {
    const std::size_t sm = x.extent(mode);
    const std::size_t j_extent = grad_out.extent(mode);
    std::size_t outer = 1, inner = 1;
    for (std::size_t m = 0; m < mode; ++m) outer *= x.extent(m);
    for (std::size_t m = mode + 1; m < x.shape().size(); ++m) inner *= x.extent(m);
    op_counters().total += static_cast<std::uint64_t>(outer) * j_extent * sm * inner;

    Matrix grad_a(j_extent, sm);
    const double* g = grad_out.data();
    const double* xp = x.data();
#pragma omp parallel for schedule(static) if (outer * j_extent * sm * inner > 65536)
    for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(j_extent); ++j) {
        for (std::size_t i = 0; i < sm; ++i) {
            double acc = 0.0;
            for (std::size_t o = 0; o < outer; ++o) {
                const double* grow = g + (o * j_extent + j) * inner;
                const double* xrow = xp + (o * sm + i) * inner;
                for (std::size_t q = 0; q < inner; ++q) acc += grow[q] * xrow[q];
            }
            grad_a(static_cast<std::size_t>(j), i) = acc;
        }
    }
    return grad_a;
}

// Mean over all spatial axes except `keep`; output (S_keep, d).
inline Matrix mean_over_axes(const FieldTensor& t, std::size_t keep) {
    if (keep >= t.n_spatial())
        throw ContractViolation("mean_over_axes: keep=" + std::to_string(keep) +
                                " must index a spatial mode");
    const std::size_t d = t.channels();
    const std::size_t s_keep = t.extent(keep);
    std::size_t outer = 1, inner_spatial = 1;
    for (std::size_t m = 0; m < keep; ++m) outer *= t.extent(m);
    for (std::size_t m = keep + 1; m < t.n_spatial(); ++m) inner_spatial *= t.extent(m);
    const std::size_t inner = inner_spatial * d;

    Matrix out(s_keep, d);
    const double* src = t.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < s_keep; ++i) {
            const double* base = src + (o * s_keep + i) * inner;
            for (std::size_t p = 0; p < inner_spatial; ++p)
                for (std::size_t c = 0; c < d; ++c) out(i, c) += base[p * d + c];
        }
    const double scale = 1.0 / static_cast<double>(outer * inner_spatial);
    scale_inplace(out, scale);
    return out;
}

// Broadcast adjoint of mean_over_axes: spreads grad (S_keep x d) back over the
// pooled positions with weight 1/count.
inline FieldTensor mean_over_axes_backward(const Matrix& grad, const std::vector<std::size_t>& shape,
                                           std::size_t keep) {
    FieldTensor out(shape);
    const std::size_t d = shape.back();
    const std::size_t n_spatial = shape.size() - 1;
    const std::size_t s_keep = shape[keep];
    std::size_t outer = 1, inner_spatial = 1;
    for (std::size_t m = 0; m < keep; ++m) outer *= shape[m];
    for (std::size_t m = keep + 1; m < n_spatial; ++m) inner_spatial *= shape[m];
    const std::size_t inner = inner_spatial * d;
    const double scale = 1.0 / static_cast<double>(outer * inner_spatial);

    double* dst = out.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < s_keep; ++i) {
            double* base = dst + (o * s_keep + i) * inner;
            for (std::size_t p = 0; p < inner_spatial; ++p)
                for (std::size_t c = 0; c < d; ++c) base[p * d + c] += scale * grad(i, c);
        }
    return out;
}

inline double l2_norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

// ||pred - ref||_2 / ||ref||_2 over all elements.
inline double relative_l2(const FieldTensor& pred, const FieldTensor& ref) {
    if (pred.shape() != ref.shape())
        throw ContractViolation("relative_l2: shape mismatch");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        const double diff = pred[i] - ref[i];
        num += diff * diff;
        den += ref[i] * ref[i];
    }
    if (den == 0.0) throw DegenerateInput("relative_l2: reference has zero norm");
    return std::sqrt(num) / std::sqrt(den);
}

// Gradient of relative_l2 w.r.t. pred: (pred - ref) / (||pred - ref|| * ||ref||),
// zero when pred == ref exactly.
inline FieldTensor relative_l2_grad(const FieldTensor& pred, const FieldTensor& ref) {
    if (pred.shape() != ref.shape())
        throw ContractViolation("relative_l2_grad: shape mismatch");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        const double diff = pred[i] - ref[i];
        num += diff * diff;
        den += ref[i] * ref[i];
    }
    if (den == 0.0) throw DegenerateInput("relative_l2_grad: reference has zero norm");
    FieldTensor g(pred.shape());
    if (num == 0.0) return g;
    const double scale = 1.0 / (std::sqrt(num) * std::sqrt(den));
    for (std::size_t i = 0; i < pred.numel(); ++i) g[i] = (pred[i] - ref[i]) * scale;
    return g;
}

inline FieldTensor add(const FieldTensor& a, const FieldTensor& b) {
    if (a.shape() != b.shape()) throw ContractViolation("FieldTensor add: shape mismatch");
    FieldTensor c = a;
    for (std::size_t i = 0; i < c.numel(); ++i) c[i] += b[i];
    return c;
}

}  // namespace factformer
