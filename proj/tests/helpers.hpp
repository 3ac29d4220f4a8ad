#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "factformer/layers.hpp"
#include "factformer/tensor.hpp"

namespace ffhelpers {

using factformer::FieldTensor;
using factformer::Matrix;
using factformer::Param;
using factformer::Rng;

inline Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
    Matrix m(r, c);
    for (double& v : m.buffer()) v = rng.normal();
    return m;
}

inline FieldTensor random_tensor(const std::vector<std::size_t>& shape, Rng& rng) {
    FieldTensor t(shape);
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal();
    return t;
}

// Scalar probe loss: fixed pseudo-random weights so the loss gradient w.r.t.
// the probed output is exactly the weight array.
struct Probe {
    std::vector<double> w;
    explicit Probe(std::size_t n, std::uint64_t seed = 99) {
        Rng rng(seed);
        w.resize(n);
        for (double& v : w) v = rng.normal();
    }
    double operator()(const Matrix& y) const {
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * y.buffer()[i];
        return s;
    }
    double operator()(const FieldTensor& y) const {
        double s = 0.0;
        for (std::size_t i = 0; i < y.numel(); ++i) s += w[i] * y[i];
        return s;
    }
    Matrix grad_matrix(std::size_t r, std::size_t c) const {
        return Matrix(r, c, std::vector<double>(w.begin(), w.begin() + r * c));
    }
    FieldTensor grad_tensor(const std::vector<std::size_t>& shape) const {
        FieldTensor g(shape);
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] = w[i];
        return g;
    }
};

// Element-wise relative error with a floor so finite-difference noise in
// near-zero entries does not dominate.
inline double rel_err(double a, double b, double floor = 1e-3) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Central finite differences over every element of a parameter against its
// accumulated analytic gradient. `loss` must recompute the forward pass.
inline double fd_check_param(Param& p, const std::function<double()>& loss,
                             double step = 1e-5) {
    double worst = 0.0;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double saved = p.value.buffer()[i];
        p.value.buffer()[i] = saved + step;
        const double lp = loss();
        p.value.buffer()[i] = saved - step;
        const double lm = loss();
        p.value.buffer()[i] = saved;
        const double fd = (lp - lm) / (2.0 * step);
        worst = std::max(worst, rel_err(p.grad.buffer()[i], fd));
    }
    return worst;
}

// Same check for a gradient w.r.t. a dense input buffer.
inline double fd_check_input(std::vector<double>& x, const std::vector<double>& analytic,
                             const std::function<double()>& loss, double step = 1e-5) {
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double saved = x[i];
        x[i] = saved + step;
        const double lp = loss();
        x[i] = saved - step;
        const double lm = loss();
        x[i] = saved;
        const double fd = (lp - lm) / (2.0 * step);
        worst = std::max(worst, rel_err(analytic[i], fd));
    }
    return worst;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, std::abs(a.buffer()[i] - b.buffer()[i]));
    return worst;
}

inline double max_rel_diff(const FieldTensor& a, const FieldTensor& b, double floor = 1e-12) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        num = std::max(num, std::abs(a[i] - b[i]));
        den = std::max(den, std::abs(b[i]));
    }
    return num / std::max(den, floor);
}

}  // namespace ffhelpers
