#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "factformer/common.hpp"
#include "factformer/tensor.hpp"

namespace factformer {

// A learnable weight with its gradient accumulator and optimizer moment slots.
struct Param {
    std::string name;
    Matrix value;
    Matrix grad;
    Matrix m1;
    Matrix m2;

    Param(std::string n, std::size_t rows, std::size_t cols)
        : name(std::move(n)), value(rows, cols), grad(rows, cols), m1(rows, cols), m2(rows, cols) {}

    void zero_grad() { std::fill(grad.buffer().begin(), grad.buffer().end(), 0.0); }
};

inline void init_glorot(Param& p, Rng& rng, std::size_t fan_in, std::size_t fan_out) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (double& v : p.value.buffer()) v = rng.uniform(-bound, bound);
}

using MatBackward = std::function<Matrix(const Matrix&)>;

struct LinearResult {
    Matrix y;
    MatBackward backward;  // grad_y -> grad_x, accumulates parameter grads
};

// y = x W (+ b). Row-vector convention: x is (N x in), W is (in x out).
class Linear {
public:
    Linear(std::string name, std::size_t in, std::size_t out, bool bias = true)
        : W_(name + ".W", in, out), b_(name + ".b", 1, out), has_bias_(bias) {}

    void init(Rng& rng) { init_glorot(W_, rng, W_.value.rows(), W_.value.cols()); }

    std::size_t in_width() const { return W_.value.rows(); }
    std::size_t out_width() const { return W_.value.cols(); }

    LinearResult forward(const Matrix& x) {
        if (x.cols() != W_.value.rows())
            throw ContractViolation("Linear " + W_.name + ": input width " +
                                    std::to_string(x.cols()) + " != " +
                                    std::to_string(W_.value.rows()));
        Matrix y = matmul(x, W_.value);
        if (has_bias_)
            for (std::size_t i = 0; i < y.rows(); ++i)
                for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += b_.value(0, j);
        auto x_saved = std::make_shared<Matrix>(x);
        return {std::move(y), [this, x_saved](const Matrix& g) {
                    Matrix gw = matmul(transpose(*x_saved), g);
                    for (std::size_t i = 0; i < gw.size(); ++i) W_.grad.buffer()[i] += gw.buffer()[i];
                    if (has_bias_)
                        for (std::size_t i = 0; i < g.rows(); ++i)
                            for (std::size_t j = 0; j < g.cols(); ++j) b_.grad(0, j) += g(i, j);
                    return matmul(g, transpose(W_.value));
                }};
    }

    std::vector<Param*> params() {
        std::vector<Param*> ps{&W_};
        if (has_bias_) ps.push_back(&b_);
        return ps;
    }

    Param& weight() { return W_; }
    Param& bias() { return b_; }

private:
    Param W_;
    Param b_;
    bool has_bias_;
};

// Exact-erf GELU.
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return cdf + x * pdf;
}

struct GeluResult {
    Matrix y;
    MatBackward backward;
};

inline GeluResult gelu_forward(const Matrix& x) {
    Matrix y(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) y.buffer()[i] = gelu(x.buffer()[i]);
    auto x_saved = std::make_shared<Matrix>(x);
    return {std::move(y), [x_saved](const Matrix& g) {
                Matrix gx(g.rows(), g.cols());
                for (std::size_t i = 0; i < g.size(); ++i)
                    gx.buffer()[i] = g.buffer()[i] * gelu_grad(x_saved->buffer()[i]);
                return gx;
            }};
}

// Three linear layers with pointwise GELU between.
class Mlp {
public:
    Mlp(const std::string& name, std::size_t in, std::size_t hidden, std::size_t out)
        : l1_(name + ".l1", in, hidden), l2_(name + ".l2", hidden, hidden),
          l3_(name + ".l3", hidden, out) {}

    void init(Rng& rng) {
        l1_.init(rng);
        l2_.init(rng);
        l3_.init(rng);
    }

    LinearResult forward(const Matrix& x) {
        auto r1 = l1_.forward(x);
        auto g1 = gelu_forward(r1.y);
        auto r2 = l2_.forward(g1.y);
        auto g2 = gelu_forward(r2.y);
        auto r3 = l3_.forward(g2.y);
        auto b1 = r1.backward, gb1 = g1.backward, b2 = r2.backward, gb2 = g2.backward,
             b3 = r3.backward;
        return {std::move(r3.y), [b1, gb1, b2, gb2, b3](const Matrix& g) {
                    return b1(gb1(b2(gb2(b3(g)))));
                }};
    }

    std::vector<Param*> params() {
        std::vector<Param*> ps;
        for (Linear* l : {&l1_, &l2_, &l3_})
            for (Param* p : l->params()) ps.push_back(p);
        return ps;
    }

    Linear& last_layer() { return l3_; }

private:
    Linear l1_, l2_, l3_;
};

inline constexpr double kInstanceNormEps = 1e-5;

// Column-wise instance normalization: each column of x gets mean 0 and biased
// variance 1 across rows. No learnable affine.
inline LinearResult instance_norm_cols(const Matrix& x) {
    const std::size_t n = x.rows(), d = x.cols();
    if (n < 2) throw DegenerateInput("instance_norm: needs >= 2 positions per instance");
    std::vector<double> mean(d, 0.0), inv_std(d, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
        double mu = 0.0;
        for (std::size_t i = 0; i < n; ++i) mu += x(i, j);
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double c = x(i, j) - mu;
            var += c * c;
        }
        var /= static_cast<double>(n);
        mean[j] = mu;
        inv_std[j] = 1.0 / std::sqrt(var + kInstanceNormEps);
    }
    auto xhat = std::make_shared<Matrix>(n, d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) (*xhat)(i, j) = (x(i, j) - mean[j]) * inv_std[j];
    Matrix y = *xhat;
    auto istd = std::make_shared<std::vector<double>>(std::move(inv_std));
    return {std::move(y), [xhat, istd, n, d](const Matrix& g) {
                Matrix gx(n, d);
                for (std::size_t j = 0; j < d; ++j) {
                    double gsum = 0.0, gx_dot = 0.0;
                    for (std::size_t i = 0; i < n; ++i) {
                        gsum += g(i, j);
                        gx_dot += g(i, j) * (*xhat)(i, j);
                    }
                    const double gmean = gsum / static_cast<double>(n);
                    const double gxmean = gx_dot / static_cast<double>(n);
                    for (std::size_t i = 0; i < n; ++i)
                        gx(i, j) = (*istd)[j] * (g(i, j) - gmean - (*xhat)(i, j) * gxmean);
                }
                return gx;
            }};
}

struct TensorNormResult {
    FieldTensor y;
    std::function<FieldTensor(const FieldTensor&)> backward;
};

// Instance normalization over a FieldTensor: per channel, statistics across
// all spatial positions of the (single) instance.
inline TensorNormResult instance_norm(const FieldTensor& t) {
    auto r = instance_norm_cols(t.as_matrix());
    auto shape = t.shape();
    auto bwd = r.backward;
    return {FieldTensor::from_matrix(r.y, shape), [bwd, shape](const FieldTensor& g) {
                return FieldTensor::from_matrix(bwd(g.as_matrix()), shape);
            }};
}

// Rotary encoding table for one axis. head_dim must be even.
struct RopeTable {
    std::size_t head_dim;
    double lambda;
    std::vector<double> thetas;  // theta_l = 10000^{-2(l-1)/d}, l = 1..d/2

    RopeTable(std::size_t d, double lam) : head_dim(d), lambda(lam) {
        if (d == 0 || d % 2 != 0)
            throw ConfigError("RopeTable: head dim must be even and positive, got " +
                              std::to_string(d));
        thetas.resize(d / 2);
        for (std::size_t l = 0; l < d / 2; ++l)
            thetas[l] = std::pow(10000.0, -2.0 * static_cast<double>(l) / static_cast<double>(d));
    }
};

// Row i of q is rotated pairwise by angles lambda * x_i * theta_l. Backward is
// the inverse rotation applied to the gradient.
inline LinearResult rope_encode(const Matrix& q, const std::vector<double>& coords,
                                const RopeTable& table) {
    if (q.cols() != table.head_dim)
        throw ConfigError("rope_encode: width " + std::to_string(q.cols()) + " != table dim " +
                          std::to_string(table.head_dim));
    if (q.rows() != coords.size())
        throw ContractViolation("rope_encode: row count != coordinate count");
    const std::size_t s = q.rows(), half = table.head_dim / 2;
    Matrix y(s, q.cols());
    for (std::size_t i = 0; i < s; ++i)
        for (std::size_t l = 0; l < half; ++l) {
            const double ang = table.lambda * coords[i] * table.thetas[l];
            const double c = std::cos(ang), sn = std::sin(ang);
            const double a = q(i, 2 * l), b = q(i, 2 * l + 1);
            y(i, 2 * l) = a * c - b * sn;
            y(i, 2 * l + 1) = a * sn + b * c;
        }
    auto coords_saved = std::make_shared<std::vector<double>>(coords);
    const RopeTable* tbl = &table;
    return {std::move(y), [coords_saved, tbl, half](const Matrix& g) {
                Matrix gx(g.rows(), g.cols());
                for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t l = 0; l < half; ++l) {
                        const double ang = tbl->lambda * (*coords_saved)[i] * tbl->thetas[l];
                        const double c = std::cos(ang), sn = std::sin(ang);
                        const double a = g(i, 2 * l), b = g(i, 2 * l + 1);
                        gx(i, 2 * l) = a * c + b * sn;
                        gx(i, 2 * l + 1) = -a * sn + b * c;
                    }
                return gx;
            }};
}

// Random Fourier feature positional encoder: psi(x) = W_out [cos(Bx); sin(Bx)].
// B is frozen; only W_out is learnable.
class RffEncoder {
public:
    RffEncoder(const std::string& name, std::size_t coord_dim, std::size_t n_freq, std::size_t d,
               double sigma, Rng& rng)
        : B_(n_freq, coord_dim), W_out_(name + ".W_out", 2 * n_freq, d) {
        for (double& v : B_.buffer()) v = sigma * rng.normal();
        init_glorot(W_out_, rng, 2 * n_freq, d);
    }

    // coords: (N x coord_dim). Returns (N x d); backward accumulates only into
    // W_out (B and coords receive no gradient).
    LinearResult forward(const Matrix& coords) {
        if (coords.cols() != B_.cols())
            throw ContractViolation("RffEncoder: coordinate dim " + std::to_string(coords.cols()) +
                                    " != " + std::to_string(B_.cols()));
        const std::size_t n = coords.rows(), f = B_.rows();
        auto feat = std::make_shared<Matrix>(n, 2 * f);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < f; ++j) {
                double phase = 0.0;
                for (std::size_t c = 0; c < coords.cols(); ++c) phase += B_(j, c) * coords(i, c);
                (*feat)(i, 2 * j) = std::cos(phase);
                (*feat)(i, 2 * j + 1) = std::sin(phase);
            }
        Matrix y = matmul(*feat, W_out_.value);
        return {std::move(y), [this, feat](const Matrix& g) {
                    Matrix gw = matmul(transpose(*feat), g);
                    for (std::size_t i = 0; i < gw.size(); ++i)
                        W_out_.grad.buffer()[i] += gw.buffer()[i];
                    return Matrix(g.rows(), 0);  // no input gradient
                }};
    }

    const Matrix& frequencies() const { return B_; }
    Param& weight() { return W_out_; }
    std::vector<Param*> params() { return {&W_out_}; }

private:
    Matrix B_;
    Param W_out_;
};

inline void accumulate_grad(Param& p, const Matrix& g) {
    if (g.rows() != p.grad.rows() || g.cols() != p.grad.cols())
        throw ContractViolation("accumulate_grad: shape mismatch for " + p.name);
    for (std::size_t i = 0; i < g.size(); ++i) p.grad.buffer()[i] += g.buffer()[i];
}

}  // namespace factformer
