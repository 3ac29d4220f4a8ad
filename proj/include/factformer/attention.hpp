#pragma once

#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "factformer/common.hpp"
#include "factformer/layers.hpp"
#include "factformer/tensor.hpp"

namespace factformer {

inline Matrix col_slice(const Matrix& m, std::size_t start, std::size_t width) {
    Matrix out(m.rows(), width);
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < width; ++j) out(i, j) = m(i, start + j);
    return out;
}

inline void col_assign(Matrix& dst, std::size_t start, const Matrix& src) {
    for (std::size_t i = 0; i < src.rows(); ++i)
        for (std::size_t j = 0; j < src.cols(); ++j) dst(i, start + j) = src(i, j);
}

inline void col_add(Matrix& dst, std::size_t start, const Matrix& src) {
    for (std::size_t i = 0; i < src.rows(); ++i)
        for (std::size_t j = 0; j < src.cols(); ++j) dst(i, start + j) += src(i, j);
}

// Grid coordinates for one axis, normalized to [0,1) with spacing 1/S.
inline std::vector<double> axis_coords(std::size_t s) {
    std::vector<double> c(s);
    for (std::size_t i = 0; i < s; ++i) c[i] = static_cast<double>(i) / static_cast<double>(s);
    return c;
}

// Flattened coordinates for an n-D grid: row p holds the n per-axis
// coordinates of grid point p (row-major over spatial modes).
inline Matrix grid_coords(const std::vector<std::size_t>& grid) {
    std::size_t n_pts = 1;
    for (std::size_t s : grid) n_pts *= s;
    Matrix c(n_pts, grid.size());
    for (std::size_t p = 0; p < n_pts; ++p) {
        std::size_t rem = p;
        for (std::size_t m = grid.size(); m-- > 0;) {
            const std::size_t idx = rem % grid[m];
            rem /= grid[m];
            c(p, m) = static_cast<double>(idx) / static_cast<double>(grid[m]);
        }
    }
    return c;
}

// Per-axis kernel matrices A^(m) per head, with their mesh weights.
struct AxialKernelSet {
    std::vector<std::vector<Matrix>> kernels;  // [axis][head], each S_m x S_m
    std::vector<double> weights;               // w_m = 1/S_m
};

struct AttentionConfig {
    std::vector<std::size_t> grid;  // S_1..S_n
    std::size_t d = 0;              // hidden width
    std::size_t heads = 1;
    std::size_t d_k = 0;            // kernel dim per head
    double lambda = 64.0;

    std::size_t n() const { return grid.size(); }
    std::size_t head_width() const { return d / heads; }
    std::size_t n_points() const {
        std::size_t n_pts = 1;
        for (std::size_t s : grid) n_pts *= s;
        return n_pts;
    }

    void validate() const {
        if (grid.empty() || grid.size() > 3) throw ConfigError("attention: n must be 1..3");
        if (d == 0 || heads == 0 || d % heads != 0)
            throw ConfigError("attention: hidden width must be divisible by head count");
        if (d_k == 0 || d_k % 2 != 0) throw ConfigError("attention: kernel dim must be even");
    }
};

using TensorBackward = std::function<FieldTensor(const FieldTensor&)>;

struct TensorResult {
    FieldTensor y;
    TensorBackward backward;
};

struct AxialProjectResult {
    Matrix phi;  // S_m x d
    std::function<FieldTensor(const Matrix&)> backward;
};

// Direct nested summation of the factorized kernel integral; the oracle for
// the mode-product chain. Small grids only.
inline FieldTensor brute_force_kernel_integral(const FieldTensor& v,
                                               const std::vector<Matrix>& kernels) {
    const std::size_t n = v.n_spatial();
    if (kernels.size() != n)
        throw ContractViolation("brute_force_kernel_integral: kernel count != spatial modes");
    const std::size_t n_pts = v.spatial_count();
    if (n_pts > 10000)
        throw ResourceError("brute_force_kernel_integral: grid too large (" +
                            std::to_string(n_pts) + " points, cap 10000)");
    const std::size_t d = v.channels();
    FieldTensor z(v.shape());
    std::vector<std::size_t> i_idx(n, 0), j_idx(n, 0);
    for (std::size_t ip = 0; ip < n_pts; ++ip) {
        std::size_t rem = ip;
        for (std::size_t m = n; m-- > 0;) {
            i_idx[m] = rem % v.extent(m);
            rem /= v.extent(m);
        }
        for (std::size_t jp = 0; jp < n_pts; ++jp) {
            rem = jp;
            for (std::size_t m = n; m-- > 0;) {
                j_idx[m] = rem % v.extent(m);
                rem /= v.extent(m);
            }
            double coeff = 1.0;
            for (std::size_t m = 0; m < n; ++m) coeff *= kernels[m](i_idx[m], j_idx[m]);
            for (std::size_t c = 0; c < d; ++c) z[ip * d + c] += coeff * v[jp * d + c];
        }
    }
    return z;
}

// One attention layer of the factorized model: axial projection, per-axis
// kernel construction, mode-product attention, multi-head mixing.
class FactorizedAttention {
public:
    FactorizedAttention(const std::string& name, const AttentionConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        const std::size_t n = cfg_.n();
        const std::size_t hw = cfg_.head_width();
        for (std::size_t m = 0; m < n; ++m) {
            gamma_.emplace_back(name + ".gamma" + std::to_string(m), cfg_.d, cfg_.d);
            h_.push_back(std::make_unique<Mlp>(name + ".h" + std::to_string(m), cfg_.d, cfg_.d,
                                               cfg_.d));
            rope_.emplace_back(cfg_.d_k, cfg_.lambda);
            coords_.push_back(axis_coords(cfg_.grid[m]));
            std::vector<std::unique_ptr<Param>> wq, wk;
            for (std::size_t h = 0; h < cfg_.heads; ++h) {
                wq.push_back(std::make_unique<Param>(
                    name + ".Wq" + std::to_string(m) + "_" + std::to_string(h), hw, cfg_.d_k));
                wk.push_back(std::make_unique<Param>(
                    name + ".Wk" + std::to_string(m) + "_" + std::to_string(h), hw, cfg_.d_k));
            }
            w_q_.push_back(std::move(wq));
            w_k_.push_back(std::move(wk));
        }
        w_v_ = std::make_unique<Linear>(name + ".Wv", cfg_.d, cfg_.d, /*bias=*/false);
        out_ = std::make_unique<Linear>(name + ".out", cfg_.d, cfg_.d);
    }

    void init(Rng& rng) {
        for (auto& g : gamma_) g.init(rng);
        for (auto& m : h_) m->init(rng);
        for (auto& axis : w_q_)
            for (auto& p : axis) init_glorot(*p, rng, p->value.rows(), p->value.cols());
        for (auto& axis : w_k_)
            for (auto& p : axis) init_glorot(*p, rng, p->value.rows(), p->value.cols());
        w_v_->init(rng);
        out_->init(rng);
    }

    const AttentionConfig& config() const { return cfg_; }

    // Test hook, non-production: replaces every A^(m) with the identity.
    void force_identity_kernels(bool on) { force_identity_ = on; }

    // phi^(m) = h(mean-pool(gamma(u))) for one axis.
    AxialProjectResult axial_project(const FieldTensor& u, std::size_t axis) {
        if (axis >= u.n_spatial())
            throw ContractViolation("axial_project: axis " + std::to_string(axis) +
                                    " out of range");
        auto g_res = gamma_[axis].forward(u.as_matrix());
        FieldTensor g_tensor = FieldTensor::from_matrix(g_res.y, u.shape());
        Matrix pooled = mean_over_axes(g_tensor, axis);
        auto h_res = h_[axis]->forward(pooled);
        auto shape = u.shape();
        auto g_bwd = g_res.backward;
        auto h_bwd = h_res.backward;
        return {std::move(h_res.y), [g_bwd, h_bwd, shape, axis](const Matrix& grad_phi) {
                    Matrix grad_pooled = h_bwd(grad_phi);
                    FieldTensor grad_g = mean_over_axes_backward(grad_pooled, shape, axis);
                    return FieldTensor::from_matrix(g_bwd(grad_g.as_matrix()), shape);
                }};
    }

    struct KernelTape {
        std::vector<AxialProjectResult> proj;            // per axis
        std::vector<std::vector<Matrix>> q_rot, k_rot;   // [axis][head], RoPE-encoded
        std::vector<std::vector<MatBackward>> q_bwd, k_bwd;
        std::vector<std::vector<Matrix>> q_raw_in;       // phi head slices, [axis][head]
        AxialKernelSet kernels;
    };

    // Builds A^(m,h) = w_m * rope(Q) rope(K)^T from the axial projections.
    std::shared_ptr<KernelTape> build_kernels(const FieldTensor& u) {
        auto tape = std::make_shared<KernelTape>();
        const std::size_t n = cfg_.n(), hw = cfg_.head_width();
        tape->kernels.kernels.resize(n);
        tape->q_rot.resize(n);
        tape->k_rot.resize(n);
        tape->q_bwd.resize(n);
        tape->k_bwd.resize(n);
        tape->q_raw_in.resize(n);
        for (std::size_t m = 0; m < n; ++m) {
            tape->proj.push_back(axial_project(u, m));
            const Matrix& phi = tape->proj.back().phi;
            const double wm = 1.0 / static_cast<double>(cfg_.grid[m]);
            tape->kernels.weights.push_back(wm);
            for (std::size_t h = 0; h < cfg_.heads; ++h) {
                Matrix phi_h = col_slice(phi, h * hw, hw);
                Matrix q = matmul(phi_h, w_q_[m][h]->value);
                Matrix k = matmul(phi_h, w_k_[m][h]->value);
                auto qr = rope_encode(q, coords_[m], rope_[m]);
                auto kr = rope_encode(k, coords_[m], rope_[m]);
                op_counters().kernel +=
                    static_cast<std::uint64_t>(cfg_.grid[m]) * cfg_.grid[m] * cfg_.d_k;
                Matrix a = matmul(qr.y, transpose(kr.y));
                scale_inplace(a, wm);
                if (force_identity_) a = Matrix::identity(cfg_.grid[m]);
                tape->kernels.kernels[m].push_back(std::move(a));
                tape->q_rot[m].push_back(std::move(qr.y));
                tape->k_rot[m].push_back(std::move(kr.y));
                tape->q_bwd[m].push_back(qr.backward);
                tape->k_bwd[m].push_back(kr.backward);
                tape->q_raw_in[m].push_back(std::move(phi_h));
            }
        }
        return tape;
    }

    // Kernel matrices only, for analysis tooling.
    AxialKernelSet compute_kernels(const FieldTensor& u) { return build_kernels(u)->kernels; }

    struct ForwardDetail {
        FieldTensor output;    // after head mix
        Matrix premix;         // concatenated per-head chains, N x d
        TensorBackward backward;
        std::shared_ptr<KernelTape> tape;
    };

    ForwardDetail forward_detail(const FieldTensor& u) {
        if (std::vector<std::size_t>(u.shape().begin(), u.shape().end() - 1) != cfg_.grid ||
            u.channels() != cfg_.d)
            throw ContractViolation("factorized_attention: input shape does not match config");
        const std::size_t n = cfg_.n(), hw = cfg_.head_width(), n_pts = u.spatial_count();
        auto tape = build_kernels(u);

        auto v_res = w_v_->forward(u.as_matrix());
        std::vector<std::size_t> head_shape = u.shape();
        head_shape.back() = hw;

        // Per-head mode-product chain, ascending axis order; intermediates
        // are kept for the backward pass.
        auto chain = std::make_shared<std::vector<std::vector<FieldTensor>>>(cfg_.heads);
        Matrix premix(n_pts, cfg_.d);
        for (std::size_t h = 0; h < cfg_.heads; ++h) {
            FieldTensor t = FieldTensor::from_matrix(col_slice(v_res.y, h * hw, hw), head_shape);
            (*chain)[h].push_back(t);
            for (std::size_t m = 0; m < n; ++m) {
                op_counters().mode_chain += static_cast<std::uint64_t>(n_pts) * cfg_.grid[m] * hw;
                t = mode_product(t, tape->kernels.kernels[m][h], m);
                (*chain)[h].push_back(t);
            }
            col_assign(premix, h * hw, t.as_matrix());
        }
        auto out_res = out_->forward(premix);
        FieldTensor y = FieldTensor::from_matrix(out_res.y, u.shape());

        auto u_shape = u.shape();
        auto v_bwd = v_res.backward;
        auto out_bwd = out_res.backward;
        auto self = this;
        TensorBackward backward = [self, tape, chain, v_bwd, out_bwd, u_shape, head_shape, n, hw,
                                   n_pts](const FieldTensor& grad_y) {
            const auto& cfg = self->cfg_;
            Matrix grad_premix = out_bwd(grad_y.as_matrix());
            Matrix grad_v(n_pts, cfg.d);
            // Per-axis/head kernel gradients from the chain rule.
            std::vector<std::vector<Matrix>> grad_a(n);
            for (std::size_t m = 0; m < n; ++m)
                grad_a[m].assign(cfg.heads, Matrix(cfg.grid[m], cfg.grid[m]));
            for (std::size_t h = 0; h < cfg.heads; ++h) {
                FieldTensor g = FieldTensor::from_matrix(col_slice(grad_premix, h * hw, hw),
                                                         head_shape);
                for (std::size_t m = n; m-- > 0;) {
                    const Matrix& a = tape->kernels.kernels[m][h];
                    grad_a[m][h] = mode_product_grad_matrix(g, (*chain)[h][m], m);
                    g = mode_product(g, transpose(a), m);
                }
                col_assign(grad_v, h * hw, g.as_matrix());
            }
            Matrix grad_u_mat = v_bwd(grad_v);

            if (!self->force_identity_) {
                // A = w_m Q~ K~^T; route dA into RoPE, projections, and phi.
                for (std::size_t m = 0; m < n; ++m) {
                    Matrix grad_phi(cfg.grid[m], cfg.d);
                    for (std::size_t h = 0; h < cfg.heads; ++h) {
                        Matrix da = grad_a[m][h];
                        scale_inplace(da, tape->kernels.weights[m]);
                        Matrix dq_rot = matmul(da, tape->k_rot[m][h]);
                        Matrix dk_rot = matmul(transpose(da), tape->q_rot[m][h]);
                        Matrix dq = tape->q_bwd[m][h](dq_rot);
                        Matrix dk = tape->k_bwd[m][h](dk_rot);
                        const Matrix& phi_h = tape->q_raw_in[m][h];
                        accumulate_grad(*self->w_q_[m][h], matmul(transpose(phi_h), dq));
                        accumulate_grad(*self->w_k_[m][h], matmul(transpose(phi_h), dk));
                        Matrix dphi_h = matmul(dq, transpose(self->w_q_[m][h]->value));
                        Matrix dphi_k = matmul(dk, transpose(self->w_k_[m][h]->value));
                        for (std::size_t i = 0; i < dphi_h.size(); ++i)
                            dphi_h.buffer()[i] += dphi_k.buffer()[i];
                        col_add(grad_phi, h * hw, dphi_h);
                    }
                    FieldTensor gu = tape->proj[m].backward(grad_phi);
                    for (std::size_t i = 0; i < gu.numel(); ++i)
                        grad_u_mat.buffer()[i] += gu.buffer()[i];
                }
            }
            return FieldTensor::from_matrix(grad_u_mat, u_shape);
        };
        return {std::move(y), std::move(premix), std::move(backward), tape};
    }

    TensorResult forward(const FieldTensor& u) {
        auto d = forward_detail(u);
        return {std::move(d.output), std::move(d.backward)};
    }

    std::vector<Param*> params() {
        std::vector<Param*> ps;
        for (auto& g : gamma_)
            for (Param* p : g.params()) ps.push_back(p);
        for (auto& m : h_)
            for (Param* p : m->params()) ps.push_back(p);
        for (std::size_t m = 0; m < w_q_.size(); ++m)
            for (std::size_t h = 0; h < w_q_[m].size(); ++h) {
                ps.push_back(w_q_[m][h].get());
                ps.push_back(w_k_[m][h].get());
            }
        for (Param* p : w_v_->params()) ps.push_back(p);
        for (Param* p : out_->params()) ps.push_back(p);
        return ps;
    }

    Linear& value_projection() { return *w_v_; }
    Param& w_q(std::size_t axis, std::size_t head) { return *w_q_[axis][head]; }
    Param& w_k(std::size_t axis, std::size_t head) { return *w_k_[axis][head]; }
    const std::vector<double>& coords(std::size_t axis) const { return coords_[axis]; }
    void set_coords(std::size_t axis, std::vector<double> c) { coords_[axis] = std::move(c); }

private:
    AttentionConfig cfg_;
    std::vector<Linear> gamma_;
    std::vector<std::unique_ptr<Mlp>> h_;
    std::vector<std::vector<std::unique_ptr<Param>>> w_q_, w_k_;  // [axis][head]
    std::unique_ptr<Linear> w_v_;
    std::unique_ptr<Linear> out_;
    std::vector<RopeTable> rope_;
    std::vector<std::vector<double>> coords_;
    bool force_identity_ = false;
};

// Full residual block of the layer update: f(IN(Att(u))) + u.
class AttentionBlock {
public:
    AttentionBlock(const std::string& name, const AttentionConfig& cfg)
        : att_(name + ".att", cfg), f_(name + ".f", cfg.d, cfg.d, cfg.d) {}

    void init(Rng& rng) {
        att_.init(rng);
        f_.init(rng);
    }

    TensorResult forward(const FieldTensor& u) {
        auto att_res = att_.forward(u);
        auto norm_res = instance_norm(att_res.y);
        auto f_res = f_.forward(norm_res.y.as_matrix());
        FieldTensor y = add(FieldTensor::from_matrix(f_res.y, u.shape()), u);
        auto att_bwd = att_res.backward;
        auto norm_bwd = norm_res.backward;
        auto f_bwd = f_res.backward;
        auto shape = u.shape();
        return {std::move(y), [att_bwd, norm_bwd, f_bwd, shape](const FieldTensor& g) {
                    Matrix gf = f_bwd(g.as_matrix());
                    FieldTensor gn = norm_bwd(FieldTensor::from_matrix(gf, shape));
                    FieldTensor gu = att_bwd(gn);
                    return add(gu, g);  // skip connection
                }};
    }

    std::vector<Param*> params() {
        std::vector<Param*> ps = att_.params();
        for (Param* p : f_.params()) ps.push_back(p);
        return ps;
    }

    FactorizedAttention& attention() { return att_; }
    Mlp& post_mlp() { return f_; }

private:
    FactorizedAttention att_;
    Mlp f_;
};

// Softmax-free linear-attention baseline on the flattened grid.
class LinearAttention {
public:
    LinearAttention(const std::string& name, const AttentionConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        const std::size_t n = cfg_.n();
        if (cfg_.d_k % n != 0 || (cfg_.d_k / n) % 2 != 0)
            throw ConfigError("linear_attention: kernel dim must split evenly into even per-axis "
                              "RoPE blocks");
        block_ = cfg_.d_k / n;
        for (std::size_t m = 0; m < n; ++m) rope_.emplace_back(block_, cfg_.lambda);
        const std::size_t proj = cfg_.heads * cfg_.d_k;
        w_q_ = std::make_unique<Linear>(name + ".Wq", cfg_.d, proj, false);
        w_k_ = std::make_unique<Linear>(name + ".Wk", cfg_.d, proj, false);
        w_v_ = std::make_unique<Linear>(name + ".Wv", cfg_.d, proj, false);
        out_ = std::make_unique<Linear>(name + ".out", proj, cfg_.d);
        coords_ = grid_coords(cfg_.grid);
    }

    void init(Rng& rng) {
        w_q_->init(rng);
        w_k_->init(rng);
        w_v_->init(rng);
        out_->init(rng);
    }

    const AttentionConfig& config() const { return cfg_; }

    // RoPE over a head-width matrix: per-axis blocks rotated with that axis's
    // flattened coordinate.
    LinearResult rope_multi(const Matrix& x) {
        const std::size_t n = cfg_.n();
        Matrix y(x.rows(), x.cols());
        std::vector<MatBackward> bwds;
        for (std::size_t m = 0; m < n; ++m) {
            std::vector<double> c(x.rows());
            for (std::size_t i = 0; i < x.rows(); ++i) c[i] = coords_(i, m);
            auto r = rope_encode(col_slice(x, m * block_, block_), c, rope_[m]);
            col_assign(y, m * block_, r.y);
            bwds.push_back(r.backward);
        }
        const std::size_t blk = block_;
        return {std::move(y), [bwds, blk, n](const Matrix& g) {
                    Matrix gx(g.rows(), g.cols());
                    for (std::size_t m = 0; m < n; ++m)
                        col_assign(gx, m * blk, bwds[m](col_slice(g, m * blk, blk)));
                    return gx;
                }};
    }

    struct ForwardTape {
        std::vector<Matrix> q_rot, k_rot, v_norm;  // per head
        std::vector<MatBackward> q_rope_bwd, k_rope_bwd;
        MatBackward q_proj_bwd, k_proj_bwd, v_proj_bwd, out_bwd;
        MatBackward k_norm_bwd, v_norm_bwd;
        std::vector<Matrix> kv;  // per head, d_k x d_k
    };

    // Associativity path: z = w Q~ (K~^T V), w = 1/N. K and V are column-wise
    // instance normalized before use; Q is not.
    LinearResult forward(const Matrix& u) {
        const std::size_t n_pts = u.rows();
        if (u.cols() != cfg_.d) throw ContractViolation("linear_attention: width mismatch");
        const std::size_t proj = cfg_.heads * cfg_.d_k;
        if (n_pts * proj * 3 * sizeof(double) > memory_budget_bytes_)
            throw ResourceError("linear_attention: projection size exceeds memory budget");
        auto tape = std::make_shared<ForwardTape>();
        auto qp = w_q_->forward(u);
        auto kp = w_k_->forward(u);
        auto vp = w_v_->forward(u);
        auto kn = instance_norm_cols(kp.y);
        auto vn = instance_norm_cols(vp.y);
        tape->q_proj_bwd = qp.backward;
        tape->k_proj_bwd = kp.backward;
        tape->v_proj_bwd = vp.backward;
        tape->k_norm_bwd = kn.backward;
        tape->v_norm_bwd = vn.backward;

        const double w = 1.0 / static_cast<double>(n_pts);
        Matrix z(n_pts, proj);
        for (std::size_t h = 0; h < cfg_.heads; ++h) {
            auto qr = rope_multi(col_slice(qp.y, h * cfg_.d_k, cfg_.d_k));
            auto kr = rope_multi(col_slice(kn.y, h * cfg_.d_k, cfg_.d_k));
            Matrix vh = col_slice(vn.y, h * cfg_.d_k, cfg_.d_k);
            Matrix kv = matmul(transpose(kr.y), vh);
            Matrix zh = matmul(qr.y, kv);
            scale_inplace(zh, w);
            col_assign(z, h * cfg_.d_k, zh);
            tape->q_rot.push_back(std::move(qr.y));
            tape->k_rot.push_back(std::move(kr.y));
            tape->v_norm.push_back(std::move(vh));
            tape->q_rope_bwd.push_back(qr.backward);
            tape->k_rope_bwd.push_back(kr.backward);
            tape->kv.push_back(std::move(kv));
        }
        auto out_res = out_->forward(z);
        tape->out_bwd = out_res.backward;

        const std::size_t dk = cfg_.d_k, heads = cfg_.heads;
        return {std::move(out_res.y), [tape, w, dk, heads, n_pts, proj](const Matrix& g) {
                    Matrix gz = tape->out_bwd(g);
                    Matrix gq(n_pts, proj), gk(n_pts, proj), gv(n_pts, proj);
                    for (std::size_t h = 0; h < heads; ++h) {
                        Matrix gzh = col_slice(gz, h * dk, dk);
                        scale_inplace(gzh, w);
                        // z_h = Q~ (K~^T V)
                        Matrix gq_rot = matmul(gzh, transpose(tape->kv[h]));
                        Matrix gkv = matmul(transpose(tape->q_rot[h]), gzh);
                        Matrix gk_rot = matmul(tape->v_norm[h], transpose(gkv));
                        Matrix gvh = matmul(tape->k_rot[h], gkv);
                        col_assign(gq, h * dk, tape->q_rope_bwd[h](gq_rot));
                        col_assign(gk, h * dk, tape->k_rope_bwd[h](gk_rot));
                        col_assign(gv, h * dk, gvh);
                    }
                    Matrix gu = tape->q_proj_bwd(gq);
                    Matrix gu_k = tape->k_proj_bwd(tape->k_norm_bwd(gk));
                    Matrix gu_v = tape->v_proj_bwd(tape->v_norm_bwd(gv));
                    for (std::size_t i = 0; i < gu.size(); ++i)
                        gu.buffer()[i] += gu_k.buffer()[i] + gu_v.buffer()[i];
                    return gu;
                }};
    }

    // Direct path: materializes w Q~ K~^T for one head. Test / spectrum use.
    Matrix full_kernel(const Matrix& u, std::size_t head) {
        const std::size_t n_pts = u.rows();
        if (n_pts * n_pts * sizeof(double) > memory_budget_bytes_)
            throw ResourceError("linear_attention: full kernel of " + std::to_string(n_pts) +
                                "^2 entries exceeds memory budget");
        auto qp = w_q_->forward(u);
        auto kp = w_k_->forward(u);
        auto kn = instance_norm_cols(kp.y);
        auto qr = rope_multi(col_slice(qp.y, head * cfg_.d_k, cfg_.d_k));
        auto kr = rope_multi(col_slice(kn.y, head * cfg_.d_k, cfg_.d_k));
        Matrix a = matmul(qr.y, transpose(kr.y));
        scale_inplace(a, 1.0 / static_cast<double>(n_pts));
        return a;
    }

    // Direct evaluation order (Q~ K~^T) V for the associativity test.
    Matrix forward_direct(const Matrix& u) {
        auto vp = w_v_->forward(u);
        auto vn = instance_norm_cols(vp.y);
        const std::size_t proj = cfg_.heads * cfg_.d_k;
        Matrix z(u.rows(), proj);
        for (std::size_t h = 0; h < cfg_.heads; ++h) {
            Matrix a = full_kernel(u, h);
            Matrix zh = matmul(a, col_slice(vn.y, h * cfg_.d_k, cfg_.d_k));
            col_assign(z, h * cfg_.d_k, zh);
        }
        return out_->forward(z).y;
    }

    void set_memory_budget(std::size_t bytes) { memory_budget_bytes_ = bytes; }

    std::vector<Param*> params() {
        std::vector<Param*> ps;
        for (Linear* l : {w_q_.get(), w_k_.get(), w_v_.get(), out_.get()})
            for (Param* p : l->params()) ps.push_back(p);
        return ps;
    }

private:
    AttentionConfig cfg_;
    std::size_t block_ = 0;
    std::unique_ptr<Linear> w_q_, w_k_, w_v_, out_;
    std::vector<RopeTable> rope_;
    Matrix coords_;
    std::size_t memory_budget_bytes_ = std::size_t(6) << 30;
};

// Raw kernel dump: u32 axis, u32 head, u32 S_m, then S_m*S_m f64 row-major.
inline void write_kernel_dump(const std::string& path, std::uint32_t axis, std::uint32_t head,
                              const Matrix& a) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("write_kernel_dump: cannot open " + path);
    std::uint32_t s = static_cast<std::uint32_t>(a.rows());
    f.write(reinterpret_cast<const char*>(&axis), 4);
    f.write(reinterpret_cast<const char*>(&head), 4);
    f.write(reinterpret_cast<const char*>(&s), 4);
    f.write(reinterpret_cast<const char*>(a.data()), static_cast<std::streamsize>(a.size() * 8));
}

struct KernelDump {
    std::uint32_t axis, head, s;
    Matrix a;
};

inline KernelDump read_kernel_dump(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("read_kernel_dump: cannot open " + path);
    KernelDump d{};
    f.read(reinterpret_cast<char*>(&d.axis), 4);
    f.read(reinterpret_cast<char*>(&d.head), 4);
    f.read(reinterpret_cast<char*>(&d.s), 4);
    if (!f) throw FormatError("read_kernel_dump: truncated header in " + path);
    d.a = Matrix(d.s, d.s);
    f.read(reinterpret_cast<char*>(d.a.data()), static_cast<std::streamsize>(d.a.size() * 8));
    if (!f) throw FormatError("read_kernel_dump: truncated payload in " + path);
    return d;
}

}  // namespace factformer
