#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "factformer/alloc_tracker.hpp"
#include "factformer/attention.hpp"
#include "factformer/common.hpp"
#include "factformer/model.hpp"
#include "factformer/pde.hpp"
#include "factformer/tensor.hpp"

namespace factformer {

// ---------------------------------------------------------------------------
// SVD

// Singular values of A by one-sided Jacobi iteration on the columns of the
// taller orientation. Intended for matrices up to ~512 on a side.
inline std::vector<double> jacobi_singular_values(const Matrix& a_in, std::size_t max_sweeps = 60,
                                                  double tol = 1e-14) {
    Matrix a = a_in.rows() >= a_in.cols() ? a_in : transpose(a_in);
    const std::size_t m = a.rows(), n = a.cols();
    for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p + 1 < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    alpha += a(i, p) * a(i, p);
                    beta += a(i, q) * a(i, q);
                    gamma += a(i, p) * a(i, q);
                }
                if (alpha == 0.0 || beta == 0.0) continue;
                off = std::max(off, std::abs(gamma) / std::sqrt(alpha * beta));
                if (std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double ap = a(i, p), aq = a(i, q);
                    a(i, p) = c * ap - s * aq;
                    a(i, q) = s * ap + c * aq;
                }
            }
        if (off <= tol) {
            std::vector<double> sv(n);
            for (std::size_t j = 0; j < n; ++j) {
                double sq = 0.0;
                for (std::size_t i = 0; i < m; ++i) sq += a(i, j) * a(i, j);
                sv[j] = std::sqrt(sq);
            }
            std::sort(sv.begin(), sv.end(), std::greater<double>());
            return sv;
        }
    }
    // residual: report the largest remaining normalized off-diagonal
    double worst = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p)
        for (std::size_t q = p + 1; q < n; ++q) {
            double alpha = 0.0, beta = 0.0, gamma = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
                alpha += a(i, p) * a(i, p);
                beta += a(i, q) * a(i, q);
                gamma += a(i, p) * a(i, q);
            }
            if (alpha > 0.0 && beta > 0.0)
                worst = std::max(worst, std::abs(gamma) / std::sqrt(alpha * beta));
        }
    throw NumericalError("jacobi_singular_values: no convergence after " +
                         std::to_string(max_sweeps) + " sweeps, residual " +
                         std::to_string(worst));
}

namespace detail {

// Modified Gram-Schmidt, in place; zero columns are left zero.
inline void orthonormalize_cols(Matrix& q) {
    for (std::size_t j = 0; j < q.cols(); ++j) {
        for (std::size_t p = 0; p < j; ++p) {
            double dot = 0.0;
            for (std::size_t i = 0; i < q.rows(); ++i) dot += q(i, p) * q(i, j);
            for (std::size_t i = 0; i < q.rows(); ++i) q(i, j) -= dot * q(i, p);
        }
        double nrm = 0.0;
        for (std::size_t i = 0; i < q.rows(); ++i) nrm += q(i, j) * q(i, j);
        nrm = std::sqrt(nrm);
        if (nrm > 1e-300)
            for (std::size_t i = 0; i < q.rows(); ++i) q(i, j) /= nrm;
    }
}

}  // namespace detail

// Top-r singular values via a randomized range finder: oversampling 8, 10
// power iterations, deterministic test matrix.
inline std::vector<double> randomized_singular_values(const Matrix& a, std::size_t r,
                                                      std::uint64_t seed = 7) {
    const std::size_t over = 8, power_iters = 10;
    const std::size_t l = std::min(r + over, std::min(a.rows(), a.cols()));
    Rng rng(seed);
    Matrix omega(a.cols(), l);
    for (double& v : omega.buffer()) v = rng.normal();
    Matrix at = transpose(a);
    Matrix y = matmul(a, omega);
    detail::orthonormalize_cols(y);
    for (std::size_t it = 0; it < power_iters; ++it) {
        Matrix z = matmul(at, y);
        detail::orthonormalize_cols(z);
        y = matmul(a, z);
        detail::orthonormalize_cols(y);
    }
    Matrix b = matmul(transpose(y), a);  // l x n
    std::vector<double> sv = jacobi_singular_values(b);
    if (sv.size() > r) sv.resize(r);
    return sv;
}

// Cumulative-energy report of a (possibly truncated) singular spectrum.
struct SpectrumReport {
    std::size_t layer = 0, head = 0, axis = 0;
    bool truncated = false;
    std::vector<double> singular_values;  // descending
    std::vector<double> cumulative;       // b_k
    std::size_t k90 = 0;                  // smallest k with b_k >= 0.9 (1-based)
};

inline SpectrumReport svd_spectrum(const Matrix& a, std::optional<std::size_t> truncate = {}) {
    if (!a.all_finite()) throw ContractViolation("svd_spectrum: non-finite matrix");
    SpectrumReport rep;
    if (truncate) {
        if (*truncate > std::min(a.rows(), a.cols()))
            throw ContractViolation("svd_spectrum: truncation rank exceeds matrix size");
        rep.truncated = true;
        rep.singular_values = randomized_singular_values(a, *truncate);
    } else {
        if (std::min(a.rows(), a.cols()) > 512)
            throw ResourceError("svd_spectrum: full SVD capped at 512; use truncation");
        rep.singular_values = jacobi_singular_values(a);
    }
    double total = 0.0;
    for (double s : rep.singular_values) total += s;
    double run = 0.0;
    rep.k90 = rep.singular_values.size();
    for (std::size_t i = 0; i < rep.singular_values.size(); ++i) {
        run += rep.singular_values[i];
        rep.cumulative.push_back(total > 0.0 ? run / total : 0.0);
        if (rep.cumulative.back() >= 0.9 && rep.k90 == rep.singular_values.size() &&
            total > 0.0 && (i + 1 < rep.k90))
            rep.k90 = i + 1;
    }
    if (total == 0.0) rep.k90 = 0;  // degenerate: rank 0
    return rep;
}

// Averaged cumulative-energy histograms of the axial kernels of a model, per
// layer and axis, over heads and dataset samples.
struct SpectrumSweepRow {
    std::size_t layer, axis;
    std::vector<double> b;  // averaged b_k
    std::size_t k90;
};

inline std::vector<SpectrumSweepRow> attention_spectrum_sweep(
    FactFormerModel& model, const std::vector<TrajectoryDataset>& dataset, std::size_t samples) {
    if (dataset.empty()) throw ContractViolation("spectrum sweep: empty dataset");
    const auto& cfg = model.config();
    std::vector<SpectrumSweepRow> rows;
    std::vector<std::vector<std::vector<double>>> acc(cfg.depth);  // [layer][axis] -> sum b
    std::vector<std::vector<std::size_t>> counts(cfg.depth);
    for (std::size_t l = 0; l < cfg.depth; ++l) {
        acc[l].resize(cfg.n());
        counts[l].assign(cfg.n(), 0);
        for (std::size_t m = 0; m < cfg.n(); ++m) acc[l][m].assign(cfg.grid[m], 0.0);
    }
    Matrix coords = grid_coords(cfg.grid);
    for (std::size_t s = 0; s < samples; ++s) {
        const auto& traj = dataset[s % dataset.size()];
        std::vector<FieldTensor> ctx(traj.frames.begin(), traj.frames.begin() + cfg.t_in);
        auto enc = model.encode(ctx);
        FieldTensor z = enc.latent;
        for (std::size_t l = 0; l < cfg.depth; ++l) {
            auto psi = model.rff(cfg.rff_per_layer ? l : 0).forward(coords);
            z = add(z, FieldTensor::from_matrix(psi.y, model.latent_shape()));
            auto& att = model.block(l).attention();
            AxialKernelSet ks = att.compute_kernels(z);
            for (std::size_t m = 0; m < cfg.n(); ++m)
                for (std::size_t h = 0; h < cfg.heads; ++h) {
                    SpectrumReport rep = svd_spectrum(ks.kernels[m][h]);
                    for (std::size_t i = 0; i < rep.cumulative.size(); ++i)
                        acc[l][m][i] += rep.cumulative[i];
                    ++counts[l][m];
                }
            z = model.block(l).forward(z).y;
            if (cfg.residual_pre_pos)
                for (std::size_t q = 0; q < z.numel(); ++q)
                    z[q] -= psi.y.buffer()[q];
        }
    }
    for (std::size_t l = 0; l < cfg.depth; ++l)
        for (std::size_t m = 0; m < cfg.n(); ++m) {
            SpectrumSweepRow row{l, m, {}, 0};
            for (double v : acc[l][m])
                row.b.push_back(v / static_cast<double>(std::max<std::size_t>(counts[l][m], 1)));
            row.k90 = row.b.size();
            for (std::size_t i = 0; i < row.b.size(); ++i)
                if (row.b[i] >= 0.9) {
                    row.k90 = i + 1;
                    break;
                }
            rows.push_back(std::move(row));
        }
    return rows;
}

// ---------------------------------------------------------------------------
// Benchmarks

inline double now_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

struct BenchRow {
    std::string mechanism;
    std::size_t grid_size = 0;
    std::size_t d_k = 0;
    double enc_time = 0.0;       // forward only
    double fwd_bwd_time = 0.0;   // forward + backward
    std::size_t peak_bytes = 0;
    std::uint64_t mul_adds = 0;
};

inline FieldTensor random_field(const std::vector<std::size_t>& shape, Rng& rng) {
    FieldTensor t(shape);
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal();
    return t;
}

// Forward / forward+backward cost of one factorized attention layer.
inline BenchRow bench_factorized(const AttentionConfig& cfg, std::size_t reps,
                                 std::size_t warmups = 3) {
    Rng rng(11);
    FactorizedAttention att("bench", cfg);
    att.init(rng);
    std::vector<std::size_t> shape = cfg.grid;
    shape.push_back(cfg.d);
    FieldTensor u = random_field(shape, rng);
    FieldTensor ones(shape);
    for (std::size_t i = 0; i < ones.numel(); ++i) ones[i] = 1.0;

    auto run_fwd = [&] { return att.forward(u); };
    for (std::size_t w = 0; w < warmups; ++w) (void)run_fwd();

    std::vector<double> fwd_times, fb_times;
    alloctrack::reset_peak();
    const std::size_t base_bytes = alloctrack::live_bytes();
    op_counters().reset();
    for (std::size_t r = 0; r < reps; ++r) {
        double t0 = now_seconds();
        auto res = run_fwd();
        fwd_times.push_back(now_seconds() - t0);
        t0 = now_seconds();
        auto res2 = att.forward(u);
        res2.backward(ones);
        fb_times.push_back(fwd_times.back() + (now_seconds() - t0));
    }
    BenchRow row{"factorized", cfg.grid[0], cfg.d_k, median(fwd_times), median(fb_times),
                 alloctrack::peak_bytes() > base_bytes ? alloctrack::peak_bytes() - base_bytes : 0,
                 op_counters().total / (2 * reps)};
    return row;
}

inline BenchRow bench_linear(const AttentionConfig& cfg, std::size_t reps,
                             std::size_t warmups = 3) {
    Rng rng(11);
    LinearAttention att("bench", cfg);
    att.init(rng);
    const std::size_t n_pts = cfg.n_points();
    Matrix u(n_pts, cfg.d);
    for (double& v : u.buffer()) v = rng.normal();
    Matrix ones(n_pts, cfg.d);
    for (double& v : ones.buffer()) v = 1.0;

    for (std::size_t w = 0; w < warmups; ++w) (void)att.forward(u);

    std::vector<double> fwd_times, fb_times;
    alloctrack::reset_peak();
    const std::size_t base_bytes = alloctrack::live_bytes();
    op_counters().reset();
    for (std::size_t r = 0; r < reps; ++r) {
        double t0 = now_seconds();
        auto res = att.forward(u);
        fwd_times.push_back(now_seconds() - t0);
        t0 = now_seconds();
        auto res2 = att.forward(u);
        res2.backward(ones);
        fb_times.push_back(fwd_times.back() + (now_seconds() - t0));
    }
    BenchRow row{"linear", cfg.grid[0], cfg.d_k, median(fwd_times), median(fb_times),
                 alloctrack::peak_bytes() > base_bytes ? alloctrack::peak_bytes() - base_bytes : 0,
                 op_counters().total / (2 * reps)};
    return row;
}

// Time to build the per-axis kernel matrices (RoPE + Q~ K~^T, all heads, both
// axes) on a 2-D S x S grid, from pre-projected Q/K. Repeats until the
// measured span exceeds ~10 ms for timer stability.
inline double time_factorized_kernel_construction(std::size_t s, std::size_t d_k,
                                                  std::size_t heads, double lambda = 64.0) {
    Rng rng(5);
    RopeTable table(d_k, lambda);
    auto coords = axis_coords(s);
    std::vector<Matrix> qs, ks;
    for (std::size_t h = 0; h < 2 * heads; ++h) {
        Matrix q(s, d_k);
        for (double& v : q.buffer()) v = rng.normal();
        qs.push_back(q);
        Matrix k(s, d_k);
        for (double& v : k.buffer()) v = rng.normal();
        ks.push_back(k);
    }
    auto build_all = [&] {
        double sink = 0.0;
        for (std::size_t h = 0; h < 2 * heads; ++h) {
            auto qr = rope_encode(qs[h], coords, table);
            auto kr = rope_encode(ks[h], coords, table);
            Matrix a = matmul(qr.y, transpose(kr.y));
            scale_inplace(a, 1.0 / static_cast<double>(s));
            sink += a(0, 0);
        }
        return sink;
    };
    (void)build_all();  // warmup
    std::size_t inner = 1;
    double elapsed = 0.0;
    volatile double guard = 0.0;
    for (;;) {
        const double t0 = now_seconds();
        for (std::size_t r = 0; r < inner; ++r) guard = guard + build_all();
        elapsed = now_seconds() - t0;
        if (elapsed > 0.01 || inner > (1u << 20)) break;
        inner *= 4;
    }
    (void)guard;
    return elapsed / static_cast<double>(inner);
}

// Time to materialize the full N x N kernel Q~ K~^T of the flattened 2-D grid
// in row blocks (every entry computed, blocks discarded). Skips configs whose
// multiply-add count exceeds the budget.
inline std::optional<double> time_full_kernel_materialization(
    std::size_t s, std::size_t d_k, double lambda = 64.0,
    std::uint64_t muladd_budget = 60'000'000'000ULL, std::ostream* log = nullptr) {
    const std::size_t n_pts = s * s;
    const std::uint64_t cost = static_cast<std::uint64_t>(n_pts) * n_pts * d_k;
    if (cost > muladd_budget) {
        if (log)
            *log << "full-kernel S=" << s << " skipped: " << cost
                 << " mul-adds exceed budget " << muladd_budget << "\n";
        return std::nullopt;
    }
    Rng rng(5);
    std::vector<std::size_t> grid{s, s};
    Matrix coords = grid_coords(grid);
    if (d_k % 4 != 0) throw ConfigError("full kernel timing: d_k must split into 2 even blocks");
    const std::size_t blk = d_k / 2;
    RopeTable table(blk, lambda);
    Matrix q(n_pts, d_k), k(n_pts, d_k);
    for (double& v : q.buffer()) v = rng.normal();
    for (double& v : k.buffer()) v = rng.normal();
    // RoPE both (per-axis blocks), then blocked product
    auto rope_all = [&](const Matrix& x) {
        Matrix y(n_pts, d_k);
        for (std::size_t m = 0; m < 2; ++m) {
            std::vector<double> c(n_pts);
            for (std::size_t i = 0; i < n_pts; ++i) c[i] = coords(i, m);
            auto r = rope_encode(col_slice(x, m * blk, blk), c, table);
            col_assign(y, m * blk, r.y);
        }
        return y;
    };
    const double t0 = now_seconds();
    Matrix qr = rope_all(q);
    Matrix kr_t = transpose(rope_all(k));
    const std::size_t row_block = 512;
    volatile double guard = 0.0;
    for (std::size_t start = 0; start < n_pts; start += row_block) {
        const std::size_t rows = std::min(row_block, n_pts - start);
        Matrix qb(rows, d_k);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < d_k; ++j) qb(i, j) = qr(start + i, j);
        Matrix ab = matmul(qb, kr_t);
        scale_inplace(ab, 1.0 / static_cast<double>(n_pts));
        guard = guard + ab(0, 0);
    }
    (void)guard;
    return now_seconds() - t0;
}

// Least-squares slope of log(y) vs log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2)
        throw ContractViolation("loglog_slope: need >= 2 points");
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    const double n = static_cast<double>(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double lx = std::log(x[i]), ly = std::log(y[i]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace factformer
