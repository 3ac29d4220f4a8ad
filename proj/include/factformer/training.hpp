#pragma once

#include <algorithm>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "factformer/common.hpp"
#include "factformer/layers.hpp"
#include "factformer/model.hpp"
#include "factformer/pde.hpp"
#include "factformer/tensor.hpp"

namespace factformer {

enum class TrainMode { LM, AR };

struct TrainConfig {
    std::size_t iterations = 10000;
    std::size_t batch = 4;
    double max_lr = 3e-4;
    std::size_t lr_period = 10000;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps_opt = 1e-8;
    double weight_decay = 1e-4;
    double pushforward_start = 0.06;  // fraction of total iterations
    std::size_t eval_every = 1000;
    std::size_t eval_horizon = 0;  // 0: use the model's k
    double clip_norm = 1.0;        // 0 disables clipping
    std::uint64_t seed = 0;
    TrainMode mode = TrainMode::LM;

    void validate() const {
        if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0)
            throw ConfigError("train: betas must lie in (0, 1)");
        if (pushforward_start < 0.0 || pushforward_start > 1.0)
            throw ConfigError("train: pushforward_start must lie in [0, 1]");
        if (batch < 1) throw ConfigError("train: batch must be >= 1");
    }
};

// Decoupled-weight-decay Adam update; `step` counts from 1 for bias
// correction. Gradients are zeroed afterwards.
inline void adamw_step(const std::vector<Param*>& params, double lr, const TrainConfig& cfg,
                       std::size_t step) {
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (Param* p : params) {
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double g = p->grad.buffer()[i];
            if (!std::isfinite(g))
                throw DivergenceError("adamw_step: NaN/Inf gradient in " + p->name);
            double& m = p->m1.buffer()[i];
            double& v = p->m2.buffer()[i];
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            double& theta = p->value.buffer()[i];
            theta -= lr * (mhat / (std::sqrt(vhat) + cfg.eps_opt) + cfg.weight_decay * theta);
        }
        p->zero_grad();
    }
}

// Triangular cycle between max_lr/25 and max_lr; one triangle per period;
// clamped to lr_min after the last complete cycle.
inline double cyclic_lr(std::size_t iter, const TrainConfig& cfg) {
    const double lr_min = cfg.max_lr / 25.0;
    const std::size_t period = std::max<std::size_t>(cfg.lr_period, 2);
    const std::size_t complete = cfg.iterations / period;
    if (complete >= 1 && iter >= complete * period) return lr_min;
    const double pos = static_cast<double>(iter % period) / static_cast<double>(period);
    const double tri = pos < 0.5 ? 2.0 * pos : 2.0 * (1.0 - pos);
    return lr_min + (cfg.max_lr - lr_min) * tri;
}

// Curriculum: active march steps ramp 1..k in equal iteration segments;
// pushforward switches on after the configured fraction of training.
inline std::pair<std::size_t, bool> curriculum(std::size_t iter, const TrainConfig& cfg,
                                               std::size_t k) {
    if (cfg.mode == TrainMode::AR) return {1, true};
    const std::size_t total = std::max<std::size_t>(cfg.iterations, 1);
    const std::size_t seg = std::max<std::size_t>(total / k, 1);
    const std::size_t active = std::min(k, iter / seg + 1);
    const bool pf = static_cast<double>(iter) >=
                    cfg.pushforward_start * static_cast<double>(total);
    return {active, pf};
}

// Mean per-frame relative-L2 loss of a k'-step forward call against the true
// frames; gradients accumulate into the model.
inline double step_loss(FactFormerModel& model, const std::vector<FieldTensor>& window,
                        std::size_t k_steps) {
    const std::size_t t_in = model.config().t_in;
    if (window.size() < t_in + k_steps)
        throw ContractViolation("step_loss: window too short");
    std::vector<FieldTensor> ctx(window.begin(), window.begin() + t_in);
    auto r = model.forward_steps(ctx, k_steps);
    double loss = 0.0;
    std::vector<FieldTensor> grads;
    for (std::size_t j = 0; j < k_steps; ++j) {
        const FieldTensor& truth = window[t_in + j];
        loss += relative_l2(r.preds[j], truth);
        FieldTensor g = relative_l2_grad(r.preds[j], truth);
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] /= static_cast<double>(k_steps);
        grads.push_back(std::move(g));
    }
    r.backward(grads);
    return loss / static_cast<double>(k_steps);
}

// Two-step rollout with gradients flowing only through the second call: the
// first call's predictions are frozen and become the second call's context.
inline double pushforward_loss(FactFormerModel& model, const std::vector<FieldTensor>& window,
                               std::size_t k_steps) {
    const std::size_t t_in = model.config().t_in;
    if (window.size() < t_in + 2 * k_steps)
        throw ContractViolation("pushforward_loss: window needs t_in + 2k frames");
    std::vector<FieldTensor> ctx(window.begin(), window.begin() + t_in);
    auto first = model.forward_steps(ctx, k_steps);  // backward never invoked: frozen

    std::vector<FieldTensor> ctx2(ctx.begin(), ctx.end());
    for (auto& p : first.preds) ctx2.push_back(p);
    std::vector<FieldTensor> ctx2_tail(ctx2.end() - static_cast<std::ptrdiff_t>(t_in), ctx2.end());

    auto second = model.forward_steps(ctx2_tail, k_steps);
    double loss = 0.0;
    std::vector<FieldTensor> grads;
    for (std::size_t j = 0; j < k_steps; ++j) {
        const FieldTensor& truth = window[t_in + k_steps + j];
        loss += relative_l2(second.preds[j], truth);
        FieldTensor g = relative_l2_grad(second.preds[j], truth);
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] /= static_cast<double>(k_steps);
        grads.push_back(std::move(g));
    }
    second.backward(grads);
    return loss / static_cast<double>(k_steps);
}

inline double global_grad_norm(const std::vector<Param*>& params) {
    double s = 0.0;
    for (Param* p : params)
        for (double g : p->grad.buffer()) s += g * g;
    return std::sqrt(s);
}

inline void clip_gradients(const std::vector<Param*>& params, double max_norm) {
    if (max_norm <= 0.0) return;
    const double norm = global_grad_norm(params);
    if (norm <= max_norm || norm == 0.0) return;
    const double scale = max_norm / norm;
    for (Param* p : params)
        for (double& g : p->grad.buffer()) g *= scale;
}

// Per-frame rollout error against a set of trajectories. Returns per-frame
// mean and stddev of the relative L2 error across trajectories.
struct EvalResult {
    std::vector<double> mean;
    std::vector<double> stddev;
};

inline EvalResult evaluate_rollout(FactFormerModel& model,
                                   const std::vector<TrajectoryDataset>& trajs,
                                   std::size_t horizon) {
    const std::size_t t_in = model.config().t_in;
    std::vector<std::vector<double>> per_frame(horizon);
    for (const auto& traj : trajs) {
        if (traj.frames.size() < t_in + horizon)
            throw ContractViolation("evaluate_rollout: trajectory shorter than horizon");
        std::vector<FieldTensor> ctx(traj.frames.begin(), traj.frames.begin() + t_in);
        auto preds = model.rollout(ctx, horizon);
        for (std::size_t j = 0; j < horizon; ++j)
            per_frame[j].push_back(relative_l2(preds[j], traj.frames[t_in + j]));
    }
    EvalResult r;
    for (auto& fr : per_frame) {
        double mu = 0.0;
        for (double v : fr) mu += v;
        mu /= static_cast<double>(fr.size());
        double var = 0.0;
        for (double v : fr) var += (v - mu) * (v - mu);
        var /= static_cast<double>(fr.size());
        r.mean.push_back(mu);
        r.stddev.push_back(std::sqrt(var));
    }
    return r;
}

// Persistence baseline: repeat the last context frame for every step.
inline EvalResult evaluate_persistence(const std::vector<TrajectoryDataset>& trajs,
                                       std::size_t t_in, std::size_t horizon) {
    std::vector<std::vector<double>> per_frame(horizon);
    for (const auto& traj : trajs) {
        const FieldTensor& last_ctx = traj.frames[t_in - 1];
        for (std::size_t j = 0; j < horizon; ++j)
            per_frame[j].push_back(relative_l2(last_ctx, traj.frames[t_in + j]));
    }
    EvalResult r;
    for (auto& fr : per_frame) {
        double mu = 0.0;
        for (double v : fr) mu += v;
        mu /= static_cast<double>(fr.size());
        double var = 0.0;
        for (double v : fr) var += (v - mu) * (v - mu);
        var /= static_cast<double>(fr.size());
        r.mean.push_back(mu);
        r.stddev.push_back(std::sqrt(var));
    }
    return r;
}

struct TrainResult {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::size_t steps_run = 0;
    bool diverged = false;
};

// The training loop: sample window -> per-step or pushforward loss ->
// gradient clip -> AdamW with cyclic LR. Emits flushed CSV rows.
inline TrainResult train(FactFormerModel& model, const std::vector<TrajectoryDataset>& dataset,
                         const TrainConfig& cfg, std::ostream& metrics_csv,
                         std::ostream* eval_csv = nullptr,
                         const std::vector<TrajectoryDataset>* eval_set = nullptr,
                         const std::string& checkpoint_path = "") {
    cfg.validate();
    if (dataset.empty()) throw ContractViolation("train: empty dataset");
    const std::size_t k = model.config().march_steps;
    const std::size_t t_in = model.config().t_in;
    auto params = model.params();
    Rng rng(cfg.seed);
    metrics_csv << "iter,lr,train_loss\n" << std::flush;
    if (eval_csv) *eval_csv << "iter,frame,rel_l2\n" << std::flush;

    TrainResult result;
    for (std::size_t iter = 0; iter < cfg.iterations; ++iter) {
        auto [k_active, pf_enabled] = curriculum(iter, cfg, k);
        const bool use_pf = cfg.mode == TrainMode::AR ? pf_enabled
                                                      : (pf_enabled && iter % 2 == 1);
        const std::size_t need = t_in + (use_pf ? 2 * k_active : k_active);

        model.zero_grads();
        double loss = 0.0;
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            const std::size_t ti =
                std::min(dataset.size() - 1,
                         static_cast<std::size_t>(rng.uniform() * dataset.size()));
            const auto& traj = dataset[ti];
            if (traj.frames.size() < need)
                throw ContractViolation("train: trajectory shorter than training window");
            const std::size_t max_start = traj.frames.size() - need;
            const std::size_t start = std::min(
                max_start, static_cast<std::size_t>(rng.uniform() * (max_start + 1)));
            std::vector<FieldTensor> window(traj.frames.begin() + start,
                                            traj.frames.begin() + start + need);
            loss += use_pf ? pushforward_loss(model, window, k_active)
                           : step_loss(model, window, k_active);
        }
        loss /= static_cast<double>(cfg.batch);
        for (Param* p : params)
            for (double& g : p->grad.buffer()) g /= static_cast<double>(cfg.batch);

        if (!std::isfinite(loss)) {
            result.diverged = true;
            result.steps_run = iter;
            throw DivergenceError("train: loss diverged at iteration " + std::to_string(iter));
        }
        if (iter == 0) result.initial_loss = loss;
        result.final_loss = loss;

        clip_gradients(params, cfg.clip_norm);
        const double lr = cyclic_lr(iter, cfg);
        adamw_step(params, lr, cfg, iter + 1);

        metrics_csv << iter << "," << lr << "," << loss << "\n" << std::flush;

        if (eval_csv && eval_set && !eval_set->empty() && cfg.eval_every > 0 &&
            (iter + 1) % cfg.eval_every == 0) {
            const std::size_t horizon = cfg.eval_horizon ? cfg.eval_horizon : k;
            auto ev = evaluate_rollout(model, *eval_set, horizon);
            for (std::size_t j = 0; j < ev.mean.size(); ++j)
                *eval_csv << iter << "," << j << "," << ev.mean[j] << "\n" << std::flush;
        }
        if (!checkpoint_path.empty() && cfg.eval_every > 0 && (iter + 1) % cfg.eval_every == 0)
            save_checkpoint(model, checkpoint_path);
        ++result.steps_run;
    }
    return result;
}

}  // namespace factformer
