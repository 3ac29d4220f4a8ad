#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>

#include "factformer/model.hpp"
#include "helpers.hpp"

using namespace factformer;
using ffhelpers::fd_check_param;
using ffhelpers::Probe;
using ffhelpers::random_tensor;

namespace {

FactFormerConfig tiny_cfg() {
    FactFormerConfig cfg;
    cfg.grid = {3, 3};
    cfg.in_channels = 1;
    cfg.t_in = 2;
    cfg.hidden = 4;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.kernel_dim = 4;
    cfg.march_steps = 2;
    cfg.seed = 5;
    return cfg;
}

std::vector<FieldTensor> random_frames(const FactFormerConfig& cfg, std::size_t count,
                                       Rng& rng) {
    std::vector<std::size_t> shape = cfg.grid;
    shape.push_back(cfg.in_channels);
    std::vector<FieldTensor> out;
    for (std::size_t i = 0; i < count; ++i) out.push_back(random_tensor(shape, rng));
    return out;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

// Sum of probe losses over all predicted frames.
double model_loss(FactFormerModel& model, const std::vector<FieldTensor>& frames,
                  const Probe& probe) {
    auto r = model.forward(frames);
    double loss = 0.0;
    for (const auto& p : r.preds) loss += probe(p);
    return loss;
}

}  // namespace

TEST_CASE("model construction is deterministic in the seed") {
    FactFormerConfig cfg = tiny_cfg();
    FactFormerModel a(cfg), b(cfg);
    auto pa = a.params(), pb = b.params();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        REQUIRE(pa[i]->name == pb[i]->name);
        for (std::size_t j = 0; j < pa[i]->value.size(); ++j)
            REQUIRE(pa[i]->value.buffer()[j] == pb[i]->value.buffer()[j]);
    }
    cfg.seed = 6;
    FactFormerModel c(cfg);
    bool any_diff = false;
    auto pc = c.params();
    for (std::size_t j = 0; j < pa[0]->value.size(); ++j)
        any_diff |= pa[0]->value.buffer()[j] != pc[0]->value.buffer()[j];
    REQUIRE(any_diff);
}

TEST_CASE("full model gradients match finite differences") {
    for (bool pre_pos : {false, true}) {
        FactFormerConfig cfg = tiny_cfg();
        cfg.residual_pre_pos = pre_pos;
        FactFormerModel model(cfg);
        Rng rng(1);
        auto frames = random_frames(cfg, cfg.t_in, rng);
        Probe probe(9);

        auto run = [&] { return model_loss(model, frames, probe); };
        model.zero_grads();
        auto r = model.forward(frames);
        std::vector<FieldTensor> grads;
        std::vector<std::size_t> out_shape = cfg.grid;
        out_shape.push_back(cfg.in_channels);
        for (std::size_t j = 0; j < r.preds.size(); ++j)
            grads.push_back(probe.grad_tensor(out_shape));
        r.backward(grads);

        for (Param* p : model.params()) {
            INFO((pre_pos ? "pre_pos " : "post_pos ") << p->name);
            REQUIRE(fd_check_param(*p, run) < 1e-4);
        }
    }
}

TEST_CASE("per-layer rff encoders get distinct gradients") {
    FactFormerConfig cfg = tiny_cfg();
    cfg.depth = 2;
    cfg.rff_per_layer = true;
    FactFormerModel model(cfg);
    Rng rng(2);
    auto frames = random_frames(cfg, cfg.t_in, rng);
    Probe probe(9);
    model.zero_grads();
    auto r = model.forward(frames);
    std::vector<std::size_t> out_shape = cfg.grid;
    out_shape.push_back(cfg.in_channels);
    std::vector<FieldTensor> grads(r.preds.size(), probe.grad_tensor(out_shape));
    r.backward(grads);
    double n0 = 0.0, n1 = 0.0;
    for (double g : model.rff(0).weight().grad.buffer()) n0 += g * g;
    for (double g : model.rff(1).weight().grad.buffer()) n1 += g * g;
    REQUIRE(n0 > 0.0);
    REQUIRE(n1 > 0.0);
    auto run = [&] {
        auto rr = model.forward(frames);
        double loss = 0.0;
        for (const auto& p : rr.preds) loss += probe(p);
        return loss;
    };
    REQUIRE(fd_check_param(model.rff(0).weight(), run) < 1e-4);
    REQUIRE(fd_check_param(model.rff(1).weight(), run) < 1e-4);
}

TEST_CASE("encode validates frame count and shape") {
    FactFormerConfig cfg = tiny_cfg();
    FactFormerModel model(cfg);
    Rng rng(3);
    auto frames = random_frames(cfg, 1, rng);
    REQUIRE_THROWS_AS(model.encode(frames), ContractViolation);
    auto bad = random_frames(cfg, cfg.t_in, rng);
    bad[1] = random_tensor({3, 3, 2}, rng);
    REQUIRE_THROWS_AS(model.encode(bad), ContractViolation);
}

TEST_CASE("latent march rejects out-of-range steps") {
    FactFormerConfig cfg = tiny_cfg();
    FactFormerModel model(cfg);
    FieldTensor z(model.latent_shape());
    REQUIRE_THROWS_AS(model.latent_march(z, cfg.march_steps), ContractViolation);
}

TEST_CASE("rollout makes one model call per k frames") {
    FactFormerConfig cfg = tiny_cfg();
    FactFormerModel model(cfg);
    Rng rng(4);
    auto frames = random_frames(cfg, cfg.t_in, rng);
    model.reset_call_count();
    auto preds = model.rollout(frames, 6);
    REQUIRE(preds.size() == 6);
    REQUIRE(model.call_count() == 3);
    REQUIRE_THROWS_AS(model.rollout(frames, 5), ContractViolation);
}

TEST_CASE("forward stays finite across seeds") {
    Rng data_rng(5);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        FactFormerConfig cfg = tiny_cfg();
        cfg.seed = seed;
        FactFormerModel model(cfg);
        auto frames = random_frames(cfg, cfg.t_in, data_rng);
        auto r = model.forward(frames);
        for (const auto& p : r.preds)
            for (std::size_t i = 0; i < p.numel(); ++i) REQUIRE(std::isfinite(p[i]));
    }
}

TEST_CASE("checkpoint round trip is byte exact") {
    FactFormerConfig cfg = tiny_cfg();
    cfg.depth = 2;
    FactFormerModel model(cfg);
    Rng rng(6);
    // nudge weights away from init so the round trip is non-trivial
    for (Param* p : model.params())
        for (double& v : p->value.buffer()) v += 0.01 * rng.normal();

    const std::string p1 = "/tmp/ff_ckpt_a.bin", p2 = "/tmp/ff_ckpt_b.bin";
    save_checkpoint(model, p1);
    auto loaded = load_checkpoint(p1);
    save_checkpoint(*loaded, p2);
    REQUIRE(slurp(p1) == slurp(p2));

    auto frames = random_frames(cfg, cfg.t_in, rng);
    auto r1 = model.forward(frames);
    auto r2 = loaded->forward(frames);
    for (std::size_t j = 0; j < r1.preds.size(); ++j)
        for (std::size_t i = 0; i < r1.preds[j].numel(); ++i)
            REQUIRE(r1.preds[j][i] == r2.preds[j][i]);
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("checkpoint loader rejects malformed files") {
    const std::string path = "/tmp/ff_ckpt_bad.bin";
    {
        std::ofstream f(path, std::ios::binary);
        f << "NOTACKPT garbage";
    }
    REQUIRE_THROWS_AS(load_checkpoint(path), FormatError);
    // truncated but valid magic
    FactFormerModel model(tiny_cfg());
    save_checkpoint(model, path);
    std::string full = slurp(path);
    {
        std::ofstream f(path, std::ios::binary);
        f.write(full.data(), static_cast<std::streamsize>(full.size() / 2));
    }
    REQUIRE_THROWS_AS(load_checkpoint(path), FormatError);
    std::remove(path.c_str());
}

TEST_CASE("config map round trip preserves every field") {
    FactFormerConfig cfg = tiny_cfg();
    cfg.lambda = 17.25;
    cfg.residual_pre_pos = true;
    cfg.rff_per_layer = true;
    FactFormerConfig back = config_from_map(config_to_map(cfg));
    REQUIRE(back.grid == cfg.grid);
    REQUIRE(back.in_channels == cfg.in_channels);
    REQUIRE(back.t_in == cfg.t_in);
    REQUIRE(back.hidden == cfg.hidden);
    REQUIRE(back.depth == cfg.depth);
    REQUIRE(back.heads == cfg.heads);
    REQUIRE(back.kernel_dim == cfg.kernel_dim);
    REQUIRE(back.lambda == cfg.lambda);
    REQUIRE(back.march_steps == cfg.march_steps);
    REQUIRE(back.seed == cfg.seed);
    REQUIRE(back.residual_pre_pos == cfg.residual_pre_pos);
    REQUIRE(back.rff_per_layer == cfg.rff_per_layer);
}

TEST_CASE("config validation rejects bad shapes") {
    FactFormerConfig cfg = tiny_cfg();
    cfg.grid = {};
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_cfg();
    cfg.hidden = 5;  // not divisible by heads=2
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_cfg();
    cfg.kernel_dim = 3;
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
}
