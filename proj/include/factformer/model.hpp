#pragma once

#include <cstring>
#include <deque>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "factformer/attention.hpp"
#include "factformer/common.hpp"
#include "factformer/layers.hpp"
#include "factformer/tensor.hpp"

namespace factformer {

struct FactFormerConfig {
    std::vector<std::size_t> grid;  // S_1..S_n
    std::size_t in_channels = 1;
    std::size_t t_in = 2;       // context frames
    std::size_t hidden = 32;    // d
    std::size_t depth = 2;
    std::size_t heads = 4;
    std::size_t kernel_dim = 8; // d_k per head
    double lambda = 64.0;
    std::size_t march_steps = 1;  // k
    std::uint64_t seed = 0;
    bool residual_pre_pos = false;
    bool rff_per_layer = false;

    std::size_t n() const { return grid.size(); }
    std::size_t n_points() const {
        std::size_t p = 1;
        for (std::size_t s : grid) p *= s;
        return p;
    }

    void validate() const {
        if (grid.empty() || grid.size() > 3) throw ConfigError("config: n must be 1..3");
        if (depth < 1) throw ConfigError("config: depth must be >= 1");
        if (march_steps < 1) throw ConfigError("config: march_steps must be >= 1");
        if (hidden == 0 || heads == 0 || hidden % heads != 0)
            throw ConfigError("config: hidden must be divisible by heads");
        if (kernel_dim % 2 != 0) throw ConfigError("config: kernel_dim must be even");
        if (t_in < 1 || in_channels < 1) throw ConfigError("config: t_in and channels >= 1");
    }

    AttentionConfig attention_config() const {
        AttentionConfig a;
        a.grid = grid;
        a.d = hidden;
        a.heads = heads;
        a.d_k = kernel_dim;
        a.lambda = lambda;
        return a;
    }
};

class FactFormerModel {
public:
    explicit FactFormerModel(const FactFormerConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(cfg_.seed);
        encoder_ = std::make_unique<Linear>("encoder", cfg_.t_in * cfg_.in_channels, cfg_.hidden);
        encoder_->init(rng);
        const std::size_t n_rff = (cfg_.rff_per_layer ? cfg_.depth : 1);
        for (std::size_t i = 0; i < n_rff; ++i)
            rff_.push_back(std::make_unique<RffEncoder>("rff" + std::to_string(i), cfg_.n(),
                                                        cfg_.hidden / 2, cfg_.hidden, 1.0, rng));
        for (std::size_t i = 0; i < cfg_.depth; ++i) {
            blocks_.push_back(std::make_unique<AttentionBlock>("block" + std::to_string(i),
                                                               cfg_.attention_config()));
            blocks_.back()->init(rng);
        }
        eps_ = std::make_unique<Mlp>("eps", cfg_.hidden + 1, cfg_.hidden, cfg_.hidden);
        eps_->init(rng);
        decoder_ = std::make_unique<Mlp>("decoder", cfg_.hidden, cfg_.hidden, cfg_.in_channels);
        decoder_->init(rng);
        coords_ = grid_coords(cfg_.grid);
    }

    const FactFormerConfig& config() const { return cfg_; }

    std::vector<Param*> params() {
        std::vector<Param*> ps;
        for (Param* p : encoder_->params()) ps.push_back(p);
        for (auto& r : rff_)
            for (Param* p : r->params()) ps.push_back(p);
        for (auto& b : blocks_)
            for (Param* p : b->params()) ps.push_back(p);
        for (Param* p : eps_->params()) ps.push_back(p);
        for (Param* p : decoder_->params()) ps.push_back(p);
        return ps;
    }

    void zero_grads() {
        for (Param* p : params()) p->zero_grad();
    }

    std::size_t param_count() {
        std::size_t n = 0;
        for (Param* p : params()) n += p->value.size();
        return n;
    }

    struct EncodeResult {
        FieldTensor latent;
        std::function<void(const FieldTensor&)> backward;  // grads to encoder params
    };

    // Stacks T_in frames channel-wise and applies the pointwise temporal mix.
    EncodeResult encode(const std::vector<FieldTensor>& frames) {
        if (frames.size() != cfg_.t_in)
            throw ContractViolation("encode: expected " + std::to_string(cfg_.t_in) +
                                    " frames, got " + std::to_string(frames.size()));
        const std::size_t n_pts = cfg_.n_points(), c = cfg_.in_channels;
        Matrix stacked(n_pts, cfg_.t_in * c);
        for (std::size_t f = 0; f < frames.size(); ++f) {
            if (frames[f].spatial_count() != n_pts || frames[f].channels() != c)
                throw ContractViolation("encode: frame " + std::to_string(f) +
                                        " grid/channel mismatch");
            for (std::size_t p = 0; p < n_pts; ++p)
                for (std::size_t ch = 0; ch < c; ++ch)
                    stacked(p, f * c + ch) = frames[f][p * c + ch];
        }
        auto r = encoder_->forward(stacked);
        auto shape = latent_shape();
        auto bwd = r.backward;
        return {FieldTensor::from_matrix(r.y, shape),
                [bwd](const FieldTensor& g) { (void)bwd(g.as_matrix()); }};
    }

    // One residual step of the latent propagator: z + eps([z; tau]).
    TensorResult latent_march(const FieldTensor& z, std::size_t step) {
        if (step >= cfg_.march_steps)
            throw ContractViolation("latent_march: step " + std::to_string(step) + " >= k=" +
                                    std::to_string(cfg_.march_steps));
        const double tau = static_cast<double>(step) / static_cast<double>(cfg_.march_steps);
        const std::size_t n_pts = z.spatial_count(), d = cfg_.hidden;
        Matrix x(n_pts, d + 1);
        for (std::size_t p = 0; p < n_pts; ++p) {
            for (std::size_t ch = 0; ch < d; ++ch) x(p, ch) = z[p * d + ch];
            x(p, d) = tau;
        }
        auto r = eps_->forward(x);
        FieldTensor y = add(FieldTensor::from_matrix(r.y, z.shape()), z);
        auto bwd = r.backward;
        auto shape = z.shape();
        return {std::move(y), [bwd, shape, d, n_pts](const FieldTensor& g) {
                    Matrix gx = bwd(g.as_matrix());
                    FieldTensor gz = g;  // residual path
                    for (std::size_t p = 0; p < n_pts; ++p)
                        for (std::size_t ch = 0; ch < d; ++ch) gz[p * d + ch] += gx(p, ch);
                    return gz;
                }};
    }

    struct ForwardResult {
        std::vector<FieldTensor> preds;  // k frames of in_channels each
        // One gradient tensor per predicted frame; accumulates into all params.
        std::function<void(const std::vector<FieldTensor>&)> backward;
    };

    ForwardResult forward(const std::vector<FieldTensor>& frames) {
        return forward_steps(frames, cfg_.march_steps);
    }

    ForwardResult forward_steps(const std::vector<FieldTensor>& frames, std::size_t k_steps) {
        if (k_steps < 1 || k_steps > cfg_.march_steps)
            throw ContractViolation("forward: step count out of range");
        ++call_count_;
        auto enc = encode(frames);
        FieldTensor z = enc.latent;
        auto latent_sh = latent_shape();

        struct LayerTape {
            MatBackward psi_bwd;
            TensorBackward block_bwd;
        };
        auto layers = std::make_shared<std::vector<LayerTape>>();
        auto psi_tensors = std::make_shared<std::vector<FieldTensor>>();
        for (std::size_t i = 0; i < cfg_.depth; ++i) {
            RffEncoder& rff = cfg_.rff_per_layer ? *rff_[i] : *rff_[0];
            auto psi = rff.forward(coords_);
            FieldTensor psi_t = FieldTensor::from_matrix(psi.y, latent_sh);
            z = add(z, psi_t);
            auto blk = blocks_[i]->forward(z);
            z = blk.y;
            if (cfg_.residual_pre_pos)
                for (std::size_t q = 0; q < z.numel(); ++q) z[q] -= psi_t[q];
            layers->push_back({psi.backward, blk.backward});
            psi_tensors->push_back(std::move(psi_t));
        }

        struct StepTape {
            TensorBackward march_bwd;
            MatBackward dec_bwd;
        };
        auto steps = std::make_shared<std::vector<StepTape>>();
        std::vector<FieldTensor> preds;
        std::vector<std::size_t> out_shape = cfg_.grid;
        out_shape.push_back(cfg_.in_channels);
        for (std::size_t j = 0; j < k_steps; ++j) {
            auto m = latent_march(z, j);
            z = m.y;
            auto dec = decoder_->forward(z.as_matrix());
            preds.push_back(FieldTensor::from_matrix(dec.y, out_shape));
            steps->push_back({m.backward, dec.backward});
        }

        auto enc_bwd = enc.backward;
        const bool pre_pos = cfg_.residual_pre_pos;
        auto backward = [layers, steps, enc_bwd, latent_sh, pre_pos,
                         k_steps](const std::vector<FieldTensor>& grad_preds) {
            if (grad_preds.size() != k_steps)
                throw ContractViolation("model backward: need one gradient per predicted frame");
            FieldTensor gz(latent_sh);
            for (std::size_t j = k_steps; j-- > 0;) {
                Matrix gd = (*steps)[j].dec_bwd(grad_preds[j].as_matrix());
                FieldTensor gdt = FieldTensor::from_matrix(gd, latent_sh);
                gz = add(gz, gdt);
                gz = (*steps)[j].march_bwd(gz);
            }
            for (std::size_t i = layers->size(); i-- > 0;) {
                if (pre_pos) {
                    // skip was taken from the pre-psi value: psi cancels in the
                    // residual branch, so it only feeds the attention path.
                    FieldTensor g_in = (*layers)[i].block_bwd(gz);
                    Matrix gpsi = g_in.as_matrix();
                    for (std::size_t q = 0; q < gpsi.size(); ++q)
                        gpsi.buffer()[q] -= gz.buffer()[q];
                    (void)(*layers)[i].psi_bwd(gpsi);
                    gz = g_in;
                } else {
                    FieldTensor g_in = (*layers)[i].block_bwd(gz);
                    (void)(*layers)[i].psi_bwd(g_in.as_matrix());
                    gz = g_in;
                }
            }
            enc_bwd(gz);
        };
        return {std::move(preds), std::move(backward)};
    }

    // Autoregressive rollout: re-feeds its own predictions, one forward call
    // per k frames.
    std::vector<FieldTensor> rollout(const std::vector<FieldTensor>& frames, std::size_t horizon) {
        if (horizon % cfg_.march_steps != 0)
            throw ContractViolation("rollout: horizon " + std::to_string(horizon) +
                                    " not a multiple of k=" + std::to_string(cfg_.march_steps));
        std::deque<FieldTensor> window(frames.begin(), frames.end());
        std::vector<FieldTensor> out;
        const std::size_t calls = horizon / cfg_.march_steps;
        for (std::size_t c = 0; c < calls; ++c) {
            std::vector<FieldTensor> ctx(window.begin(), window.end());
            auto r = forward(ctx);
            for (auto& p : r.preds) {
                window.push_back(p);
                while (window.size() > cfg_.t_in) window.pop_front();
                out.push_back(std::move(p));
            }
        }
        return out;
    }

    std::size_t call_count() const { return call_count_; }
    void reset_call_count() { call_count_ = 0; }

    Mlp& propagator() { return *eps_; }
    Mlp& decoder() { return *decoder_; }
    Linear& encoder() { return *encoder_; }
    AttentionBlock& block(std::size_t i) { return *blocks_[i]; }
    RffEncoder& rff(std::size_t i = 0) { return *rff_[i]; }

    std::vector<std::size_t> latent_shape() const {
        std::vector<std::size_t> s = cfg_.grid;
        s.push_back(cfg_.hidden);
        return s;
    }

private:
    FactFormerConfig cfg_;
    std::unique_ptr<Linear> encoder_;
    std::vector<std::unique_ptr<RffEncoder>> rff_;
    std::vector<std::unique_ptr<AttentionBlock>> blocks_;
    std::unique_ptr<Mlp> eps_;
    std::unique_ptr<Mlp> decoder_;
    Matrix coords_;
    std::size_t call_count_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoint format: magic "FFCKPT01", version byte, config key/value block,
// then named parameter records with f64 payloads. Little-endian throughout.

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    if (!is) throw FormatError("checkpoint: truncated while reading u32");
    return v;
}

inline void write_str(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_str(std::istream& is) {
    const std::uint32_t n = read_u32(is);
    if (n > (1u << 20)) throw FormatError("checkpoint: implausible string length");
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw FormatError("checkpoint: truncated string");
    return s;
}

}  // namespace detail

inline std::map<std::string, std::string> config_to_map(const FactFormerConfig& c) {
    std::map<std::string, std::string> m;
    std::ostringstream grid;
    for (std::size_t i = 0; i < c.grid.size(); ++i) grid << (i ? "," : "") << c.grid[i];
    m["grid"] = grid.str();
    m["in_channels"] = std::to_string(c.in_channels);
    m["t_in"] = std::to_string(c.t_in);
    m["hidden"] = std::to_string(c.hidden);
    m["depth"] = std::to_string(c.depth);
    m["heads"] = std::to_string(c.heads);
    m["kernel_dim"] = std::to_string(c.kernel_dim);
    std::ostringstream lam;
    lam.precision(17);
    lam << c.lambda;
    m["lambda"] = lam.str();
    m["march_steps"] = std::to_string(c.march_steps);
    m["seed"] = std::to_string(c.seed);
    m["residual_pre_pos"] = c.residual_pre_pos ? "1" : "0";
    m["rff_per_layer"] = c.rff_per_layer ? "1" : "0";
    return m;
}

inline FactFormerConfig config_from_map(const std::map<std::string, std::string>& m) {
    FactFormerConfig c;
    auto get = [&m](const std::string& k) {
        auto it = m.find(k);
        if (it == m.end()) throw FormatError("checkpoint: missing config key " + k);
        return it->second;
    };
    std::stringstream gs(get("grid"));
    std::string tok;
    while (std::getline(gs, tok, ',')) c.grid.push_back(std::stoul(tok));
    c.in_channels = std::stoul(get("in_channels"));
    c.t_in = std::stoul(get("t_in"));
    c.hidden = std::stoul(get("hidden"));
    c.depth = std::stoul(get("depth"));
    c.heads = std::stoul(get("heads"));
    c.kernel_dim = std::stoul(get("kernel_dim"));
    c.lambda = std::stod(get("lambda"));
    c.march_steps = std::stoul(get("march_steps"));
    c.seed = std::stoull(get("seed"));
    c.residual_pre_pos = get("residual_pre_pos") == "1";
    c.rff_per_layer = get("rff_per_layer") == "1";
    return c;
}

inline void save_checkpoint(FactFormerModel& model, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("save_checkpoint: cannot open " + path);
    f.write("FFCKPT01", 8);
    const char version = 1;
    f.write(&version, 1);
    auto cfg = config_to_map(model.config());
    detail::write_u32(f, static_cast<std::uint32_t>(cfg.size()));
    for (const auto& [k, v] : cfg) {
        detail::write_str(f, k);
        detail::write_str(f, v);
    }
    auto ps = model.params();
    detail::write_u32(f, static_cast<std::uint32_t>(ps.size()));
    for (Param* p : ps) {
        detail::write_str(f, p->name);
        const char rank = 2;
        f.write(&rank, 1);
        detail::write_u32(f, static_cast<std::uint32_t>(p->value.rows()));
        detail::write_u32(f, static_cast<std::uint32_t>(p->value.cols()));
        f.write(reinterpret_cast<const char*>(p->value.data()),
                static_cast<std::streamsize>(p->value.size() * 8));
    }
    if (!f) throw FormatError("save_checkpoint: write failure on " + path);
}

inline std::unique_ptr<FactFormerModel> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("load_checkpoint: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, "FFCKPT01", 8) != 0)
        throw FormatError("load_checkpoint: bad magic in " + path);
    char version = 0;
    f.read(&version, 1);
    if (!f || version != 1)
        throw FormatError("load_checkpoint: unsupported format version");
    std::map<std::string, std::string> cfg_map;
    const std::uint32_t n_cfg = detail::read_u32(f);
    for (std::uint32_t i = 0; i < n_cfg; ++i) {
        std::string k = detail::read_str(f);
        cfg_map[k] = detail::read_str(f);
    }
    auto model = std::make_unique<FactFormerModel>(config_from_map(cfg_map));
    auto ps = model->params();
    const std::uint32_t n_params = detail::read_u32(f);
    if (n_params != ps.size())
        throw FormatError("load_checkpoint: parameter count mismatch vs embedded config");
    for (Param* p : ps) {
        std::string name = detail::read_str(f);
        if (name != p->name)
            throw FormatError("load_checkpoint: parameter order mismatch: " + name + " vs " +
                              p->name);
        char rank = 0;
        f.read(&rank, 1);
        const std::uint32_t rows = detail::read_u32(f);
        const std::uint32_t cols = detail::read_u32(f);
        if (rank != 2 || rows != p->value.rows() || cols != p->value.cols())
            throw FormatError("load_checkpoint: shape mismatch for " + name);
        f.read(reinterpret_cast<char*>(p->value.data()),
               static_cast<std::streamsize>(p->value.size() * 8));
        if (!f) throw FormatError("load_checkpoint: truncated payload for " + name);
    }
    return model;
}

}  // namespace factformer
