#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "factformer/common.hpp"
#include "factformer/model.hpp"
#include "factformer/pde.hpp"
#include "factformer/training.hpp"

namespace factformer {

// Flat key=value run configuration mirroring the model, training, and data
// generation configs plus dataset paths. '#' starts a comment, blank lines
// ignored, unknown keys rejected. Any key may also be supplied as a
// command-line flag of the same name (--key value), which wins over the file.
struct RunConfig {
    FactFormerConfig model;
    TrainConfig train;
    DataGenConfig data;
    std::string data_dir;      // directory holding the generated dataset
    std::string train_manifest = "train_manifest.txt";
    std::string test_manifest = "test_manifest.txt";

    RunConfig() {
        model.grid = {32, 32};
        model.march_steps = 4;
    }
};

namespace detail {

inline std::size_t parse_size(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        const long long x = std::stoll(v, &pos);
        if (pos != v.size() || x < 0) throw std::invalid_argument(v);
        return static_cast<std::size_t>(x);
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' wants a non-negative integer, got '" + v +
                          "'");
    }
}

inline double parse_double(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' wants a number, got '" + v + "'");
    }
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "1" || v == "true" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "no") return false;
    throw ConfigError("config: key '" + key + "' wants true/false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_size_list(const std::string& v, const std::string& key) {
    std::vector<std::size_t> out;
    std::stringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) out.push_back(parse_size(tok, key));
    if (out.empty()) throw ConfigError("config: key '" + key + "' wants a comma list");
    return out;
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

// One setter per key; also the source of the --help key list.
inline const std::map<std::string, std::function<void(RunConfig&, const std::string&)>>&
config_setters() {
    using detail::parse_bool;
    using detail::parse_double;
    using detail::parse_size;
    using detail::parse_size_list;
    static const std::map<std::string, std::function<void(RunConfig&, const std::string&)>> m = {
        {"grid", [](RunConfig& c, const std::string& v) { c.model.grid = parse_size_list(v, "grid"); }},
        {"in_channels", [](RunConfig& c, const std::string& v) { c.model.in_channels = parse_size(v, "in_channels"); }},
        {"t_in", [](RunConfig& c, const std::string& v) { c.model.t_in = parse_size(v, "t_in"); }},
        {"hidden", [](RunConfig& c, const std::string& v) { c.model.hidden = parse_size(v, "hidden"); }},
        {"depth", [](RunConfig& c, const std::string& v) { c.model.depth = parse_size(v, "depth"); }},
        {"heads", [](RunConfig& c, const std::string& v) { c.model.heads = parse_size(v, "heads"); }},
        {"kernel_dim", [](RunConfig& c, const std::string& v) { c.model.kernel_dim = parse_size(v, "kernel_dim"); }},
        {"lambda", [](RunConfig& c, const std::string& v) { c.model.lambda = parse_double(v, "lambda"); }},
        {"march_steps", [](RunConfig& c, const std::string& v) { c.model.march_steps = parse_size(v, "march_steps"); }},
        {"model_seed", [](RunConfig& c, const std::string& v) { c.model.seed = parse_size(v, "model_seed"); }},
        {"residual_pre_pos", [](RunConfig& c, const std::string& v) { c.model.residual_pre_pos = parse_bool(v, "residual_pre_pos"); }},
        {"rff_per_layer", [](RunConfig& c, const std::string& v) { c.model.rff_per_layer = parse_bool(v, "rff_per_layer"); }},

        {"iterations", [](RunConfig& c, const std::string& v) { c.train.iterations = parse_size(v, "iterations"); }},
        {"batch", [](RunConfig& c, const std::string& v) { c.train.batch = parse_size(v, "batch"); }},
        {"max_lr", [](RunConfig& c, const std::string& v) { c.train.max_lr = parse_double(v, "max_lr"); }},
        {"lr_period", [](RunConfig& c, const std::string& v) { c.train.lr_period = parse_size(v, "lr_period"); }},
        {"beta1", [](RunConfig& c, const std::string& v) { c.train.beta1 = parse_double(v, "beta1"); }},
        {"beta2", [](RunConfig& c, const std::string& v) { c.train.beta2 = parse_double(v, "beta2"); }},
        {"adam_eps", [](RunConfig& c, const std::string& v) { c.train.eps_opt = parse_double(v, "adam_eps"); }},
        {"weight_decay", [](RunConfig& c, const std::string& v) { c.train.weight_decay = parse_double(v, "weight_decay"); }},
        {"pushforward_start", [](RunConfig& c, const std::string& v) { c.train.pushforward_start = parse_double(v, "pushforward_start"); }},
        {"eval_every", [](RunConfig& c, const std::string& v) { c.train.eval_every = parse_size(v, "eval_every"); }},
        {"eval_horizon", [](RunConfig& c, const std::string& v) { c.train.eval_horizon = parse_size(v, "eval_horizon"); }},
        {"clip_norm", [](RunConfig& c, const std::string& v) { c.train.clip_norm = parse_double(v, "clip_norm"); }},
        {"train_seed", [](RunConfig& c, const std::string& v) { c.train.seed = parse_size(v, "train_seed"); }},
        {"mode", [](RunConfig& c, const std::string& v) {
             if (v == "lm") c.train.mode = TrainMode::LM;
             else if (v == "ar") c.train.mode = TrainMode::AR;
             else throw ConfigError("config: mode must be lm or ar, got '" + v + "'");
         }},

        {"grid_size", [](RunConfig& c, const std::string& v) { c.data.grid_size = parse_size(v, "grid_size"); }},
        {"frames", [](RunConfig& c, const std::string& v) { c.data.frames = parse_size(v, "frames"); }},
        {"dt", [](RunConfig& c, const std::string& v) { c.data.dt = parse_double(v, "dt"); }},
        {"nu", [](RunConfig& c, const std::string& v) { c.data.nu = parse_double(v, "nu"); }},
        {"cx", [](RunConfig& c, const std::string& v) { c.data.cx = parse_double(v, "cx"); }},
        {"cy", [](RunConfig& c, const std::string& v) { c.data.cy = parse_double(v, "cy"); }},
        {"alpha", [](RunConfig& c, const std::string& v) { c.data.alpha = parse_double(v, "alpha"); }},
        {"k_max", [](RunConfig& c, const std::string& v) { c.data.k_max = parse_size(v, "k_max"); }},
        {"n_train", [](RunConfig& c, const std::string& v) { c.data.n_train = parse_size(v, "n_train"); }},
        {"n_test", [](RunConfig& c, const std::string& v) { c.data.n_test = parse_size(v, "n_test"); }},
        {"data_seed", [](RunConfig& c, const std::string& v) { c.data.seed = parse_size(v, "data_seed"); }},

        {"data_dir", [](RunConfig& c, const std::string& v) { c.data_dir = v; }},
        {"train_manifest", [](RunConfig& c, const std::string& v) { c.train_manifest = v; }},
        {"test_manifest", [](RunConfig& c, const std::string& v) { c.test_manifest = v; }},
    };
    return m;
}

inline void apply_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    const auto& setters = config_setters();
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("config: unknown key '" + key + "'");
    it->second(cfg, value);
}

inline void load_config_file(RunConfig& cfg, const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config: cannot open " + path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: " + path + ":" + std::to_string(lineno) +
                              ": expected key=value");
        apply_config_key(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
}

// Echo of the effective configuration, same format the parser accepts.
inline std::string config_echo(const RunConfig& c) {
    std::ostringstream os;
    os.precision(17);
    os << "grid=";
    for (std::size_t i = 0; i < c.model.grid.size(); ++i)
        os << (i ? "," : "") << c.model.grid[i];
    os << "\n";
    os << "in_channels=" << c.model.in_channels << "\nt_in=" << c.model.t_in
       << "\nhidden=" << c.model.hidden << "\ndepth=" << c.model.depth
       << "\nheads=" << c.model.heads << "\nkernel_dim=" << c.model.kernel_dim
       << "\nlambda=" << c.model.lambda << "\nmarch_steps=" << c.model.march_steps
       << "\nmodel_seed=" << c.model.seed
       << "\nresidual_pre_pos=" << (c.model.residual_pre_pos ? "true" : "false")
       << "\nrff_per_layer=" << (c.model.rff_per_layer ? "true" : "false")
       << "\niterations=" << c.train.iterations << "\nbatch=" << c.train.batch
       << "\nmax_lr=" << c.train.max_lr << "\nlr_period=" << c.train.lr_period
       << "\nbeta1=" << c.train.beta1 << "\nbeta2=" << c.train.beta2
       << "\nadam_eps=" << c.train.eps_opt << "\nweight_decay=" << c.train.weight_decay
       << "\npushforward_start=" << c.train.pushforward_start
       << "\neval_every=" << c.train.eval_every << "\neval_horizon=" << c.train.eval_horizon
       << "\nclip_norm=" << c.train.clip_norm << "\ntrain_seed=" << c.train.seed
       << "\nmode=" << (c.train.mode == TrainMode::AR ? "ar" : "lm")
       << "\ngrid_size=" << c.data.grid_size << "\nframes=" << c.data.frames
       << "\ndt=" << c.data.dt << "\nnu=" << c.data.nu << "\ncx=" << c.data.cx
       << "\ncy=" << c.data.cy << "\nalpha=" << c.data.alpha << "\nk_max=" << c.data.k_max
       << "\nn_train=" << c.data.n_train << "\nn_test=" << c.data.n_test
       << "\ndata_seed=" << c.data.seed << "\ndata_dir=" << c.data_dir
       << "\ntrain_manifest=" << c.train_manifest << "\ntest_manifest=" << c.test_manifest
       << "\n";
    return os.str();
}

}  // namespace factformer
