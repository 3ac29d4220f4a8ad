// Command-line front end: dataset generation, training, evaluation,
// benchmarking, and kernel spectrum analysis.

#define FACTFORMER_DEFINE_ALLOC_TRACKER

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "factformer/alloc_tracker.hpp"
#include "factformer/analysis.hpp"
#include "factformer/config.hpp"
#include "factformer/model.hpp"
#include "factformer/pde.hpp"
#include "factformer/training.hpp"

namespace ff = factformer;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitDiverged = 3;
constexpr int kExitFormat = 4;

struct Args {
    std::map<std::string, std::string> kv;
    std::set<std::string> flags;  // bare switches

    bool has(const std::string& k) const { return kv.count(k) || flags.count(k); }
    std::string get(const std::string& k, const std::string& dflt = "") const {
        auto it = kv.find(k);
        return it == kv.end() ? dflt : it->second;
    }
    std::string require(const std::string& k) const {
        auto it = kv.find(k);
        if (it == kv.end()) throw ff::ConfigError("missing required flag --" + k);
        return it->second;
    }
};

const std::set<std::string> kBareFlags = {"stdout", "help"};

Args parse_args(int argc, char** argv, int start) {
    Args a;
    for (int i = start; i < argc; ++i) {
        std::string tok = argv[i];
        if (tok.rfind("--", 0) != 0)
            throw ff::ConfigError("expected a --flag, got '" + tok + "'");
        std::string key = tok.substr(2);
        const auto eq = key.find('=');
        if (eq != std::string::npos) {
            a.kv[key.substr(0, eq)] = key.substr(eq + 1);
            continue;
        }
        if (kBareFlags.count(key)) {
            a.flags.insert(key);
            continue;
        }
        if (i + 1 >= argc) throw ff::ConfigError("flag --" + key + " needs a value");
        a.kv[key] = argv[++i];
    }
    return a;
}

void apply_threads(const Args& a) {
    std::string t = a.get("threads");
    if (t.empty())
        if (const char* env = std::getenv("FACT_THREADS")) t = env;
    if (t.empty()) return;
    const int n = std::stoi(t);
    if (n < 1) throw ff::ConfigError("--threads must be >= 1");
#ifdef _OPENMP
    omp_set_num_threads(n);
#endif
}

// Builds a RunConfig from --config plus per-key flag overrides; every other
// flag must be listed in `cli_only`.
ff::RunConfig build_config(const Args& a, const std::set<std::string>& cli_only) {
    ff::RunConfig cfg;
    if (a.kv.count("config")) ff::load_config_file(cfg, a.kv.at("config"));
    const auto& setters = ff::config_setters();
    for (const auto& [k, v] : a.kv) {
        if (k == "config" || cli_only.count(k)) continue;
        auto it = setters.find(k);
        if (it == setters.end()) throw ff::ConfigError("unknown flag --" + k);
        it->second(cfg, v);
    }
    for (const auto& f : a.flags)
        if (f != "stdout" && f != "help") throw ff::ConfigError("unknown flag --" + f);
    return cfg;
}

void print_config_keys(std::ostream& os) {
    os << "config keys (file key=value lines or --key value flags):\n";
    for (const auto& [k, _] : ff::config_setters()) os << "  " << k << "\n";
}

// Resolves the output stream: --stdout wins, else --out <path> is required.
struct CsvSink {
    std::ofstream file;
    std::ostream* os = nullptr;
};

CsvSink open_sink(const Args& a, const std::string& dflt_path = "") {
    CsvSink s;
    if (a.flags.count("stdout")) {
        s.os = &std::cout;
        return s;
    }
    const std::string path = a.get("out", dflt_path);
    if (path.empty()) throw ff::ConfigError("need --out <file> or --stdout");
    s.file.open(path);
    if (!s.file) throw ff::ConfigError("cannot open output file " + path);
    s.os = &s.file;
    return s;
}

// ---------------------------------------------------------------------------

int cmd_generate(const Args& a) {
    if (a.flags.count("help")) {
        std::cerr << "usage: factformer generate --out-dir DIR [--config FILE] [--key value...]\n"
                     "writes train/test trajectory files plus manifests into DIR.\n";
        print_config_keys(std::cerr);
        return kExitOk;
    }
    ff::RunConfig cfg = build_config(a, {"out-dir", "threads"});
    const std::string out_dir = a.kv.count("out-dir") ? a.kv.at("out-dir") : cfg.data_dir;
    if (out_dir.empty()) throw ff::ConfigError("generate: need --out-dir or data_dir");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    {
        std::ofstream probe(fs::path(out_dir) / ".write_probe");
        if (!probe) throw ff::ConfigError("generate: output directory not writable: " + out_dir);
    }
    fs::remove(fs::path(out_dir) / ".write_probe");
    std::cerr << "generating " << cfg.data.n_train << " train + " << cfg.data.n_test
              << " test trajectories (S=" << cfg.data.grid_size << ", frames="
              << cfg.data.frames << ")\n";
    ff::generate_dataset(cfg.data, out_dir, "train", cfg.data.n_train, 0, &std::cerr);
    ff::generate_dataset(cfg.data, out_dir, "test", cfg.data.n_test, cfg.data.n_train,
                         &std::cerr);
    std::cerr << "done.\n";
    return kExitOk;
}

int cmd_train(const Args& a) {
    if (a.flags.count("help")) {
        std::cerr << "usage: factformer train --config FILE --out CKPT [--metrics CSV]\n"
                     "                        [--eval-metrics CSV] [--mode lm|ar] [--key value...]\n"
                     "trains on the data_dir manifests and writes a checkpoint.\n";
        print_config_keys(std::cerr);
        return kExitOk;
    }
    ff::RunConfig cfg = build_config(a, {"out", "metrics", "eval-metrics", "threads"});
    if (cfg.train.mode == ff::TrainMode::AR) cfg.model.march_steps = 1;
    if (cfg.data_dir.empty()) throw ff::ConfigError("train: data_dir not set");
    const std::string ckpt = a.require("out");

    std::cerr << "# effective configuration\n" << ff::config_echo(cfg);

    auto train_set = ff::load_dataset((fs::path(cfg.data_dir) / cfg.train_manifest).string());
    std::vector<ff::TrajectoryDataset> eval_set;
    const std::string test_path = (fs::path(cfg.data_dir) / cfg.test_manifest).string();
    if (fs::exists(test_path)) eval_set = ff::load_dataset(test_path);

    ff::FactFormerModel model(cfg.model);
    std::cerr << "model parameters: " << model.param_count() << "\n";

    std::ofstream metrics(a.get("metrics", "train_metrics.csv"));
    if (!metrics) throw ff::ConfigError("train: cannot open metrics file");
    std::ofstream eval_csv;
    std::ostream* eval_os = nullptr;
    if (a.kv.count("eval-metrics") && !eval_set.empty()) {
        eval_csv.open(a.kv.at("eval-metrics"));
        if (!eval_csv) throw ff::ConfigError("train: cannot open eval metrics file");
        eval_os = &eval_csv;
    }
    auto result = ff::train(model, train_set, cfg.train, metrics, eval_os,
                            eval_set.empty() ? nullptr : &eval_set, ckpt);
    ff::save_checkpoint(model, ckpt);
    std::cerr << "trained " << result.steps_run << " iterations, loss "
              << result.initial_loss << " -> " << result.final_loss << "\n"
              << "checkpoint: " << ckpt << "\n";
    return kExitOk;
}

int cmd_eval(const Args& a) {
    if (a.flags.count("help")) {
        std::cerr << "usage: factformer eval --checkpoint CKPT --data MANIFEST --horizon N\n"
                     "                       (--out CSV | --stdout)\n"
                     "rows: frame,mean_rel_l2,stddev,persistence_mean; final summary row.\n";
        return kExitOk;
    }
    const std::string ckpt = a.require("checkpoint");
    const std::string data = a.require("data");
    const std::size_t horizon = std::stoul(a.require("horizon"));
    auto model = ff::load_checkpoint(ckpt);
    if (horizon == 0 || horizon % model->config().march_steps != 0)
        throw ff::ConfigError("eval: horizon must be a positive multiple of march_steps=" +
                              std::to_string(model->config().march_steps));
    auto trajs = ff::load_dataset(data);
    if (trajs.empty()) throw ff::ConfigError("eval: empty dataset");

    auto ev = ff::evaluate_rollout(*model, trajs, horizon);
    auto pers = ff::evaluate_persistence(trajs, model->config().t_in, horizon);

    CsvSink sink = open_sink(a);
    std::ostream& os = *sink.os;
    os << "frame,mean_rel_l2,stddev,persistence_mean\n";
    double avg = 0.0;
    for (std::size_t j = 0; j < horizon; ++j) {
        os << j << "," << ev.mean[j] << "," << ev.stddev[j] << "," << pers.mean[j] << "\n";
        avg += ev.mean[j];
    }
    avg /= static_cast<double>(horizon);
    os << "summary," << avg << ",," << "\n";
    std::cerr << "avg error " << avg << ", final error " << ev.mean.back()
              << " (persistence final " << pers.mean.back() << ")\n";
    return kExitOk;
}

int cmd_benchmark(const Args& a) {
    if (a.flags.count("help")) {
        std::cerr << "usage: factformer benchmark [--grids 64,128] [--kernel-dims 64,128,192]\n"
                     "                            [--hidden 128] [--heads 8] [--reps 10]\n"
                     "                            [--mechanism both|factorized|linear]\n"
                     "                            (--out CSV | --stdout)\n";
        return kExitOk;
    }
    auto parse_list = [](const std::string& v) {
        return ff::detail::parse_size_list(v, "list");
    };
    const auto grids = parse_list(a.get("grids", "128"));
    const auto dks = parse_list(a.get("kernel-dims", "64,128,192"));
    const std::size_t hidden = std::stoul(a.get("hidden", "128"));
    const std::size_t heads = std::stoul(a.get("heads", "8"));
    const std::size_t reps = std::stoul(a.get("reps", "10"));
    const std::string mech = a.get("mechanism", "both");
    if (mech != "both" && mech != "factorized" && mech != "linear")
        throw ff::ConfigError("benchmark: --mechanism must be both|factorized|linear");

    // Single worker thread unless the caller explicitly raises it.
#ifdef _OPENMP
    if (a.get("threads").empty() && !std::getenv("FACT_THREADS")) omp_set_num_threads(1);
    const int threads = omp_get_max_threads();
#else
    const int threads = 1;
#endif

    CsvSink sink = open_sink(a);
    std::ostream& os = *sink.os;
    os << "# reps=" << reps << " warmups=3 threads=" << threads
       << " alloc_tracking=" << (ff::alloctrack::tracking_enabled() ? 1 : 0) << "\n";
    os << "mechanism,grid,d_k,enc_time,fwd_bwd_time,peak_bytes,mul_add_count\n";
    for (std::size_t s : grids)
        for (std::size_t dk : dks) {
            ff::AttentionConfig cfg;
            cfg.grid = {s, s};
            cfg.d = hidden;
            cfg.heads = heads;
            cfg.d_k = dk;
            cfg.lambda = 64.0;
            auto emit = [&os](const ff::BenchRow& r) {
                os << r.mechanism << "," << r.grid_size << "," << r.d_k << "," << r.enc_time
                   << "," << r.fwd_bwd_time << "," << r.peak_bytes << "," << r.mul_adds << "\n";
                os.flush();
            };
            if (mech != "linear") {
                try {
                    emit(ff::bench_factorized(cfg, reps));
                } catch (const ff::ResourceError& e) {
                    std::cerr << "skip factorized S=" << s << " d_k=" << dk << ": " << e.what()
                              << "\n";
                }
            }
            if (mech != "factorized") {
                try {
                    emit(ff::bench_linear(cfg, reps));
                } catch (const ff::ResourceError& e) {
                    std::cerr << "skip linear S=" << s << " d_k=" << dk << ": " << e.what()
                              << "\n";
                }
            }
        }
    return kExitOk;
}

int cmd_spectrum(const Args& a) {
    if (a.flags.count("help")) {
        std::cerr << "usage: factformer spectrum --checkpoint CKPT --data MANIFEST\n"
                     "                           [--samples 4] (--out CSV | --stdout)\n"
                     "rows: layer,axis,k,b_k,k90 for every axial kernel.\n";
        return kExitOk;
    }
    auto model = ff::load_checkpoint(a.require("checkpoint"));
    auto trajs = ff::load_dataset(a.require("data"));
    const std::size_t samples = std::stoul(a.get("samples", "4"));
    auto rows = ff::attention_spectrum_sweep(*model, trajs, samples);

    CsvSink sink = open_sink(a);
    std::ostream& os = *sink.os;
    os << "layer,axis,k,b_k,k90\n";
    for (const auto& row : rows) {
        for (std::size_t k = 0; k < row.b.size(); ++k)
            os << row.layer << "," << row.axis << "," << (k + 1) << "," << row.b[k] << ","
               << row.k90 << "\n";
        const std::size_t s = row.b.size();
        if (static_cast<double>(row.k90) < 0.05 * static_cast<double>(s))
            std::cerr << "layer " << row.layer << " axis " << row.axis << ": 90% energy within "
                      << row.k90 << "/" << s << " singular values (low-rank)\n";
        else
            std::cerr << "layer " << row.layer << " axis " << row.axis << ": k90=" << row.k90
                      << "/" << s << "\n";
    }
    return kExitOk;
}

void print_usage(std::ostream& os) {
    os << "usage: factformer <generate|train|eval|benchmark|spectrum> [flags]\n"
          "       factformer <subcommand> --help\n"
          "global flags: --threads N (or env FACT_THREADS), --stdout, --out FILE\n";
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        print_usage(std::cerr);
        return kExitUsage;
    }
    const std::string cmd = argv[1];
    try {
        Args a = parse_args(argc, argv, 2);
        apply_threads(a);
        if (cmd == "generate") return cmd_generate(a);
        if (cmd == "train") return cmd_train(a);
        if (cmd == "eval") return cmd_eval(a);
        if (cmd == "benchmark") return cmd_benchmark(a);
        if (cmd == "spectrum") return cmd_spectrum(a);
        std::cerr << "unknown subcommand '" << cmd << "'\n";
        print_usage(std::cerr);
        return kExitUsage;
    } catch (const ff::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ff::FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFormat;
    } catch (const ff::DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDiverged;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
}
