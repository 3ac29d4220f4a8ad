#pragma once

#include <array>
#include <complex>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "factformer/common.hpp"
#include "factformer/tensor.hpp"

namespace factformer {

// Fourier coefficients of a real field on the periodic S x S grid, domain
// length 2*pi per axis. Full complex grid with conjugate symmetry enforced.
struct SpectralField {
    std::size_t s = 0;
    std::vector<std::complex<double>> coef;  // coef[i*s + j], i <-> k1, j <-> k2

    explicit SpectralField(std::size_t size) : s(size), coef(size * size) {}

    std::complex<double>& at(std::size_t i, std::size_t j) { return coef[i * s + j]; }
    const std::complex<double>& at(std::size_t i, std::size_t j) const { return coef[i * s + j]; }

    static int wavenumber(std::size_t idx, std::size_t s) {
        return idx <= s / 2 ? static_cast<int>(idx) : static_cast<int>(idx) - static_cast<int>(s);
    }
};

// Gaussian random field with spectral decay sigma_k = (1+|k|^2)^{-alpha},
// truncated at k_max, zero mean mode, conjugate-symmetrized. Deterministic in
// the seed.
inline SpectralField sample_initial(std::uint64_t seed, std::size_t s, double alpha,
                                    std::size_t k_max) {
    if (s % 2 != 0) throw ConfigError("sample_initial: grid size must be even");
    if (k_max > s / 2) throw ConfigError("sample_initial: k_max exceeds Nyquist");
    SpectralField f(s);
    Rng rng(seed);
    for (std::size_t i = 0; i < s; ++i)
        for (std::size_t j = 0; j < s; ++j) {
            const double a = rng.normal();
            const double b = rng.normal();
            const int k1 = SpectralField::wavenumber(i, s);
            const int k2 = SpectralField::wavenumber(j, s);
            // canonical half-plane: (k1, k2) lexicographically positive
            const bool canonical = (k1 > 0) || (k1 == 0 && k2 > 0);
            const bool self_conj =
                (k1 == 0 || i == s / 2) && (k2 == 0 || j == s / 2);
            if (!canonical && !self_conj) continue;
            const double k2norm = static_cast<double>(k1) * k1 + static_cast<double>(k2) * k2;
            if (k2norm == 0.0) continue;  // zero mean mode
            if (std::sqrt(k2norm) > static_cast<double>(k_max)) continue;
            const double sigma = std::pow(1.0 + k2norm, -alpha);
            if (self_conj) {
                f.at(i, j) = {sigma * a, 0.0};
            } else {
                f.at(i, j) = {sigma * a / std::sqrt(2.0), sigma * b / std::sqrt(2.0)};
                // mirror index of -k
                const std::size_t mi = (s - i) % s;
                const std::size_t mj = (s - j) % s;
                f.at(mi, mj) = std::conj(f.at(i, j));
            }
        }
    return f;
}

// Advances the advection-diffusion spectrum: u_t + c . grad u = nu lap u gives
// u_k(t) = u_k(0) exp(-nu |k|^2 t - i (k . c) t).
inline SpectralField evolve_spectrum(const SpectralField& u0, double nu,
                                     const std::array<double, 2>& c, double t) {
    if (nu < 0.0 || t < 0.0) throw ConfigError("evolve_spectrum: nu and t must be >= 0");
    SpectralField out = u0;
    const std::size_t s = u0.s;
    for (std::size_t i = 0; i < s; ++i)
        for (std::size_t j = 0; j < s; ++j) {
            const int k1 = SpectralField::wavenumber(i, s);
            const int k2 = SpectralField::wavenumber(j, s);
            const double ksq = static_cast<double>(k1) * k1 + static_cast<double>(k2) * k2;
            const double decay = std::exp(-nu * ksq * t);
            const double phase = -(k1 * c[0] + k2 * c[1]) * t;
            out.at(i, j) *= decay * std::complex<double>(std::cos(phase), std::sin(phase));
        }
    return out;
}

// Inverse transform by direct (semi-separable) DFT summation; returns the
// real part as an (S, S, 1) tensor, plus the max |imag| for sanity checks.
inline FieldTensor to_physical(const SpectralField& f, double* max_imag = nullptr) {
    const std::size_t s = f.s;
    std::vector<std::complex<double>> phase1(s * s), phase2(s * s);
    for (std::size_t p = 0; p < s; ++p)
        for (std::size_t i = 0; i < s; ++i) {
            const double x = 2.0 * M_PI * static_cast<double>(p) / static_cast<double>(s);
            const int k = SpectralField::wavenumber(i, s);
            phase1[p * s + i] = std::polar(1.0, k * x);
        }
    phase2 = phase1;  // square grid, same phases per axis

    // T(i, q) = sum_j coef(i, j) * e^{i k2(j) y_q}
    std::vector<std::complex<double>> tmp(s * s);
    for (std::size_t i = 0; i < s; ++i)
        for (std::size_t q = 0; q < s; ++q) {
            std::complex<double> acc = 0.0;
            for (std::size_t j = 0; j < s; ++j) acc += f.at(i, j) * phase2[q * s + j];
            tmp[i * s + q] = acc;
        }
    FieldTensor out({s, s, 1});
    double mi = 0.0;
    for (std::size_t p = 0; p < s; ++p)
        for (std::size_t q = 0; q < s; ++q) {
            std::complex<double> acc = 0.0;
            for (std::size_t i = 0; i < s; ++i) acc += tmp[i * s + q] * phase1[p * s + i];
            out[p * s + q] = acc.real();
            mi = std::max(mi, std::abs(acc.imag()));
        }
    if (max_imag) *max_imag = mi;
    return out;
}

inline FieldTensor exact_solution(const SpectralField& u0, double nu,
                                  const std::array<double, 2>& c, double t) {
    return to_physical(evolve_spectrum(u0, nu, c, t));
}

struct TrajectoryDataset {
    std::vector<std::size_t> grid;
    double dt = 0.0;
    std::vector<FieldTensor> frames;
    double nu = 0.0, cx = 0.0, cy = 0.0;
    std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Field-file format "FFLD0001": u8 ndim (spatial), u8 include-time flag, u32
// little-endian extents (time when flagged, spatial..., channels), f32
// row-major payload with channels fastest.

inline void write_field_file(const std::string& path, const std::vector<FieldTensor>& frames) {
    if (frames.empty()) throw ContractViolation("write_field_file: no frames");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("write_field_file: cannot open " + path);
    f.write("FFLD0001", 8);
    const auto& shape = frames[0].shape();
    const std::uint8_t ndim = static_cast<std::uint8_t>(shape.size() - 1);
    const std::uint8_t with_time = 1;
    f.write(reinterpret_cast<const char*>(&ndim), 1);
    f.write(reinterpret_cast<const char*>(&with_time), 1);
    const std::uint32_t t = static_cast<std::uint32_t>(frames.size());
    f.write(reinterpret_cast<const char*>(&t), 4);
    for (std::size_t e : shape) {
        const std::uint32_t v = static_cast<std::uint32_t>(e);
        f.write(reinterpret_cast<const char*>(&v), 4);
    }
    for (const auto& frame : frames) {
        if (frame.shape() != shape)
            throw ContractViolation("write_field_file: inconsistent frame shapes");
        std::vector<float> buf(frame.numel());
        for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(frame[i]);
        f.write(reinterpret_cast<const char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * 4));
    }
    if (!f) throw FormatError("write_field_file: write failure on " + path);
}

inline void write_field_file(const std::string& path, const FieldTensor& tensor) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("write_field_file: cannot open " + path);
    f.write("FFLD0001", 8);
    const auto& shape = tensor.shape();
    const std::uint8_t ndim = static_cast<std::uint8_t>(shape.size() - 1);
    const std::uint8_t with_time = 0;
    f.write(reinterpret_cast<const char*>(&ndim), 1);
    f.write(reinterpret_cast<const char*>(&with_time), 1);
    for (std::size_t e : shape) {
        const std::uint32_t v = static_cast<std::uint32_t>(e);
        f.write(reinterpret_cast<const char*>(&v), 4);
    }
    std::vector<float> buf(tensor.numel());
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(tensor[i]);
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * 4));
    if (!f) throw FormatError("write_field_file: write failure on " + path);
}

struct FieldFile {
    bool has_time = false;
    std::vector<FieldTensor> frames;  // one entry when has_time is false
};

inline FieldFile read_field_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("read_field_file: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, "FFLD0001", 8) != 0)
        throw FormatError("read_field_file: bad magic in " + path);
    std::uint8_t ndim = 0, with_time = 0;
    f.read(reinterpret_cast<char*>(&ndim), 1);
    f.read(reinterpret_cast<char*>(&with_time), 1);
    if (!f || ndim < 1 || ndim > 3)
        throw FormatError("read_field_file: bad spatial dimension count");
    std::uint32_t t_extent = 1;
    if (with_time) {
        f.read(reinterpret_cast<char*>(&t_extent), 4);
        if (!f || t_extent == 0) throw FormatError("read_field_file: bad time extent");
    }
    std::vector<std::size_t> shape(ndim + 1);
    std::size_t per_frame = 1;
    for (auto& e : shape) {
        std::uint32_t v = 0;
        f.read(reinterpret_cast<char*>(&v), 4);
        if (!f || v == 0) throw FormatError("read_field_file: bad extent");
        if (v > (1u << 24)) throw FormatError("read_field_file: extent overflow");
        e = v;
        per_frame *= v;
    }
    FieldFile out;
    out.has_time = with_time != 0;
    for (std::uint32_t fr = 0; fr < t_extent; ++fr) {
        std::vector<float> buf(per_frame);
        f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(per_frame * 4));
        if (!f)
            throw FormatError("read_field_file: truncated payload in " + path + " at frame " +
                              std::to_string(fr));
        std::vector<double> data(per_frame);
        for (std::size_t i = 0; i < per_frame; ++i) data[i] = static_cast<double>(buf[i]);
        out.frames.push_back(FieldTensor::from_external(shape, std::move(data)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset generation

struct DataGenConfig {
    std::size_t grid_size = 32;
    std::size_t frames = 30;
    double dt = 0.05;
    double nu = 0.01;
    double cx = 1.0, cy = 0.5;
    double alpha = 2.5;
    std::size_t k_max = 8;
    std::size_t n_train = 200;
    std::size_t n_test = 20;
    std::uint64_t seed = 0;
};

inline TrajectoryDataset generate_trajectory(const DataGenConfig& cfg, std::uint64_t traj_seed) {
    SpectralField u0 = sample_initial(traj_seed, cfg.grid_size, cfg.alpha, cfg.k_max);
    TrajectoryDataset ds;
    ds.grid = {cfg.grid_size, cfg.grid_size};
    ds.dt = cfg.dt;
    ds.nu = cfg.nu;
    ds.cx = cfg.cx;
    ds.cy = cfg.cy;
    ds.seed = traj_seed;
    for (std::size_t t = 0; t < cfg.frames; ++t)
        ds.frames.push_back(
            exact_solution(u0, cfg.nu, {cfg.cx, cfg.cy}, cfg.dt * static_cast<double>(t)));
    return ds;
}

struct Manifest {
    std::map<std::string, std::string> meta;
    std::vector<std::string> files;  // relative to the manifest's directory
};

inline void write_manifest(const std::string& path, const Manifest& m) {
    std::ofstream f(path);
    if (!f) throw FormatError("write_manifest: cannot open " + path);
    for (const auto& [k, v] : m.meta) f << k << "=" << v << "\n";
    for (const auto& file : m.files) f << "file=" << file << "\n";
    if (!f) throw FormatError("write_manifest: write failure on " + path);
}

inline Manifest read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("read_manifest: cannot open " + path);
    Manifest m;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("read_manifest: bad line: " + line);
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        if (key == "file")
            m.files.push_back(val);
        else
            m.meta[key] = val;
    }
    return m;
}

// Writes one field file per trajectory plus a manifest; returns manifest path.
inline std::string generate_dataset(const DataGenConfig& cfg, const std::string& out_dir,
                                    const std::string& split, std::size_t count,
                                    std::uint64_t seed_offset,
                                    std::ostream* progress = nullptr) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    Manifest m;
    auto fmt = [](double v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        return os.str();
    };
    m.meta["nu"] = fmt(cfg.nu);
    m.meta["cx"] = fmt(cfg.cx);
    m.meta["cy"] = fmt(cfg.cy);
    m.meta["dt"] = fmt(cfg.dt);
    m.meta["seed"] = std::to_string(cfg.seed);
    m.meta["alpha"] = fmt(cfg.alpha);
    m.meta["k_max"] = std::to_string(cfg.k_max);
    m.meta["grid"] = std::to_string(cfg.grid_size);
    m.meta["frames"] = std::to_string(cfg.frames);
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint64_t traj_seed = cfg.seed + seed_offset + i;
        TrajectoryDataset ds = generate_trajectory(cfg, traj_seed);
        std::ostringstream name;
        name << split << "_" << std::setw(4) << std::setfill('0') << i << ".ffld";
        write_field_file((fs::path(out_dir) / name.str()).string(), ds.frames);
        m.files.push_back(name.str());
        if (progress) *progress << "wrote " << name.str() << " (seed " << traj_seed << ")\n";
    }
    const std::string manifest_path = (fs::path(out_dir) / (split + "_manifest.txt")).string();
    write_manifest(manifest_path, m);
    return manifest_path;
}

// Loads every trajectory named by a manifest.
inline std::vector<TrajectoryDataset> load_dataset(const std::string& manifest_path) {
    namespace fs = std::filesystem;
    Manifest m = read_manifest(manifest_path);
    const fs::path dir = fs::path(manifest_path).parent_path();
    std::vector<TrajectoryDataset> out;
    for (const auto& file : m.files) {
        FieldFile ff = read_field_file((dir / file).string());
        TrajectoryDataset ds;
        const auto& shape = ff.frames[0].shape();
        ds.grid.assign(shape.begin(), shape.end() - 1);
        ds.dt = m.meta.count("dt") ? std::stod(m.meta.at("dt")) : 0.0;
        ds.nu = m.meta.count("nu") ? std::stod(m.meta.at("nu")) : 0.0;
        ds.cx = m.meta.count("cx") ? std::stod(m.meta.at("cx")) : 0.0;
        ds.cy = m.meta.count("cy") ? std::stod(m.meta.at("cy")) : 0.0;
        ds.frames = std::move(ff.frames);
        out.push_back(std::move(ds));
    }
    return out;
}

}  // namespace factformer
