#include "dropletscope/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "dropletscope/error.hpp"
#include "dropletscope/parallel.hpp"
#include "dropletscope/rng.hpp"

namespace dropletscope::synth {

namespace {

constexpr std::array<double, 3> kOnsetAnchorsS = {7200.0, 14400.0, 25200.0};  // 0.5x, 1x, 2x

double smoothstep(double x) { return x * x * (3.0 - 2.0 * x); }

std::int64_t wrap(std::int64_t v, std::int64_t period) {
    const std::int64_t r = v % period;
    return r < 0 ? r + period : r;
}

/// Value noise on a lattice periodic in x and y, smooth in time.
double value_noise(std::uint64_t seed, double x, double y, double t, std::int64_t gx, std::int64_t gy) {
    const double fx = std::floor(x), fy = std::floor(y), ft = std::floor(t);
    const auto x0 = static_cast<std::int64_t>(fx), y0 = static_cast<std::int64_t>(fy);
    const auto t0 = static_cast<std::int64_t>(ft);
    const double ux = smoothstep(x - fx), uy = smoothstep(y - fy), ut = smoothstep(t - ft);
    double acc = 0.0;
    for (int dt = 0; dt <= 1; ++dt) {
        for (int dy = 0; dy <= 1; ++dy) {
            for (int dx = 0; dx <= 1; ++dx) {
                const double w = (dx ? ux : 1.0 - ux) * (dy ? uy : 1.0 - uy) * (dt ? ut : 1.0 - ut);
                acc += w * hash_unit(seed, wrap(x0 + dx, gx), wrap(y0 + dy, gy), t0 + dt);
            }
        }
    }
    return acc;
}

/// Two-octave periodic field over the horizontal grid.
std::vector<double> horizontal_field(std::uint64_t seed, const SynthConfig& cfg, double t_hours) {
    const auto gx = std::max<std::int64_t>(2, std::lround(cfg.nx / 12.0));
    const auto gy = std::max<std::int64_t>(2, std::lround(cfg.ny / 12.0));
    std::vector<double> field(static_cast<std::size_t>(cfg.nx) * cfg.ny);
    for (std::uint32_t j = 0; j < cfg.ny; ++j) {
        for (std::uint32_t i = 0; i < cfg.nx; ++i) {
            const double u = static_cast<double>(i) * static_cast<double>(gx) / cfg.nx;
            const double v = static_cast<double>(j) * static_cast<double>(gy) / cfg.ny;
            const double coarse = value_noise(seed, u, v, t_hours, gx, gy);
            const double fine = value_noise(seed ^ 0xA5A5A5A5ull, 2.0 * u, 2.0 * v, 2.0 * t_hours, 2 * gx, 2 * gy);
            field[static_cast<std::size_t>(j) * cfg.nx + i] = 0.65 * coarse + 0.35 * fine;
        }
    }
    return field;
}

Dsd spectrum(double s, const SynthConfig& cfg, std::mt19937_64* noise) {
    const double amb = cfg.ambient_mode_bin;
    const double pre = cfg.precip_mode_bin;
    const double mode = amb + s * (pre - amb);
    const double width = cfg.spectral_width * (1.0 + cfg.width_growth * s);
    // Gamma density in bin index x with the given mode and standard deviation:
    // (a - 1) theta = mode, a theta^2 = width^2.
    const double theta = 0.5 * (-mode + std::sqrt(mode * mode + 4.0 * width * width));
    const double shape = (mode + theta) / theta;

    const std::size_t n = kBinCount;
    std::vector<double> logf(n);
    double peak = -INFINITY;
    for (std::size_t b = 0; b < n; ++b) {
        const double x = static_cast<double>(b + 1);
        logf[b] = (shape - 1.0) * std::log(x) - x / theta;
        peak = std::max(peak, logf[b]);
    }
    std::vector<double> values(n);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (std::size_t b = 0; b < n; ++b) {
        double v = std::exp(logf[b] - peak);
        if (noise != nullptr) v *= std::exp(cfg.noise_sigma * gauss(*noise));
        values[b] = v;
    }
    return normalize_dsd(Dsd(std::move(values)));
}

}  // namespace

double default_onset_time(double aerosol_factor) {
    if (!(aerosol_factor > 0.0)) throw InvalidArgument("aerosol factor must be > 0");
    const double l = std::log2(aerosol_factor);  // -1, 0, 1 at the anchors
    if (l <= 0.0) return kOnsetAnchorsS[1] + l * (kOnsetAnchorsS[1] - kOnsetAnchorsS[0]);
    return kOnsetAnchorsS[1] + l * (kOnsetAnchorsS[2] - kOnsetAnchorsS[1]);
}

void validate_config(const SynthConfig& cfg) {
    if (cfg.nx == 0 || cfg.ny == 0 || cfg.nz == 0) throw InvalidArgument("synth: grid dimensions must be >= 1");
    if (!(cfg.dt_s > 0.0)) throw InvalidArgument("synth: dt must be > 0");
    if (!(cfg.aerosol_factor > 0.0)) throw InvalidArgument("synth: aerosol_factor must be > 0");
    if (cfg.ambient_mode_bin < 1 || cfg.ambient_mode_bin > kBinCount || cfg.precip_mode_bin < 1 ||
        cfg.precip_mode_bin > kBinCount) {
        throw InvalidArgument("synth: mode bins must lie in 1..33");
    }
    if (cfg.precip_mode_bin <= cfg.ambient_mode_bin) {
        throw InvalidArgument("synth: precip_mode_bin must exceed ambient_mode_bin");
    }
    if (!(cfg.spectral_width > 0.0) || cfg.width_growth < 0.0 || cfg.noise_sigma < 0.0) {
        throw InvalidArgument("synth: spectral width must be > 0, growth and noise >= 0");
    }
    if (!(cfg.cloud_cover > 0.0 && cfg.cloud_cover < 1.0)) throw InvalidArgument("synth: cloud_cover must be in (0,1)");
    if (cfg.cloud_base_k >= cfg.nz) throw InvalidArgument("synth: cloud_base_k must be below nz");
    if (cfg.max_cloud_depth == 0) throw InvalidArgument("synth: max_cloud_depth must be >= 1");
    if (!(cfg.ramp_time_s > 0.0) || cfg.fallout < 0.0 || !(cfg.liquid_scale > 0.0)) {
        throw InvalidArgument("synth: ramp_time and liquid_scale must be > 0, fallout >= 0");
    }
}

Dsd pathway_dsd(double s, const SynthConfig& cfg, std::optional<std::uint64_t> noise_seed) {
    if (!(s >= 0.0 && s <= 1.0)) throw InvalidArgument("pathway_dsd: s must lie in [0, 1]");
    if (!noise_seed || cfg.noise_sigma == 0.0) return spectrum(s, cfg, nullptr);
    std::mt19937_64 rng(*noise_seed);
    return spectrum(s, cfg, &rng);
}

double precip_cutoff_mm(const SynthConfig& cfg) {
    return mean_diameter(pathway_dsd(0.5, cfg), BinGrid::standard());
}

SyntheticSnapshot generate_snapshot(double t_s, const SynthConfig& cfg) {
    validate_config(cfg);
    const double t_hours = t_s / 3600.0;
    const auto step_tag = static_cast<std::uint64_t>(std::llround(t_s * 1000.0));

    const std::vector<double> cloud = horizontal_field(derive_seed(cfg.seed, {1}), cfg, t_hours);
    const std::vector<double> potential = horizontal_field(derive_seed(cfg.seed, {2}), cfg, 0.25 * t_hours);

    std::vector<double> sorted = cloud;
    const auto cut = static_cast<std::size_t>((1.0 - cfg.cloud_cover) * static_cast<double>(sorted.size() - 1));
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(cut), sorted.end());
    const double threshold = sorted[cut];
    const double peak = *std::max_element(cloud.begin(), cloud.end());
    const double span = std::max(peak - threshold, 1e-12);

    const double progress = std::min(1.0, std::max(0.0, t_s - cfg.onset()) / cfg.ramp_time_s);

    std::mt19937_64 rng(derive_seed(cfg.seed, {3, step_tag}));
    std::normal_distribution<double> gauss(0.0, 1.0);

    SyntheticSnapshot out;
    SnapshotField& field = out.field;
    field.nx = cfg.nx;
    field.ny = cfg.ny;
    field.nz = cfg.nz;
    field.cell_size_m = cfg.cell_size_m;
    field.time_s = t_s;
    field.aerosol_factor = static_cast<float>(cfg.aerosol_factor);
    field.normalized = true;

    auto emit = [&](std::uint32_t i, std::uint32_t j, std::uint32_t k, double s, double liquid) {
        // Draw noise unconditionally so the stream does not depend on the filter.
        std::mt19937_64 cell_rng(rng());
        const double jitter = std::exp(0.3 * gauss(rng));
        const double total = liquid * jitter;
        Dsd dsd = spectrum(s, cfg, cfg.noise_sigma > 0.0 ? &cell_rng : nullptr);
        if (total < kClearAirThreshold) return;
        field.cells.push_back(Cell{i, j, k, static_cast<float>(total), std::move(dsd)});
        out.s_true.push_back(s);
    };

    // Ordered by altitude, then row, then column.
    for (std::uint32_t k = 0; k < cfg.nz; ++k) {
        for (std::uint32_t j = 0; j < cfg.ny; ++j) {
            for (std::uint32_t i = 0; i < cfg.nx; ++i) {
                const std::size_t idx = static_cast<std::size_t>(j) * cfg.nx + i;
                if (cloud[idx] <= threshold) continue;
                const double depth_frac = std::clamp((cloud[idx] - threshold) / span, 0.0, 1.0);
                const std::uint32_t depth = 1 + static_cast<std::uint32_t>(depth_frac * (cfg.max_cloud_depth - 1) + 0.5);
                const std::uint32_t base = cfg.cloud_base_k;
                const std::uint32_t top = std::min(cfg.nz, base + depth);
                // Only deep, favourable columns precipitate; shallow cloud stays ambient.
                const double strength =
                    std::clamp((depth_frac * (0.6 + 0.4 * potential[idx]) - 0.25) / 0.55, 0.0, 1.0);
                const double column_s = std::clamp(progress * strength, 0.0, 1.0);

                if (k >= base && k < top) {
                    const double h = depth > 1 ? static_cast<double>(k - base) / (depth - 1) : 0.0;
                    const double s = std::clamp(column_s * (1.0 + cfg.fallout * (1.0 - h)), 0.0, 1.0);
                    const double liquid = cfg.liquid_scale * std::pow(depth_frac, 1.5) * (0.25 + 0.75 * h);
                    emit(i, j, k, s, liquid);
                } else if (k < base && column_s > 0.25) {
                    // Rain shaft below cloud base, thinning toward the surface.
                    const double s = std::clamp(column_s * (1.0 + cfg.fallout), 0.0, 1.0);
                    const double z = static_cast<double>(k + 1) / base;
                    const double liquid = cfg.liquid_scale * 0.3 * depth_frac * column_s * (0.2 + 0.8 * z);
                    emit(i, j, k, s, liquid);
                }
            }
        }
    }
    return out;
}

namespace {

void write_truth(const SyntheticSnapshot& snap, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "i,j,k,s_true\n";
    for (std::size_t n = 0; n < snap.field.cells.size(); ++n) {
        const Cell& c = snap.field.cells[n];
        out << c.i << ',' << c.j << ',' << c.k << ',' << format_number(snap.s_true[n]) << '\n';
    }
    if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace

std::vector<std::filesystem::path> generate_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
    validate_config(cfg);
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

    const std::size_t count = static_cast<std::size_t>(cfg.n_timesteps) + 1;
    std::vector<std::filesystem::path> paths(count);
    std::vector<ManifestEntry> entries(count);
    parallel_for(count, [&](std::size_t n) {
        char name[32];
        std::snprintf(name, sizeof name, "snap_%04zu.dsd", n);
        const double t = static_cast<double>(n) * cfg.dt_s;
        const SyntheticSnapshot snap = generate_snapshot(t, cfg);
        paths[n] = out_dir / name;
        write_snapshot(snap.field, paths[n]);
        write_truth(snap, truth_path_for(paths[n]));
        entries[n] = ManifestEntry{name, t, cfg.aerosol_factor};
    });
    write_manifest(entries, out_dir / "manifest.txt");
    return paths;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& manifest) {
    std::ifstream in(manifest);
    if (!in) throw IoError("cannot open manifest " + manifest.string());
    const std::filesystem::path base = manifest.parent_path();
    std::vector<ManifestEntry> entries;
    std::string line;
    std::uint64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        ManifestEntry e;
        std::string p;
        if (!(ls >> p >> e.time_s >> e.aerosol_factor)) {
            throw FormatError(manifest.string() + ": malformed manifest line " + std::to_string(line_no), line_no);
        }
        e.path = std::filesystem::path(p).is_absolute() ? std::filesystem::path(p) : base / p;
        entries.push_back(std::move(e));
    }
    return entries;
}

void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& manifest) {
    std::ofstream out(manifest);
    if (!out) throw IoError("cannot open " + manifest.string() + " for writing");
    for (const ManifestEntry& e : entries) {
        out << e.path.generic_string() << ' ' << format_number(e.time_s) << ' ' << format_number(e.aerosol_factor)
            << '\n';
    }
    if (!out) throw IoError("write failed: " + manifest.string());
}

std::filesystem::path truth_path_for(const std::filesystem::path& snapshot_path) {
    std::string stem = snapshot_path.stem().string();
    if (stem.rfind("snap_", 0) == 0) stem = "truth_" + stem.substr(5);
    else stem += "_truth";
    return snapshot_path.parent_path() / (stem + ".csv");
}

std::vector<TruthRecord> read_truth(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open truth file " + path.string());
    std::vector<TruthRecord> out;
    std::string line;
    std::getline(in, line);  // header
    std::uint64_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        TruthRecord r;
        char c1, c2, c3;
        std::istringstream ls(line);
        if (!(ls >> r.i >> c1 >> r.j >> c2 >> r.k >> c3 >> r.s_true)) {
            throw FormatError(path.string() + ": malformed truth line " + std::to_string(line_no), line_no);
        }
        out.push_back(r);
    }
    return out;
}

}  // namespace dropletscope::synth
