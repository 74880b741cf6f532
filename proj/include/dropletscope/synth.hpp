#pragma once

// Synthetic LES-like snapshot sequences. Cloud geometry comes from periodic
// value noise; every cloudy cell carries a pathway position s in [0, 1] that
// stays 0 until the run's onset time and then grows, faster at low altitude.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dropletscope/core.hpp"

namespace dropletscope::synth {

/// Onset anchors (seconds) for aerosol factors 0.5, 1 and 2; other factors
/// interpolate linearly in log2(factor).
double default_onset_time(double aerosol_factor);

struct SynthConfig {
    std::uint32_t nx = 64;
    std::uint32_t ny = 64;
    std::uint32_t nz = 24;
    float cell_size_m = 40.0f;
    std::uint32_t n_timesteps = 48;
    double dt_s = 600.0;
    double aerosol_factor = 1.0;
    /// Negative means default_onset_time(aerosol_factor).
    double onset_time_s = -1.0;
    /// 1-indexed bins.
    std::uint32_t ambient_mode_bin = 8;
    std::uint32_t precip_mode_bin = 24;
    /// Standard deviation of the spectrum, in bins, at s = 0.
    double spectral_width = 1.2;
    /// Width at s is spectral_width * (1 + width_growth * s).
    double width_growth = 1.5;
    /// Per-bin log-normal multiplicative noise.
    double noise_sigma = 0.05;
    /// Fraction of columns (roughly) holding cloud.
    double cloud_cover = 0.06;
    std::uint32_t cloud_base_k = 6;
    std::uint32_t max_cloud_depth = 12;
    /// Time for a column to go from onset to fully precipitating.
    double ramp_time_s = 5400.0;
    /// Extra progress at cloud base relative to cloud top.
    double fallout = 0.6;
    double liquid_scale = 1.0e-3;
    std::uint64_t seed = 42;

    double onset() const { return onset_time_s >= 0.0 ? onset_time_s : default_onset_time(aerosol_factor); }
};

/// Throws InvalidArgument when the config violates its invariants.
void validate_config(const SynthConfig& cfg);

/// Unit-sum spectrum at pathway position s: gamma-shaped in bin index with the
/// mode moving from ambient_mode_bin to precip_mode_bin and the width growing
/// with s. No noise when noise_seed is empty or noise_sigma is 0.
Dsd pathway_dsd(double s, const SynthConfig& cfg, std::optional<std::uint64_t> noise_seed = std::nullopt);

/// Mean diameter of the noise-free s = 0.5 spectrum; cells above it count as
/// precipitating.
double precip_cutoff_mm(const SynthConfig& cfg);

struct SyntheticSnapshot {
    SnapshotField field;
    /// Ground-truth pathway position per cell, aligned with field.cells.
    std::vector<double> s_true;
};

/// Deterministic in (cfg.seed, t). Cloud geometry does not depend on the
/// aerosol factor, so runs that share a seed differ only in onset.
SyntheticSnapshot generate_snapshot(double t_s, const SynthConfig& cfg);

struct ManifestEntry {
    std::filesystem::path path;
    double time_s = 0.0;
    double aerosol_factor = 1.0;
};

/// Writes n_timesteps + 1 DSD1 snapshots (t = 0, dt, ..., n dt), a truth
/// sidecar CSV per snapshot, and `manifest.txt`. Paths in the manifest are
/// relative to out_dir. Returns the snapshot paths.
std::vector<std::filesystem::path> generate_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir);

/// Manifest lines: `<path> <time_s> <aerosol_factor>`. Relative paths resolve
/// against the manifest's directory.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& manifest);
void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& manifest);

/// Sidecar path for a snapshot file: `snap_0003.dsd` -> `truth_0003.csv`.
std::filesystem::path truth_path_for(const std::filesystem::path& snapshot_path);

struct TruthRecord {
    std::uint32_t i = 0, j = 0, k = 0;
    double s_true = 0.0;
};
std::vector<TruthRecord> read_truth(const std::filesystem::path& path);

}  // namespace dropletscope::synth
