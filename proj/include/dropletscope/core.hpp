#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dropletscope {

inline constexpr std::size_t kBinCount = 33;
inline constexpr double kMaxDiameterMm = 6.5;
inline constexpr double kClearAirThreshold = 1e-5;

/// Full-scale domain: 25.6 km x 25.6 km x 3 km at 40 m spacing.
inline constexpr std::uint32_t kFullScaleNx = 640;
inline constexpr std::uint32_t kFullScaleNz = 75;

/// Representative diameters of mass-doubling bins, anchored so the last bin
/// sits at `d_max_mm`: d_k = d_max * 2^((k - n) / 3), k = 1..n.
std::vector<double> bin_diameters(std::size_t n_bins, double d_max_mm);

struct BinGrid {
    std::vector<double> diameters_mm;

    static BinGrid standard() { return BinGrid{bin_diameters(kBinCount, kMaxDiameterMm)}; }

    std::size_t n_bins() const noexcept { return diameters_mm.size(); }
    double d_max() const { return diameters_mm.back(); }
};

/// One droplet size distribution: per-bin mixing ratios (kg/kg).
struct Dsd {
    std::vector<double> mixing_ratios;

    Dsd() = default;
    explicit Dsd(std::vector<double> values) : mixing_ratios(std::move(values)) {}

    std::size_t size() const noexcept { return mixing_ratios.size(); }
    double operator[](std::size_t k) const { return mixing_ratios[k]; }
    double& operator[](std::size_t k) { return mixing_ratios[k]; }
    std::span<const double> values() const noexcept { return mixing_ratios; }

    bool operator==(const Dsd&) const = default;
};

/// Throws InvalidData on NaN/Inf entries.
double summed_mixing_ratio(const Dsd& dsd);

/// Scales to unit sum. Throws DegenerateError for a zero-sum input.
Dsd normalize_dsd(const Dsd& dsd);

/// Mass-weighted mean diameter in mm.
double mean_diameter(const Dsd& dsd, const BinGrid& grid);

struct Cell {
    std::uint32_t i = 0;
    std::uint32_t j = 0;
    std::uint32_t k = 0;
    /// Summed mixing ratio before normalization (RawCellSum).
    float raw_sum = 0.0f;
    Dsd dsd;

    bool operator==(const Cell&) const = default;
};

/// Sparse set of cloudy cells for one time step of one run.
struct SnapshotField {
    std::uint32_t nx = 0;
    std::uint32_t ny = 0;
    std::uint32_t nz = 0;
    std::uint32_t n_bins = static_cast<std::uint32_t>(kBinCount);
    float cell_size_m = 40.0f;
    double time_s = 0.0;
    float aerosol_factor = 1.0f;
    /// True once every cell Dsd has been scaled to unit sum; raw_sum then holds
    /// the pre-normalization total.
    bool normalized = false;
    std::vector<Cell> cells;

    bool operator==(const SnapshotField&) const = default;
};

/// Checks index bounds, bin counts and duplicate cells. Throws InvalidArgument.
void validate_snapshot(const SnapshotField& snapshot);

/// Keeps cells whose summed mixing ratio is >= threshold. On raw snapshots
/// the sum is computed and recorded in raw_sum; on normalized snapshots the
/// stored raw_sum is compared instead, so re-filtering is a no-op.
SnapshotField filter_clear_air(const SnapshotField& snapshot, double threshold = kClearAirThreshold);

/// Cell-wise normalize_dsd. Idempotent on already-normalized snapshots.
SnapshotField normalize_snapshot(const SnapshotField& snapshot);

/// DSD1 binary format. The snapshot must be normalized. Ratios are stored as
/// f32, so bit-exact round trips require f32-representable values.
void write_snapshot(const SnapshotField& snapshot, const std::filesystem::path& path);
SnapshotField read_snapshot(const std::filesystem::path& path);
std::string encode_snapshot(const SnapshotField& snapshot);
SnapshotField decode_snapshot(std::string_view bytes, const std::string& context = "DSD1");

/// Lossless CSV: header then `i,j,k,raw_sum,r1..rn` per cell.
void write_snapshot_csv(const SnapshotField& snapshot, const std::filesystem::path& path);

/// `%.17g`: enough digits to read the same double back.
std::string format_number(double v);

/// Rounds every stored double through f32, giving the values a DSD1 round
/// trip would produce.
SnapshotField quantize_to_f32(SnapshotField snapshot);

}  // namespace dropletscope
