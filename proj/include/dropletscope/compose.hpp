#pragma once

// Hue-sorted per-altitude composition plots and precipitation onset.

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dropletscope/viz.hpp"

namespace dropletscope::compose {

struct Hsv {
    double h = 0.0;  // degrees, [0, 360)
    double s = 0.0;
    double v = 0.0;
};

/// Standard conversion; grey (s == 0) gets h = 0.
Hsv rgb_to_hsv(viz::Rgb c);
/// Channels rounded half-up. Throws InvalidArgument outside the HSV ranges.
viz::Rgb hsv_to_rgb(const Hsv& c);

/// (h - origin) mod 360, in [0, 360).
double shifted_hue(double h, double origin);

struct ComposeOptions {
    double s_norm = 1.0;
    double v_norm = 1.0;
    double hue_origin = 270.0;
    std::uint32_t panel_width = 160;
    std::uint32_t band_height = 4;
};

struct CompositionRow {
    std::uint32_t k = 0;
    std::vector<double> hues;      // ascending in shifted_hue
    std::vector<viz::Rgb> colors;  // hsv_to_rgb(hue, s_norm, v_norm)
};

/// Colours every z through latent_to_rgb, replaces saturation and value with
/// the given constants and sorts by hue measured from `hue_origin` (stable).
/// Throws InvalidArgument unless 0 < s_norm, v_norm <= 1.
CompositionRow build_row(std::uint32_t k, std::span<const Eigen::Vector3d> zs, const viz::RgbCalibration& cal,
                         const ComposeOptions& opts = {});

/// One row per level k = 0..nz-1 built from the records at that level.
std::vector<CompositionRow> build_rows(const viz::Embedding& embedding, std::uint32_t nz,
                                       const viz::RgbCalibration& cal, const ComposeOptions& opts = {});

/// Largest-remainder split of `width` pixels in proportion to `counts`; ties
/// in the remainder go to the earlier entry. All zeros when counts sum to 0.
std::vector<std::uint32_t> pixel_extents(std::span<const std::size_t> counts, std::uint32_t width);

/// rows[k] becomes a band of `band_height` pixel rows, k = 0 at the bottom.
/// Each run of equal colours gets a width share proportional to its length.
/// Empty rows stay background. Throws InvalidArgument for zero width or band.
viz::Image render_composition(std::span<const CompositionRow> rows, std::uint32_t width,
                              std::uint32_t band_height = 1);

/// 3 x T style grid: one panel row per aerosol factor, one column per time,
/// labelled with the factor ("0.5x") and the time in hours ("4h"). Panels are
/// looked up by exact aerosol factor and time (to 1e-6); a missing pair
/// throws LookupError naming it.
viz::Image render_grid(std::span<const viz::Embedding> embeddings, std::span<const double> aerosol_factors,
                       std::span<const double> times_s, std::uint32_t nz, const viz::RgbCalibration& cal,
                       const ComposeOptions& opts = {});

/// Text rendered with the built-in 3x5 font: digits, '.', 'x', 'h', 's', '-'
/// and ' '. Other characters render as blanks.
viz::Image render_label(const std::string& text, std::uint32_t scale, viz::Rgb ink = {0, 0, 0});

struct OnsetOptions {
    double hue_lo = 90.0;   // inclusive
    double hue_hi = 270.0;  // exclusive; hue_lo > hue_hi wraps through 0
    double threshold = 0.05;
};

bool hue_in_band(double h, double lo, double hi);

struct BandCount {
    std::size_t in_band = 0;
    std::size_t cloudy = 0;
    double fraction() const { return cloudy ? static_cast<double>(in_band) / static_cast<double>(cloudy) : 0.0; }
};

BandCount band_count(const viz::Embedding& embedding, const viz::RgbCalibration& cal, const OnsetOptions& opts = {});

/// Earliest snapshot time whose in-band fraction is >= threshold and that has
/// at least one in-band cell; nullopt if none. The run may be in any order.
/// Throws InvalidArgument for an empty run or a threshold outside [0, 1].
std::optional<double> detect_onset(std::span<const viz::Embedding> run, const viz::RgbCalibration& cal,
                                   const OnsetOptions& opts = {});

struct OnsetRow {
    double aerosol_factor = 1.0;
    std::optional<double> onset_time_s;
    OnsetOptions options;
};

/// `aerosol_factor,onset_time_s,hue_lo,hue_hi,threshold`; a missing onset is
/// written as `none`.
void write_onset_csv(std::span<const OnsetRow> rows, const std::filesystem::path& path);
std::string format_onset_csv(std::span<const OnsetRow> rows);

}  // namespace dropletscope::compose
