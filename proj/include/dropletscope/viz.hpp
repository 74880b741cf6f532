#pragma once

// Latent embeddings of snapshots, the latent -> RGB mapping and slice images.

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dropletscope/core.hpp"
#include "dropletscope/vae.hpp"

namespace dropletscope::viz {

struct LatentRecord {
    std::uint32_t i = 0;
    std::uint32_t j = 0;
    std::uint32_t k = 0;
    /// Encoder mean, rounded through f32 so it matches the LAT1 file.
    Eigen::Vector3d z = Eigen::Vector3d::Zero();

    bool operator==(const LatentRecord&) const = default;
};

struct Embedding {
    std::filesystem::path snapshot;  // not stored in LAT1
    double time_s = 0.0;
    float aerosol_factor = 1.0f;
    std::vector<LatentRecord> records;
};

/// One record per cell in cell order. Each Dsd is re-normalized in double
/// precision before encoding. Throws InvalidArgument when the model input
/// width differs from the snapshot bin count.
Embedding embed_snapshot(const vae::VaeModel& model, const SnapshotField& snapshot);
std::vector<Embedding> embed_dataset(const vae::VaeModel& model, std::span<const SnapshotField> snapshots);

/// LAT1 format.
std::string encode_embedding(const Embedding& embedding);
Embedding decode_embedding(std::string_view bytes, const std::string& context = "LAT1");
void write_embedding(const Embedding& embedding, const std::filesystem::path& path);
Embedding read_embedding(const std::filesystem::path& path);

struct RgbCalibration {
    std::array<double, 3> lo{0.0, 0.0, 0.0};
    std::array<double, 3> hi{1.0, 1.0, 1.0};
    double pct_lo = 1.0;
    double pct_hi = 99.0;
};

/// Linearly interpolated percentile (the "linear" rule) of unsorted values.
double percentile(std::vector<double> values, double pct);

/// Per-dimension percentiles over every record of every embedding. Throws
/// InvalidArgument for bad percentiles or too few records and DegenerateError
/// when a dimension is constant or the two percentiles coincide.
RgbCalibration calibrate_rgb(std::span<const Embedding> embeddings, double pct_lo = 1.0, double pct_hi = 99.0);

/// Text file: `# percentiles <lo> <hi>` then `<dim> <lo> <hi>` for dims 1..3.
void write_calibration(const RgbCalibration& cal, const std::filesystem::path& path);
RgbCalibration read_calibration(const std::filesystem::path& path);
std::string format_calibration(const RgbCalibration& cal);

struct Rgb {
    std::uint8_t r = 0;
    std::uint8_t g = 0;
    std::uint8_t b = 0;
    bool operator==(const Rgb&) const = default;
};

inline constexpr Rgb kBackground{255, 255, 255};

/// Dimension d scaled by its calibration range, clamped to [0, 1] and rounded
/// half-up to 0..255. Latent dims 1, 2, 3 drive R, G, B.
Rgb latent_to_rgb(const Eigen::Vector3d& z, const RgbCalibration& cal);

struct Image {
    std::uint32_t width = 0;
    std::uint32_t height = 0;
    std::vector<std::uint8_t> pixels;  // row-major RGB

    Image() = default;
    Image(std::uint32_t w, std::uint32_t h, Rgb fill = kBackground);

    Rgb at(std::uint32_t row, std::uint32_t col) const;
    void set(std::uint32_t row, std::uint32_t col, Rgb c);
    /// Copies `src` with its top-left corner at (row, col), clipping at the edges.
    void blit(const Image& src, std::uint32_t row, std::uint32_t col);
    bool operator==(const Image&) const = default;
};

struct GridDims {
    std::uint32_t nx = 0;
    std::uint32_t ny = 0;
    std::uint32_t nz = 0;
};

enum class SliceAxis { Horizontal, Vertical };

/// Horizontal slice at level k = index: nx wide, ny tall, pixel (ny-1-j, i).
/// Vertical slice through row j = index: nx wide, nz tall, pixel (nz-1-k, i).
/// Clear air is kBackground. Throws InvalidArgument for an index outside the grid.
Image render_slice(const Embedding& embedding, const GridDims& dims, SliceAxis axis, std::uint32_t index,
                   const RgbCalibration& cal);

/// Binary PPM: `P6\n<w> <h>\n255\n` then the pixels. Throws InvalidArgument
/// for an empty image.
std::string encode_ppm(const Image& image);
void write_ppm(const Image& image, const std::filesystem::path& path);

}  // namespace dropletscope::viz
