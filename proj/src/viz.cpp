#include "dropletscope/viz.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "dropletscope/binio.hpp"
#include "dropletscope/error.hpp"
#include "dropletscope/parallel.hpp"

namespace dropletscope::viz {

Embedding embed_snapshot(const vae::VaeModel& model, const SnapshotField& snapshot) {
    vae::validate_model(model);
    if (static_cast<std::size_t>(model.input_dim()) != snapshot.n_bins) {
        throw InvalidArgument("embed: model expects " + std::to_string(model.input_dim()) + " bins, snapshot has " +
                              std::to_string(snapshot.n_bins));
    }
    Embedding e;
    e.time_s = snapshot.time_s;
    e.aerosol_factor = snapshot.aerosol_factor;
    e.records.resize(snapshot.cells.size());
    parallel_for(snapshot.cells.size(), [&](std::size_t n) {
        const Cell& c = snapshot.cells[n];
        if (c.dsd.size() != snapshot.n_bins) throw InvalidArgument("embed: cell bin count differs from snapshot");
        const Dsd x = normalize_dsd(c.dsd);
        const Eigen::Vector3d mu = vae::encode(model, x.values()).mu;
        e.records[n] = LatentRecord{c.i, c.j, c.k, mu.cast<float>().cast<double>()};
    });
    return e;
}

std::vector<Embedding> embed_dataset(const vae::VaeModel& model, std::span<const SnapshotField> snapshots) {
    std::vector<Embedding> out;
    out.reserve(snapshots.size());
    for (const SnapshotField& s : snapshots) out.push_back(embed_snapshot(model, s));
    return out;
}

namespace {

constexpr std::string_view kMagic = "LAT1";
constexpr std::uint64_t kRecordBytes = 3 * 4 + 3 * 4;

}  // namespace

std::string encode_embedding(const Embedding& embedding) {
    if (embedding.records.size() > UINT32_MAX) throw InvalidArgument("LAT1: too many records");
    binio::ByteWriter w;
    w.magic(kMagic);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(embedding.records.size()));
    w.put<double>(embedding.time_s);
    w.put<float>(embedding.aerosol_factor);
    for (const LatentRecord& r : embedding.records) {
        w.put<std::uint32_t>(r.i);
        w.put<std::uint32_t>(r.j);
        w.put<std::uint32_t>(r.k);
        for (int d = 0; d < 3; ++d) w.put<float>(static_cast<float>(r.z(d)));
    }
    return w.bytes();
}

Embedding decode_embedding(std::string_view bytes, const std::string& context) {
    binio::ByteReader r(bytes, context);
    r.expect_magic(kMagic);
    const auto n = r.get<std::uint32_t>("n_records");
    Embedding e;
    e.time_s = r.get<double>("time_s");
    e.aerosol_factor = r.get<float>("aerosol_factor");
    r.require(n, kRecordBytes, "records");
    e.records.resize(n);
    for (LatentRecord& rec : e.records) {
        rec.i = r.get<std::uint32_t>("i");
        rec.j = r.get<std::uint32_t>("j");
        rec.k = r.get<std::uint32_t>("k");
        for (int d = 0; d < 3; ++d) rec.z(d) = r.get<float>("z");
    }
    r.expect_end();
    return e;
}

void write_embedding(const Embedding& embedding, const std::filesystem::path& path) {
    binio::write_file(path, encode_embedding(embedding));
}

Embedding read_embedding(const std::filesystem::path& path) {
    return decode_embedding(binio::read_file(path), path.string());
}

double percentile(std::vector<double> values, double pct) {
    if (values.empty()) throw InvalidArgument("percentile of an empty set");
    if (!(pct >= 0.0 && pct <= 100.0)) throw InvalidArgument("percentile must lie in [0, 100]");
    std::sort(values.begin(), values.end());
    const double pos = pct / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

RgbCalibration calibrate_rgb(std::span<const Embedding> embeddings, double pct_lo, double pct_hi) {
    if (!(pct_lo >= 0.0 && pct_hi <= 100.0 && pct_lo <= pct_hi)) {
        throw InvalidArgument("calibrate: need 0 <= pct_lo <= pct_hi <= 100");
    }
    std::array<std::vector<double>, 3> dims;
    for (const Embedding& e : embeddings) {
        for (const LatentRecord& r : e.records) {
            for (int d = 0; d < 3; ++d) dims[static_cast<std::size_t>(d)].push_back(r.z(d));
        }
    }
    if (dims[0].size() < 2) throw InvalidArgument("calibrate: need at least 2 records");
    RgbCalibration cal;
    cal.pct_lo = pct_lo;
    cal.pct_hi = pct_hi;
    for (std::size_t d = 0; d < 3; ++d) {
        const auto [mn, mx] = std::minmax_element(dims[d].begin(), dims[d].end());
        if (*mn == *mx) throw DegenerateError("calibrate: latent dimension " + std::to_string(d + 1) + " is constant");
        cal.lo[d] = percentile(dims[d], pct_lo);
        cal.hi[d] = percentile(dims[d], pct_hi);
        if (!(cal.lo[d] < cal.hi[d])) {
            throw DegenerateError("calibrate: empty range on latent dimension " + std::to_string(d + 1) +
                                  " (lo == hi)");
        }
    }
    return cal;
}

std::string format_calibration(const RgbCalibration& cal) {
    std::string s = "# percentiles " + format_number(cal.pct_lo) + ' ' + format_number(cal.pct_hi) + '\n';
    for (std::size_t d = 0; d < 3; ++d) {
        s += std::to_string(d + 1) + ' ' + format_number(cal.lo[d]) + ' ' + format_number(cal.hi[d]) + '\n';
    }
    return s;
}

void write_calibration(const RgbCalibration& cal, const std::filesystem::path& path) {
    binio::write_file(path, format_calibration(cal));
}

RgbCalibration read_calibration(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open calibration " + path.string());
    RgbCalibration cal;
    std::array<bool, 3> seen{false, false, false};
    std::string line;
    std::uint64_t line_no = 0;
    const auto bad = [&](const std::string& why) {
        return FormatError(path.string() + ": " + why + " on line " + std::to_string(line_no), line_no);
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ls(line);
        if (line[0] == '#') {
            std::string hash, key;
            ls >> hash >> key;
            if (key == "percentiles" && !(ls >> cal.pct_lo >> cal.pct_hi)) throw bad("malformed percentile header");
            continue;
        }
        int dim = 0;
        double lo = 0.0, hi = 0.0;
        if (!(ls >> dim >> lo >> hi) || dim < 1 || dim > 3) throw bad("expected `dim lo hi`");
        if (!(lo < hi)) throw bad("lo must be below hi");
        const auto d = static_cast<std::size_t>(dim - 1);
        cal.lo[d] = lo;
        cal.hi[d] = hi;
        seen[d] = true;
    }
    if (!(seen[0] && seen[1] && seen[2])) throw FormatError(path.string() + ": missing latent dimension", line_no);
    return cal;
}

Rgb latent_to_rgb(const Eigen::Vector3d& z, const RgbCalibration& cal) {
    std::array<std::uint8_t, 3> c{};
    for (std::size_t d = 0; d < 3; ++d) {
        double t = (z(static_cast<Eigen::Index>(d)) - cal.lo[d]) / (cal.hi[d] - cal.lo[d]);
        if (!(t > 0.0)) t = 0.0;  // also catches NaN
        if (t > 1.0) t = 1.0;
        c[d] = static_cast<std::uint8_t>(std::floor(255.0 * t + 0.5));
    }
    return Rgb{c[0], c[1], c[2]};
}

Image::Image(std::uint32_t w, std::uint32_t h, Rgb fill) : width(w), height(h) {
    pixels.resize(static_cast<std::size_t>(w) * h * 3);
    for (std::size_t p = 0; p < pixels.size(); p += 3) {
        pixels[p] = fill.r;
        pixels[p + 1] = fill.g;
        pixels[p + 2] = fill.b;
    }
}

Rgb Image::at(std::uint32_t row, std::uint32_t col) const {
    if (row >= height || col >= width) throw InvalidArgument("pixel outside image");
    const std::size_t p = (static_cast<std::size_t>(row) * width + col) * 3;
    return Rgb{pixels[p], pixels[p + 1], pixels[p + 2]};
}

void Image::set(std::uint32_t row, std::uint32_t col, Rgb c) {
    if (row >= height || col >= width) throw InvalidArgument("pixel outside image");
    const std::size_t p = (static_cast<std::size_t>(row) * width + col) * 3;
    pixels[p] = c.r;
    pixels[p + 1] = c.g;
    pixels[p + 2] = c.b;
}

void Image::blit(const Image& src, std::uint32_t row, std::uint32_t col) {
    for (std::uint32_t r = 0; r < src.height && row + r < height; ++r) {
        for (std::uint32_t c = 0; c < src.width && col + c < width; ++c) set(row + r, col + c, src.at(r, c));
    }
}

Image render_slice(const Embedding& embedding, const GridDims& dims, SliceAxis axis, std::uint32_t index,
                   const RgbCalibration& cal) {
    if (dims.nx == 0 || dims.ny == 0 || dims.nz == 0) throw InvalidArgument("render_slice: empty grid");
    const bool horizontal = axis == SliceAxis::Horizontal;
    const std::uint32_t limit = horizontal ? dims.nz : dims.ny;
    if (index >= limit) {
        throw InvalidArgument("render_slice: index " + std::to_string(index) + " outside [0, " +
                              std::to_string(limit) + ")");
    }
    Image img(dims.nx, horizontal ? dims.ny : dims.nz);
    for (const LatentRecord& r : embedding.records) {
        if (r.i >= dims.nx || r.j >= dims.ny || r.k >= dims.nz) {
            throw InvalidArgument("render_slice: record outside the grid");
        }
        if (horizontal && r.k == index) img.set(dims.ny - 1 - r.j, r.i, latent_to_rgb(r.z, cal));
        if (!horizontal && r.j == index) img.set(dims.nz - 1 - r.k, r.i, latent_to_rgb(r.z, cal));
    }
    return img;
}

std::string encode_ppm(const Image& image) {
    if (image.width == 0 || image.height == 0) throw InvalidArgument("write_ppm: empty image");
    std::string s = "P6\n" + std::to_string(image.width) + ' ' + std::to_string(image.height) + "\n255\n";
    s.append(reinterpret_cast<const char*>(image.pixels.data()), image.pixels.size());
    return s;
}

void write_ppm(const Image& image, const std::filesystem::path& path) { binio::write_file(path, encode_ppm(image)); }

}  // namespace dropletscope::viz
