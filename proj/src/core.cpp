#include "dropletscope/core.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <string>
#include <unordered_set>

#include "dropletscope/binio.hpp"
#include "dropletscope/error.hpp"

namespace dropletscope {

namespace binio {

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string() + " for reading");
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed: " + path.string());
    return data;
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace binio

std::string format_number(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<double> bin_diameters(std::size_t n_bins, double d_max_mm) {
    if (n_bins == 0) throw InvalidArgument("bin_diameters: n_bins must be >= 1");
    if (!(d_max_mm > 0.0)) throw InvalidArgument("bin_diameters: d_max must be > 0");
    std::vector<double> d(n_bins);
    const auto n = static_cast<double>(n_bins);
    for (std::size_t k = 1; k <= n_bins; ++k) {
        d[k - 1] = d_max_mm * std::exp2((static_cast<double>(k) - n) / 3.0);
    }
    return d;
}

double summed_mixing_ratio(const Dsd& dsd) {
    double sum = 0.0;
    for (double v : dsd.mixing_ratios) {
        if (!std::isfinite(v)) throw InvalidData("Dsd contains a non-finite mixing ratio");
        sum += v;
    }
    return sum;
}

Dsd normalize_dsd(const Dsd& dsd) {
    const double sum = summed_mixing_ratio(dsd);
    if (!(sum > 0.0)) throw DegenerateError("normalize_dsd: summed mixing ratio is zero");
    Dsd out = dsd;
    for (double& v : out.mixing_ratios) v /= sum;
    return out;
}

double mean_diameter(const Dsd& dsd, const BinGrid& grid) {
    if (dsd.size() != grid.n_bins()) throw InvalidArgument("mean_diameter: bin count mismatch");
    const double sum = summed_mixing_ratio(dsd);
    if (!(sum > 0.0)) throw DegenerateError("mean_diameter: summed mixing ratio is zero");
    double acc = 0.0;
    for (std::size_t k = 0; k < dsd.size(); ++k) acc += dsd[k] * grid.diameters_mm[k];
    return acc / sum;
}

namespace {

std::uint64_t linear_index(const SnapshotField& s, const Cell& c) {
    return (static_cast<std::uint64_t>(c.k) * s.ny + c.j) * s.nx + c.i;
}

}  // namespace

void validate_snapshot(const SnapshotField& s) {
    if (s.n_bins == 0) throw InvalidArgument("snapshot: n_bins must be >= 1");
    std::unordered_set<std::uint64_t> seen;
    seen.reserve(s.cells.size());
    for (const Cell& c : s.cells) {
        if (c.i >= s.nx || c.j >= s.ny || c.k >= s.nz) {
            throw InvalidArgument("snapshot: cell (" + std::to_string(c.i) + "," + std::to_string(c.j) + "," +
                                  std::to_string(c.k) + ") outside grid");
        }
        if (c.dsd.size() != s.n_bins) throw InvalidArgument("snapshot: cell Dsd has wrong bin count");
        if (!seen.insert(linear_index(s, c)).second) {
            throw InvalidArgument("snapshot: duplicate cell (" + std::to_string(c.i) + "," + std::to_string(c.j) +
                                  "," + std::to_string(c.k) + ")");
        }
    }
}

SnapshotField filter_clear_air(const SnapshotField& snapshot, double threshold) {
    if (!(threshold > 0.0)) throw InvalidArgument("filter_clear_air: threshold must be > 0");
    SnapshotField out = snapshot;
    out.cells.clear();
    for (const Cell& c : snapshot.cells) {
        const double sum = snapshot.normalized ? static_cast<double>(c.raw_sum) : summed_mixing_ratio(c.dsd);
        if (sum >= threshold) {
            Cell kept = c;
            if (!snapshot.normalized) kept.raw_sum = static_cast<float>(sum);
            out.cells.push_back(std::move(kept));
        }
    }
    return out;
}

SnapshotField normalize_snapshot(const SnapshotField& snapshot) {
    if (snapshot.normalized) return snapshot;
    SnapshotField out = snapshot;
    for (Cell& c : out.cells) {
        const double sum = summed_mixing_ratio(c.dsd);
        c.raw_sum = static_cast<float>(sum);
        c.dsd = normalize_dsd(c.dsd);
    }
    out.normalized = true;
    return out;
}

std::string encode_snapshot(const SnapshotField& s) {
    if (!s.normalized) throw InvalidArgument("write_snapshot: snapshot must be normalized");
    validate_snapshot(s);
    binio::ByteWriter w;
    w.magic("DSD1");
    w.put<std::uint32_t>(s.nx);
    w.put<std::uint32_t>(s.ny);
    w.put<std::uint32_t>(s.nz);
    w.put<std::uint32_t>(s.n_bins);
    w.put<float>(s.cell_size_m);
    w.put<double>(s.time_s);
    w.put<float>(s.aerosol_factor);
    w.put<std::uint64_t>(s.cells.size());
    for (const Cell& c : s.cells) {
        w.put<std::uint32_t>(c.i);
        w.put<std::uint32_t>(c.j);
        w.put<std::uint32_t>(c.k);
        w.put<float>(c.raw_sum);
        for (double v : c.dsd.mixing_ratios) w.put<float>(static_cast<float>(v));
    }
    return w.bytes();
}

SnapshotField decode_snapshot(std::string_view bytes, const std::string& context) {
    binio::ByteReader r(bytes, context);
    r.expect_magic("DSD1");
    SnapshotField s;
    s.nx = r.get<std::uint32_t>("nx");
    s.ny = r.get<std::uint32_t>("ny");
    s.nz = r.get<std::uint32_t>("nz");
    const auto dims_at = r.offset();
    s.n_bins = r.get<std::uint32_t>("n_bins");
    if (s.n_bins == 0 || s.n_bins > 4096) throw FormatError(context + ": n_bins out of range", dims_at);
    s.cell_size_m = r.get<float>("cell_size_m");
    s.time_s = r.get<double>("time_s");
    s.aerosol_factor = r.get<float>("aerosol_factor");
    const auto count_at = r.offset();
    const auto n_cells = r.get<std::uint64_t>("n_cells");
    const std::uint64_t volume = static_cast<std::uint64_t>(s.nx) * s.ny * s.nz;
    if (n_cells > volume) throw FormatError(context + ": n_cells exceeds grid volume", count_at);
    const std::uint64_t record = 16 + 4ull * s.n_bins;
    r.require(n_cells, record, "cell records");
    s.normalized = true;
    s.cells.resize(n_cells);
    std::unordered_set<std::uint64_t> seen;
    seen.reserve(n_cells);
    for (Cell& c : s.cells) {
        const auto at = r.offset();
        c.i = r.get<std::uint32_t>("i");
        c.j = r.get<std::uint32_t>("j");
        c.k = r.get<std::uint32_t>("k");
        if (c.i >= s.nx || c.j >= s.ny || c.k >= s.nz) throw FormatError(context + ": cell index outside grid", at);
        if (!seen.insert(linear_index(s, c)).second) throw FormatError(context + ": duplicate cell", at);
        c.raw_sum = r.get<float>("raw_sum");
        c.dsd.mixing_ratios.resize(s.n_bins);
        for (double& v : c.dsd.mixing_ratios) v = r.get<float>("mixing ratio");
    }
    r.expect_end();
    return s;
}

void write_snapshot(const SnapshotField& snapshot, const std::filesystem::path& path) {
    binio::write_file(path, encode_snapshot(snapshot));
}

SnapshotField read_snapshot(const std::filesystem::path& path) {
    return decode_snapshot(binio::read_file(path), path.string());
}

void write_snapshot_csv(const SnapshotField& s, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "i,j,k,raw_sum";
    for (std::uint32_t b = 1; b <= s.n_bins; ++b) out << ",r" << b;
    out << '\n';
    char buf[32];
    for (const Cell& c : s.cells) {
        out << c.i << ',' << c.j << ',' << c.k;
        std::snprintf(buf, sizeof buf, ",%.9g", static_cast<double>(c.raw_sum));
        out << buf;
        for (double v : c.dsd.mixing_ratios) {
            std::snprintf(buf, sizeof buf, ",%.17g", v);
            out << buf;
        }
        out << '\n';
    }
    if (!out) throw IoError("write failed: " + path.string());
}

SnapshotField quantize_to_f32(SnapshotField snapshot) {
    for (Cell& c : snapshot.cells) {
        for (double& v : c.dsd.mixing_ratios) v = static_cast<float>(v);
    }
    return snapshot;
}

}  // namespace dropletscope
