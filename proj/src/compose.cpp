#include "dropletscope/compose.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "dropletscope/binio.hpp"
#include "dropletscope/error.hpp"
#include "dropletscope/parallel.hpp"

namespace dropletscope::compose {

using viz::Image;
using viz::Rgb;

Hsv rgb_to_hsv(Rgb c) {
    const double r = c.r / 255.0, g = c.g / 255.0, b = c.b / 255.0;
    const double mx = std::max({r, g, b});
    const double mn = std::min({r, g, b});
    const double delta = mx - mn;
    Hsv out;
    out.v = mx;
    out.s = mx > 0.0 ? delta / mx : 0.0;
    if (delta > 0.0) {
        double h = 0.0;
        if (mx == r) h = 60.0 * std::fmod((g - b) / delta, 6.0);
        else if (mx == g) h = 60.0 * ((b - r) / delta + 2.0);
        else h = 60.0 * ((r - g) / delta + 4.0);
        if (h < 0.0) h += 360.0;
        out.h = h >= 360.0 ? h - 360.0 : h;
    }
    return out;
}

Rgb hsv_to_rgb(const Hsv& c) {
    if (!(c.h >= 0.0 && c.h < 360.0 && c.s >= 0.0 && c.s <= 1.0 && c.v >= 0.0 && c.v <= 1.0)) {
        throw InvalidArgument("hsv_to_rgb: component out of range");
    }
    const double chroma = c.v * c.s;
    const double hp = c.h / 60.0;
    const double x = chroma * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0.0, g = 0.0, b = 0.0;
    switch (static_cast<int>(hp)) {
        case 0: r = chroma; g = x; break;
        case 1: r = x; g = chroma; break;
        case 2: g = chroma; b = x; break;
        case 3: g = x; b = chroma; break;
        case 4: r = x; b = chroma; break;
        default: r = chroma; b = x; break;
    }
    const double m = c.v - chroma;
    const auto to_byte = [](double u) { return static_cast<std::uint8_t>(std::floor(std::clamp(u, 0.0, 1.0) * 255.0 + 0.5)); };
    return Rgb{to_byte(r + m), to_byte(g + m), to_byte(b + m)};
}

double shifted_hue(double h, double origin) {
    double s = std::fmod(h - origin, 360.0);
    if (s < 0.0) s += 360.0;
    return s >= 360.0 ? 0.0 : s;
}

CompositionRow build_row(std::uint32_t k, std::span<const Eigen::Vector3d> zs, const viz::RgbCalibration& cal,
                         const ComposeOptions& opts) {
    if (!(opts.s_norm > 0.0 && opts.s_norm <= 1.0 && opts.v_norm > 0.0 && opts.v_norm <= 1.0)) {
        throw InvalidArgument("build_row: s_norm and v_norm must lie in (0, 1]");
    }
    std::vector<double> hues;
    hues.reserve(zs.size());
    for (const Eigen::Vector3d& z : zs) hues.push_back(rgb_to_hsv(viz::latent_to_rgb(z, cal)).h);
    std::stable_sort(hues.begin(), hues.end(), [&](double a, double b) {
        return shifted_hue(a, opts.hue_origin) < shifted_hue(b, opts.hue_origin);
    });
    CompositionRow row;
    row.k = k;
    row.colors.reserve(hues.size());
    for (double h : hues) row.colors.push_back(hsv_to_rgb(Hsv{h, opts.s_norm, opts.v_norm}));
    row.hues = std::move(hues);
    return row;
}

std::vector<CompositionRow> build_rows(const viz::Embedding& embedding, std::uint32_t nz,
                                       const viz::RgbCalibration& cal, const ComposeOptions& opts) {
    std::vector<std::vector<Eigen::Vector3d>> levels(nz);
    for (const viz::LatentRecord& r : embedding.records) {
        if (r.k >= nz) throw InvalidArgument("build_rows: record above the top level");
        levels[r.k].push_back(r.z);
    }
    std::vector<CompositionRow> rows;
    rows.reserve(nz);
    for (std::uint32_t k = 0; k < nz; ++k) rows.push_back(build_row(k, levels[k], cal, opts));
    return rows;
}

std::vector<std::uint32_t> pixel_extents(std::span<const std::size_t> counts, std::uint32_t width) {
    std::vector<std::uint32_t> out(counts.size(), 0);
    const std::size_t total = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
    if (total == 0) return out;
    // Integer arithmetic keeps the split exact: share_i = counts_i * width / total.
    std::vector<std::pair<std::uint64_t, std::size_t>> rem;
    std::uint64_t used = 0;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        const std::uint64_t num = static_cast<std::uint64_t>(counts[i]) * width;
        out[i] = static_cast<std::uint32_t>(num / total);
        used += out[i];
        rem.emplace_back(num % total, i);
    }
    std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::uint64_t n = 0; n < width - used; ++n) ++out[rem[n].second];
    return out;
}

Image render_composition(std::span<const CompositionRow> rows, std::uint32_t width, std::uint32_t band_height) {
    if (width == 0 || band_height == 0) throw InvalidArgument("render_composition: width and band height must be >= 1");
    const auto n_rows = static_cast<std::uint32_t>(rows.size());
    Image img(width, std::max<std::uint32_t>(n_rows, 1) * band_height);
    for (std::uint32_t k = 0; k < n_rows; ++k) {
        const CompositionRow& row = rows[k];
        if (row.colors.empty()) continue;
        std::vector<Rgb> run_color;
        std::vector<std::size_t> run_len;
        for (const Rgb& c : row.colors) {
            if (!run_color.empty() && run_color.back() == c) {
                ++run_len.back();
            } else {
                run_color.push_back(c);
                run_len.push_back(1);
            }
        }
        const std::vector<std::uint32_t> ext = pixel_extents(run_len, width);
        const std::uint32_t top = (n_rows - 1 - k) * band_height;
        std::uint32_t col = 0;
        for (std::size_t r = 0; r < ext.size(); ++r) {
            for (std::uint32_t x = 0; x < ext[r]; ++x, ++col) {
                for (std::uint32_t y = 0; y < band_height; ++y) img.set(top + y, col, run_color[r]);
            }
        }
    }
    return img;
}

namespace {

// 3x5 glyphs, one 3-bit row per entry, most significant bit on the left.
struct Glyph {
    char c;
    std::array<std::uint8_t, 5> rows;
};

constexpr Glyph kFont[] = {
    {'0', {7, 5, 5, 5, 7}}, {'1', {2, 6, 2, 2, 7}}, {'2', {7, 1, 7, 4, 7}}, {'3', {7, 1, 7, 1, 7}},
    {'4', {5, 5, 7, 1, 1}}, {'5', {7, 4, 7, 1, 7}}, {'6', {7, 4, 7, 5, 7}}, {'7', {7, 1, 1, 1, 1}},
    {'8', {7, 5, 7, 5, 7}}, {'9', {7, 5, 7, 1, 7}}, {'.', {0, 0, 0, 0, 2}}, {'x', {0, 5, 2, 5, 0}},
    {'h', {4, 4, 7, 5, 5}}, {'s', {3, 4, 2, 1, 6}}, {'-', {0, 0, 7, 0, 0}},
};

const Glyph* find_glyph(char c) {
    for (const Glyph& g : kFont) {
        if (g.c == c) return &g;
    }
    return nullptr;
}

std::string format_short(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

bool near(double a, double b) { return std::abs(a - b) <= 1e-6 * std::max(1.0, std::abs(b)); }

}  // namespace

Image render_label(const std::string& text, std::uint32_t scale, Rgb ink) {
    if (scale == 0) throw InvalidArgument("render_label: scale must be >= 1");
    const auto n = static_cast<std::uint32_t>(text.size());
    Image img(std::max<std::uint32_t>(n * 4, 2) * scale - scale, 5 * scale);
    for (std::uint32_t i = 0; i < n; ++i) {
        const Glyph* g = find_glyph(text[i]);
        if (!g) continue;
        for (std::uint32_t row = 0; row < 5; ++row) {
            for (std::uint32_t col = 0; col < 3; ++col) {
                if (!((g->rows[row] >> (2 - col)) & 1u)) continue;
                for (std::uint32_t dy = 0; dy < scale; ++dy) {
                    for (std::uint32_t dx = 0; dx < scale; ++dx) {
                        img.set(row * scale + dy, (i * 4 + col) * scale + dx, ink);
                    }
                }
            }
        }
    }
    return img;
}

Image render_grid(std::span<const viz::Embedding> embeddings, std::span<const double> aerosol_factors,
                  std::span<const double> times_s, std::uint32_t nz, const viz::RgbCalibration& cal,
                  const ComposeOptions& opts) {
    if (aerosol_factors.empty() || times_s.empty()) throw InvalidArgument("render_grid: no panels requested");
    if (nz == 0 || opts.panel_width == 0 || opts.band_height == 0) {
        throw InvalidArgument("render_grid: empty panel geometry");
    }
    const std::size_t n_rows = aerosol_factors.size(), n_cols = times_s.size();
    std::vector<const viz::Embedding*> panel(n_rows * n_cols, nullptr);
    for (std::size_t r = 0; r < n_rows; ++r) {
        for (std::size_t c = 0; c < n_cols; ++c) {
            for (const viz::Embedding& e : embeddings) {
                if (near(e.aerosol_factor, aerosol_factors[r]) && near(e.time_s, times_s[c])) {
                    panel[r * n_cols + c] = &e;
                    break;
                }
            }
            if (!panel[r * n_cols + c]) {
                throw LookupError("render_grid: no embedding for aerosol " + format_short(aerosol_factors[r]) +
                                  "x at t = " + format_short(times_s[c]) + " s");
            }
        }
    }
    std::vector<Image> interiors(panel.size());
    parallel_for(panel.size(), [&](std::size_t p) {
        const auto rows = build_rows(*panel[p], nz, cal, opts);
        interiors[p] = render_composition(rows, opts.panel_width, opts.band_height);
    });

    constexpr std::uint32_t kScale = 2, kGap = 8, kPad = 4;
    std::vector<Image> row_labels, col_labels;
    std::uint32_t label_w = 0;
    for (double a : aerosol_factors) {
        row_labels.push_back(render_label(format_short(a) + "x", kScale));
        label_w = std::max(label_w, row_labels.back().width);
    }
    for (double t : times_s) col_labels.push_back(render_label(format_short(t / 3600.0) + "h", kScale));
    const std::uint32_t label_h = 5 * kScale;
    const std::uint32_t pw = opts.panel_width + 2, ph = nz * opts.band_height + 2;  // 1 px frame
    const std::uint32_t left = kPad + label_w + kGap, top = kPad + label_h + kGap;
    const auto cols32 = static_cast<std::uint32_t>(n_cols), rows32 = static_cast<std::uint32_t>(n_rows);
    Image img(left + cols32 * pw + (cols32 - 1) * kGap + kPad, top + rows32 * ph + (rows32 - 1) * kGap + kPad);

    const Rgb frame{128, 128, 128};
    for (std::uint32_t r = 0; r < rows32; ++r) {
        const std::uint32_t y0 = top + r * (ph + kGap);
        img.blit(row_labels[r], y0 + (ph - label_h) / 2, kPad + label_w - row_labels[r].width);
        for (std::uint32_t c = 0; c < cols32; ++c) {
            const std::uint32_t x0 = left + c * (pw + kGap);
            if (r == 0) img.blit(col_labels[c], kPad, x0 + (pw - std::min(pw, col_labels[c].width)) / 2);
            img.blit(Image(pw, ph, frame), y0, x0);
            img.blit(interiors[r * n_cols + c], y0 + 1, x0 + 1);
        }
    }
    return img;
}

bool hue_in_band(double h, double lo, double hi) { return lo <= hi ? (h >= lo && h < hi) : (h >= lo || h < hi); }

BandCount band_count(const viz::Embedding& embedding, const viz::RgbCalibration& cal, const OnsetOptions& opts) {
    BandCount bc;
    bc.cloudy = embedding.records.size();
    for (const viz::LatentRecord& r : embedding.records) {
        bc.in_band += hue_in_band(rgb_to_hsv(viz::latent_to_rgb(r.z, cal)).h, opts.hue_lo, opts.hue_hi);
    }
    return bc;
}

std::optional<double> detect_onset(std::span<const viz::Embedding> run, const viz::RgbCalibration& cal,
                                   const OnsetOptions& opts) {
    if (run.empty()) throw InvalidArgument("detect_onset: empty run");
    if (!(opts.threshold >= 0.0 && opts.threshold <= 1.0)) {
        throw InvalidArgument("detect_onset: threshold must lie in [0, 1]");
    }
    std::vector<const viz::Embedding*> order;
    for (const viz::Embedding& e : run) order.push_back(&e);
    std::stable_sort(order.begin(), order.end(), [](const auto* a, const auto* b) { return a->time_s < b->time_s; });
    for (const viz::Embedding* e : order) {
        const BandCount bc = band_count(*e, cal, opts);
        if (bc.in_band > 0 && bc.fraction() >= opts.threshold) return e->time_s;
    }
    return std::nullopt;
}

std::string format_onset_csv(std::span<const OnsetRow> rows) {
    std::string s = "aerosol_factor,onset_time_s,hue_lo,hue_hi,threshold\n";
    for (const OnsetRow& r : rows) {
        s += format_number(r.aerosol_factor) + ',' + (r.onset_time_s ? format_number(*r.onset_time_s) : "none") + ',' +
             format_number(r.options.hue_lo) + ',' + format_number(r.options.hue_hi) + ',' +
             format_number(r.options.threshold) + '\n';
    }
    return s;
}

void write_onset_csv(std::span<const OnsetRow> rows, const std::filesystem::path& path) {
    binio::write_file(path, format_onset_csv(rows));
}

}  // namespace dropletscope::compose
