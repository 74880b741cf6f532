#include "dropletscope/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "dropletscope/error.hpp"

namespace dropletscope::pipeline {

namespace fs = std::filesystem;

namespace {

enum class Kind { UInt, Double, DoubleList, UIntList, Bool };

struct KeySpec {
    const char* key;
    const char* value;
    Kind kind;
};

// Every accepted key with its default.
constexpr KeySpec kKeys[] = {
    {"synth.nx", "64", Kind::UInt},
    {"synth.ny", "64", Kind::UInt},
    {"synth.nz", "24", Kind::UInt},
    {"synth.cell_size_m", "40", Kind::Double},
    {"synth.n_timesteps", "48", Kind::UInt},
    {"synth.dt_s", "600", Kind::Double},
    {"synth.aerosol_factors", "0.5,1,2", Kind::DoubleList},
    {"synth.onset_time_s", "-1", Kind::Double},
    {"synth.ambient_mode_bin", "8", Kind::UInt},
    {"synth.precip_mode_bin", "24", Kind::UInt},
    {"synth.spectral_width", "1.2", Kind::Double},
    {"synth.width_growth", "1.5", Kind::Double},
    {"synth.noise_sigma", "0.05", Kind::Double},
    {"synth.cloud_cover", "0.06", Kind::Double},
    {"synth.cloud_base_k", "6", Kind::UInt},
    {"synth.max_cloud_depth", "12", Kind::UInt},
    {"synth.ramp_time_s", "5400", Kind::Double},
    {"synth.fallout", "0.6", Kind::Double},
    {"synth.liquid_scale", "0.001", Kind::Double},
    {"synth.seed", "42", Kind::UInt},

    {"train.beta", "0.001", Kind::Double},
    {"train.lr", "0.001", Kind::Double},
    {"train.epochs", "20", Kind::UInt},
    {"train.batch", "256", Kind::UInt},
    {"train.seed", "1", Kind::UInt},
    {"train.mc_samples", "1", Kind::UInt},
    {"train.adam_beta1", "0.9", Kind::Double},
    {"train.adam_beta2", "0.999", Kind::Double},
    {"train.adam_epsilon", "1e-08", Kind::Double},
    {"train.encoder_hidden", "64,64", Kind::UIntList},
    {"train.decoder_hidden", "64,64", Kind::UIntList},
    {"train.orient", "1", Kind::Bool},
    {"train.early_fraction", "0.25", Kind::Double},
    {"train.late_fraction", "0.25", Kind::Double},

    {"viz.pct_lo", "1", Kind::Double},
    {"viz.pct_hi", "99", Kind::Double},
    {"viz.slice_k", "8", Kind::UInt},
    {"viz.slice_j", "32", Kind::UInt},
    {"viz.times", "7200,14400,28800", Kind::DoubleList},

    {"path.n_nodes", "16", Kind::UInt},
    {"path.n_iters", "50", Kind::UInt},
    {"path.k", "1000", Kind::UInt},
    {"path.bandwidth", "0", Kind::Double},
    {"path.cap", "100000", Kind::UInt},
    {"path.early_fraction", "0.25", Kind::Double},
    {"path.late_fraction", "0.25", Kind::Double},
    {"path.seed", "0", Kind::UInt},
    {"path.aerosol", "0", Kind::Double},

    {"compose.times", "7200,14400,21600,28800", Kind::DoubleList},
    {"compose.panel_width", "160", Kind::UInt},
    {"compose.band_height", "4", Kind::UInt},
    {"compose.s_norm", "1", Kind::Double},
    {"compose.v_norm", "1", Kind::Double},
    {"compose.hue_origin", "270", Kind::Double},
    {"compose.onset_hue_lo", "90", Kind::Double},
    {"compose.onset_hue_hi", "270", Kind::Double},
    {"compose.onset_threshold", "0.05", Kind::Double},
};

const KeySpec* find_key(const std::string& key) {
    for (const KeySpec& k : kKeys) {
        if (key == k.key) return &k;
    }
    return nullptr;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::string part;
    std::istringstream in(s);
    while (std::getline(in, part, sep)) parts.push_back(trim(part));
    if (!s.empty() && s.back() == sep) parts.emplace_back();
    return parts;
}

bool parse_uint(const std::string& s, std::uint64_t& out) {
    if (s.empty()) return false;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && ptr == s.data() + s.size();
}

bool parse_double(const std::string& s, double& out) {
    if (s.empty()) return false;
    char* end = nullptr;
    out = std::strtod(s.c_str(), &end);
    return end == s.c_str() + s.size() && std::isfinite(out);
}

bool valid_value(Kind kind, const std::string& v) {
    std::uint64_t u = 0;
    double d = 0.0;
    switch (kind) {
        case Kind::UInt: return parse_uint(v, u);
        case Kind::Double: return parse_double(v, d);
        case Kind::Bool: return v == "0" || v == "1" || v == "true" || v == "false";
        case Kind::DoubleList:
        case Kind::UIntList: {
            const auto parts = split(v, ',');
            if (parts.empty()) return false;
            for (const std::string& p : parts) {
                if (kind == Kind::UIntList ? !parse_uint(p, u) : !parse_double(p, d)) return false;
            }
            return true;
        }
    }
    return false;
}

const char* kind_name(Kind kind) {
    switch (kind) {
        case Kind::UInt: return "a non-negative integer";
        case Kind::Double: return "a finite number";
        case Kind::Bool: return "0, 1, true or false";
        case Kind::DoubleList: return "a comma-separated list of numbers";
        case Kind::UIntList: return "a comma-separated list of non-negative integers";
    }
    return "";
}

const std::map<std::string, std::string>& stage_commands() {
    static const std::map<std::string, std::string> m = {
        {"data", "gen"},         {"model", "train"},  {"embed", "embed"},     {"calib", "calibrate"},
        {"render", "render"},    {"trace", "trace"},  {"compose", "compose"}, {"onset", "onset"},
    };
    return m;
}

std::string label(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

fs::path relative_to(const fs::path& p, const fs::path& base) {
    return fs::absolute(p).lexically_normal().lexically_relative(fs::absolute(base).lexically_normal());
}

std::string rel(const fs::path& p, const fs::path& work) { return relative_to(p, work).generic_string(); }

bool same_value(double a, double b) { return std::abs(a - b) <= 1e-6; }

void log_line(const std::string& msg) { std::cerr << msg << '\n'; }

/// Clears the stage directory and writes the resolved config into it.
fs::path begin_stage(const Config& cfg, const fs::path& work, const std::string& dir) {
    const fs::path out = work / dir;
    std::error_code ec;
    fs::remove_all(out, ec);
    if (ec) throw IoError("cannot clear " + out.string() + ": " + ec.message());
    fs::create_directories(out, ec);
    if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
    std::ofstream f(out / "config.resolved.txt");
    f << cfg.resolved();
    if (!f) throw IoError("write failed: " + (out / "config.resolved.txt").string());
    return out;
}

void finish_stage(const fs::path& work, const std::string& dir, const std::vector<fs::path>& inputs) {
    const fs::path out = work / dir;
    std::vector<std::string> outputs;
    for (const auto& e : fs::recursive_directory_iterator(out)) {
        if (!e.is_regular_file() || e.path() == out / "stage.txt") continue;
        outputs.push_back(rel(e.path(), work));
    }
    std::sort(outputs.begin(), outputs.end());
    std::vector<std::string> in_rel;
    for (const fs::path& p : inputs) in_rel.push_back(rel(p, work));
    std::sort(in_rel.begin(), in_rel.end());
    in_rel.erase(std::unique(in_rel.begin(), in_rel.end()), in_rel.end());

    std::ofstream f(out / "stage.txt");
    f << "stage " << stage_commands().at(dir) << '\n';
    for (const std::string& p : in_rel) f << "input " << p << ' ' << file_hash(work / p) << '\n';
    for (const std::string& p : outputs) f << "output " << p << ' ' << file_hash(work / p) << '\n';
    if (!f) throw IoError("write failed: " + (out / "stage.txt").string());
}

void copy_artifact(const fs::path& from, const fs::path& to) {
    std::error_code ec;
    fs::copy_file(from, to, fs::copy_options::overwrite_existing, ec);
    if (ec) throw IoError("cannot copy " + from.string() + " to " + to.string() + ": " + ec.message());
}

viz::GridDims grid_of(const SnapshotField& s) { return viz::GridDims{s.nx, s.ny, s.nz}; }

std::vector<double> distinct_factors(std::span<const EmbeddedSnapshot> snaps) {
    std::vector<double> f;
    for (const auto& s : snaps) {
        const double a = s.embedding.aerosol_factor;
        if (std::none_of(f.begin(), f.end(), [&](double x) { return same_value(x, a); })) f.push_back(a);
    }
    std::sort(f.begin(), f.end());
    return f;
}

const EmbeddedSnapshot& find_snapshot(std::span<const EmbeddedSnapshot> snaps, double factor, double t) {
    for (const auto& s : snaps) {
        if (same_value(s.embedding.aerosol_factor, factor) && same_value(s.embedding.time_s, t)) return s;
    }
    throw LookupError("no embedding for " + label(factor) + "x at t = " + label(t) + " s");
}

/// Column images of the averaged Dsds: one 8-px column per node, bin 1 at
/// the bottom, darker where the bin holds more of the node's mass.
viz::Image evolution_image(std::span<const path::PathSample> samples) {
    constexpr std::uint32_t kColumn = 8, kRow = 4;
    const auto n_bins = static_cast<std::uint32_t>(samples.front().dsd.size());
    viz::Image img(static_cast<std::uint32_t>(samples.size()) * kColumn, n_bins * kRow);
    for (std::size_t n = 0; n < samples.size(); ++n) {
        const auto& v = samples[n].dsd.mixing_ratios;
        const double peak = *std::max_element(v.begin(), v.end());
        for (std::uint32_t b = 0; b < n_bins; ++b) {
            const double t = peak > 0.0 ? v[b] / peak : 0.0;
            const auto shade = static_cast<std::uint8_t>(std::floor(255.0 * (1.0 - t) + 0.5));
            const auto blue = static_cast<std::uint8_t>(std::floor(255.0 * (1.0 - 0.4 * t) + 0.5));
            for (std::uint32_t r = 0; r < kRow; ++r) {
                for (std::uint32_t c = 0; c < kColumn; ++c) {
                    img.set((n_bins - 1 - b) * kRow + r, static_cast<std::uint32_t>(n) * kColumn + c,
                            {shade, shade, blue});
                }
            }
        }
    }
    return img;
}

}  // namespace

// ---- Config -----------------------------------------------------------------

Config::Config() {
    for (const KeySpec& k : kKeys) values_[k.key] = k.value;
}

void Config::set(const std::string& key, const std::string& value) {
    const KeySpec* entry = find_key(key);
    if (entry == nullptr) throw InvalidArgument("unknown config key '" + key + "'");
    const std::string v = trim(value);
    if (!valid_value(entry->kind, v)) {
        throw InvalidArgument("config key '" + key + "' expects " + kind_name(entry->kind) + ", got '" + v + "'");
    }
    values_[key] = v;
}

void Config::load_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    std::string line, section;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
        if (line.front() == '[') {
            if (line.back() != ']') throw InvalidArgument(where + "malformed section header");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw InvalidArgument(where + "expected key = value");
        std::string key = trim(line.substr(0, eq));
        if (!section.empty()) key = section + "." + key;
        try {
            set(key, line.substr(eq + 1));
        } catch (const InvalidArgument& e) {
            throw InvalidArgument(where + e.what());
        }
    }
}

void Config::apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw InvalidArgument("expected key=value, got '" + assignment + "'");
    set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

const std::string& Config::get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw InvalidArgument("unknown config key '" + key + "'");
    return it->second;
}

double Config::get_double(const std::string& key) const {
    double d = 0.0;
    if (!parse_double(get(key), d)) throw InvalidArgument("config key '" + key + "' is not a number");
    return d;
}

std::int64_t Config::get_int(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true") return 1;
    if (v == "false") return 0;
    std::int64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
        throw InvalidArgument("config key '" + key + "' is not an integer");
    }
    return out;
}

std::uint64_t Config::get_uint(const std::string& key) const {
    std::uint64_t u = 0;
    if (!parse_uint(get(key), u)) throw InvalidArgument("config key '" + key + "' is not a non-negative integer");
    return u;
}

std::vector<double> Config::get_list(const std::string& key) const {
    std::vector<double> out;
    for (const std::string& p : split(get(key), ',')) {
        double d = 0.0;
        if (!parse_double(p, d)) throw InvalidArgument("config key '" + key + "' is not a list of numbers");
        out.push_back(d);
    }
    return out;
}

std::string Config::resolved() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
}

std::vector<std::string> Config::keys() const {
    std::vector<std::string> out;
    for (const auto& kv : values_) out.push_back(kv.first);
    return out;
}

synth::SynthConfig synth_config(const Config& cfg, double aerosol_factor) {
    synth::SynthConfig s;
    auto u32 = [&](const char* k) { return static_cast<std::uint32_t>(cfg.get_uint(k)); };
    s.nx = u32("synth.nx");
    s.ny = u32("synth.ny");
    s.nz = u32("synth.nz");
    s.cell_size_m = static_cast<float>(cfg.get_double("synth.cell_size_m"));
    s.n_timesteps = u32("synth.n_timesteps");
    s.dt_s = cfg.get_double("synth.dt_s");
    s.aerosol_factor = aerosol_factor;
    s.onset_time_s = cfg.get_double("synth.onset_time_s");
    s.ambient_mode_bin = u32("synth.ambient_mode_bin");
    s.precip_mode_bin = u32("synth.precip_mode_bin");
    s.spectral_width = cfg.get_double("synth.spectral_width");
    s.width_growth = cfg.get_double("synth.width_growth");
    s.noise_sigma = cfg.get_double("synth.noise_sigma");
    s.cloud_cover = cfg.get_double("synth.cloud_cover");
    s.cloud_base_k = u32("synth.cloud_base_k");
    s.max_cloud_depth = u32("synth.max_cloud_depth");
    s.ramp_time_s = cfg.get_double("synth.ramp_time_s");
    s.fallout = cfg.get_double("synth.fallout");
    s.liquid_scale = cfg.get_double("synth.liquid_scale");
    s.seed = cfg.get_uint("synth.seed");
    synth::validate_config(s);
    return s;
}

vae::TrainConfig train_config(const Config& cfg) {
    vae::TrainConfig t;
    t.beta = cfg.get_double("train.beta");
    t.learning_rate = cfg.get_double("train.lr");
    t.n_epochs = cfg.get_uint("train.epochs");
    t.batch_size = cfg.get_uint("train.batch");
    t.seed = cfg.get_uint("train.seed");
    t.mc_samples = cfg.get_uint("train.mc_samples");
    t.adam_beta1 = cfg.get_double("train.adam_beta1");
    t.adam_beta2 = cfg.get_double("train.adam_beta2");
    t.adam_epsilon = cfg.get_double("train.adam_epsilon");
    auto sizes = [&](const char* key) {
        std::vector<std::size_t> out;
        for (double d : cfg.get_list(key)) out.push_back(static_cast<std::size_t>(d));
        return out;
    };
    t.architecture.encoder_hidden = sizes("train.encoder_hidden");
    t.architecture.decoder_hidden = sizes("train.decoder_hidden");
    return t;
}

// ---- Files and data -----------------------------------------------------------

std::string file_hash(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        const std::streamsize got = in.gcount();
        for (std::streamsize n = 0; n < got; ++n) {
            h ^= static_cast<unsigned char>(buf[static_cast<std::size_t>(n)]);
            h *= 0x100000001b3ULL;
        }
    }
    char out[17];
    std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(h));
    return out;
}

std::vector<LoadedSnapshot> load_dataset(const fs::path& manifest) {
    if (!fs::exists(manifest)) throw IoError("missing manifest " + manifest.string());
    std::vector<LoadedSnapshot> out;
    for (synth::ManifestEntry& e : synth::read_manifest(manifest)) {
        SnapshotField f = read_snapshot(e.path);
        out.push_back(LoadedSnapshot{std::move(e), std::move(f)});
    }
    if (out.empty()) throw InvalidData("manifest " + manifest.string() + " lists no snapshots");
    return out;
}

Eigen::MatrixXd sample_matrix(std::span<const SnapshotField> fields) {
    Eigen::Index n = 0;
    for (const SnapshotField& f : fields) n += static_cast<Eigen::Index>(f.cells.size());
    if (n == 0) return Eigen::MatrixXd(fields.empty() ? 0 : fields.front().n_bins, 0);
    Eigen::MatrixXd x(fields.front().n_bins, n);
    Eigen::Index col = 0;
    for (const SnapshotField& f : fields) {
        if (f.n_bins != fields.front().n_bins) throw InvalidData("snapshots disagree on the bin count");
        for (const Cell& c : f.cells) {
            const Dsd d = normalize_dsd(c.dsd);
            for (std::size_t b = 0; b < d.size(); ++b) x(static_cast<Eigen::Index>(b), col) = d[b];
            ++col;
        }
    }
    return x;
}

Eigen::MatrixXd sample_matrix(std::span<const LoadedSnapshot> snapshots) {
    std::vector<SnapshotField> fields;
    fields.reserve(snapshots.size());
    for (const auto& s : snapshots) fields.push_back(s.field);
    return sample_matrix(std::span<const SnapshotField>(fields));
}

bool TimeSplit::is_early(double t) const {
    return std::any_of(early.begin(), early.end(), [&](double x) { return same_value(x, t); });
}

bool TimeSplit::is_late(double t) const {
    return std::any_of(late.begin(), late.end(), [&](double x) { return same_value(x, t); });
}

TimeSplit split_times(std::vector<double> times, double early_fraction, double late_fraction) {
    if (times.empty()) throw InvalidArgument("no time steps to split");
    for (double f : {early_fraction, late_fraction}) {
        if (!(f > 0.0 && f <= 1.0)) throw InvalidArgument("time fractions must lie in (0, 1]");
    }
    std::sort(times.begin(), times.end());
    std::vector<double> distinct;
    for (double t : times) {
        if (distinct.empty() || !same_value(distinct.back(), t)) distinct.push_back(t);
    }
    const double n = static_cast<double>(distinct.size());
    const auto n_early = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(early_fraction * n)));
    const auto n_late = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(late_fraction * n)));
    TimeSplit s;
    s.early.assign(distinct.begin(), distinct.begin() + static_cast<std::ptrdiff_t>(n_early));
    s.late.assign(distinct.end() - static_cast<std::ptrdiff_t>(n_late), distinct.end());
    return s;
}

TrainOutcome train_and_orient(std::span<const LoadedSnapshot> data, const vae::TrainConfig& tcfg, bool orient,
                              double early_fraction, double late_fraction,
                              const std::function<void(const vae::EpochStats&)>& on_epoch) {
    TrainOutcome out{vae::train(sample_matrix(data), tcfg, std::nullopt, on_epoch), {}};
    if (!orient) return out;
    std::vector<double> times;
    for (const auto& s : data) times.push_back(s.entry.time_s);
    const TimeSplit split = split_times(times, early_fraction, late_fraction);
    std::vector<SnapshotField> early, late;
    for (const auto& s : data) {
        if (split.is_early(s.entry.time_s)) early.push_back(s.field);
        if (split.is_late(s.entry.time_s)) late.push_back(s.field);
    }
    out.orientation = vae::orient_latent(out.result.model, sample_matrix(std::span<const SnapshotField>(early)),
                                         sample_matrix(std::span<const SnapshotField>(late)));
    return out;
}

void write_loss_csv(std::span<const vae::EpochStats> history, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "epoch,mean_nelbo,mean_recon,mean_kl\n";
    for (const auto& e : history) {
        out << e.epoch << ',' << format_number(e.mean_nelbo) << ',' << format_number(e.mean_recon) << ','
            << format_number(e.mean_kl) << '\n';
    }
    if (!out) throw IoError("write failed: " + path.string());
}

std::vector<EmbeddedSnapshot> load_embeddings(const fs::path& work) {
    const fs::path manifest = work / "embed" / "manifest.txt";
    std::ifstream in(manifest);
    if (!in) throw IoError("cannot open " + manifest.string());
    std::vector<EmbeddedSnapshot> out;
    std::string line;
    std::uint64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string lat, snap;
        double t = 0.0, a = 0.0;
        if (!(ls >> lat >> t >> a >> snap)) {
            throw FormatError(manifest.string() + ": malformed line " + std::to_string(line_no), line_no);
        }
        EmbeddedSnapshot e{fs::path("embed") / lat, snap, viz::read_embedding(work / "embed" / lat)};
        e.embedding.snapshot = snap;
        out.push_back(std::move(e));
    }
    return out;
}

TraceOutcome trace_path(std::span<const viz::Embedding> embeddings, std::span<const Dsd> dsds, const Config& cfg,
                        const std::optional<std::vector<Eigen::Vector3d>>& waypoints) {
    const double only = cfg.get_double("path.aerosol");
    std::vector<double> times;
    for (const auto& e : embeddings) {
        if (only <= 0.0 || same_value(e.aerosol_factor, only)) times.push_back(e.time_s);
    }
    if (times.empty()) throw LookupError("no embeddings for aerosol factor " + label(only) + "x");
    const TimeSplit split =
        split_times(times, cfg.get_double("path.early_fraction"), cfg.get_double("path.late_fraction"));

    std::vector<Eigen::Vector3d> points, early, late;
    std::vector<Dsd> kept;
    std::size_t offset = 0;
    for (const auto& e : embeddings) {
        const bool use = only <= 0.0 || same_value(e.aerosol_factor, only);
        for (std::size_t r = 0; r < e.records.size(); ++r) {
            if (!use) continue;
            if (offset + r >= dsds.size()) throw InvalidArgument("trace: fewer Dsds than latent records");
            const Eigen::Vector3d& z = e.records[r].z;
            points.push_back(z);
            kept.push_back(dsds[offset + r]);
            if (split.is_early(e.time_s)) early.push_back(z);
            if (split.is_late(e.time_s)) late.push_back(z);
        }
        offset += e.records.size();
    }
    if (offset != dsds.size()) throw InvalidArgument("trace: Dsds and latent records are not aligned");
    if (points.empty()) throw InvalidData("trace: no latent records");

    const std::size_t n_nodes = cfg.get_uint("path.n_nodes");
    TraceOutcome out;
    if (waypoints) {
        out.path = path::resample_polyline(*waypoints, n_nodes);
    } else {
        if (early.empty() || late.empty()) throw InvalidData("trace: early or late set has no records");
        double h = cfg.get_double("path.bandwidth");
        if (h <= 0.0) h = path::scott_bandwidth(late);
        const auto nov = path::novelty_points(early, late, h, cfg.get_uint("path.cap"), cfg.get_uint("path.seed"));
        const path::LatentPath fitted = path::fit_path(nov, n_nodes, cfg.get_uint("path.n_iters"));
        Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
        for (const auto& z : early) centroid += z;
        centroid /= static_cast<double>(early.size());
        out.path = path::orient_path(fitted, centroid);
    }
    const KdTree tree(points);
    out.n_records = points.size();
    out.k = std::min<std::size_t>(cfg.get_uint("path.k"), points.size());
    out.samples = path::path_evolution(out.path, tree, kept, out.k);
    return out;
}

// ---- Stage records ------------------------------------------------------------

StageRecord read_stage_record(const fs::path& work, const std::string& stage_dir) {
    const auto cmd = stage_commands().find(stage_dir);
    if (cmd == stage_commands().end()) throw InvalidArgument("unknown stage directory '" + stage_dir + "'");
    const fs::path file = work / stage_dir / "stage.txt";
    std::ifstream in(file);
    if (!in) {
        throw StageError("missing artifact " + (fs::path(stage_dir) / "stage.txt").generic_string() +
                         ": run `dropletscope " + cmd->second + "` first");
    }
    StageRecord rec;
    std::string line;
    std::uint64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream ls(line);
        std::string kind, a, b;
        ls >> kind >> a;
        if (kind == "stage") {
            rec.stage = a;
        } else if ((kind == "input" || kind == "output") && (ls >> b)) {
            (kind == "input" ? rec.inputs : rec.outputs).emplace_back(a, b);
        } else if (!line.empty()) {
            throw FormatError(file.string() + ": malformed line " + std::to_string(line_no), line_no);
        }
    }
    return rec;
}

StageRecord require_stage(const fs::path& work, const std::string& stage_dir) {
    StageRecord rec = read_stage_record(work, stage_dir);
    const std::string cmd = "`dropletscope " + stage_commands().at(stage_dir) + "`";
    for (const auto& [p, h] : rec.outputs) {
        if (!fs::exists(work / p)) throw StageError("missing artifact " + p + ": run " + cmd + " first");
        if (file_hash(work / p) != h) throw StageError(p + " changed after " + cmd + " wrote it; re-run " + cmd);
    }
    for (const auto& [p, h] : rec.inputs) {
        if (!fs::exists(work / p) || file_hash(work / p) != h) {
            throw StageError("stale " + stage_dir + " outputs: input " + p + " changed since " + cmd + " ran; re-run " +
                             cmd);
        }
    }
    return rec;
}

// ---- Stages -------------------------------------------------------------------

void cmd_gen(const Config& cfg, const fs::path& work, const std::optional<double>& only_aerosol) {
    std::vector<double> factors = cfg.get_list("synth.aerosol_factors");
    if (only_aerosol) factors = {*only_aerosol};
    std::vector<synth::SynthConfig> runs;
    for (double a : factors) runs.push_back(synth_config(cfg, a));

    const fs::path out = begin_stage(cfg, work, "data");
    std::vector<synth::ManifestEntry> all;
    for (const synth::SynthConfig& s : runs) {
        const std::string dir = "a" + label(s.aerosol_factor);
        synth::generate_dataset(s, out / dir);
        for (synth::ManifestEntry e : synth::read_manifest(out / dir / "manifest.txt")) {
            e.path = fs::path(dir) / e.path.filename();
            all.push_back(std::move(e));
        }
        log_line("gen: " + std::to_string(s.n_timesteps + 1) + " snapshots for " + label(s.aerosol_factor) + "x");
    }
    synth::write_manifest(all, out / "manifest.txt");
    finish_stage(work, "data", {});
}

void cmd_train(const Config& cfg, const fs::path& work) {
    const vae::TrainConfig tcfg = train_config(cfg);
    const StageRecord data = require_stage(work, "data");
    const auto snapshots = load_dataset(work / "data" / "manifest.txt");

    const fs::path out = begin_stage(cfg, work, "model");
    const TrainOutcome t = train_and_orient(
        snapshots, tcfg, cfg.get_int("train.orient") != 0, cfg.get_double("train.early_fraction"),
        cfg.get_double("train.late_fraction"), [](const vae::EpochStats& e) {
            log_line("train: epoch " + std::to_string(e.epoch) + " mean NELBO " + format_number(e.mean_nelbo));
        });
    vae::checkpoint_save(t.result.model, out / "vae.ckpt");
    write_loss_csv(t.result.history, out / "loss.csv");
    {
        std::ofstream f(out / "orientation.txt");
        const auto& o = t.orientation;
        f << "perm " << o.perm[0] << ' ' << o.perm[1] << ' ' << o.perm[2] << '\n';
        f << "sign " << format_number(o.sign[0]) << ' ' << format_number(o.sign[1]) << ' '
          << format_number(o.sign[2]) << '\n';
        f << "shift " << format_number(o.shift[0]) << ' ' << format_number(o.shift[1]) << ' '
          << format_number(o.shift[2]) << '\n';
        if (!f) throw IoError("write failed: " + (out / "orientation.txt").string());
    }
    std::vector<fs::path> inputs;
    for (const auto& [p, h] : data.outputs) inputs.push_back(work / p);
    finish_stage(work, "model", inputs);
}

void cmd_embed(const Config& cfg, const fs::path& work) {
    require_stage(work, "data");
    require_stage(work, "model");
    const vae::VaeModel model = vae::checkpoint_load(work / "model" / "vae.ckpt");
    const fs::path data_manifest = work / "data" / "manifest.txt";
    const auto entries = synth::read_manifest(data_manifest);

    const fs::path out = begin_stage(cfg, work, "embed");
    std::vector<fs::path> inputs{work / "model" / "vae.ckpt", data_manifest};
    std::ofstream manifest(out / "manifest.txt");
    for (const synth::ManifestEntry& e : entries) {
        viz::Embedding emb = viz::embed_snapshot(model, read_snapshot(e.path));
        const fs::path snap_rel = relative_to(e.path, work / "data");
        std::string stem = snap_rel.stem().string();
        if (stem.rfind("snap_", 0) == 0) stem = "lat_" + stem.substr(5);
        const fs::path lat_rel = snap_rel.parent_path() / (stem + ".lat");
        fs::create_directories(out / lat_rel.parent_path());
        write_embedding(emb, out / lat_rel);
        manifest << lat_rel.generic_string() << ' ' << format_number(emb.time_s) << ' '
                 << format_number(emb.aerosol_factor) << ' ' << rel(e.path, work) << '\n';
        inputs.push_back(e.path);
    }
    manifest.close();
    if (!manifest) throw IoError("write failed: " + (out / "manifest.txt").string());
    log_line("embed: " + std::to_string(entries.size()) + " snapshots");
    finish_stage(work, "embed", inputs);
}

void cmd_calibrate(const Config& cfg, const fs::path& work) {
    const StageRecord embed = require_stage(work, "embed");
    const auto snaps = load_embeddings(work);
    std::vector<viz::Embedding> embs;
    for (const auto& s : snaps) embs.push_back(s.embedding);
    const viz::RgbCalibration cal = viz::calibrate_rgb(embs, cfg.get_double("viz.pct_lo"), cfg.get_double("viz.pct_hi"));

    const fs::path out = begin_stage(cfg, work, "calib");
    viz::write_calibration(cal, out / "calibration.txt");
    std::vector<fs::path> inputs{work / "embed" / "manifest.txt"};
    for (const auto& s : snaps) inputs.push_back(work / s.lat_path);
    finish_stage(work, "calib", inputs);
}

void cmd_render(const Config& cfg, const fs::path& work) {
    require_stage(work, "embed");
    require_stage(work, "calib");
    const viz::RgbCalibration cal = viz::read_calibration(work / "calib" / "calibration.txt");
    const auto snaps = load_embeddings(work);
    if (snaps.empty()) throw InvalidData("embed/manifest.txt lists no embeddings");
    const auto k = static_cast<std::uint32_t>(cfg.get_uint("viz.slice_k"));
    const auto j = static_cast<std::uint32_t>(cfg.get_uint("viz.slice_j"));
    const std::vector<double> times = cfg.get_list("viz.times");

    struct Job {
        const EmbeddedSnapshot* snap;
        double factor, time;
    };
    std::vector<Job> jobs;
    for (double a : distinct_factors(snaps)) {
        for (double t : times) jobs.push_back({&find_snapshot(snaps, a, t), a, t});
    }

    const fs::path out = begin_stage(cfg, work, "render");
    std::vector<fs::path> inputs{work / "calib" / "calibration.txt", work / "embed" / "manifest.txt"};
    for (const Job& job : jobs) {
        const SnapshotField field = read_snapshot(work / job.snap->snapshot);
        const viz::GridDims dims = grid_of(field);
        const std::string base = "slice_a" + label(job.factor) + "_t" + label(job.time);
        viz::write_ppm(viz::render_slice(job.snap->embedding, dims, viz::SliceAxis::Horizontal, k, cal),
                       out / (base + "_k" + std::to_string(k) + ".ppm"));
        viz::write_ppm(viz::render_slice(job.snap->embedding, dims, viz::SliceAxis::Vertical, j, cal),
                       out / (base + "_j" + std::to_string(j) + ".ppm"));
        inputs.push_back(work / job.snap->lat_path);
        inputs.push_back(work / job.snap->snapshot);
    }
    copy_artifact(work / "calib" / "calibration.txt", out / "calibration.txt");
    log_line("render: " + std::to_string(2 * jobs.size()) + " slices");
    finish_stage(work, "render", inputs);
}

void cmd_trace(const Config& cfg, const fs::path& work, const std::optional<fs::path>& waypoints) {
    require_stage(work, "embed");
    std::optional<std::vector<Eigen::Vector3d>> wp;
    if (waypoints) wp = path::read_waypoints(*waypoints);
    const auto snaps = load_embeddings(work);

    std::vector<viz::Embedding> embs;
    std::vector<Dsd> dsds;
    std::vector<fs::path> inputs{work / "embed" / "manifest.txt"};
    for (const auto& s : snaps) {
        const SnapshotField field = read_snapshot(work / s.snapshot);
        if (field.cells.size() != s.embedding.records.size()) {
            throw InvalidData(s.lat_path.generic_string() + " does not match " + s.snapshot.generic_string());
        }
        for (const Cell& c : field.cells) dsds.push_back(normalize_dsd(c.dsd));
        embs.push_back(s.embedding);
        inputs.push_back(work / s.lat_path);
        inputs.push_back(work / s.snapshot);
    }
    const TraceOutcome t = trace_path(embs, dsds, cfg, wp);

    const fs::path out = begin_stage(cfg, work, "trace");
    path::write_path_csv(t.samples, out / "path.csv");
    viz::write_ppm(evolution_image(t.samples), out / "evolution.ppm");
    {
        std::ofstream f(out / "path_nodes.txt");
        for (const auto& z : t.path.nodes) {
            f << format_number(z[0]) << ' ' << format_number(z[1]) << ' ' << format_number(z[2]) << '\n';
        }
        if (!f) throw IoError("write failed: " + (out / "path_nodes.txt").string());
    }
    if (waypoints) copy_artifact(*waypoints, out / "waypoints.txt");
    log_line("trace: " + std::to_string(t.path.nodes.size()) + " nodes, k = " + std::to_string(t.k) + " of " +
             std::to_string(t.n_records) + " records");
    finish_stage(work, "trace", inputs);
}

void cmd_compose(const Config& cfg, const fs::path& work) {
    require_stage(work, "embed");
    require_stage(work, "calib");
    const viz::RgbCalibration cal = viz::read_calibration(work / "calib" / "calibration.txt");
    const auto snaps = load_embeddings(work);
    if (snaps.empty()) throw InvalidData("embed/manifest.txt lists no embeddings");
    compose::ComposeOptions opts;
    opts.s_norm = cfg.get_double("compose.s_norm");
    opts.v_norm = cfg.get_double("compose.v_norm");
    opts.hue_origin = cfg.get_double("compose.hue_origin");
    opts.panel_width = static_cast<std::uint32_t>(cfg.get_uint("compose.panel_width"));
    opts.band_height = static_cast<std::uint32_t>(cfg.get_uint("compose.band_height"));
    const std::vector<double> factors = distinct_factors(snaps);
    const std::vector<double> times = cfg.get_list("compose.times");

    std::vector<viz::Embedding> embs;
    std::vector<fs::path> inputs{work / "calib" / "calibration.txt", work / "embed" / "manifest.txt",
                                 work / snaps.front().snapshot};
    for (double a : factors) {
        for (double t : times) {
            const EmbeddedSnapshot& s = find_snapshot(snaps, a, t);
            embs.push_back(s.embedding);
            inputs.push_back(work / s.lat_path);
        }
    }
    const std::uint32_t nz = read_snapshot(work / snaps.front().snapshot).nz;
    const viz::Image grid = compose::render_grid(embs, factors, times, nz, cal, opts);

    const fs::path out = begin_stage(cfg, work, "compose");
    viz::write_ppm(grid, out / "composition.ppm");
    copy_artifact(work / "calib" / "calibration.txt", out / "calibration.txt");
    finish_stage(work, "compose", inputs);
}

std::vector<compose::OnsetRow> cmd_onset(const Config& cfg, const fs::path& work) {
    require_stage(work, "embed");
    require_stage(work, "calib");
    const viz::RgbCalibration cal = viz::read_calibration(work / "calib" / "calibration.txt");
    const auto snaps = load_embeddings(work);
    if (snaps.empty()) throw InvalidData("embed/manifest.txt lists no embeddings");
    compose::OnsetOptions opts;
    opts.hue_lo = cfg.get_double("compose.onset_hue_lo");
    opts.hue_hi = cfg.get_double("compose.onset_hue_hi");
    opts.threshold = cfg.get_double("compose.onset_threshold");

    std::vector<compose::OnsetRow> rows;
    std::vector<fs::path> inputs{work / "calib" / "calibration.txt", work / "embed" / "manifest.txt"};
    for (double a : distinct_factors(snaps)) {
        std::vector<viz::Embedding> run;
        for (const auto& s : snaps) {
            if (!same_value(s.embedding.aerosol_factor, a)) continue;
            run.push_back(s.embedding);
            inputs.push_back(work / s.lat_path);
        }
        rows.push_back(compose::OnsetRow{a, compose::detect_onset(run, cal, opts), opts});
        log_line("onset: " + label(a) + "x " +
                 (rows.back().onset_time_s ? label(*rows.back().onset_time_s) + " s" : std::string("none")));
    }

    const fs::path out = begin_stage(cfg, work, "onset");
    compose::write_onset_csv(rows, out / "onset.csv");
    copy_artifact(work / "calib" / "calibration.txt", out / "calibration.txt");
    finish_stage(work, "onset", inputs);
    return rows;
}

}  // namespace dropletscope::pipeline
