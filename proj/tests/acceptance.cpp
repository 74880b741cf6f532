// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
// criterion fails. Criteria 4, 6 and 7 reuse the model trained for 3.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dropletscope/compose.hpp"
#include "dropletscope/error.hpp"
#include "dropletscope/kdtree.hpp"
#include "dropletscope/parallel.hpp"
#include "dropletscope/path.hpp"
#include "dropletscope/pipeline.hpp"
#include "dropletscope/synth.hpp"
#include "dropletscope/vae.hpp"
#include "dropletscope/viz.hpp"
#include "pipeline_support.hpp"
#include "test_support.hpp"

using namespace dropletscope;
namespace fs = std::filesystem;
using Eigen::Vector3d;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

/// State shared by the criteria that need the trained default model.
struct Trained {
    std::vector<pipeline::LoadedSnapshot> data;
    std::vector<double> s_true;  // one per cell, in dataset order
    std::optional<vae::VaeModel> model;
    std::vector<viz::Embedding> embeddings;
};

Trained g_trained;

void require_model() {
    if (!g_trained.model) throw std::runtime_error("no trained model (criterion 3 did not finish)");
    if (g_trained.embeddings.empty()) {
        std::vector<SnapshotField> fields;
        for (const auto& s : g_trained.data) fields.push_back(s.field);
        g_trained.embeddings = viz::embed_dataset(*g_trained.model, fields);
    }
}

// 1 ---------------------------------------------------------------------------
Outcome gradient_correctness() {
    const auto t0 = Clock::now();
    vae::Architecture arch;
    arch.encoder_hidden = {8};
    arch.decoder_hidden = {8};
    const vae::VaeModel model = vae::make_model(arch, 11);
    const vae::GradCheckReport r = vae::grad_check(model, 100, 1e-5, 1e-4, 1e-3, 2024);
    const double t = seconds_since(t0);
    return {r.passed && r.probes == 100 && r.max_rel_error < 1e-4 && t < 10.0,
            "33-8-3-8-33, 100 probes, max rel error " + fmt("%.3g", r.max_rel_error) + ", " + fmt("%.2f", t) + " s"};
}

// 2 ---------------------------------------------------------------------------
Outcome kl_correctness() {
    const Vector3d zero = Vector3d::Zero();
    const double a = vae::kl_gauss(zero, zero);
    const double b = vae::kl_gauss(Vector3d(1, 0, 0), zero);
    const double c = vae::kl_gauss(zero, Vector3d(1, 0, 0));
    const double err = std::max({std::abs(a), std::abs(b - 0.5), std::abs(c - 0.5 * (std::exp(1.0) - 2.0))});
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    // Scales from 1e-6 to 20 so that near-zero divergences are covered too.
    const double scales[] = {1e-6, 1e-3, 0.1, 1.0, 20.0};
    double min_kl = std::numeric_limits<double>::infinity();
    for (int n = 0; n < 1000000; ++n) {
        const double sm = scales[rng() % 5], sl = scales[rng() % 5];
        const Vector3d m = sm * Vector3d(unit(rng), unit(rng), unit(rng));
        const Vector3d l = sl * Vector3d(unit(rng), unit(rng), unit(rng));
        min_kl = std::min(min_kl, vae::kl_gauss(m, l));
    }
    return {err <= 1e-12 && min_kl >= 0.0,
            "tabulated cases max error " + fmt("%.3g", err) + ", min over 1e6 random inputs " + fmt("%.3g", min_kl)};
}

// 3 ---------------------------------------------------------------------------
Outcome training_progress(const fs::path& scratch) {
    const pipeline::Config cfg;
    set_worker_threads(1);
    pipeline::cmd_gen(cfg, scratch / "default");
    g_trained.data = pipeline::load_dataset(scratch / "default" / "data" / "manifest.txt");
    std::size_t cells = 0;
    for (const auto& s : g_trained.data) {
        cells += s.field.cells.size();
        const auto truth = synth::read_truth(synth::truth_path_for(s.entry.path));
        if (truth.size() != s.field.cells.size()) throw InvalidData("truth file does not match its snapshot");
        for (const auto& t : truth) g_trained.s_true.push_back(t.s_true);
    }

    const vae::TrainConfig tcfg = pipeline::train_config(cfg);
    auto t0 = Clock::now();
    const pipeline::TrainOutcome first = pipeline::train_and_orient(g_trained.data, tcfg, true, 0.25, 0.25);
    const double t_first = seconds_since(t0);
    t0 = Clock::now();
    const pipeline::TrainOutcome second = pipeline::train_and_orient(g_trained.data, tcfg, true, 0.25, 0.25);
    const double t_second = seconds_since(t0);

    const auto& h = first.result.history;
    const double ratio = h.back().mean_nelbo / h.front().mean_nelbo;
    const bool identical = vae::encode_checkpoint(first.result.model) == vae::encode_checkpoint(second.result.model);
    g_trained.model = first.result.model;
    const bool size_ok = g_trained.data.size() == 147 && cells >= 50000 && cells <= 200000;
    std::ostringstream d;
    d << g_trained.data.size() << " snapshots, " << cells << " cells; NELBO " << fmt("%.4g", h.front().mean_nelbo)
      << " -> " << fmt("%.4g", h.back().mean_nelbo) << " (ratio " << fmt("%.3f", ratio) << "); "
      << fmt("%.0f", t_first) << " s and " << fmt("%.0f", t_second) << " s; "
      << (identical ? "bit-identical" : "runs differ");
    return {size_ok && h.size() == 20 && ratio < 0.5 && std::max(t_first, t_second) < 600.0 && identical, d.str()};
}

// 4 ---------------------------------------------------------------------------
Outcome latent_separation() {
    require_model();
    std::vector<Vector3d> ambient, precip;
    std::size_t n = 0;
    for (const auto& e : g_trained.embeddings) {
        for (const auto& r : e.records) {
            const double s = g_trained.s_true[n++];
            if (s < 0.1) ambient.push_back(r.z);
            if (s > 0.9) precip.push_back(r.z);
        }
    }
    if (ambient.empty() || precip.empty()) return {false, "a class is empty"};
    auto centroid = [](const std::vector<Vector3d>& v) {
        Vector3d c = Vector3d::Zero();
        for (const auto& z : v) c += z;
        return Vector3d(c / static_cast<double>(v.size()));
    };
    auto spread = [](const std::vector<Vector3d>& v, const Vector3d& c) {
        double s = 0.0;
        for (const auto& z : v) s += (z - c).norm();
        return s / static_cast<double>(v.size());
    };
    const Vector3d ca = centroid(ambient), cp = centroid(precip);
    const double dist = (ca - cp).norm();
    const double within = 0.5 * (spread(ambient, ca) + spread(precip, cp));
    return {dist > 2.0 * within, std::to_string(ambient.size()) + " ambient, " + std::to_string(precip.size()) +
                                     " precipitating; centroid distance " + fmt("%.3f", dist) +
                                     ", mean within-class spread " + fmt("%.3f", within)};
}

// 5 ---------------------------------------------------------------------------
Outcome knn_oracle() {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> g(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<Vector3d> points(10000);
    std::vector<Dsd> dsds(points.size());
    for (std::size_t n = 0; n < points.size(); ++n) {
        points[n] = Vector3d(g(rng), g(rng), g(rng));
        std::vector<double> v(kBinCount);
        for (double& x : v) x = u(rng);
        dsds[n] = normalize_dsd(Dsd(std::move(v)));
    }
    const KdTree tree(points);
    double worst = 0.0;
    for (int q = 0; q < 100; ++q) {
        const Vector3d z(g(rng), g(rng), g(rng));
        const std::size_t k = 1 + rng() % 200;
        const Dsd a = path::knn_average(z, tree, dsds, k);
        const Dsd b = path::knn_average_brute_force(z, points, dsds, k);
        for (std::size_t i = 0; i < kBinCount; ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    }
    return {worst <= 1e-12, "100 queries over 1e4 records, max bin difference " + fmt("%.3g", worst)};
}

// 6 ---------------------------------------------------------------------------
Outcome path_evolution() {
    require_model();
    std::vector<Dsd> dsds;
    std::vector<Vector3d> points;
    for (const auto& s : g_trained.data) {
        for (const Cell& c : s.field.cells) dsds.push_back(normalize_dsd(c.dsd));
    }
    for (const auto& e : g_trained.embeddings) {
        for (const auto& r : e.records) points.push_back(r.z);
    }
    const pipeline::Config cfg;
    const auto t0 = Clock::now();
    const pipeline::TraceOutcome t = pipeline::trace_path(g_trained.embeddings, dsds, cfg, std::nullopt);
    const double elapsed = seconds_since(t0);

    std::vector<double> index, diameter, s_mean;
    const KdTree tree(points);
    for (std::size_t n = 0; n < t.samples.size(); ++n) {
        index.push_back(static_cast<double>(n));
        diameter.push_back(t.samples[n].mean_diameter_mm);
        double s = 0.0;
        for (const Neighbor& nb : tree.knn(t.path.nodes[n], t.k)) s += g_trained.s_true[nb.index];
        s_mean.push_back(s / static_cast<double>(t.k));
    }
    const double rho_d = path::spearman(index, diameter);
    const double rho_s = path::spearman(index, s_mean);
    return {t.samples.size() == 16 && rho_d > 0.9 && rho_s > 0.9,
            "16 nodes, k = " + std::to_string(t.k) + "; Spearman(node, mean diameter) " + fmt("%.3f", rho_d) +
                ", Spearman(node, mean s_true) " + fmt("%.3f", rho_s) + ", mean diameter " +
                fmt("%.3f", diameter.front()) + " -> " + fmt("%.3f", diameter.back()) + " mm, " +
                fmt("%.0f", elapsed) + " s"};
}

// 7 ---------------------------------------------------------------------------
Outcome onset_ordering() {
    require_model();
    const viz::RgbCalibration cal = viz::calibrate_rgb(g_trained.embeddings);
    std::vector<std::optional<double>> onsets;
    std::string detail;
    for (double a : {0.5, 1.0, 2.0}) {
        std::vector<viz::Embedding> run;
        for (const auto& e : g_trained.embeddings) {
            if (e.aerosol_factor == static_cast<float>(a)) run.push_back(e);
        }
        onsets.push_back(compose::detect_onset(run, cal));
        detail += (detail.empty() ? "" : ", ") + fmt("%g", a) + "x: " +
                  (onsets.back() ? fmt("%g s", *onsets.back()) : std::string("none"));
    }
    const bool all = onsets[0] && onsets[1] && onsets[2];
    return {all && *onsets[0] < *onsets[1] && *onsets[1] < *onsets[2], "onset " + detail};
}

// 8 ---------------------------------------------------------------------------
Outcome rendering_exactness() {
    viz::Image red(1, 1, viz::Rgb{255, 0, 0});
    viz::Image small(3, 2);
    small.set(0, 0, viz::Rgb{1, 2, 3});
    small.set(1, 2, viz::Rgb{0, 0, 0});
    const bool golden = viz::encode_ppm(red) == std::string("P6\n1 1\n255\n\xff\x00\x00", 14) &&
                        viz::encode_ppm(small) == std::string("P6\n3 2\n255\n") + std::string("\x01\x02\x03", 3) +
                                                      std::string(12, '\xff') + std::string(3, '\0');

    std::mt19937_64 rng(8);
    bool sums = true;
    for (int trial = 0; trial < 10000; ++trial) {
        std::vector<std::size_t> counts(1 + rng() % 40);
        std::size_t total = 0;
        for (auto& c : counts) total += (c = rng() % 1000);
        const auto width = static_cast<std::uint32_t>(1 + rng() % 2000);
        const auto ext = compose::pixel_extents(counts, width);
        const std::uint64_t s = std::accumulate(ext.begin(), ext.end(), std::uint64_t{0});
        sums = sums && s == (total > 0 ? width : 0);
    }

    std::normal_distribution<double> g(0.0, 1.0);
    viz::RgbCalibration cal;
    cal.lo = {-2, -2, -2};
    cal.hi = {2, 2, 2};
    bool sorted = true;
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<Vector3d> zs(1 + rng() % 500);
        for (auto& z : zs) z = Vector3d(g(rng), g(rng), g(rng));
        const compose::CompositionRow row = compose::build_row(0, zs, cal);
        for (std::size_t n = 1; n < row.hues.size(); ++n) {
            sorted = sorted && compose::shifted_hue(row.hues[n - 1], 270.0) <= compose::shifted_hue(row.hues[n], 270.0);
        }
    }
    return {golden && sums && sorted, std::string("PPM goldens ") + (golden ? "match" : "differ") +
                                          ", extents sum to width in 10000 trials: " + (sums ? "yes" : "no") +
                                          ", hue order non-decreasing in 200 rows: " + (sorted ? "yes" : "no")};
}

// 9 ---------------------------------------------------------------------------
vae::VaeModel random_model(std::mt19937_64& rng) {
    vae::Architecture arch;
    arch.input_dim = 1 + rng() % 40;
    arch.encoder_hidden.assign(1 + rng() % 2, 0);
    arch.decoder_hidden.assign(rng() % 3, 0);
    for (auto& h : arch.encoder_hidden) h = 1 + rng() % 6;
    for (auto& h : arch.decoder_hidden) h = 1 + rng() % 6;
    vae::VaeModel m = vae::make_model(arch, rng());
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    for (vae::DenseLayer* l : m.layers()) {
        for (Eigen::Index i = 0; i < l->weight.size(); ++i) l->weight.data()[i] = u(rng);
        for (Eigen::Index i = 0; i < l->bias.size(); ++i) l->bias(i) = u(rng);
        l->activation = rng() % 2 ? vae::Activation::Silu : vae::Activation::Identity;
    }
    if (rng() % 2) {
        vae::AdamState st;
        st.step = rng();
        for (const vae::DenseLayer* l : m.layers()) {
            vae::DenseLayer a = *l, b = *l;
            for (Eigen::Index i = 0; i < a.weight.size(); ++i) {
                a.weight.data()[i] = u(rng);
                b.weight.data()[i] = std::abs(u(rng));
            }
            for (Eigen::Index i = 0; i < a.bias.size(); ++i) {
                a.bias(i) = u(rng);
                b.bias(i) = std::abs(u(rng));
            }
            st.m.push_back(a);
            st.v.push_back(b);
        }
        m.adam = st;
    }
    m.beta = u(rng);
    m.seed = rng();
    vae::round_to_f32(m);
    return m;
}

bool same_model(const vae::VaeModel& a, const vae::VaeModel& b) {
    const auto la = a.layers(), lb = b.layers();
    if (la.size() != lb.size() || a.beta != b.beta || a.seed != b.seed || a.adam.has_value() != b.adam.has_value()) {
        return false;
    }
    for (std::size_t i = 0; i < la.size(); ++i) {
        if (la[i]->weight != lb[i]->weight || la[i]->bias != lb[i]->bias || la[i]->activation != lb[i]->activation) {
            return false;
        }
        if (a.adam && (a.adam->m[i].weight != b.adam->m[i].weight || a.adam->v[i].bias != b.adam->v[i].bias)) {
            return false;
        }
    }
    return !a.adam || a.adam->step == b.adam->step;
}

Outcome io_round_trips() {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(-10.0, 10.0);
    std::size_t dsd_ok = 0, lat_ok = 0, vae_ok = 0;
    for (int n = 0; n < 10000; ++n) {
        const SnapshotField s = dropletscope::testing::random_snapshot(rng, 20);
        const std::string bytes = encode_snapshot(s);
        const SnapshotField back = decode_snapshot(bytes);
        dsd_ok += back == s && encode_snapshot(back) == bytes;

        viz::Embedding e;
        e.time_s = std::abs(u(rng)) * 1e4;
        e.aerosol_factor = static_cast<float>(std::abs(u(rng)));
        e.records.resize(rng() % 50);
        for (auto& r : e.records) {
            r.i = static_cast<std::uint32_t>(rng());
            r.j = static_cast<std::uint32_t>(rng());
            r.k = static_cast<std::uint32_t>(rng());
            for (int d = 0; d < 3; ++d) r.z(d) = static_cast<float>(u(rng));
        }
        const std::string lat = viz::encode_embedding(e);
        const viz::Embedding eb = viz::decode_embedding(lat);
        lat_ok += eb.records == e.records && eb.time_s == e.time_s && eb.aerosol_factor == e.aerosol_factor &&
                  viz::encode_embedding(eb) == lat;

        const vae::VaeModel m = random_model(rng);
        const std::string ck = vae::encode_checkpoint(m);
        const vae::VaeModel mb = vae::decode_checkpoint(ck);
        vae_ok += same_model(m, mb) && vae::encode_checkpoint(mb) == ck;
    }
    return {dsd_ok == 10000 && lat_ok == 10000 && vae_ok == 10000,
            "bit-exact round trips: DSD1 " + std::to_string(dsd_ok) + "/10000, LAT1 " + std::to_string(lat_ok) +
                "/10000, VAE1 " + std::to_string(vae_ok) + "/10000"};
}

// 10 --------------------------------------------------------------------------
Outcome end_to_end_determinism(const fs::path& scratch) {
    std::vector<std::map<std::string, std::string>> trees;
    for (const char* run : {"run1", "run2"}) {
        const fs::path dir = scratch / run;
        fs::create_directories(dir);
        dropletscope::testing::write_text(dir / "pipeline.cfg", dropletscope::testing::kDeskConfig);
        for (const std::string& stage : dropletscope::testing::kStages) {
            const std::string cmd = "cd \"" + dir.string() + "\" && \"" DROPLETSCOPE_CLI
                                    "\" --config pipeline.cfg --work ws --deterministic " +
                                    stage + " 2>>log.txt";
            const int rc = std::system(cmd.c_str());
            if (rc != 0) return {false, std::string(run) + ": `dropletscope " + stage + "` failed, see log.txt"};
        }
        trees.push_back(dropletscope::testing::tree_contents(dir / "ws"));
    }
    const auto& a = trees[0];
    const auto& b = trees[1];
    std::size_t differing = 0;
    for (const auto& [p, content] : a) differing += !b.count(p) || b.at(p) != content;
    differing += b.size() > a.size() ? b.size() - a.size() : 0;
    bool configs = true, calibrations = true;
    for (const char* d : {"data", "model", "embed", "calib", "render", "trace", "compose", "onset"}) {
        configs = configs && a.count(std::string(d) + "/config.resolved.txt");
    }
    for (const char* d : {"render", "compose", "onset"}) {
        calibrations = calibrations && a.count(std::string(d) + "/calibration.txt") &&
                       a.at(std::string(d) + "/calibration.txt") == a.at("calib/calibration.txt");
    }
    return {differing == 0 && configs && calibrations && !a.empty(),
            std::to_string(a.size()) + " files per run, " + std::to_string(differing) + " differ; resolved configs " +
                (configs ? "present" : "missing") + ", calibration copies " + (calibrations ? "match" : "differ")};
}

}  // namespace

int main() {
    const fs::path scratch = dropletscope::testing::fresh_dir("acceptance");
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"gradient correctness", gradient_correctness},
        {"KL correctness", kl_correctness},
        {"training progress", [&] { return training_progress(scratch); }},
        {"latent separation", latent_separation},
        {"k-NN oracle equivalence", knn_oracle},
        {"path evolution", path_evolution},
        {"onset ordering", onset_ordering},
        {"rendering exactness", rendering_exactness},
        {"I/O round trips", io_round_trips},
        {"end-to-end determinism", [&] { return end_to_end_determinism(scratch / "e2e"); }},
    };
    int failures = 0;
    for (std::size_t n = 0; n < criteria.size(); ++n) {
        Outcome o;
        try {
            o = criteria[n].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << ' ' << (n + 1) << ' ' << criteria[n].first << ": " << o.detail
                  << std::endl;
    }
    std::cout << (criteria.size() - static_cast<std::size_t>(failures)) << '/' << criteria.size()
              << " criteria passed" << std::endl;
    return failures == 0 ? 0 : 1;
}
