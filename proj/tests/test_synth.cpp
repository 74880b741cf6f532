#include <algorithm>
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "dropletscope/binio.hpp"
#include "dropletscope/error.hpp"
#include "dropletscope/synth.hpp"

using namespace dropletscope;
using namespace dropletscope::synth;
namespace fs = std::filesystem;

namespace {

std::size_t argmax(const Dsd& d) {
    return static_cast<std::size_t>(std::max_element(d.mixing_ratios.begin(), d.mixing_ratios.end()) -
                                    d.mixing_ratios.begin());
}

std::size_t count_precipitating(const SnapshotField& s, double cutoff) {
    const BinGrid grid = BinGrid::standard();
    return static_cast<std::size_t>(std::count_if(s.cells.begin(), s.cells.end(), [&](const Cell& c) {
        return mean_diameter(c.dsd, grid) > cutoff;
    }));
}

SynthConfig small_config() {
    SynthConfig cfg;
    cfg.nx = 32;
    cfg.ny = 32;
    cfg.nz = 16;
    cfg.n_timesteps = 4;
    return cfg;
}

}  // namespace

TEST_CASE("onset anchors are ordered") {
    CHECK(default_onset_time(0.5) == 7200.0);
    CHECK(default_onset_time(1.0) == 14400.0);
    CHECK(default_onset_time(2.0) == 25200.0);
    CHECK(default_onset_time(0.5) < default_onset_time(0.7));
    CHECK(default_onset_time(1.5) < default_onset_time(2.0));
}

TEST_CASE("pathway_dsd anchors and monotone mean diameter") {
    const SynthConfig cfg;
    const Dsd ambient = pathway_dsd(0.0, cfg);
    const Dsd precip = pathway_dsd(1.0, cfg);
    CHECK(argmax(ambient) + 1 == cfg.ambient_mode_bin);
    CHECK(argmax(precip) + 1 == cfg.precip_mode_bin);
    CHECK(std::abs(summed_mixing_ratio(ambient) - 1.0) < 1e-12);

    const BinGrid grid = BinGrid::standard();
    CHECK(mean_diameter(pathway_dsd(0.9, cfg), grid) > mean_diameter(pathway_dsd(0.1, cfg), grid));

    double previous = 0.0;
    for (int n = 0; n <= 100; ++n) {
        const double d = mean_diameter(pathway_dsd(n / 100.0, cfg), grid);
        CHECK(d >= previous);
        previous = d;
    }

    CHECK_THROWS_AS(pathway_dsd(-0.01, cfg), InvalidArgument);
    CHECK_THROWS_AS(pathway_dsd(1.01, cfg), InvalidArgument);
}

TEST_CASE("pathway_dsd noise is seeded") {
    const SynthConfig cfg;
    const Dsd a = pathway_dsd(0.4, cfg, 17);
    const Dsd b = pathway_dsd(0.4, cfg, 17);
    const Dsd c = pathway_dsd(0.4, cfg, 18);
    CHECK(a == b);
    CHECK(a != c);
    CHECK(std::abs(summed_mixing_ratio(a) - 1.0) < 1e-12);
}

TEST_CASE("config validation") {
    SynthConfig cfg;
    cfg.ambient_mode_bin = 0;
    CHECK_THROWS_AS(validate_config(cfg), InvalidArgument);
    cfg = SynthConfig{};
    cfg.precip_mode_bin = 34;
    CHECK_THROWS_AS(validate_config(cfg), InvalidArgument);
    cfg = SynthConfig{};
    cfg.nz = 0;
    CHECK_THROWS_AS(validate_config(cfg), InvalidArgument);
}

TEST_CASE("snapshots before onset are purely ambient") {
    SynthConfig cfg;
    const double cutoff = precip_cutoff_mm(cfg);
    const SyntheticSnapshot snap = generate_snapshot(cfg.onset() - cfg.dt_s, cfg);
    REQUIRE(!snap.field.cells.empty());
    CHECK(std::all_of(snap.s_true.begin(), snap.s_true.end(), [](double s) { return s == 0.0; }));
    CHECK(count_precipitating(snap.field, cutoff) == 0);
}

TEST_CASE("generated cells satisfy core invariants") {
    SynthConfig cfg;
    for (double t : {0.0, cfg.onset() + 3600.0, 28800.0}) {
        const SyntheticSnapshot snap = generate_snapshot(t, cfg);
        CHECK(snap.s_true.size() == snap.field.cells.size());
        CHECK_NOTHROW(validate_snapshot(snap.field));
        for (const Cell& c : snap.field.cells) {
            CHECK(c.raw_sum >= 1e-5f);
            CHECK(std::abs(summed_mixing_ratio(c.dsd) - 1.0) < 1e-9);
            CHECK(*std::min_element(c.dsd.mixing_ratios.begin(), c.dsd.mixing_ratios.end()) >= 0.0);
        }
        for (double s : snap.s_true) CHECK((s >= 0.0 && s <= 1.0));
    }
}

TEST_CASE("generate_snapshot is deterministic") {
    const SynthConfig cfg;
    const auto a = generate_snapshot(18000.0, cfg);
    const auto b = generate_snapshot(18000.0, cfg);
    CHECK(a.field == b.field);
    CHECK(a.s_true == b.s_true);
}

TEST_CASE("precipitation grows after onset") {
    SynthConfig cfg;
    cfg.seed = 42;
    const double cutoff = precip_cutoff_mm(cfg);
    const auto early = generate_snapshot(cfg.onset() + 1 * cfg.dt_s, cfg);
    const auto later = generate_snapshot(cfg.onset() + 4 * cfg.dt_s, cfg);
    CHECK(count_precipitating(later.field, cutoff) > count_precipitating(early.field, cutoff));
}

TEST_CASE("first precipitating step is ordered by aerosol factor") {
    SynthConfig cfg;
    const double cutoff = precip_cutoff_mm(cfg);
    std::vector<double> first;
    for (double factor : {0.5, 1.0, 2.0}) {
        cfg.aerosol_factor = factor;
        double found = -1.0;
        for (std::uint32_t n = 0; n <= cfg.n_timesteps && found < 0.0; ++n) {
            const double t = n * cfg.dt_s;
            const auto snap = generate_snapshot(t, cfg);
            if (snap.field.cells.empty()) continue;
            const double frac = static_cast<double>(count_precipitating(snap.field, cutoff)) / snap.field.cells.size();
            if (frac >= 0.05) found = t;
        }
        REQUIRE(found >= 0.0);
        first.push_back(found);
    }
    CHECK(first[0] < first[1]);
    CHECK(first[1] < first[2]);
}

TEST_CASE("generate_dataset layout") {
    const fs::path dir = fs::temp_directory_path() / "dropletscope_test_synth";
    fs::remove_all(dir);

    SynthConfig cfg = small_config();
    cfg.n_timesteps = 0;
    auto files = generate_dataset(cfg, dir / "zero");
    CHECK(files.size() == 1);

    cfg = small_config();
    files = generate_dataset(cfg, dir / "a");
    REQUIRE(files.size() == 5);
    const auto entries = read_manifest(dir / "a" / "manifest.txt");
    REQUIRE(entries.size() == 5);
    CHECK(entries[4].time_s == 2400.0);
    CHECK(entries[2].aerosol_factor == 1.0);
    CHECK(fs::equivalent(entries[3].path, files[3]));

    const SnapshotField s = read_snapshot(files[4]);
    CHECK(s.time_s == 2400.0);
    const auto truth = read_truth(truth_path_for(files[4]));
    REQUIRE(truth.size() == s.cells.size());
    for (std::size_t n = 0; n < truth.size(); ++n) {
        CHECK(truth[n].i == s.cells[n].i);
        CHECK(truth[n].k == s.cells[n].k);
    }

    // Byte-identical directories for identical configs.
    generate_dataset(cfg, dir / "b");
    for (const auto& entry : fs::directory_iterator(dir / "a")) {
        const fs::path twin = dir / "b" / entry.path().filename();
        CHECK(binio::read_file(entry.path()) == binio::read_file(twin));
    }
}

TEST_CASE("full-scale 8 hour run has 49 snapshots") {
    // 48 steps of 10 minutes, inclusive endpoints.
    SynthConfig cfg;
    CHECK(cfg.n_timesteps + 1 == 49);
    CHECK(cfg.n_timesteps * cfg.dt_s == 8 * 3600.0);
}
