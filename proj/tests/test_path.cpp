#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "doctest.h"
#include "dropletscope/binio.hpp"
#include "dropletscope/error.hpp"
#include "dropletscope/path.hpp"
#include "dropletscope/synth.hpp"

using namespace dropletscope;
using namespace dropletscope::path;
using Eigen::Vector3d;

namespace {

std::vector<Vector3d> gaussian_cloud(std::mt19937_64& rng, std::size_t n, const Vector3d& centre, double sigma) {
    std::normal_distribution<double> g(0.0, sigma);
    std::vector<Vector3d> out(n);
    for (Vector3d& p : out) p = centre + Vector3d(g(rng), g(rng), g(rng));
    return out;
}

std::vector<Dsd> random_dsds(std::mt19937_64& rng, std::size_t n) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<Dsd> out(n);
    for (Dsd& d : out) {
        std::vector<double> v(kBinCount);
        for (double& x : v) x = u(rng);
        d = normalize_dsd(Dsd(std::move(v)));
    }
    return out;
}

std::vector<NoveltyPoint> uniform_weights(const std::vector<Vector3d>& zs) {
    std::vector<NoveltyPoint> out;
    for (const Vector3d& z : zs) out.push_back(NoveltyPoint{z, 1.0});
    return out;
}

double distance_to_segment(const Vector3d& p, const Vector3d& a, const Vector3d& b) {
    const Vector3d d = b - a;
    const double t = std::clamp((p - a).dot(d) / d.squaredNorm(), 0.0, 1.0);
    return (a + t * d - p).norm();
}

Eigen::Matrix3d rotation() {
    return (Eigen::AngleAxisd(0.7, Vector3d(1, 2, 3).normalized()) * Eigen::AngleAxisd(-1.3, Vector3d::UnitX()))
        .toRotationMatrix();
}

}  // namespace

TEST_CASE("kd-tree knn matches brute force, ties included") {
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int> cell(0, 6);
    // Integer lattice points produce many exactly equal distances.
    std::vector<Vector3d> pts(3000);
    for (Vector3d& p : pts) p = Vector3d(cell(rng), cell(rng), cell(rng));
    const KdTree tree(pts, 8);
    for (int q = 0; q < 200; ++q) {
        const Vector3d query(cell(rng) + 0.5 * (q % 2), cell(rng), cell(rng));
        const std::size_t k = 1 + rng() % 60;
        const auto a = tree.knn(query, k);
        const auto b = knn_brute_force(pts, query, k);
        REQUIRE(a.size() == k);
        for (std::size_t n = 0; n < k; ++n) {
            CHECK(a[n].index == b[n].index);
            CHECK(a[n].dist2 == b[n].dist2);
        }
    }
    CHECK(tree.knn(Vector3d::Zero(), 0).empty());
    CHECK_THROWS_AS(tree.knn(Vector3d::Zero(), 3001), InvalidArgument);
    CHECK(tree.knn(Vector3d::Zero(), 3000).size() == 3000);

    const KdTree empty(std::vector<Vector3d>{});
    CHECK(empty.knn(Vector3d::Zero(), 0).empty());
}

TEST_CASE("kd-tree radius search") {
    std::mt19937_64 rng(2);
    const auto pts = gaussian_cloud(rng, 2000, Vector3d::Zero(), 1.0);
    const KdTree tree(pts);
    for (int q = 0; q < 50; ++q) {
        const Vector3d query = gaussian_cloud(rng, 1, Vector3d::Zero(), 1.0)[0];
        std::vector<Neighbor> found;
        tree.radius_search(query, 0.5, found);
        std::size_t expected = 0;
        for (const Vector3d& p : pts) expected += squared_distance(p, query) <= 0.25;
        CHECK(found.size() == expected);
        for (const Neighbor& n : found) CHECK(n.dist2 <= 0.25);
    }
}

TEST_CASE("subsample") {
    std::mt19937_64 rng(3);
    const auto pts = gaussian_cloud(rng, 500, Vector3d::Zero(), 1.0);
    CHECK(subsample(pts, 500, 1) == pts);
    const auto a = subsample(pts, 100, 9);
    const auto b = subsample(pts, 100, 9);
    CHECK(a.size() == 100);
    CHECK(a == b);
    CHECK(subsample(pts, 100, 10) != a);
    // Order preserved: every element appears in the source after the previous one.
    std::size_t pos = 0;
    for (const Vector3d& p : a) {
        while (pos < pts.size() && pts[pos] != p) ++pos;
        CHECK(pos < pts.size());
        ++pos;
    }
}

TEST_CASE("bandwidth and kde") {
    const std::vector<Vector3d> two{Vector3d(0, 0, 0), Vector3d(2, 0, 0)};
    // trace(cov) = 2 with the n-1 normalisation, so sigma = sqrt(2/3).
    CHECK(scott_bandwidth(two) == doctest::Approx(std::pow(2.0, -1.0 / 7.0) * std::sqrt(2.0 / 3.0)).epsilon(1e-14));
    CHECK_THROWS_AS(scott_bandwidth(std::vector<Vector3d>{Vector3d(1, 1, 1), Vector3d(1, 1, 1)}), DegenerateError);

    std::mt19937_64 rng(4);
    const auto pts = gaussian_cloud(rng, 1000, Vector3d(1, 2, 3), 0.7);
    std::vector<Vector3d> rotated;
    for (const Vector3d& p : pts) rotated.push_back(rotation() * p);
    CHECK(scott_bandwidth(rotated) == doctest::Approx(scott_bandwidth(pts)).epsilon(1e-12));

    const KdTree single(std::vector<Vector3d>{Vector3d(1, 1, 1)});
    const double h = 0.3;
    CHECK(kde(single, Vector3d(1, 1, 1), h) == doctest::Approx(1.0 / (std::pow(2.0 * std::numbers::pi, 1.5) * h * h * h)));
    CHECK(kde(single, Vector3d(1, 1, 1 + 9 * h), h) == 0.0);
}

TEST_CASE("novelty_points") {
    std::mt19937_64 rng(5);
    const auto bulk = gaussian_cloud(rng, 2000, Vector3d::Zero(), 1.0);
    const auto same = novelty_points(bulk, bulk, 0.4);
    REQUIRE(same.size() == bulk.size());
    for (const NoveltyPoint& p : same) CHECK(p.weight == 0.0);

    // Identical sets above the cap: subsamples coincide, weights stay zero.
    for (const NoveltyPoint& p : novelty_points(bulk, bulk, 0.4, 300, 11)) CHECK(p.weight == 0.0);

    std::vector<Vector3d> late = bulk;
    const auto far = gaussian_cloud(rng, 300, Vector3d(6, 6, 0), 0.3);
    late.insert(late.end(), far.begin(), far.end());
    const auto w = novelty_points(bulk, late, 0.4);
    REQUIRE(w.size() == late.size());
    double min_far = INFINITY, max_bulk = 0.0;
    for (std::size_t n = 0; n < w.size(); ++n) {
        if (n < bulk.size()) max_bulk = std::max(max_bulk, w[n].weight);
        else min_far = std::min(min_far, w[n].weight);
    }
    CHECK(min_far > max_bulk);

    double max_wide = 0.0;
    for (const NoveltyPoint& p : novelty_points(bulk, late, 1e4)) max_wide = std::max(max_wide, p.weight);
    CHECK(max_wide < 1e-14);

    // Joint rotation leaves the weights unchanged.
    std::vector<Vector3d> rb, rl;
    for (const Vector3d& p : bulk) rb.push_back(rotation() * p);
    for (const Vector3d& p : late) rl.push_back(rotation() * p);
    const auto wr = novelty_points(rb, rl, 0.4);
    double max_w = 0.0, max_diff = 0.0;
    for (std::size_t n = 0; n < w.size(); ++n) {
        max_w = std::max(max_w, w[n].weight);
        max_diff = std::max(max_diff, std::abs(w[n].weight - wr[n].weight));
    }
    CHECK(max_diff < 1e-9 * max_w);

    CHECK_THROWS_AS(novelty_points({}, late, 0.4), InvalidArgument);
    CHECK_THROWS_AS(novelty_points(bulk, {}, 0.4), InvalidArgument);
    CHECK_THROWS_AS(novelty_points(bulk, late, 0.0), InvalidArgument);
}

TEST_CASE("make_path and resample_polyline") {
    const LatentPath p = make_path({Vector3d(0, 0, 0), Vector3d(3, 4, 0), Vector3d(3, 4, 1)});
    CHECK(p.arc_length == std::vector<double>{0.0, 5.0, 6.0});
    CHECK_THROWS_AS(make_path({Vector3d(0, 0, 0)}), InvalidArgument);
    CHECK_THROWS_AS(make_path({Vector3d(0, 0, 0), Vector3d(0, 0, 0)}), InvalidArgument);

    const std::vector<Vector3d> ell{Vector3d(0, 0, 0), Vector3d(2, 0, 0), Vector3d(2, 0, 0), Vector3d(2, 2, 0)};
    const LatentPath r = resample_polyline(ell, 5);
    REQUIRE(r.nodes.size() == 5);
    CHECK((r.nodes[1] - Vector3d(1, 0, 0)).norm() < 1e-15);
    CHECK((r.nodes[2] - Vector3d(2, 0, 0)).norm() < 1e-15);
    CHECK((r.nodes[3] - Vector3d(2, 1, 0)).norm() < 1e-15);
    CHECK(r.nodes[4] == Vector3d(2, 2, 0));
    CHECK(r.arc_length.back() == doctest::Approx(4.0));
    CHECK_THROWS_AS(resample_polyline(std::vector<Vector3d>{Vector3d(1, 1, 1), Vector3d(1, 1, 1)}, 4),
                    DegenerateError);
}

TEST_CASE("fit_path on a straight segment") {
    std::vector<Vector3d> zs;
    const Vector3d a(-1, 2, 0.5), b(3, -1, 2);
    for (int n = 0; n <= 400; ++n) zs.push_back(a + (b - a) * (n / 400.0));
    const LatentPath p = fit_path(uniform_weights(zs), 16, 30);
    REQUIRE(p.nodes.size() == 16);
    for (const Vector3d& node : p.nodes) CHECK(distance_to_segment(node, a, b) < 1e-6);
    const double len = (b - a).norm();
    const double e0 = std::min((p.nodes.front() - a).norm(), (p.nodes.front() - b).norm());
    const double e1 = std::min((p.nodes.back() - a).norm(), (p.nodes.back() - b).norm());
    CHECK(e0 < 0.02 * len);
    CHECK(e1 < 0.02 * len);
    for (std::size_t n = 1; n < p.arc_length.size(); ++n) CHECK(p.arc_length[n] > p.arc_length[n - 1]);

    const LatentPath two = fit_path(uniform_weights(zs), 2, 30);
    REQUIRE(two.nodes.size() == 2);
    CHECK(std::min((two.nodes[0] - a).norm(), (two.nodes[0] - b).norm()) < 1e-12);
    CHECK(two.arc_length[1] == doctest::Approx(len).epsilon(1e-12));
}

TEST_CASE("fit_path follows a sharp bend") {
    std::mt19937_64 rng(6);
    const double sigma = 0.05;
    std::normal_distribution<double> noise(0.0, sigma);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const Vector3d a(0, 0, 0), corner(1, 0, 0), c(1, 1, 0);
    std::vector<Vector3d> zs;
    for (int n = 0; n < 4000; ++n) {
        const double t = u(rng);
        const Vector3d base = n % 2 ? Vector3d(a + t * (corner - a)) : Vector3d(corner + t * (c - corner));
        zs.push_back(base + Vector3d(noise(rng), noise(rng), noise(rng)));
    }
    const LatentPath p = fit_path(uniform_weights(zs), 16, 50);
    double worst = 0.0;
    for (const Vector3d& node : p.nodes) {
        worst = std::max(worst, std::min(distance_to_segment(node, a, corner), distance_to_segment(node, corner, c)));
    }
    INFO("max node deviation " << worst);
    CHECK(worst < 2.0 * sigma);
    const LatentPath again = fit_path(uniform_weights(zs), 16, 50);
    CHECK(again.nodes == p.nodes);

    const LatentPath o = orient_path(p, c);
    CHECK((o.nodes.front() - c).norm() < (o.nodes.back() - c).norm());
    CHECK(orient_path(o, c).nodes == o.nodes);
}

TEST_CASE("fit_path errors") {
    CHECK_THROWS_AS(fit_path(uniform_weights({Vector3d(1, 2, 3), Vector3d(1, 2, 3), Vector3d(1, 2, 3)}), 2, 5),
                    DegenerateError);
    CHECK_THROWS_AS(fit_path(uniform_weights({Vector3d(0, 0, 0), Vector3d(1, 0, 0)}), 3, 5), InvalidArgument);
    CHECK_THROWS_AS(fit_path(uniform_weights({Vector3d(0, 0, 0), Vector3d(1, 0, 0)}), 1, 5), InvalidArgument);
    std::vector<NoveltyPoint> zero = uniform_weights({Vector3d(0, 0, 0), Vector3d(1, 0, 0), Vector3d(2, 0, 0)});
    zero[1].weight = 0.0;
    CHECK_THROWS_AS(fit_path(zero, 3, 5), InvalidArgument);
}

TEST_CASE("waypoints") {
    const auto dir = std::filesystem::temp_directory_path() / "dropletscope_path_wp";
    std::filesystem::create_directories(dir);
    binio::write_file(dir / "wp.txt", "# start\n0 0 0\n\n1 0 0  # corner\n1 1 0\n");
    const auto wp = read_waypoints(dir / "wp.txt");
    REQUIRE(wp.size() == 3);
    CHECK(wp[1] == Vector3d(1, 0, 0));
    CHECK(resample_polyline(wp, 5).nodes[2] == Vector3d(1, 0, 0));
    binio::write_file(dir / "bad.txt", "0 0\n");
    CHECK_THROWS_AS(read_waypoints(dir / "bad.txt"), FormatError);
    binio::write_file(dir / "extra.txt", "0 0 0 0\n");
    CHECK_THROWS_AS(read_waypoints(dir / "extra.txt"), FormatError);
    CHECK_THROWS_AS(read_waypoints(dir / "missing.txt"), IoError);
}

TEST_CASE("knn_average") {
    std::mt19937_64 rng(7);
    const auto pts = gaussian_cloud(rng, 10000, Vector3d::Zero(), 1.0);
    const auto dsds = random_dsds(rng, pts.size());
    const KdTree tree(pts);

    const Vector3d q(0.1, -0.2, 0.3);
    const auto nearest = knn_brute_force(pts, q, 1);
    const Dsd one = knn_average(q, tree, dsds, 1);
    for (std::size_t b = 0; b < kBinCount; ++b) {
        CHECK(one[b] == doctest::Approx(dsds[nearest[0].index][b]).epsilon(1e-14));
    }

    const Dsd all_a = knn_average(q, tree, dsds, pts.size());
    const Dsd all_b = knn_average(Vector3d(5, 5, 5), tree, dsds, pts.size());
    std::vector<double> mean(kBinCount, 0.0);
    for (const Dsd& d : dsds) {
        for (std::size_t b = 0; b < kBinCount; ++b) mean[b] += d[b] / static_cast<double>(dsds.size());
    }
    for (std::size_t b = 0; b < kBinCount; ++b) {
        CHECK(std::abs(all_a[b] - mean[b]) < 1e-12);
        CHECK(std::abs(all_a[b] - all_b[b]) < 1e-15);
    }

    double worst = 0.0;
    for (int n = 0; n < 100; ++n) {
        const Vector3d query = gaussian_cloud(rng, 1, Vector3d::Zero(), 1.5)[0];
        const Dsd a = knn_average(query, tree, dsds, 50);
        const Dsd b = knn_average_brute_force(query, pts, dsds, 50);
        for (std::size_t bin = 0; bin < kBinCount; ++bin) worst = std::max(worst, std::abs(a[bin] - b[bin]));
    }
    CHECK(worst <= 1e-12);

    // Storage order does not matter.
    std::vector<std::size_t> perm(pts.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<Vector3d> pp;
    std::vector<Dsd> pd;
    for (std::size_t i : perm) {
        pp.push_back(pts[i]);
        pd.push_back(dsds[i]);
    }
    const KdTree shuffled(pp);
    const Dsd s1 = knn_average(q, tree, dsds, 40);
    const Dsd s2 = knn_average(q, shuffled, pd, 40);
    for (std::size_t b = 0; b < kBinCount; ++b) CHECK(std::abs(s1[b] - s2[b]) < 1e-15);

    CHECK_THROWS_AS(knn_average(q, tree, dsds, pts.size() + 1), InvalidArgument);
    CHECK_THROWS_AS(knn_average(q, tree, dsds, 0), InvalidArgument);
    CHECK_THROWS_AS(knn_average(q, tree, std::span(dsds).first(10), 1), InvalidArgument);
}

TEST_CASE("path_evolution on a synthetic pathway") {
    synth::SynthConfig cfg;
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> g(0.0, 0.03);
    std::vector<Vector3d> zs;
    std::vector<Dsd> dsds;
    for (int n = 0; n < 5000; ++n) {
        const double s = u(rng);
        // A bent curve in latent space parametrised by the pathway position.
        zs.push_back(Vector3d(s, s * s, 0.3 * std::sin(3.0 * s)) + Vector3d(g(rng), g(rng), g(rng)));
        dsds.push_back(synth::pathway_dsd(s, cfg, rng()));
    }
    const KdTree tree(zs);
    std::vector<Vector3d> verts;
    for (int n = 0; n <= 20; ++n) {
        const double s = n / 20.0;
        verts.push_back(Vector3d(s, s * s, 0.3 * std::sin(3.0 * s)));
    }
    const LatentPath path = resample_polyline(verts, 16);
    const auto samples = path_evolution(path, tree, dsds, 100);
    REQUIRE(samples.size() == 16);
    std::vector<double> idx, md;
    for (std::size_t n = 0; n < samples.size(); ++n) {
        idx.push_back(static_cast<double>(n));
        md.push_back(samples[n].mean_diameter_mm);
        CHECK(samples[n].arc_length == path.arc_length[n]);
        CHECK(std::abs(summed_mixing_ratio(samples[n].dsd) - 1.0) < 1e-12);
    }
    CHECK(spearman(idx, md) > 0.9);

    const LatentPath two = make_path({Vector3d(0, 0, 0), Vector3d(1, 1, 0)});
    CHECK(path_evolution(two, tree, dsds, 10).size() == 2);
    CHECK_THROWS_AS(path_evolution(two, tree, dsds, 6000), InvalidArgument);

    const auto dir = std::filesystem::temp_directory_path() / "dropletscope_path_csv";
    std::filesystem::create_directories(dir);
    write_path_csv(samples, dir / "path.csv");
    std::ifstream in(dir / "path.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header.rfind("node_index,arc_length,z1,z2,z3,r1,r2,", 0) == 0);
    CHECK(header.substr(header.size() - 21) == ",r33,mean_diameter_mm");
    std::size_t rows = 0;
    for (std::string line; std::getline(in, line);) ++rows;
    CHECK(rows == 16);
}

TEST_CASE("spearman") {
    const std::vector<double> a{1, 2, 3, 4, 5};
    CHECK(spearman(a, std::vector<double>{10, 20, 30, 40, 50}) == doctest::Approx(1.0));
    CHECK(spearman(a, std::vector<double>{5, 4, 3, 2, 1}) == doctest::Approx(-1.0));
    CHECK(spearman(a, std::vector<double>{1, 1, 2, 2, 3}) > 0.9);
    CHECK_THROWS_AS(spearman(a, std::vector<double>{1, 1, 1, 1, 1}), DegenerateError);
}
