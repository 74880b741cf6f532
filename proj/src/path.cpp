#include "dropletscope/path.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "dropletscope/error.hpp"
#include "dropletscope/parallel.hpp"
#include "dropletscope/rng.hpp"

namespace dropletscope::path {

using Eigen::Vector3d;

double scott_bandwidth(std::span<const Vector3d> points) {
    if (points.size() < 2) throw InvalidArgument("scott_bandwidth: need at least 2 points");
    Vector3d mean = Vector3d::Zero();
    for (const Vector3d& p : points) mean += p;
    mean /= static_cast<double>(points.size());
    double ss = 0.0;
    for (const Vector3d& p : points) ss += (p - mean).squaredNorm();
    const double var = ss / static_cast<double>(points.size() - 1) / 3.0;
    if (!(var > 0.0)) throw DegenerateError("scott_bandwidth: all points coincide");
    return std::pow(static_cast<double>(points.size()), -1.0 / 7.0) * std::sqrt(var);
}

std::vector<Vector3d> subsample(std::span<const Vector3d> points, std::size_t cap, std::uint64_t seed) {
    if (points.size() <= cap) return {points.begin(), points.end()};
    std::vector<std::size_t> idx(points.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(derive_seed(seed, {0x5AB5}));
    for (std::size_t n = 0; n < cap; ++n) {
        std::uniform_int_distribution<std::size_t> pick(n, idx.size() - 1);
        std::swap(idx[n], idx[pick(rng)]);
    }
    idx.resize(cap);
    std::sort(idx.begin(), idx.end());
    std::vector<Vector3d> out;
    out.reserve(cap);
    for (std::size_t i : idx) out.push_back(points[i]);
    return out;
}

double kde(const KdTree& tree, const Vector3d& query, double h, double cutoff) {
    if (tree.size() == 0) throw InvalidArgument("kde: empty point set");
    // The traversal order is fixed by the tree, so the sum is reproducible.
    thread_local std::vector<Neighbor> near;
    thread_local Eigen::ArrayXd d2;
    near.clear();
    tree.radius_search(query, cutoff * h, near);
    d2.resize(static_cast<Eigen::Index>(near.size()));
    for (std::size_t n = 0; n < near.size(); ++n) d2(static_cast<Eigen::Index>(n)) = near[n].dist2;
    const double sum = (d2 * (-1.0 / (2.0 * h * h))).exp().sum();
    const double norm = std::pow(2.0 * std::numbers::pi, 1.5) * h * h * h * static_cast<double>(tree.size());
    return sum / norm;
}

std::vector<NoveltyPoint> novelty_points(std::span<const Vector3d> early, std::span<const Vector3d> late,
                                         double bandwidth, std::size_t cap, std::uint64_t seed) {
    if (early.empty() || late.empty()) throw InvalidArgument("novelty_points: empty early or late set");
    if (!(bandwidth > 0.0) || !std::isfinite(bandwidth)) {
        throw InvalidArgument("novelty_points: bandwidth must be finite and > 0");
    }
    if (cap == 0) throw InvalidArgument("novelty_points: cap must be >= 1");
    const KdTree early_tree(subsample(early, cap, seed));
    const KdTree late_tree(subsample(late, cap, seed));
    const auto& pts = late_tree.points();
    std::vector<NoveltyPoint> out(pts.size());
    parallel_for(pts.size(), [&](std::size_t n) {
        const double diff = kde(late_tree, pts[n], bandwidth) - kde(early_tree, pts[n], bandwidth);
        out[n] = NoveltyPoint{pts[n], std::max(0.0, diff)};
    });
    return out;
}

LatentPath make_path(std::vector<Vector3d> nodes) {
    if (nodes.size() < 2) throw InvalidArgument("path needs at least 2 nodes");
    LatentPath p;
    p.arc_length.assign(nodes.size(), 0.0);
    for (std::size_t n = 1; n < nodes.size(); ++n) {
        const double step = (nodes[n] - nodes[n - 1]).norm();
        if (!(step > 0.0)) throw InvalidArgument("path has repeated consecutive nodes");
        p.arc_length[n] = p.arc_length[n - 1] + step;
    }
    p.nodes = std::move(nodes);
    return p;
}

LatentPath resample_polyline(std::span<const Vector3d> vertices, std::size_t n_nodes) {
    if (n_nodes < 2) throw InvalidArgument("resample: n_nodes must be >= 2");
    std::vector<Vector3d> v;
    for (const Vector3d& p : vertices) {
        if (!p.allFinite()) throw InvalidData("resample: non-finite vertex");
        if (v.empty() || (p - v.back()).norm() > 0.0) v.push_back(p);
    }
    if (v.size() < 2) throw DegenerateError("resample: polyline has zero length");
    std::vector<double> arc(v.size(), 0.0);
    for (std::size_t n = 1; n < v.size(); ++n) arc[n] = arc[n - 1] + (v[n] - v[n - 1]).norm();
    const double total = arc.back();
    std::vector<Vector3d> nodes(n_nodes);
    std::size_t seg = 0;
    for (std::size_t n = 0; n < n_nodes; ++n) {
        const double s = total * static_cast<double>(n) / static_cast<double>(n_nodes - 1);
        while (seg + 2 < v.size() && arc[seg + 1] < s) ++seg;
        const double len = arc[seg + 1] - arc[seg];
        const double t = std::clamp((s - arc[seg]) / len, 0.0, 1.0);
        nodes[n] = v[seg] + t * (v[seg + 1] - v[seg]);
    }
    nodes.front() = v.front();
    nodes.back() = v.back();
    return make_path(std::move(nodes));
}

namespace {

/// Arc-length coordinate of the closest point on the polyline.
double project_onto(const std::vector<Vector3d>& nodes, const Vector3d& z) {
    double best = std::numeric_limits<double>::infinity();
    double best_s = 0.0;
    double start = 0.0;
    for (std::size_t n = 0; n + 1 < nodes.size(); ++n) {
        const Vector3d d = nodes[n + 1] - nodes[n];
        const double len2 = d.squaredNorm();
        const double t = len2 > 0.0 ? std::clamp((z - nodes[n]).dot(d) / len2, 0.0, 1.0) : 0.0;
        const double dist = (nodes[n] + t * d - z).squaredNorm();
        const double len = std::sqrt(len2);
        if (dist < best) {
            best = dist;
            best_s = start + t * len;
        }
        start += len;
    }
    return best_s;
}

std::size_t nearest_node(const std::vector<Vector3d>& nodes, const Vector3d& z) {
    std::size_t best = 0;
    double best_d = squared_distance(nodes[0], z);
    for (std::size_t n = 1; n < nodes.size(); ++n) {
        const double d = squared_distance(nodes[n], z);
        if (d < best_d) {
            best_d = d;
            best = n;
        }
    }
    return best;
}

/// Pushes an end node outwards by twice the weighted mean overhang of the
/// points it owns (the full extent of a uniformly covered end), but never
/// past the farthest of them.
Vector3d extend_end(const Vector3d& end, const Vector3d& inner, std::span<const NoveltyPoint> pts,
                    const std::vector<std::size_t>& owner, std::size_t id) {
    const Vector3d dir = (end - inner).normalized();
    double wsum = 0.0, wproj = 0.0, farthest = 0.0;
    for (std::size_t n = 0; n < pts.size(); ++n) {
        if (owner[n] != id) continue;
        const double proj = (pts[n].z - end).dot(dir);
        if (proj > 0.0) {
            wsum += pts[n].weight;
            wproj += pts[n].weight * proj;
            farthest = std::max(farthest, proj);
        }
    }
    return wsum > 0.0 ? Vector3d(end + std::min(2.0 * wproj / wsum, farthest) * dir) : end;
}

}  // namespace

LatentPath fit_path(std::span<const NoveltyPoint> points, std::size_t n_nodes, std::size_t n_iters) {
    if (n_nodes < 2) throw InvalidArgument("fit_path: n_nodes must be >= 2");
    std::vector<NoveltyPoint> pts;
    for (const NoveltyPoint& p : points) {
        if (!(p.weight >= 0.0) || !p.z.allFinite()) throw InvalidData("fit_path: invalid point or weight");
        if (p.weight > 0.0) pts.push_back(p);
    }
    if (pts.size() < n_nodes) {
        throw InvalidArgument("fit_path: " + std::to_string(pts.size()) + " positive-weight points for " +
                              std::to_string(n_nodes) + " nodes");
    }

    double wtot = 0.0;
    Vector3d mean = Vector3d::Zero();
    for (const NoveltyPoint& p : pts) {
        wtot += p.weight;
        mean += p.weight * p.z;
    }
    mean /= wtot;
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (const NoveltyPoint& p : pts) cov += p.weight * (p.z - mean) * (p.z - mean).transpose();
    cov /= wtot;
    const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
    const Vector3d axis = eig.eigenvectors().col(2);
    double tmin = std::numeric_limits<double>::infinity(), tmax = -tmin;
    for (const NoveltyPoint& p : pts) {
        const double t = axis.dot(p.z - mean);
        tmin = std::min(tmin, t);
        tmax = std::max(tmax, t);
    }
    if (!(eig.eigenvalues()(2) > 0.0) || !(tmax > tmin)) throw DegenerateError("fit_path: point cloud has no extent");

    std::vector<Vector3d> nodes(n_nodes);
    for (std::size_t n = 0; n < n_nodes; ++n) {
        const double t = tmin + (tmax - tmin) * static_cast<double>(n) / static_cast<double>(n_nodes - 1);
        nodes[n] = mean + t * axis;
    }
    if (n_nodes == 2) return make_path(std::move(nodes));

    std::vector<std::size_t> owner(pts.size());
    for (std::size_t it = 0; it < n_iters; ++it) {
        std::vector<Vector3d> sum(n_nodes, Vector3d::Zero());
        std::vector<double> w(n_nodes, 0.0);
        for (std::size_t n = 0; n < pts.size(); ++n) {
            owner[n] = nearest_node(nodes, pts[n].z);
            sum[owner[n]] += pts[n].weight * pts[n].z;
            w[owner[n]] += pts[n].weight;
        }
        std::vector<std::pair<double, Vector3d>> moved(n_nodes);
        for (std::size_t n = 0; n < n_nodes; ++n) {
            const Vector3d next = w[n] > 0.0 ? Vector3d(sum[n] / w[n]) : nodes[n];
            moved[n] = {project_onto(nodes, next), next};
        }
        std::stable_sort(moved.begin(), moved.end(),
                         [](const auto& a, const auto& b) { return a.first < b.first; });
        for (std::size_t n = 0; n < n_nodes; ++n) nodes[n] = moved[n].second;
        const std::vector<Vector3d> prev = nodes;
        for (std::size_t n = 1; n + 1 < n_nodes; ++n) nodes[n] = (prev[n - 1] + prev[n] + prev[n + 1]) / 3.0;
    }

    for (std::size_t n = 0; n < pts.size(); ++n) owner[n] = nearest_node(nodes, pts[n].z);
    if ((nodes[0] - nodes[1]).norm() > 0.0) nodes[0] = extend_end(nodes[0], nodes[1], pts, owner, 0);
    const std::size_t last = n_nodes - 1;
    if ((nodes[last] - nodes[last - 1]).norm() > 0.0) {
        nodes[last] = extend_end(nodes[last], nodes[last - 1], pts, owner, last);
    }
    return resample_polyline(nodes, n_nodes);
}

LatentPath orient_path(const LatentPath& path, const Vector3d& start_hint) {
    if (path.nodes.size() < 2) throw InvalidArgument("orient_path: path needs at least 2 nodes");
    if ((path.nodes.back() - start_hint).norm() < (path.nodes.front() - start_hint).norm()) {
        return make_path(std::vector<Vector3d>(path.nodes.rbegin(), path.nodes.rend()));
    }
    return path;
}

std::vector<Vector3d> read_waypoints(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open waypoints " + path.string());
    std::vector<Vector3d> out;
    std::string line;
    std::uint64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        std::istringstream ls(line);
        std::string probe;
        if (!(ls >> probe)) continue;
        ls.clear();
        ls.str(line);
        Vector3d z;
        std::string extra;
        if (!(ls >> z.x() >> z.y() >> z.z()) || (ls >> extra)) {
            throw FormatError(path.string() + ": expected `z1 z2 z3` on line " + std::to_string(line_no), line_no);
        }
        out.push_back(z);
    }
    return out;
}

namespace {

Dsd mean_of(const std::vector<Neighbor>& nn, std::span<const Dsd> dsds) {
    const std::size_t bins = dsds[nn.front().index].size();
    std::vector<double> acc(bins, 0.0);
    for (const Neighbor& n : nn) {
        const Dsd& d = dsds[n.index];
        if (d.size() != bins) throw InvalidArgument("knn_average: Dsds differ in bin count");
        for (std::size_t b = 0; b < bins; ++b) acc[b] += d[b];
    }
    for (double& a : acc) a /= static_cast<double>(nn.size());
    return normalize_dsd(Dsd(std::move(acc)));
}

}  // namespace

Dsd knn_average(const Vector3d& query, const KdTree& tree, std::span<const Dsd> dsds, std::size_t k) {
    if (tree.size() != dsds.size()) throw InvalidArgument("knn_average: index and Dsds are not aligned");
    if (k == 0) throw InvalidArgument("knn_average: k must be >= 1");
    return mean_of(tree.knn(query, k), dsds);
}

Dsd knn_average_brute_force(const Vector3d& query, std::span<const Vector3d> points, std::span<const Dsd> dsds,
                            std::size_t k) {
    if (points.size() != dsds.size()) throw InvalidArgument("knn_average: points and Dsds are not aligned");
    if (k == 0) throw InvalidArgument("knn_average: k must be >= 1");
    return mean_of(knn_brute_force(points, query, k), dsds);
}

std::vector<PathSample> path_evolution(const LatentPath& path, const KdTree& tree, std::span<const Dsd> dsds,
                                       std::size_t k) {
    if (path.nodes.size() < 2 || path.arc_length.size() != path.nodes.size()) {
        throw InvalidArgument("path_evolution: invalid path");
    }
    if (dsds.empty()) throw InvalidArgument("path_evolution: no records");
    const BinGrid grid{bin_diameters(dsds.front().size(), kMaxDiameterMm)};
    std::vector<PathSample> out(path.nodes.size());
    parallel_for(out.size(), [&](std::size_t n) {
        PathSample& s = out[n];
        s.arc_length = path.arc_length[n];
        s.z = path.nodes[n];
        s.dsd = knn_average(path.nodes[n], tree, dsds, k);
        s.mean_diameter_mm = mean_diameter(s.dsd, grid);
    });
    return out;
}

void write_path_csv(std::span<const PathSample> samples, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    const std::size_t bins = samples.empty() ? kBinCount : samples.front().dsd.size();
    out << "node_index,arc_length,z1,z2,z3";
    for (std::size_t b = 1; b <= bins; ++b) out << ",r" << b;
    out << ",mean_diameter_mm\n";
    for (std::size_t n = 0; n < samples.size(); ++n) {
        const PathSample& s = samples[n];
        out << n << ',' << format_number(s.arc_length);
        for (int d = 0; d < 3; ++d) out << ',' << format_number(s.z(d));
        for (double r : s.dsd.values()) out << ',' << format_number(r);
        out << ',' << format_number(s.mean_diameter_mm) << '\n';
    }
    if (!out) throw IoError("write failed: " + path.string());
}

namespace {

std::vector<double> ranks(std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j);
        for (std::size_t t = i; t <= j; ++t) r[idx[t]] = avg;
        i = j + 1;
    }
    return r;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.size() < 2) throw InvalidArgument("spearman: need two equal-length series");
    const std::vector<double> ra = ranks(a), rb = ranks(b);
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (!(saa > 0.0 && sbb > 0.0)) throw DegenerateError("spearman: constant series");
    return sab / std::sqrt(saa * sbb);
}

}  // namespace dropletscope::path
