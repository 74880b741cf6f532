#pragma once

// Precipitation pathway in latent space: novelty weighting of late-time
// embeddings against early-time ones, a weighted principal-curve fit, and
// k-nearest-neighbour averaged Dsds along the fitted path.

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "dropletscope/core.hpp"
#include "dropletscope/kdtree.hpp"

namespace dropletscope::path {

struct NoveltyPoint {
    Eigen::Vector3d z = Eigen::Vector3d::Zero();
    double weight = 0.0;
};

/// Scott's rule in 3-D: n^(-1/7) * sqrt(trace(cov) / 3). The isotropic scale
/// keeps the bandwidth invariant under rotations. Throws DegenerateError when
/// all points coincide.
double scott_bandwidth(std::span<const Eigen::Vector3d> points);

/// Seeded subsample without replacement that preserves the input order. The
/// input is returned unchanged when it has at most `cap` points.
std::vector<Eigen::Vector3d> subsample(std::span<const Eigen::Vector3d> points, std::size_t cap, std::uint64_t seed);

/// Gaussian KDE at `query` with bandwidth h. Kernels are truncated at
/// `cutoff` bandwidths, where they fall below 1e-14 of their peak.
double kde(const KdTree& tree, const Eigen::Vector3d& query, double h, double cutoff = 8.0);

/// One point per (subsampled) late embedding with weight
/// max(0, rho_late(z) - rho_early(z)). Both sets are subsampled with the same
/// seed, so identical inputs give identical subsamples and zero weights.
/// Throws InvalidArgument for empty inputs or a non-positive bandwidth.
std::vector<NoveltyPoint> novelty_points(std::span<const Eigen::Vector3d> early, std::span<const Eigen::Vector3d> late,
                                         double bandwidth, std::size_t cap = 100000, std::uint64_t seed = 0);

struct LatentPath {
    std::vector<Eigen::Vector3d> nodes;
    std::vector<double> arc_length;  // cumulative, arc_length[0] == 0
};

/// Computes arc lengths. Throws InvalidArgument for fewer than 2 nodes or
/// repeated consecutive nodes.
LatentPath make_path(std::vector<Eigen::Vector3d> nodes);

/// n_nodes points at equal arc-length spacing along the polyline through
/// `vertices` (consecutive duplicates dropped). Throws DegenerateError for a
/// zero-length polyline.
LatentPath resample_polyline(std::span<const Eigen::Vector3d> vertices, std::size_t n_nodes);

/// Weighted principal curve. Nodes start evenly spaced along the first
/// weighted principal component, across the projected extent of the cloud.
/// Each iteration assigns points to their nearest node, moves nodes to the
/// weighted means of their points, restores the node order by projection
/// onto the previous polyline and applies a 3-node moving average to the
/// interior. The end nodes are then pushed out to cover the cloud and the
/// curve is resampled at equal arc length. With n_nodes == 2 the weighted PCA
/// segment is returned as is.
/// Throws InvalidArgument with fewer than n_nodes positive-weight points or
/// n_nodes < 2, DegenerateError for a cloud with no extent.
LatentPath fit_path(std::span<const NoveltyPoint> points, std::size_t n_nodes = 16, std::size_t n_iters = 50);

/// Reverses the path if its last node is nearer to `start_hint` than its first.
LatentPath orient_path(const LatentPath& path, const Eigen::Vector3d& start_hint);

/// Whitespace separated `z1 z2 z3` lines; `#` starts a comment.
std::vector<Eigen::Vector3d> read_waypoints(const std::filesystem::path& path);

/// Unit-sum mean of the Dsds of the k records nearest to `query`, summed in
/// (distance, index) order. Throws InvalidArgument if k is 0 or exceeds the
/// record count, or if tree and dsds are not aligned.
Dsd knn_average(const Eigen::Vector3d& query, const KdTree& tree, std::span<const Dsd> dsds, std::size_t k);
Dsd knn_average_brute_force(const Eigen::Vector3d& query, std::span<const Eigen::Vector3d> points,
                            std::span<const Dsd> dsds, std::size_t k);

struct PathSample {
    double arc_length = 0.0;
    Eigen::Vector3d z = Eigen::Vector3d::Zero();
    Dsd dsd;
    double mean_diameter_mm = 0.0;
};

/// One averaged Dsd per node, in node order.
std::vector<PathSample> path_evolution(const LatentPath& path, const KdTree& tree, std::span<const Dsd> dsds,
                                       std::size_t k = 1000);

/// `node_index,arc_length,z1,z2,z3,r1..rn,mean_diameter_mm`.
void write_path_csv(std::span<const PathSample> samples, const std::filesystem::path& path);

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

}  // namespace dropletscope::path
