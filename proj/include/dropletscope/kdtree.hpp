#pragma once

// Static 3-D kd-tree for exact k-nearest-neighbour and radius queries.

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <vector>

namespace dropletscope {

struct Neighbor {
    std::size_t index = 0;
    double dist2 = 0.0;
};

/// Squared Euclidean distance, evaluated the same way by every search path.
inline double squared_distance(const Eigen::Vector3d& a, const Eigen::Vector3d& b) {
    const double dx = a.x() - b.x();
    const double dy = a.y() - b.y();
    const double dz = a.z() - b.z();
    return dx * dx + dy * dy + dz * dz;
}

class KdTree {
public:
    explicit KdTree(std::vector<Eigen::Vector3d> points, std::size_t leaf_size = 16);

    std::size_t size() const noexcept { return points_.size(); }
    const std::vector<Eigen::Vector3d>& points() const noexcept { return points_; }

    /// The k closest points ordered by (distance, index), so equal distances
    /// resolve to the lower index. Throws InvalidArgument if k > size().
    std::vector<Neighbor> knn(const Eigen::Vector3d& query, std::size_t k) const;

    /// Appends every point with distance <= radius to `out`, in tree order.
    void radius_search(const Eigen::Vector3d& query, double radius, std::vector<Neighbor>& out) const;

private:
    struct Node {
        std::uint32_t begin = 0;
        std::uint32_t end = 0;
        std::int32_t left = -1;
        std::int32_t right = -1;
        Eigen::Vector3d lo;
        Eigen::Vector3d hi;
    };

    std::int32_t build(std::uint32_t begin, std::uint32_t end);
    static double box_distance2(const Node& n, const Eigen::Vector3d& q);

    std::vector<Eigen::Vector3d> points_;
    std::vector<std::uint32_t> order_;
    std::vector<Node> nodes_;
    std::size_t leaf_size_;
};

/// Reference scan with the same ordering rule as KdTree::knn.
std::vector<Neighbor> knn_brute_force(std::span<const Eigen::Vector3d> points, const Eigen::Vector3d& query,
                                      std::size_t k);

}  // namespace dropletscope
