#include "dropletscope/kdtree.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <queue>

#include "dropletscope/error.hpp"

namespace dropletscope {

namespace {

bool closer(const Neighbor& a, const Neighbor& b) {
    return a.dist2 < b.dist2 || (a.dist2 == b.dist2 && a.index < b.index);
}

struct FarthestFirst {
    bool operator()(const Neighbor& a, const Neighbor& b) const { return closer(a, b); }
};

using CandidateHeap = std::priority_queue<Neighbor, std::vector<Neighbor>, FarthestFirst>;

std::vector<Neighbor> drain(CandidateHeap& heap) {
    std::vector<Neighbor> out(heap.size());
    for (std::size_t n = out.size(); n-- > 0;) {
        out[n] = heap.top();
        heap.pop();
    }
    return out;
}

void offer(CandidateHeap& heap, std::size_t k, const Neighbor& c) {
    if (heap.size() < k) {
        heap.push(c);
    } else if (closer(c, heap.top())) {
        heap.pop();
        heap.push(c);
    }
}

}  // namespace

KdTree::KdTree(std::vector<Eigen::Vector3d> points, std::size_t leaf_size)
    : points_(std::move(points)), leaf_size_(std::max<std::size_t>(leaf_size, 1)) {
    if (points_.size() >= std::numeric_limits<std::uint32_t>::max()) throw InvalidArgument("KdTree: too many points");
    order_.resize(points_.size());
    std::iota(order_.begin(), order_.end(), 0u);
    if (!points_.empty()) build(0, static_cast<std::uint32_t>(points_.size()));
}

std::int32_t KdTree::build(std::uint32_t begin, std::uint32_t end) {
    Node node;
    node.begin = begin;
    node.end = end;
    node.lo = node.hi = points_[order_[begin]];
    for (std::uint32_t n = begin + 1; n < end; ++n) {
        node.lo = node.lo.cwiseMin(points_[order_[n]]);
        node.hi = node.hi.cwiseMax(points_[order_[n]]);
    }
    const auto id = static_cast<std::int32_t>(nodes_.size());
    nodes_.push_back(node);
    if (end - begin <= leaf_size_) return id;

    Eigen::Index axis = 0;
    (node.hi - node.lo).maxCoeff(&axis);
    const std::uint32_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](std::uint32_t a, std::uint32_t b) {
                         const double ca = points_[a](axis), cb = points_[b](axis);
                         return ca < cb || (ca == cb && a < b);
                     });
    const std::int32_t left = build(begin, mid);
    const std::int32_t right = build(mid, end);
    nodes_[static_cast<std::size_t>(id)].left = left;
    nodes_[static_cast<std::size_t>(id)].right = right;
    return id;
}

double KdTree::box_distance2(const Node& n, const Eigen::Vector3d& q) {
    double d2 = 0.0;
    for (int a = 0; a < 3; ++a) {
        const double excess = std::max({n.lo(a) - q(a), 0.0, q(a) - n.hi(a)});
        d2 += excess * excess;
    }
    return d2;
}

std::vector<Neighbor> KdTree::knn(const Eigen::Vector3d& query, std::size_t k) const {
    if (k > points_.size()) {
        throw InvalidArgument("knn: k = " + std::to_string(k) + " exceeds " + std::to_string(points_.size()) +
                              " points");
    }
    CandidateHeap heap;
    if (k == 0) return {};
    std::vector<std::int32_t> stack{0};
    while (!stack.empty()) {
        const Node& n = nodes_[static_cast<std::size_t>(stack.back())];
        stack.pop_back();
        // A box at exactly the current worst distance may still hold a lower index.
        if (heap.size() == k && box_distance2(n, query) > heap.top().dist2) continue;
        if (n.left < 0) {
            for (std::uint32_t p = n.begin; p < n.end; ++p) {
                const std::uint32_t idx = order_[p];
                offer(heap, k, Neighbor{idx, squared_distance(points_[idx], query)});
            }
            continue;
        }
        const Node& l = nodes_[static_cast<std::size_t>(n.left)];
        const Node& r = nodes_[static_cast<std::size_t>(n.right)];
        // Push the farther child first so the nearer one is searched first.
        if (box_distance2(l, query) <= box_distance2(r, query)) {
            stack.push_back(n.right);
            stack.push_back(n.left);
        } else {
            stack.push_back(n.left);
            stack.push_back(n.right);
        }
    }
    return drain(heap);
}

void KdTree::radius_search(const Eigen::Vector3d& query, double radius, std::vector<Neighbor>& out) const {
    if (points_.empty()) return;
    const double r2 = radius * radius;
    std::vector<std::int32_t> stack{0};
    while (!stack.empty()) {
        const Node& n = nodes_[static_cast<std::size_t>(stack.back())];
        stack.pop_back();
        if (box_distance2(n, query) > r2) continue;
        if (n.left < 0) {
            for (std::uint32_t p = n.begin; p < n.end; ++p) {
                const std::uint32_t idx = order_[p];
                const double d2 = squared_distance(points_[idx], query);
                if (d2 <= r2) out.push_back(Neighbor{idx, d2});
            }
            continue;
        }
        stack.push_back(n.right);
        stack.push_back(n.left);
    }
}

std::vector<Neighbor> knn_brute_force(std::span<const Eigen::Vector3d> points, const Eigen::Vector3d& query,
                                      std::size_t k) {
    if (k > points.size()) throw InvalidArgument("knn: k exceeds the number of points");
    std::vector<Neighbor> all(points.size());
    for (std::size_t n = 0; n < points.size(); ++n) all[n] = Neighbor{n, squared_distance(points[n], query)};
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), closer);
    all.resize(k);
    return all;
}

}  // namespace dropletscope
