#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <future>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "pcseg/common.hpp"
#include "pcseg/parallel.hpp"
#include "pcseg/pointcloud.hpp"

namespace pcseg {

// k-nearest-neighbor answers for a batch of queries, row-major [Q, k].
// Distances are squared and ascending per row; ties at equal distance are
// resolved toward the smaller point index. Self-matches are eligible.
struct KnnResult {
    int k = 0;
    std::vector<std::int32_t> indices;
    std::vector<double> sq_distances;

    std::size_t query_count() const { return k == 0 ? 0 : indices.size() / static_cast<std::size_t>(k); }
    const std::int32_t* row(std::size_t q) const { return indices.data() + q * static_cast<std::size_t>(k); }
    const double* row_dist(std::size_t q) const { return sq_distances.data() + q * static_cast<std::size_t>(k); }

    bool operator==(const KnnResult&) const = default;
};

struct KdTreeBuildOptions {
    int leaf_size = 32;
    int parallel_depth = 4;  // spawn subtree tasks above this depth only
    int parallel_min_count = 8192;
};

// Median-split kd-tree over the x/y/z columns of a point cloud. Nodes live in
// a preorder array (left child = parent + 1), so subtree slots can be computed
// up front and parallel builds write without synchronization. Coordinates are
// promoted to double once; all distance math stays in double.
class KdTree {
public:
    using BuildOptions = KdTreeBuildOptions;

    struct Node {
        std::int32_t axis = -1;  // -1 marks a leaf
        double split = 0.0;
        std::uint32_t begin = 0, end = 0;  // range into perm()
        std::uint32_t right = 0;           // index of right child (left child = self + 1)
    };

    static KdTree build(const PointCloud& cloud, BuildOptions opts = BuildOptions()) {
        PCSEG_CHECK(!cloud.points.empty(), "cannot build a kd-tree over an empty cloud");
        PCSEG_CHECK(opts.leaf_size >= 1, "leaf_size must be >= 1");
        KdTree t;
        t.leaf_size_ = opts.leaf_size;
        const std::size_t n = cloud.size();
        t.pts_.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const Point& p = cloud.points[i];
            t.pts_[i] = {static_cast<double>(p.x), static_cast<double>(p.y), static_cast<double>(p.z)};
        }
        t.perm_.resize(n);
        std::iota(t.perm_.begin(), t.perm_.end(), 0);
        t.nodes_.resize(subtree_nodes(n, opts.leaf_size));
        t.build_range(0, 0, static_cast<std::uint32_t>(n), 0, opts);
        return t;
    }

    // Exact k nearest neighbors of every query point.
    KnnResult query_knn(const PointCloud& queries, int k) const {
        PCSEG_CHECK(k >= 1, "k must be >= 1, got " << k);
        PCSEG_CHECK(static_cast<std::size_t>(k) <= pts_.size(),
                    "k = " << k << " exceeds indexed point count " << pts_.size());
        KnnResult r;
        r.k = k;
        const std::size_t q_count = queries.size();
        r.indices.resize(q_count * static_cast<std::size_t>(k));
        r.sq_distances.resize(q_count * static_cast<std::size_t>(k));
        parallel_for(
            static_cast<std::int64_t>(q_count),
            [&](std::int64_t b, std::int64_t e) {
                std::vector<Candidate> heap;
                heap.reserve(static_cast<std::size_t>(k));
                for (std::int64_t qi = b; qi < e; ++qi) {
                    const Point& qp = queries.points[static_cast<std::size_t>(qi)];
                    std::array<double, 3> q{static_cast<double>(qp.x), static_cast<double>(qp.y),
                                            static_cast<double>(qp.z)};
                    heap.clear();
                    search(0, q, static_cast<std::size_t>(k), heap);
                    std::sort(heap.begin(), heap.end(), candidate_less);
                    auto* idx_row = r.indices.data() + static_cast<std::size_t>(qi) * k;
                    auto* dist_row = r.sq_distances.data() + static_cast<std::size_t>(qi) * k;
                    for (int j = 0; j < k; ++j) {
                        dist_row[j] = heap[static_cast<std::size_t>(j)].d2;
                        idx_row[j] = heap[static_cast<std::size_t>(j)].index;
                    }
                }
            },
            16);
        return r;
    }

    std::size_t size() const { return pts_.size(); }
    int leaf_size() const { return leaf_size_; }
    const std::vector<Node>& nodes() const { return nodes_; }
    const std::vector<std::int32_t>& perm() const { return perm_; }
    const std::array<double, 3>& point(std::size_t i) const { return pts_[i]; }

    int depth() const { return node_depth(0); }

    static double sq_dist(const std::array<double, 3>& a, const std::array<double, 3>& b) {
        const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
        return dx * dx + dy * dy + dz * dz;
    }

private:
    struct Candidate {
        double d2;
        std::int32_t index;
    };

    static bool candidate_less(const Candidate& a, const Candidate& b) {
        return a.d2 != b.d2 ? a.d2 < b.d2 : a.index < b.index;
    }

    static std::size_t subtree_nodes(std::size_t n, int leaf_size) {
        if (n <= static_cast<std::size_t>(leaf_size)) return 1;
        const std::size_t left = n / 2;
        return 1 + subtree_nodes(left, leaf_size) + subtree_nodes(n - left, leaf_size);
    }

    int node_depth(std::uint32_t at) const {
        const Node& nd = nodes_[at];
        if (nd.axis < 0) return 0;
        return 1 + std::max(node_depth(at + 1), node_depth(nd.right));
    }

    void build_range(std::uint32_t slot, std::uint32_t begin, std::uint32_t end, int depth,
                     const BuildOptions& opts) {
        Node& nd = nodes_[slot];
        nd.begin = begin;
        nd.end = end;
        const std::uint32_t count = end - begin;
        if (count <= static_cast<std::uint32_t>(opts.leaf_size)) {
            nd.axis = -1;
            return;
        }
        // Split on the widest-spread axis; break exact median ties by point index
        // so the structure is a pure function of the input order.
        std::array<double, 3> lo{}, hi{};
        lo.fill(std::numeric_limits<double>::infinity());
        hi.fill(-std::numeric_limits<double>::infinity());
        for (std::uint32_t i = begin; i < end; ++i) {
            const auto& p = pts_[static_cast<std::size_t>(perm_[i])];
            for (int a = 0; a < 3; ++a) {
                lo[a] = std::min(lo[a], p[a]);
                hi[a] = std::max(hi[a], p[a]);
            }
        }
        int axis = 0;
        for (int a = 1; a < 3; ++a)
            if (hi[a] - lo[a] > hi[axis] - lo[axis]) axis = a;

        const std::uint32_t mid = count / 2;
        auto cmp = [this, axis](std::int32_t ia, std::int32_t ib) {
            const double ca = pts_[static_cast<std::size_t>(ia)][axis];
            const double cb = pts_[static_cast<std::size_t>(ib)][axis];
            return ca != cb ? ca < cb : ia < ib;
        };
        std::nth_element(perm_.begin() + begin, perm_.begin() + begin + mid, perm_.begin() + end, cmp);
        const std::int32_t median_index = perm_[begin + mid];
        nd.axis = axis;
        nd.split = pts_[static_cast<std::size_t>(median_index)][axis];
        const std::uint32_t left_slot = slot + 1;
        const std::uint32_t right_slot =
            slot + 1 + static_cast<std::uint32_t>(subtree_nodes(mid, opts.leaf_size));
        nd.right = right_slot;

        const bool spawn = depth < opts.parallel_depth &&
                           count >= static_cast<std::uint32_t>(opts.parallel_min_count) &&
                           max_threads() > 1;
        if (spawn) {
            auto task = std::async(std::launch::async, [this, left_slot, begin, mid, depth, &opts] {
                build_range(left_slot, begin, begin + mid, depth + 1, opts);
            });
            build_range(right_slot, begin + mid, end, depth + 1, opts);
            task.get();
        } else {
            build_range(left_slot, begin, begin + mid, depth + 1, opts);
            build_range(right_slot, begin + mid, end, depth + 1, opts);
        }
    }

    // Bounded max-heap ordered by (distance, index); the root is the current
    // worst keeper and the first to be displaced.
    static bool candidate_heap_less(const Candidate& a, const Candidate& b) {
        return candidate_less(a, b);
    }

    void consider(std::vector<Candidate>& heap, std::size_t k, Candidate c) const {
        if (heap.size() < k) {
            heap.push_back(c);
            std::push_heap(heap.begin(), heap.end(), candidate_heap_less);
        } else if (candidate_less(c, heap.front())) {
            std::pop_heap(heap.begin(), heap.end(), candidate_heap_less);
            heap.back() = c;
            std::push_heap(heap.begin(), heap.end(), candidate_heap_less);
        }
    }

    void search(std::uint32_t at, const std::array<double, 3>& q, std::size_t k,
                std::vector<Candidate>& heap) const {
        const Node& nd = nodes_[at];
        if (nd.axis < 0) {
            for (std::uint32_t i = nd.begin; i < nd.end; ++i) {
                const std::int32_t pi = perm_[i];
                consider(heap, k, {sq_dist(q, pts_[static_cast<std::size_t>(pi)]), pi});
            }
            return;
        }
        const double delta = q[nd.axis] - nd.split;
        const std::uint32_t near_child = delta <= 0.0 ? at + 1 : nd.right;
        const std::uint32_t far_child = delta <= 0.0 ? nd.right : at + 1;
        search(near_child, q, k, heap);
        // The far side may still hold an equal-distance, smaller-index candidate,
        // so prune only on strictly larger plane distance.
        if (heap.size() < k || delta * delta <= heap.front().d2) search(far_child, q, k, heap);
    }

    int leaf_size_ = 32;
    std::vector<std::array<double, 3>> pts_;
    std::vector<std::int32_t> perm_;
    std::vector<Node> nodes_;
};

struct KnnBenchReport {
    std::size_t n = 0;
    int k = 0;
    int threads = 1;
    double build_ms_serial = 0, build_ms_threaded = 0;
    double query_ms_serial = 0, query_ms_threaded = 0;
    bool identical = false;

    std::string csv() const {
        std::ostringstream oss;
        oss << "phase,threads,millis\n";
        oss << "build,1," << build_ms_serial << "\n";
        oss << "build," << threads << "," << build_ms_threaded << "\n";
        oss << "query,1," << query_ms_serial << "\n";
        oss << "query," << threads << "," << query_ms_threaded << "\n";
        return oss.str();
    }
};

// Times build and batched self-query at one worker and at `threads` workers,
// discarding warm-up repetitions, and verifies the answers are identical.
inline KnnBenchReport bench_build_query(const PointCloud& cloud, int k, int threads, int reps = 5,
                                        int warmup = 3) {
    PCSEG_CHECK(threads >= 1, "threads must be >= 1");
    KnnBenchReport rep;
    rep.n = cloud.size();
    rep.k = k;
    rep.threads = threads;

    KnnResult serial_result, threaded_result;
    auto run_phase = [&](int nthreads, double& build_ms, double& query_ms, KnnResult& out) {
        ThreadCountGuard guard(nthreads);
        std::vector<double> build_times, query_times;
        KdTree tree;
        for (int r = 0; r < warmup + reps; ++r) {
            Stopwatch sw;
            tree = KdTree::build(cloud);
            if (r >= warmup) build_times.push_back(sw.elapsed_ms());
        }
        for (int r = 0; r < warmup + reps; ++r) {
            Stopwatch sw;
            out = tree.query_knn(cloud, k);
            if (r >= warmup) query_times.push_back(sw.elapsed_ms());
        }
        build_ms = detail::median_of(build_times);
        query_ms = detail::median_of(query_times);
    };
    run_phase(1, rep.build_ms_serial, rep.query_ms_serial, serial_result);
    run_phase(threads, rep.build_ms_threaded, rep.query_ms_threaded, threaded_result);
    rep.identical = serial_result == threaded_result;
    return rep;
}

}  // namespace pcseg
