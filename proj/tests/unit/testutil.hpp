#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "pcseg/kdtree.hpp"
#include "pcseg/pointcloud.hpp"
#include "pcseg/rng.hpp"
#include "pcseg/tensor.hpp"

namespace testutil {

// Scratch directory under the build tree, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() /
                ("pcseg_test_" + tag + "_" + std::to_string(counter_++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    std::string file(const std::string& name) const { return (path_ / name).string(); }
    const std::filesystem::path& path() const { return path_; }

private:
    static inline int counter_ = 0;
    std::filesystem::path path_;
};

inline pcseg::PointCloud random_cloud(pcseg::Rng& rng, std::size_t n, double extent = 20.0,
                                      double z_extent = 4.0) {
    pcseg::PointCloud cloud;
    cloud.points.resize(n);
    for (auto& p : cloud.points) {
        p.x = static_cast<float>(rng.uniform(-extent, extent));
        p.y = static_cast<float>(rng.uniform(-extent, extent));
        p.z = static_cast<float>(rng.uniform(-z_extent, z_extent));
        p.intensity = static_cast<float>(rng.uniform01());
        p.range = pcseg::point_norm(p.x, p.y, p.z);
    }
    return cloud;
}

// O(N^2) exact kNN with the production tie rule (distance, then index),
// written independently of the tree.
inline pcseg::KnnResult brute_knn(const pcseg::PointCloud& data, const pcseg::PointCloud& queries,
                                  int k) {
    pcseg::KnnResult r;
    r.k = k;
    const std::size_t n = data.size(), q = queries.size();
    r.indices.resize(q * static_cast<std::size_t>(k));
    r.sq_distances.resize(q * static_cast<std::size_t>(k));
    std::vector<std::pair<double, std::int32_t>> cand(n);
    for (std::size_t qi = 0; qi < q; ++qi) {
        const auto& qp = queries.points[qi];
        for (std::size_t i = 0; i < n; ++i) {
            const auto& p = data.points[i];
            const double dx = static_cast<double>(qp.x) - p.x;
            const double dy = static_cast<double>(qp.y) - p.y;
            const double dz = static_cast<double>(qp.z) - p.z;
            cand[i] = {dx * dx + dy * dy + dz * dz, static_cast<std::int32_t>(i)};
        }
        std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
        for (int j = 0; j < k; ++j) {
            r.sq_distances[qi * k + j] = cand[static_cast<std::size_t>(j)].first;
            r.indices[qi * k + j] = cand[static_cast<std::size_t>(j)].second;
        }
    }
    return r;
}

template <class S>
pcseg::TensorData<S> random_tensor(pcseg::Rng& rng, pcseg::Shape shape, double lo = -1.0,
                                   double hi = 1.0) {
    pcseg::TensorData<S> t(std::move(shape));
    for (auto& v : t.v) v = static_cast<S>(rng.uniform(lo, hi));
    return t;
}

}  // namespace testutil
