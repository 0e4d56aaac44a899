#pragma once

#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "pcseg/common.hpp"
#include "pcseg/pointcloud.hpp"
#include "pcseg/rng.hpp"

namespace pcseg {

struct VoxelResult {
    PointCloud cloud;                  // one representative per occupied voxel, input order
    std::vector<std::int32_t> backmap; // original point index -> representative index in `cloud`
};

namespace detail {

struct VoxelKey {
    std::int64_t x, y, z;
    bool operator==(const VoxelKey&) const = default;
};

struct VoxelKeyHash {
    std::size_t operator()(const VoxelKey& k) const {
        std::uint64_t h = 0x9e3779b97f4a7c15ull;
        for (std::uint64_t v : {static_cast<std::uint64_t>(k.x), static_cast<std::uint64_t>(k.y),
                                static_cast<std::uint64_t>(k.z)}) {
            h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
        }
        return static_cast<std::size_t>(h);
    }
};

inline std::int64_t quantize(float v, double voxel) {
    return static_cast<std::int64_t>(std::floor(static_cast<double>(v) / voxel));
}

}  // namespace detail

// Keeps the first point (in input order) of every occupied voxel. The backmap
// lets per-point results on the reduced cloud be broadcast to full resolution.
inline VoxelResult voxel_downsample(const PointCloud& cloud, double voxel_size) {
    PCSEG_CHECK(voxel_size > 0.0, "voxel_size must be positive, got " << voxel_size);
    cloud.check_labels();
    VoxelResult out;
    out.backmap.resize(cloud.size());
    std::unordered_map<detail::VoxelKey, std::int32_t, detail::VoxelKeyHash> seen;
    seen.reserve(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const Point& p = cloud.points[i];
        detail::VoxelKey key{detail::quantize(p.x, voxel_size), detail::quantize(p.y, voxel_size),
                             detail::quantize(p.z, voxel_size)};
        auto [it, inserted] = seen.try_emplace(key, static_cast<std::int32_t>(out.cloud.size()));
        if (inserted) {
            out.cloud.points.push_back(p);
            if (cloud.has_labels()) out.cloud.labels.push_back(cloud.labels[i]);
        }
        out.backmap[i] = it->second;
    }
    return out;
}

struct CropResult {
    PointCloud cloud;
    std::vector<std::uint32_t> kept;  // original indices of surviving points
};

// Keeps points inside the closed box [crop_min, crop_max], order preserved.
inline CropResult fov_crop(const PointCloud& cloud, const std::array<double, 3>& crop_min,
                           const std::array<double, 3>& crop_max) {
    for (int a = 0; a < 3; ++a)
        PCSEG_CHECK(crop_min[a] < crop_max[a], "invalid crop bounds on axis " << a);
    cloud.check_labels();
    CropResult out;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const Point& p = cloud.points[i];
        bool inside = true;
        for (int a = 0; a < 3; ++a) {
            double c = p.coord(a);
            if (c < crop_min[a] || c > crop_max[a]) {
                inside = false;
                break;
            }
        }
        if (!inside) continue;
        out.kept.push_back(static_cast<std::uint32_t>(i));
        out.cloud.points.push_back(p);
        if (cloud.has_labels()) out.cloud.labels.push_back(cloud.labels[i]);
    }
    return out;
}

inline PointCloud flip_x(PointCloud cloud) {
    for (auto& p : cloud.points) p.x = -p.x;
    return cloud;
}

inline PointCloud flip_y(PointCloud cloud) {
    for (auto& p : cloud.points) p.y = -p.y;
    return cloud;
}

inline PointCloud rotate_z(PointCloud cloud, double angle_rad) {
    const double c = std::cos(angle_rad), s = std::sin(angle_rad);
    for (auto& p : cloud.points) {
        double x = p.x, y = p.y;
        p.x = static_cast<float>(c * x - s * y);
        p.y = static_cast<float>(s * x + c * y);
    }
    cloud.recompute_ranges();
    return cloud;
}

inline PointCloud scale(PointCloud cloud, double factor, bool xy_only = false) {
    for (auto& p : cloud.points) {
        p.x = static_cast<float>(p.x * factor);
        p.y = static_cast<float>(p.y * factor);
        if (!xy_only) p.z = static_cast<float>(p.z * factor);
    }
    cloud.recompute_ranges();
    return cloud;
}

// Composition of the enabled augmentations, each randomized from the seeded
// generator: coin-flip x/y mirroring, uniform z-rotation, uniform scaling.
// Intensity is untouched; the range column is recomputed.
inline PointCloud augment(PointCloud cloud, const PreprocessConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    if (cfg.augment.flip_x && rng.bernoulli(0.5)) cloud = flip_x(std::move(cloud));
    if (cfg.augment.flip_y && rng.bernoulli(0.5)) cloud = flip_y(std::move(cloud));
    if (cfg.augment.rotate_z) cloud = rotate_z(std::move(cloud), rng.uniform(0.0, 2.0 * M_PI));
    if (cfg.augment.scale)
        cloud = scale(std::move(cloud), rng.uniform(1.0 - cfg.scale_max, 1.0 + cfg.scale_max),
                      cfg.scale_xy_only);
    cloud.recompute_ranges();
    return cloud;
}

}  // namespace pcseg
