#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "pcseg/common.hpp"

namespace pcseg {

// One LiDAR return. Coordinates in meters (sensor frame), intensity in [0, 1],
// range = Euclidean norm of (x, y, z).
struct Point {
    float x = 0.f;
    float y = 0.f;
    float z = 0.f;
    float intensity = 0.f;
    float range = 0.f;

    float coord(int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
};

inline float point_norm(float x, float y, float z) {
    return std::sqrt(static_cast<double>(x) * x + static_cast<double>(y) * y +
                     static_cast<double>(z) * z);
}

struct PointCloud {
    std::vector<Point> points;
    std::vector<std::int32_t> labels;  // empty when unlabeled; else one train id per point

    std::size_t size() const { return points.size(); }
    bool has_labels() const { return !labels.empty(); }

    void recompute_ranges() {
        for (auto& p : points) p.range = point_norm(p.x, p.y, p.z);
    }

    void check_labels() const {
        PCSEG_CHECK(labels.empty() || labels.size() == points.size(),
                    "label count " << labels.size() << " does not match point count " << points.size());
    }
};

struct AugmentFlags {
    bool flip_x = false;   // negate x with probability 1/2
    bool flip_y = false;   // negate y with probability 1/2
    bool rotate_z = false; // rotate about z by a uniform angle in [0, 2pi)
    bool scale = false;    // scale by a uniform factor in [1 - scale_max, 1 + scale_max]
};

struct PreprocessConfig {
    double voxel_size = 0.1;
    std::array<double, 3> crop_min{-50.0, -50.0, -5.0};
    std::array<double, 3> crop_max{50.0, 50.0, 5.0};
    AugmentFlags augment;
    double scale_max = 0.1;
    bool scale_xy_only = false;  // restrict scaling to x-y, leaving z untouched

    void validate() const {
        PCSEG_CHECK(voxel_size > 0.0, "voxel_size must be positive, got " << voxel_size);
        for (int a = 0; a < 3; ++a)
            PCSEG_CHECK(crop_min[a] < crop_max[a],
                        "crop_min must be below crop_max on axis " << a);
        PCSEG_CHECK(scale_max >= 0.0 && scale_max < 1.0,
                    "scale_max must be in [0, 1), got " << scale_max);
    }
};

}  // namespace pcseg
