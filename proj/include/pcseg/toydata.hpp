#pragma once

#include <cstdint>
#include <vector>

#include "pcseg/model.hpp"
#include "pcseg/pointcloud.hpp"
#include "pcseg/rng.hpp"

namespace pcseg {

// Synthetic desk-scale scenes: a ground plane, a few boxes, a few poles, and
// uniform volume noise carrying the ignore class.
namespace toy {
inline constexpr std::int32_t kGround = 0;
inline constexpr std::int32_t kBox = 1;
inline constexpr std::int32_t kPole = 2;
inline constexpr std::int32_t kIgnore = 3;
inline constexpr int kClassCount = 4;
inline constexpr double kExtent = 10.0;
}  // namespace toy

inline PointCloud make_toy_scene(Rng& rng, int n_points) {
    PointCloud cloud;
    cloud.points.reserve(static_cast<std::size_t>(n_points));
    cloud.labels.reserve(static_cast<std::size_t>(n_points));
    auto push = [&](double x, double y, double z, double intensity, std::int32_t label) {
        Point p;
        p.x = static_cast<float>(x);
        p.y = static_cast<float>(y);
        p.z = static_cast<float>(z);
        p.intensity = static_cast<float>(intensity);
        p.range = point_norm(p.x, p.y, p.z);
        cloud.points.push_back(p);
        cloud.labels.push_back(label);
    };

    const int n_ground = static_cast<int>(n_points * 0.40);
    const int n_box = static_cast<int>(n_points * 0.25);
    const int n_pole = static_cast<int>(n_points * 0.20);
    const int n_noise = n_points - n_ground - n_box - n_pole;

    for (int i = 0; i < n_ground; ++i)
        push(rng.uniform(-toy::kExtent, toy::kExtent), rng.uniform(-toy::kExtent, toy::kExtent),
             rng.uniform(-0.05, 0.05), rng.uniform(0.30, 0.50), toy::kGround);

    struct Box {
        double cx, cy, sx, sy, h;
    };
    const int n_boxes = static_cast<int>(rng.uniform_int(2, 4));
    std::vector<Box> boxes;
    for (int b = 0; b < n_boxes; ++b)
        boxes.push_back({rng.uniform(-8, 8), rng.uniform(-8, 8), rng.uniform(0.5, 2.0),
                         rng.uniform(0.5, 2.0), rng.uniform(0.8, 2.0)});
    for (int i = 0; i < n_box; ++i) {
        const Box& bx = boxes[static_cast<std::size_t>(i % n_boxes)];
        push(bx.cx + rng.uniform(-bx.sx, bx.sx), bx.cy + rng.uniform(-bx.sy, bx.sy),
             rng.uniform(0.05, bx.h), rng.uniform(0.50, 0.75), toy::kBox);
    }

    struct Pole {
        double cx, cy, r, h;
    };
    const int n_poles = static_cast<int>(rng.uniform_int(2, 4));
    std::vector<Pole> poles;
    for (int b = 0; b < n_poles; ++b)
        poles.push_back({rng.uniform(-9, 9), rng.uniform(-9, 9), rng.uniform(0.05, 0.15),
                         rng.uniform(2.0, 4.0)});
    for (int i = 0; i < n_pole; ++i) {
        const Pole& pl = poles[static_cast<std::size_t>(i % n_poles)];
        const double ang = rng.uniform(0, 2 * M_PI);
        const double rr = pl.r * std::sqrt(rng.uniform01());
        push(pl.cx + rr * std::cos(ang), pl.cy + rr * std::sin(ang), rng.uniform(0.0, pl.h),
             rng.uniform(0.70, 0.90), toy::kPole);
    }

    for (int i = 0; i < n_noise; ++i)
        push(rng.uniform(-toy::kExtent, toy::kExtent), rng.uniform(-toy::kExtent, toy::kExtent),
             rng.uniform(0.0, 5.0), rng.uniform01(), toy::kIgnore);

    return cloud;
}

// Deterministic per seed: the same seed always yields the same scenes.
inline std::vector<PointCloud> make_toy_dataset(std::uint64_t seed, int n_scenes = 1,
                                                int min_points = 200, int max_points = 1000) {
    PCSEG_CHECK(n_scenes >= 1 && min_points >= 50 && max_points >= min_points,
                "bad toy dataset parameters");
    Rng rng(seed);
    std::vector<PointCloud> scenes;
    scenes.reserve(static_cast<std::size_t>(n_scenes));
    for (int s = 0; s < n_scenes; ++s) {
        const int n = static_cast<int>(rng.uniform_int(min_points, max_points));
        scenes.push_back(make_toy_scene(rng, n));
    }
    return scenes;
}

// Model sized for the toy scenes; all four views live on small grids.
inline ModelConfig make_toy_model_config(int feature_width = 32, int layer_count = 4) {
    ModelConfig cfg;
    cfg.feature_width = feature_width;
    cfg.layer_count = layer_count;
    cfg.neighbors = 8;
    cfg.class_count = toy::kClassCount;
    cfg.ignore_class = toy::kIgnore;
    cfg.embed_hidden = 32;
    cfg.grid_xy = GridSpec::planar(0, 1, 0.5, -12, 12, -12, 12);
    cfg.grid_xz = GridSpec::planar(0, 2, 0.5, -12, 12, -1, 6);
    cfg.grid_yz = GridSpec::planar(1, 2, 0.5, -12, 12, -1, 6);
    cfg.grid_range = GridSpec::spherical(48, 128, 75.0, -75.0);
    return cfg;
}

}  // namespace pcseg
