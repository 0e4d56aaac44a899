#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "pcseg/autodiff.hpp"
#include "pcseg/common.hpp"
#include "pcseg/parallel.hpp"
#include "pcseg/pointcloud.hpp"
#include "pcseg/rng.hpp"

namespace pcseg {

enum class GridKind { planar, spherical };

// How a range-image cell condenses its member points: average every member's
// features (the default) or take the member closest to the sensor.
enum class CellReduce { average, closest };

// One 2D view of the cloud: an orthogonal plane grid or the spherical range
// image. Planar grids derive height/width from bounds and resolution so the
// grid size is fixed per configuration.
struct GridSpec {
    GridKind kind = GridKind::planar;
    int axis0 = 0, axis1 = 1;       // projected axes: rows from axis0, cols from axis1
    double resolution = 0.4;        // meters per cell
    double min0 = -50, max0 = 50;
    double min1 = -50, max1 = 50;
    std::int64_t height = 64, width = 2048;  // spherical only
    double fov_up_deg = 3.0, fov_down_deg = -25.0;

    static GridSpec planar(int axis0, int axis1, double resolution, double min0, double max0,
                           double min1, double max1) {
        GridSpec g;
        g.kind = GridKind::planar;
        g.axis0 = axis0;
        g.axis1 = axis1;
        g.resolution = resolution;
        g.min0 = min0;
        g.max0 = max0;
        g.min1 = min1;
        g.max1 = max1;
        g.height = static_cast<std::int64_t>(std::ceil((max0 - min0) / resolution));
        g.width = static_cast<std::int64_t>(std::ceil((max1 - min1) / resolution));
        g.validate();
        return g;
    }

    static GridSpec spherical(std::int64_t h, std::int64_t w, double fov_up_deg, double fov_down_deg) {
        GridSpec g;
        g.kind = GridKind::spherical;
        g.height = h;
        g.width = w;
        g.fov_up_deg = fov_up_deg;
        g.fov_down_deg = fov_down_deg;
        g.validate();
        return g;
    }

    std::int64_t cell_count() const { return height * width; }

    void validate() const {
        PCSEG_CHECK(height >= 1 && width >= 1, "grid must have positive dimensions, got "
                                                   << height << "x" << width);
        if (kind == GridKind::planar) {
            PCSEG_CHECK(resolution > 0, "planar grid resolution must be positive");
            PCSEG_CHECK(axis0 >= 0 && axis0 < 3 && axis1 >= 0 && axis1 < 3 && axis0 != axis1,
                        "planar grid needs two distinct axes");
            PCSEG_CHECK(min0 < max0 && min1 < max1, "planar grid bounds are empty");
        } else {
            PCSEG_CHECK(fov_up_deg > fov_down_deg, "spherical grid needs fov_up > fov_down");
        }
    }
};

inline constexpr std::int32_t kOutOfView = -1;

// Per-point cell index (or the out-of-view sentinel) plus the inverse-density
// weight 1/|cell members|, and a cell -> members table in input order so
// scatter sums can be partitioned over cells.
struct CellAssignment {
    std::int64_t cell_count = 0;
    std::int64_t in_view = 0;
    std::vector<std::int32_t> cell;       // size N; kOutOfView for dropped points
    std::vector<double> weight;           // size N; 0 for out-of-view points
    std::vector<std::int64_t> cell_begin; // size cell_count + 1
    std::vector<std::int32_t> members;    // size in_view, grouped by cell, input order inside

    std::size_t point_count() const { return cell.size(); }
};

namespace detail {

// Counting sort of in-view points by cell; preserves input order within a cell.
inline void finalize_assignment(CellAssignment& a) {
    const std::size_t n = a.cell.size();
    std::vector<std::int32_t> counts(static_cast<std::size_t>(a.cell_count), 0);
    for (std::size_t i = 0; i < n; ++i)
        if (a.cell[i] != kOutOfView) ++counts[static_cast<std::size_t>(a.cell[i])];
    a.cell_begin.assign(static_cast<std::size_t>(a.cell_count) + 1, 0);
    for (std::int64_t c = 0; c < a.cell_count; ++c)
        a.cell_begin[static_cast<std::size_t>(c + 1)] =
            a.cell_begin[static_cast<std::size_t>(c)] + counts[static_cast<std::size_t>(c)];
    a.in_view = a.cell_begin[static_cast<std::size_t>(a.cell_count)];
    a.members.resize(static_cast<std::size_t>(a.in_view));
    std::vector<std::int64_t> cursor(a.cell_begin.begin(), a.cell_begin.end() - 1);
    a.weight.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const std::int32_t c = a.cell[i];
        if (c == kOutOfView) continue;
        a.members[static_cast<std::size_t>(cursor[static_cast<std::size_t>(c)]++)] =
            static_cast<std::int32_t>(i);
        a.weight[i] = 1.0 / static_cast<double>(counts[static_cast<std::size_t>(c)]);
    }
}

}  // namespace detail

// cell = floor((coord - min) / resolution) on each projected axis; points
// outside the bounds carry the out-of-view sentinel.
inline CellAssignment assign_planar(const PointCloud& cloud, const GridSpec& spec) {
    PCSEG_CHECK(spec.kind == GridKind::planar, "assign_planar needs a planar spec");
    spec.validate();
    CellAssignment a;
    a.cell_count = spec.cell_count();
    a.cell.resize(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const Point& p = cloud.points[i];
        const double c0 = p.coord(spec.axis0), c1 = p.coord(spec.axis1);
        const std::int64_t row = static_cast<std::int64_t>(std::floor((c0 - spec.min0) / spec.resolution));
        const std::int64_t col = static_cast<std::int64_t>(std::floor((c1 - spec.min1) / spec.resolution));
        if (row < 0 || row >= spec.height || col < 0 || col >= spec.width)
            a.cell[i] = kOutOfView;
        else
            a.cell[i] = static_cast<std::int32_t>(row * spec.width + col);
    }
    detail::finalize_assignment(a);
    return a;
}

// Spherical image: columns from yaw = atan2(y, x), rows from pitch
// = asin(z / range) mapped linearly across [fov_down, fov_up]. Points with
// near-zero range or pitch outside the fov are out of view.
inline CellAssignment assign_spherical(const PointCloud& cloud, const GridSpec& spec) {
    PCSEG_CHECK(spec.kind == GridKind::spherical, "assign_spherical needs a spherical spec");
    spec.validate();
    const double fov_up = spec.fov_up_deg * M_PI / 180.0;
    const double fov_down = spec.fov_down_deg * M_PI / 180.0;
    const double fov_span = fov_up - fov_down;
    CellAssignment a;
    a.cell_count = spec.cell_count();
    a.cell.resize(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const Point& p = cloud.points[i];
        const double r = p.range;
        if (r < 1e-6) {
            a.cell[i] = kOutOfView;
            continue;
        }
        const double yaw = std::atan2(static_cast<double>(p.y), static_cast<double>(p.x));
        const double pitch = std::asin(std::clamp(static_cast<double>(p.z) / r, -1.0, 1.0));
        if (pitch < fov_down || pitch > fov_up) {
            a.cell[i] = kOutOfView;
            continue;
        }
        std::int64_t col = static_cast<std::int64_t>(
            std::floor(0.5 * (1.0 - yaw / M_PI) * static_cast<double>(spec.width)));
        col = std::clamp<std::int64_t>(col, 0, spec.width - 1);
        std::int64_t row = static_cast<std::int64_t>(
            std::floor((1.0 - (pitch - fov_down) / fov_span) * static_cast<double>(spec.height)));
        row = std::clamp<std::int64_t>(row, 0, spec.height - 1);
        a.cell[i] = static_cast<std::int32_t>(row * spec.width + col);
    }
    detail::finalize_assignment(a);
    return a;
}

// Rewrites the weights so each occupied cell passes through only its member
// with the smallest range (ties to the smaller index); used by the
// closest-point range-image ablation.
inline void reduce_to_closest(CellAssignment& a, const PointCloud& cloud) {
    for (std::int64_t c = 0; c < a.cell_count; ++c) {
        const std::int64_t b = a.cell_begin[static_cast<std::size_t>(c)];
        const std::int64_t e = a.cell_begin[static_cast<std::size_t>(c) + 1];
        if (b == e) continue;
        std::int32_t best = a.members[static_cast<std::size_t>(b)];
        for (std::int64_t i = b + 1; i < e; ++i) {
            const std::int32_t cand = a.members[static_cast<std::size_t>(i)];
            if (cloud.points[static_cast<std::size_t>(cand)].range <
                cloud.points[static_cast<std::size_t>(best)].range)
                best = cand;
        }
        for (std::int64_t i = b; i < e; ++i) {
            const std::int32_t m = a.members[static_cast<std::size_t>(i)];
            a.weight[static_cast<std::size_t>(m)] = (m == best) ? 1.0 : 0.0;
        }
    }
}

inline CellAssignment assign_cells(const PointCloud& cloud, const GridSpec& spec,
                                   CellReduce reduce = CellReduce::average) {
    CellAssignment a = spec.kind == GridKind::planar ? assign_planar(cloud, spec)
                                                     : assign_spherical(cloud, spec);
    if (reduce == CellReduce::closest) reduce_to_closest(a, cloud);
    return a;
}

using AssignmentPtr = std::shared_ptr<const CellAssignment>;

// grid[cell] = sum over member points of weight * feature — the element-wise
// weighting plus scatter-add path. Summation runs per cell in member order, so
// the result is independent of how cells are partitioned across threads.
template <class S>
Var<S> flatten_scatter(Tape<S>* tape, const Var<S>& features, const AssignmentPtr& assign,
                       std::int64_t hw) {
    PCSEG_CHECK(features->value.ndim() == 2, "flatten_scatter expects [N, C]");
    PCSEG_CHECK(assign->cell_count == hw, "flatten_scatter: assignment covers " << assign->cell_count
                                                                                << " cells, grid wants " << hw);
    const std::int64_t n = features->value.dim(0), c = features->value.dim(1);
    PCSEG_CHECK(static_cast<std::size_t>(n) == assign->point_count(),
                "flatten_scatter: assignment built over " << assign->point_count() << " points, features have "
                                                          << n);
    for (auto cl : assign->cell)
        PCSEG_CHECK(cl == kOutOfView || (cl >= 0 && cl < hw), "corrupt assignment: cell " << cl);

    auto out = make_var<S>(TensorData<S>({hw, c}));
    parallel_for(hw, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t cell = lo; cell < hi; ++cell) {
            S* dst = out->value.row(cell);
            for (std::int64_t i = assign->cell_begin[static_cast<std::size_t>(cell)];
                 i < assign->cell_begin[static_cast<std::size_t>(cell) + 1]; ++i) {
                const std::int32_t pt = assign->members[static_cast<std::size_t>(i)];
                const S w = static_cast<S>(assign->weight[static_cast<std::size_t>(pt)]);
                const S* src = features->value.row(pt);
                for (std::int64_t ch = 0; ch < c; ++ch) dst[ch] += w * src[ch];
            }
        }
    }, detail::row_grain(c));

    if (detail::track(tape, {&features})) {
        out->ensure_grad();
        features->ensure_grad();
        tape->record([=] {
            for (std::int64_t p = 0; p < n; ++p) {
                const std::int32_t cell = assign->cell[static_cast<std::size_t>(p)];
                if (cell == kOutOfView) continue;
                const S w = static_cast<S>(assign->weight[static_cast<std::size_t>(p)]);
                const S* g = out->grad.row(cell);
                S* dst = features->grad.row(p);
                for (std::int64_t ch = 0; ch < c; ++ch) dst[ch] += w * g[ch];
            }
        });
    }
    return out;
}

// Reference flatten: materialize M[cell, point] = weight and multiply. Kept as
// the independent route the scatter path is checked against; desk-scale only.
template <class S>
TensorData<S> flatten_matmul_oracle(const TensorData<S>& features, const CellAssignment& assign,
                                    std::int64_t hw, std::int64_t max_dense_elems = std::int64_t(1) << 28) {
    PCSEG_CHECK(features.ndim() == 2, "flatten_matmul_oracle expects [N, C]");
    const std::int64_t n = features.dim(0), c = features.dim(1);
    PCSEG_CHECK(static_cast<std::size_t>(n) == assign.point_count(), "assignment/point mismatch");
    PCSEG_CHECK(assign.cell_count == hw, "assignment/grid mismatch");
    PCSEG_CHECK(hw * n <= max_dense_elems, "dense projection matrix of " << hw * n
                                                                         << " elements exceeds the cap "
                                                                         << max_dense_elems);
    TensorData<S> m({hw, n});
    for (std::int64_t p = 0; p < n; ++p) {
        const std::int32_t cell = assign.cell[static_cast<std::size_t>(p)];
        if (cell == kOutOfView) continue;
        m.at(cell, p) = static_cast<S>(assign.weight[static_cast<std::size_t>(p)]);
    }
    TensorData<S> grid({hw, c});
    parallel_for(hw, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t cell = lo; cell < hi; ++cell) {
            const S* mrow = m.row(cell);
            S* dst = grid.row(cell);
            for (std::int64_t p = 0; p < n; ++p) {
                const S w = mrow[p];
                if (w == S(0)) continue;
                const S* src = features.row(p);
                for (std::int64_t ch = 0; ch < c; ++ch) dst[ch] += w * src[ch];
            }
        }
    }, detail::row_grain(c));
    return grid;
}

// out[n] = grid[cell(n)]; out-of-view points read zeros and contribute no
// gradient.
template <class S>
Var<S> inflate(Tape<S>* tape, const Var<S>& grid, const AssignmentPtr& assign) {
    PCSEG_CHECK(grid->value.ndim() == 2, "inflate expects [HW, C]");
    PCSEG_CHECK(grid->value.dim(0) == assign->cell_count,
                "inflate: grid has " << grid->value.dim(0) << " cells, assignment " << assign->cell_count);
    const std::int64_t n = static_cast<std::int64_t>(assign->point_count()), c = grid->value.dim(1);
    auto out = make_var<S>(TensorData<S>({n, c}));
    parallel_for(n, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t p = lo; p < hi; ++p) {
            const std::int32_t cell = assign->cell[static_cast<std::size_t>(p)];
            if (cell == kOutOfView) continue;
            const S* src = grid->value.row(cell);
            S* dst = out->value.row(p);
            for (std::int64_t ch = 0; ch < c; ++ch) dst[ch] = src[ch];
        }
    }, detail::row_grain(c));
    if (detail::track(tape, {&grid})) {
        out->ensure_grad();
        grid->ensure_grad();
        tape->record([=] {
            for (std::int64_t p = 0; p < n; ++p) {
                const std::int32_t cell = assign->cell[static_cast<std::size_t>(p)];
                if (cell == kOutOfView) continue;
                const S* g = out->grad.row(p);
                S* dst = grid->grad.row(cell);
                for (std::int64_t ch = 0; ch < c; ++ch) dst[ch] += g[ch];
            }
        });
    }
    return out;
}

struct FlattenBenchReport {
    std::int64_t n = 0, hw = 0, c = 0;
    int reps = 0;
    std::vector<double> scatter_ms;
    std::vector<double> matmul_ms;
    double max_abs_diff = 0;  // verified before timing

    double scatter_median() const { return detail::median_of(scatter_ms); }
    double matmul_median() const { return detail::median_of(matmul_ms); }

    std::string csv() const {
        std::ostringstream oss;
        oss << "arm,N,HW,C,millis\n";
        for (double t : scatter_ms) oss << "scatter," << n << "," << hw << "," << c << "," << t << "\n";
        for (double t : matmul_ms) oss << "matmul," << n << "," << hw << "," << c << "," << t << "\n";
        return oss.str();
    }
};

// Times the scatter arm against the dense-matmul arm on one random layout,
// after verifying both arms agree. First `warmup` reps are discarded.
template <class S = float>
FlattenBenchReport bench_flatten(std::int64_t n, std::int64_t hw, std::int64_t c, int reps,
                                 std::uint64_t seed = 7, int warmup = 3) {
    FlattenBenchReport rep;
    rep.n = n;
    rep.hw = hw;
    rep.c = c;
    rep.reps = reps;
    if (reps <= 0) return rep;

    Rng rng(seed);
    CellAssignment assign;
    assign.cell_count = hw;
    assign.cell.resize(static_cast<std::size_t>(n));
    for (auto& cl : assign.cell) cl = static_cast<std::int32_t>(rng.uniform_int(0, hw - 1));
    detail::finalize_assignment(assign);
    auto assign_p = std::make_shared<const CellAssignment>(std::move(assign));

    TensorData<S> features({n, c});
    for (auto& v : features.v) v = static_cast<S>(rng.uniform(-1.0, 1.0));
    auto fvar = make_var<S>(features);

    auto grid_scatter = flatten_scatter<S>(nullptr, fvar, assign_p, hw);
    auto grid_matmul = flatten_matmul_oracle<S>(features, *assign_p, hw,
                                                std::max<std::int64_t>(hw * n, 1));
    rep.max_abs_diff = pcseg::max_abs_diff(grid_scatter->value, grid_matmul);

    for (int r = 0; r < warmup + reps; ++r) {
        Stopwatch sw;
        auto g = flatten_scatter<S>(nullptr, fvar, assign_p, hw);
        if (r >= warmup) rep.scatter_ms.push_back(sw.elapsed_ms());
    }
    for (int r = 0; r < warmup + reps; ++r) {
        Stopwatch sw;
        auto g = flatten_matmul_oracle<S>(features, *assign_p, hw, std::max<std::int64_t>(hw * n, 1));
        if (r >= warmup) rep.matmul_ms.push_back(sw.elapsed_ms());
    }
    return rep;
}

}  // namespace pcseg
