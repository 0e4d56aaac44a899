#pragma once

#include <array>
#include <cstdio>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "pcseg/autodiff.hpp"
#include "pcseg/kdtree.hpp"
#include "pcseg/projection.hpp"
#include "pcseg/rng.hpp"

namespace pcseg {

enum class ProjectionView { xy = 0, xz = 1, yz = 2, range = 3 };

inline const char* projection_name(ProjectionView v) {
    switch (v) {
        case ProjectionView::xy: return "xy";
        case ProjectionView::xz: return "xz";
        case ProjectionView::yz: return "yz";
        case ProjectionView::range: return "range";
    }
    return "?";
}

inline ProjectionView projection_from_name(const std::string& s) {
    if (s == "xy") return ProjectionView::xy;
    if (s == "xz") return ProjectionView::xz;
    if (s == "yz") return ProjectionView::yz;
    if (s == "range") return ProjectionView::range;
    PCSEG_CHECK(false, "unknown projection '" << s << "'");
    return ProjectionView::xy;
}

struct ModelConfig {
    int feature_width = 256;  // F
    int layer_count = 48;     // L
    int neighbors = 16;       // K
    int class_count = 20;     // train ids, including the ignore slot
    int ignore_class = 0;
    int embed_hidden = 64;
    int conv_groups = 1;      // groups of the spatial-mix 1D conv
    double neighbor_dropout_p = 0.0;
    bool head_skip = true;
    bool relative_neighbors = false;      // neighbor features relative to the center point
    CellReduce range_reduce = CellReduce::average;
    std::vector<ProjectionView> cycle{ProjectionView::xy, ProjectionView::xz, ProjectionView::yz,
                                      ProjectionView::range};
    GridSpec grid_xy = GridSpec::planar(0, 1, 0.4, -50, 50, -50, 50);
    GridSpec grid_xz = GridSpec::planar(0, 2, 0.4, -50, 50, -5, 5);
    GridSpec grid_yz = GridSpec::planar(1, 2, 0.4, -50, 50, -5, 5);
    GridSpec grid_range = GridSpec::spherical(64, 2048, 3.0, -25.0);

    const GridSpec& grid_for(ProjectionView v) const {
        switch (v) {
            case ProjectionView::xy: return grid_xy;
            case ProjectionView::xz: return grid_xz;
            case ProjectionView::yz: return grid_yz;
            case ProjectionView::range: return grid_range;
        }
        return grid_xy;
    }

    void validate() const {
        PCSEG_CHECK(feature_width >= 1, "feature width must be >= 1");
        PCSEG_CHECK(layer_count >= 1, "layer count must be >= 1");
        PCSEG_CHECK(neighbors >= 1, "neighbor count must be >= 1");
        PCSEG_CHECK(class_count >= 2, "need at least two classes");
        PCSEG_CHECK(ignore_class >= 0 && ignore_class < class_count, "ignore class out of range");
        PCSEG_CHECK(embed_hidden >= 1, "embed hidden width must be >= 1");
        PCSEG_CHECK(conv_groups >= 1 && feature_width % conv_groups == 0,
                    "conv_groups " << conv_groups << " must divide F=" << feature_width);
        PCSEG_CHECK(neighbor_dropout_p >= 0.0 && neighbor_dropout_p < 1.0, "dropout p outside [0, 1)");
        PCSEG_CHECK(!cycle.empty(), "projection cycle is empty");
        grid_xy.validate();
        grid_xz.validate();
        grid_yz.validate();
        grid_range.validate();
    }
};

template <class S>
struct BnParams {
    Var<S> gamma, beta;
    BnState<S> state;
};

template <class S>
struct EmbedParams {
    Var<S> stem_w, stem_b;   // [F, 5], [F]
    BnParams<S> nbr_bn;      // over the 5 raw channels of all K*N neighbor slots
    Var<S> nbr_w1, nbr_b1;   // [H, 5], [H]
    Var<S> nbr_w2, nbr_b2;   // [F, H], [F]
    Var<S> fuse_w, fuse_b;   // [F, 2F], [F]
};

template <class S>
struct LayerParams {
    BnParams<S> smix_bn;
    Var<S> smix_dw1_w, smix_dw1_b;    // [F, k, k], [F]
    Var<S> smix_dw2_w, smix_dw2_b;
    Var<S> smix_conv_w, smix_conv_b;  // [F, F/groups], [F]
    BnParams<S> cmix_bn;
    Var<S> cmix_pw_w, cmix_pw_b;      // [F, F], [F]
    Var<S> cmix_dw_w, cmix_dw_b;      // [F], [F]
};

template <class S>
struct ModelParams {
    EmbedParams<S> embed;
    std::vector<LayerParams<S>> layers;
    Var<S> head_w, head_b;  // [C, F], [C]

    template <class Fn>
    void visit_trainable(Fn&& fn) {
        fn("embed.stem.w", embed.stem_w);
        fn("embed.stem.b", embed.stem_b);
        fn("embed.nbr_bn.gamma", embed.nbr_bn.gamma);
        fn("embed.nbr_bn.beta", embed.nbr_bn.beta);
        fn("embed.nbr1.w", embed.nbr_w1);
        fn("embed.nbr1.b", embed.nbr_b1);
        fn("embed.nbr2.w", embed.nbr_w2);
        fn("embed.nbr2.b", embed.nbr_b2);
        fn("embed.fuse.w", embed.fuse_w);
        fn("embed.fuse.b", embed.fuse_b);
        char name[64];
        for (std::size_t l = 0; l < layers.size(); ++l) {
            auto& lp = layers[l];
            auto field = [&](const char* suffix, Var<S>& v) {
                std::snprintf(name, sizeof(name), "layers.%02zu.%s", l, suffix);
                fn(name, v);
            };
            field("smix.bn.gamma", lp.smix_bn.gamma);
            field("smix.bn.beta", lp.smix_bn.beta);
            field("smix.dw1.w", lp.smix_dw1_w);
            field("smix.dw1.b", lp.smix_dw1_b);
            field("smix.dw2.w", lp.smix_dw2_w);
            field("smix.dw2.b", lp.smix_dw2_b);
            field("smix.conv.w", lp.smix_conv_w);
            field("smix.conv.b", lp.smix_conv_b);
            field("cmix.bn.gamma", lp.cmix_bn.gamma);
            field("cmix.bn.beta", lp.cmix_bn.beta);
            field("cmix.pw.w", lp.cmix_pw_w);
            field("cmix.pw.b", lp.cmix_pw_b);
            field("cmix.dw.w", lp.cmix_dw_w);
            field("cmix.dw.b", lp.cmix_dw_b);
        }
        fn("head.w", head_w);
        fn("head.b", head_b);
    }

    template <class Fn>
    void visit_buffers(Fn&& fn) {
        fn("embed.nbr_bn.running_mean", embed.nbr_bn.state.running_mean);
        fn("embed.nbr_bn.running_var", embed.nbr_bn.state.running_var);
        char name[64];
        for (std::size_t l = 0; l < layers.size(); ++l) {
            auto& lp = layers[l];
            auto field = [&](const char* suffix, TensorData<S>& t) {
                std::snprintf(name, sizeof(name), "layers.%02zu.%s", l, suffix);
                fn(name, t);
            };
            field("smix.bn.running_mean", lp.smix_bn.state.running_mean);
            field("smix.bn.running_var", lp.smix_bn.state.running_var);
            field("cmix.bn.running_mean", lp.cmix_bn.state.running_mean);
            field("cmix.bn.running_var", lp.cmix_bn.state.running_var);
        }
    }

    std::int64_t param_count() {
        std::int64_t n = 0;
        visit_trainable([&](const char*, Var<S>& v) { n += v->value.numel(); });
        return n;
    }

    void zero_grad() {
        visit_trainable([](const char*, Var<S>& v) { v->zero_grad(); });
    }
};

namespace detail {

template <class S>
Var<S> param_uniform(Rng& rng, Shape shape, std::int64_t fan_in) {
    TensorData<S> t(std::move(shape));
    const double limit = 1.0 / std::sqrt(static_cast<double>(std::max<std::int64_t>(fan_in, 1)));
    for (auto& v : t.v) v = static_cast<S>(rng.uniform(-limit, limit));
    return make_var<S>(std::move(t), /*requires_grad=*/true);
}

template <class S>
BnParams<S> make_bn(std::int64_t channels) {
    BnParams<S> bn;
    bn.gamma = make_var<S>(TensorData<S>::full({channels}, S(1)), true);
    bn.beta = make_var<S>(TensorData<S>({channels}), true);
    bn.state = BnState<S>::make(channels);
    return bn;
}

}  // namespace detail

// Fan-in-scaled uniform init for convolutions, gamma=1/beta=0 for batch norms.
// Draw order is the parameter visitation order, so a seed pins every weight.
template <class S>
ModelParams<S> init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    const std::int64_t f = cfg.feature_width, h = cfg.embed_hidden, c = cfg.class_count;
    constexpr std::int64_t kRaw = 5;
    const std::int64_t k2d = 3;

    ModelParams<S> p;
    p.embed.stem_w = detail::param_uniform<S>(rng, {f, kRaw}, kRaw);
    p.embed.stem_b = detail::param_uniform<S>(rng, {f}, kRaw);
    p.embed.nbr_bn = detail::make_bn<S>(kRaw);
    p.embed.nbr_w1 = detail::param_uniform<S>(rng, {h, kRaw}, kRaw);
    p.embed.nbr_b1 = detail::param_uniform<S>(rng, {h}, kRaw);
    p.embed.nbr_w2 = detail::param_uniform<S>(rng, {f, h}, h);
    p.embed.nbr_b2 = detail::param_uniform<S>(rng, {f}, h);
    p.embed.fuse_w = detail::param_uniform<S>(rng, {f, 2 * f}, 2 * f);
    p.embed.fuse_b = detail::param_uniform<S>(rng, {f}, 2 * f);

    p.layers.resize(static_cast<std::size_t>(cfg.layer_count));
    for (auto& lp : p.layers) {
        lp.smix_bn = detail::make_bn<S>(f);
        lp.smix_dw1_w = detail::param_uniform<S>(rng, {f, k2d, k2d}, k2d * k2d);
        lp.smix_dw1_b = detail::param_uniform<S>(rng, {f}, k2d * k2d);
        lp.smix_dw2_w = detail::param_uniform<S>(rng, {f, k2d, k2d}, k2d * k2d);
        lp.smix_dw2_b = detail::param_uniform<S>(rng, {f}, k2d * k2d);
        lp.smix_conv_w = detail::param_uniform<S>(rng, {f, f / cfg.conv_groups}, f / cfg.conv_groups);
        lp.smix_conv_b = detail::param_uniform<S>(rng, {f}, f / cfg.conv_groups);
        lp.cmix_bn = detail::make_bn<S>(f);
        lp.cmix_pw_w = detail::param_uniform<S>(rng, {f, f}, f);
        lp.cmix_pw_b = detail::param_uniform<S>(rng, {f}, f);
        lp.cmix_dw_w = detail::param_uniform<S>(rng, {f}, 1);
        lp.cmix_dw_b = detail::param_uniform<S>(rng, {f}, 1);
    }

    p.head_w = detail::param_uniform<S>(rng, {c, f}, f);
    p.head_b = detail::param_uniform<S>(rng, {c}, f);
    return p;
}

// Trainable element count implied by the shapes above; K never enters.
inline std::int64_t expected_param_count(const ModelConfig& cfg) {
    const std::int64_t f = cfg.feature_width, h = cfg.embed_hidden, c = cfg.class_count;
    const std::int64_t embed = (f * 5 + f) + (5 + 5) + (h * 5 + h) + (f * h + f) + (f * 2 * f + f);
    const std::int64_t per_layer = (2 * f) + 2 * (f * 9 + f) + (f * (f / cfg.conv_groups) + f) +
                                   (2 * f) + (f * f + f) + (f + f);
    return embed + cfg.layer_count * per_layer + (c * f + c);
}

// Immutable per-cloud context shared by every layer of a forward pass.
struct ForwardContext {
    std::shared_ptr<const std::vector<std::int64_t>> neighbor_index;  // [K*N], k-major
    int neighbors = 0;
    std::array<AssignmentPtr, 4> assigns;

    const AssignmentPtr& assign_for(ProjectionView v) const {
        return assigns[static_cast<std::size_t>(v)];
    }
};

inline ForwardContext prepare_context(const PointCloud& cloud, const ModelConfig& cfg) {
    cfg.validate();
    PCSEG_CHECK(cloud.size() >= 1, "empty cloud");
    PCSEG_CHECK(static_cast<std::size_t>(cfg.neighbors) <= cloud.size(),
                "K = " << cfg.neighbors << " exceeds point count " << cloud.size());
    ForwardContext ctx;
    ctx.neighbors = cfg.neighbors;
    KdTree tree = KdTree::build(cloud);
    KnnResult knn = tree.query_knn(cloud, cfg.neighbors);
    const std::int64_t n = static_cast<std::int64_t>(cloud.size());
    const std::int64_t k = cfg.neighbors;
    auto idx = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(k * n));
    for (std::int64_t pt = 0; pt < n; ++pt)
        for (std::int64_t kk = 0; kk < k; ++kk)
            (*idx)[static_cast<std::size_t>(kk * n + pt)] =
                knn.indices[static_cast<std::size_t>(pt * k + kk)];
    ctx.neighbor_index = idx;
    ctx.assigns[0] = std::make_shared<const CellAssignment>(assign_cells(cloud, cfg.grid_xy));
    ctx.assigns[1] = std::make_shared<const CellAssignment>(assign_cells(cloud, cfg.grid_xz));
    ctx.assigns[2] = std::make_shared<const CellAssignment>(assign_cells(cloud, cfg.grid_yz));
    ctx.assigns[3] =
        std::make_shared<const CellAssignment>(assign_cells(cloud, cfg.grid_range, cfg.range_reduce));
    return ctx;
}

// The five raw per-point features as a [5, N] tensor.
template <class S>
TensorData<S> raw_features(const PointCloud& cloud) {
    const std::int64_t n = static_cast<std::int64_t>(cloud.size());
    TensorData<S> x({5, n});
    for (std::int64_t i = 0; i < n; ++i) {
        const Point& p = cloud.points[static_cast<std::size_t>(i)];
        x.at(0, i) = static_cast<S>(p.x);
        x.at(1, i) = static_cast<S>(p.y);
        x.at(2, i) = static_cast<S>(p.z);
        x.at(3, i) = static_cast<S>(p.intensity);
        x.at(4, i) = static_cast<S>(p.range);
    }
    return x;
}

template <class S>
struct EmbeddingOutput {
    Var<S> features;            // [F, N]
    Var<S> neighbor_embedding;  // [F, N], the max-pooled kNN branch kept for the head skip
};

// Point-cloud embedding: a pointwise stem over the raw features plus a shared
// MLP over each point's K stacked neighbors, max-pooled over the neighbor
// axis, then fused back to width F.
template <class S>
EmbeddingOutput<S> embed(Tape<S>* tape, const Var<S>& x0, const ForwardContext& ctx,
                         EmbedParams<S>& ep, const ModelConfig& cfg, Mode mode,
                         Rng* dropout_rng = nullptr) {
    PCSEG_CHECK(x0->value.ndim() == 2 && x0->value.dim(0) == 5,
                "embed expects raw features [5, N], got " << shape_str(x0->value.shape));
    const std::int64_t n = x0->value.dim(1);
    const std::int64_t k = ctx.neighbors;
    PCSEG_CHECK(k >= 1 && k <= n, "K = " << k << " exceeds point count " << n);

    auto p1 = conv1d_pointwise(tape, x0, ep.stem_w, ep.stem_b);

    auto pn = gather_columns(tape, x0, ctx.neighbor_index);  // [5, K*N]
    if (cfg.relative_neighbors) {
        auto center_idx = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(k * n));
        for (std::int64_t kk = 0; kk < k; ++kk)
            for (std::int64_t pt = 0; pt < n; ++pt)
                (*center_idx)[static_cast<std::size_t>(kk * n + pt)] = pt;
        auto centers = gather_columns(tape, x0, center_idx);
        pn = add(tape, pn, scale(tape, centers, S(-1)));
    }

    auto hb = batchnorm(tape, pn, ep.nbr_bn.gamma, ep.nbr_bn.beta, ep.nbr_bn.state, mode);
    auto h1 = relu(tape, conv1d_pointwise(tape, hb, ep.nbr_w1, ep.nbr_b1));
    auto h2 = conv1d_pointwise(tape, h1, ep.nbr_w2, ep.nbr_b2);  // [F, K*N]

    if (mode == Mode::train && cfg.neighbor_dropout_p > 0.0) {
        PCSEG_CHECK(dropout_rng != nullptr, "neighbor dropout requires a generator");
        auto keep = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(k * n), 1);
        // Slot 0 is the self-match and always survives, so the max never runs
        // over an empty neighborhood.
        for (std::int64_t kk = 1; kk < k; ++kk)
            for (std::int64_t pt = 0; pt < n; ++pt)
                if (dropout_rng->bernoulli(cfg.neighbor_dropout_p))
                    (*keep)[static_cast<std::size_t>(kk * n + pt)] = 0;
        h2 = mask_slots(tape, h2, keep);
    }

    auto p2 = max_over_k(tape, h2, k);  // [F, N]
    auto fused = conv1d_pointwise(tape, concat_rows(tape, p1, p2), ep.fuse_w, ep.fuse_b);
    return {fused, p2};
}

// y = x + conv1d(inflate(dw2d(relu(dw2d(flatten(bn(x))))))), all on one view.
template <class S>
Var<S> spatial_mix(Tape<S>* tape, const Var<S>& x, const AssignmentPtr& assign, const GridSpec& spec,
                   LayerParams<S>& lp, const ModelConfig& cfg, Mode mode) {
    const std::int64_t hw = spec.cell_count();
    auto h = batchnorm(tape, x, lp.smix_bn.gamma, lp.smix_bn.beta, lp.smix_bn.state, mode);
    auto grid = flatten_scatter(tape, transpose2d(tape, h), assign, hw);
    auto img = to_chw(tape, grid, spec.height, spec.width);
    img = conv2d_depthwise(tape, img, lp.smix_dw1_w, lp.smix_dw1_b);
    img = relu(tape, img);
    img = conv2d_depthwise(tape, img, lp.smix_dw2_w, lp.smix_dw2_b);
    auto pts = inflate(tape, from_chw(tape, img), assign);
    auto y = conv1d_grouped(tape, transpose2d(tape, pts), lp.smix_conv_w, lp.smix_conv_b,
                            cfg.conv_groups);
    return add(tape, x, y);
}

// y = x + dwconv1d(relu(conv1d(bn(x)))); per-point only, no spatial coupling.
template <class S>
Var<S> channel_mix(Tape<S>* tape, const Var<S>& x, LayerParams<S>& lp, Mode mode) {
    auto h = batchnorm(tape, x, lp.cmix_bn.gamma, lp.cmix_bn.beta, lp.cmix_bn.state, mode);
    h = conv1d_pointwise(tape, h, lp.cmix_pw_w, lp.cmix_pw_b);
    h = relu(tape, h);
    h = conv1d_depthwise(tape, h, lp.cmix_dw_w, lp.cmix_dw_b);
    return add(tape, x, h);
}

struct ForwardTimings {
    double embed_ms = 0;
    double backbone_ms = 0;
    double head_ms = 0;
};

// Full network: embedding, L backbone layers cycling the projection views,
// optional head skip from the neighbor embedding, pointwise head. Softmax is
// deferred to the loss / prediction stage.
template <class S>
Var<S> forward(Tape<S>* tape, const Var<S>& x0, const ForwardContext& ctx, ModelParams<S>& params,
               const ModelConfig& cfg, Mode mode, Rng* dropout_rng = nullptr,
               ForwardTimings* timings = nullptr) {
    PCSEG_CHECK(params.layers.size() == static_cast<std::size_t>(cfg.layer_count),
                "params carry " << params.layers.size() << " layers, config wants " << cfg.layer_count);
    Stopwatch sw;
    auto emb = embed(tape, x0, ctx, params.embed, cfg, mode, dropout_rng);
    if (timings) timings->embed_ms = sw.elapsed_ms();
    sw.reset();
    auto x = emb.features;
    for (int l = 0; l < cfg.layer_count; ++l) {
        const ProjectionView view = cfg.cycle[static_cast<std::size_t>(l) % cfg.cycle.size()];
        x = spatial_mix(tape, x, ctx.assign_for(view), cfg.grid_for(view),
                        params.layers[static_cast<std::size_t>(l)], cfg, mode);
        x = channel_mix(tape, x, params.layers[static_cast<std::size_t>(l)], mode);
    }
    if (timings) timings->backbone_ms = sw.elapsed_ms();
    sw.reset();
    if (cfg.head_skip) x = add(tape, x, emb.neighbor_embedding);
    auto logits = conv1d_pointwise(tape, x, params.head_w, params.head_b);  // [C, N]
    if (timings) timings->head_ms = sw.elapsed_ms();
    return logits;
}

template <class S>
Var<S> forward(Tape<S>* tape, const PointCloud& cloud, const ForwardContext& ctx,
               ModelParams<S>& params, const ModelConfig& cfg, Mode mode,
               Rng* dropout_rng = nullptr, ForwardTimings* timings = nullptr) {
    auto x0 = make_var<S>(raw_features<S>(cloud));
    return forward(tape, x0, ctx, params, cfg, mode, dropout_rng, timings);
}

// Argmax over classes, never the ignore class, ties to the smaller id.
template <class S>
std::vector<std::int32_t> predict_labels(const TensorData<S>& logits, std::int32_t ignore_class) {
    PCSEG_CHECK(logits.ndim() == 2, "predict_labels expects [C, N]");
    const std::int64_t c = logits.dim(0), n = logits.dim(1);
    std::vector<std::int32_t> out(static_cast<std::size_t>(n));
    for (std::int64_t j = 0; j < n; ++j) {
        std::int32_t best = -1;
        S best_v{};
        for (std::int64_t ch = 0; ch < c; ++ch) {
            if (ch == ignore_class) continue;
            const S v = logits.at(ch, j);
            if (best < 0 || v > best_v) {
                best = static_cast<std::int32_t>(ch);
                best_v = v;
            }
        }
        out[static_cast<std::size_t>(j)] = best;
    }
    return out;
}

}  // namespace pcseg
