#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "pcseg/model.hpp"
#include "pcseg/toydata.hpp"
#include "testutil.hpp"

using namespace pcseg;
using testutil::random_tensor;

namespace {

using TD = TensorData<double>;

ModelConfig small_config(int f = 8, int l = 1, int k = 4) {
    ModelConfig cfg = make_toy_model_config(f, l);
    cfg.neighbors = k;
    cfg.embed_hidden = 8;
    return cfg;
}

void zero_backbone(ModelParams<double>& p) {
    for (auto& lp : p.layers) {
        for (Var<double>* v : {&lp.smix_dw1_w, &lp.smix_dw1_b, &lp.smix_dw2_w, &lp.smix_dw2_b,
                               &lp.smix_conv_w, &lp.smix_conv_b, &lp.cmix_pw_w, &lp.cmix_pw_b,
                               &lp.cmix_dw_w, &lp.cmix_dw_b})
            (*v)->value.fill(0.0);
    }
}

// Independent embedding oracle: brute-force kNN, explicit loops for the batch
// norm, both 1x1 convs, the max pool, and the fuse, in the production layouts.
struct EmbedOracle {
    TD p1, p2, fused;
};

EmbedOracle embed_oracle(const PointCloud& cloud, ModelParams<double>& params,
                         const ModelConfig& cfg) {
    const std::int64_t n = static_cast<std::int64_t>(cloud.size());
    const std::int64_t k = cfg.neighbors, f = cfg.feature_width, h = cfg.embed_hidden;
    TD x0 = raw_features<double>(cloud);

    auto knn = testutil::brute_knn(cloud, cloud, static_cast<int>(k));
    TD pn({5, k * n});
    for (std::int64_t pt = 0; pt < n; ++pt)
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const auto nb = knn.indices[static_cast<std::size_t>(pt * k + kk)];
            for (int c = 0; c < 5; ++c) pn.at(c, kk * n + pt) = x0.at(c, nb);
        }

    // batch norm over the K*N axis, train statistics
    TD bn({5, k * n});
    for (int c = 0; c < 5; ++c) {
        double mean = 0;
        for (std::int64_t j = 0; j < k * n; ++j) mean += pn.at(c, j);
        mean /= static_cast<double>(k * n);
        double variance = 0;
        for (std::int64_t j = 0; j < k * n; ++j)
            variance += (pn.at(c, j) - mean) * (pn.at(c, j) - mean);
        variance /= static_cast<double>(k * n);
        const double inv = 1.0 / std::sqrt(variance + kBnEpsilon);
        const double g = params.embed.nbr_bn.gamma->value.at(c);
        const double b = params.embed.nbr_bn.beta->value.at(c);
        for (std::int64_t j = 0; j < k * n; ++j) bn.at(c, j) = g * (pn.at(c, j) - mean) * inv + b;
    }

    TD h1({h, k * n});
    for (std::int64_t o = 0; o < h; ++o)
        for (std::int64_t j = 0; j < k * n; ++j) {
            double acc = params.embed.nbr_b1->value.at(o);
            for (int c = 0; c < 5; ++c) acc += params.embed.nbr_w1->value.at(o, c) * bn.at(c, j);
            h1.at(o, j) = acc > 0 ? acc : 0;
        }
    TD h2({f, k * n});
    for (std::int64_t o = 0; o < f; ++o)
        for (std::int64_t j = 0; j < k * n; ++j) {
            double acc = params.embed.nbr_b2->value.at(o);
            for (std::int64_t c = 0; c < h; ++c) acc += params.embed.nbr_w2->value.at(o, c) * h1.at(c, j);
            h2.at(o, j) = acc;
        }

    EmbedOracle out{TD({f, n}), TD({f, n}), TD({f, n})};
    for (std::int64_t o = 0; o < f; ++o)
        for (std::int64_t pt = 0; pt < n; ++pt) {
            double best = -1e300;
            for (std::int64_t kk = 0; kk < k; ++kk) best = std::max(best, h2.at(o, kk * n + pt));
            out.p2.at(o, pt) = best;
        }
    for (std::int64_t o = 0; o < f; ++o)
        for (std::int64_t pt = 0; pt < n; ++pt) {
            double acc = params.embed.stem_b->value.at(o);
            for (int c = 0; c < 5; ++c) acc += params.embed.stem_w->value.at(o, c) * x0.at(c, pt);
            out.p1.at(o, pt) = acc;
        }
    for (std::int64_t o = 0; o < f; ++o)
        for (std::int64_t pt = 0; pt < n; ++pt) {
            double acc = params.embed.fuse_b->value.at(o);
            for (std::int64_t c = 0; c < f; ++c)
                acc += params.embed.fuse_w->value.at(o, c) * out.p1.at(c, pt);
            for (std::int64_t c = 0; c < f; ++c)
                acc += params.embed.fuse_w->value.at(o, f + c) * out.p2.at(c, pt);
            out.fused.at(o, pt) = acc;
        }
    return out;
}

}  // namespace

TEST_CASE("embed: matches the brute-force no-tree oracle on 100 points", "[model]") {
    Rng rng(201);
    auto cloud = testutil::random_cloud(rng, 100, 8.0, 2.0);
    auto cfg = small_config(8, 1, 4);
    auto params = init_params<double>(cfg, 5);
    auto ctx = prepare_context(cloud, cfg);

    auto x0 = make_var<double>(raw_features<double>(cloud));
    auto emb = embed<double>(nullptr, x0, ctx, params.embed, cfg, Mode::train);
    auto want = embed_oracle(cloud, params, cfg);
    CHECK(max_abs_diff(emb.neighbor_embedding->value, want.p2) < 1e-9);
    CHECK(max_abs_diff(emb.features->value, want.fused) < 1e-9);
}

TEST_CASE("embed: K=1 reduces the neighbor branch to a per-point MLP of self", "[model]") {
    Rng rng(202);
    auto cloud = testutil::random_cloud(rng, 40, 6.0, 2.0);
    auto cfg = small_config(8, 1, 1);
    auto params = init_params<double>(cfg, 6);
    auto ctx = prepare_context(cloud, cfg);

    // With K=1 and self-match, every neighbor column is the point itself.
    auto x0 = raw_features<double>(cloud);
    for (std::size_t i = 0; i < cloud.size(); ++i)
        REQUIRE((*ctx.neighbor_index)[i] == static_cast<std::int64_t>(i));

    auto emb = embed<double>(nullptr, make_var<double>(x0), ctx, params.embed, cfg, Mode::train);
    auto want = embed_oracle(cloud, params, cfg);
    CHECK(max_abs_diff(emb.neighbor_embedding->value, want.p2) < 1e-9);
}

TEST_CASE("embed: permuting each point's neighbor slots leaves P2 bitwise unchanged", "[model]") {
    Rng rng(203);
    auto cloud = testutil::random_cloud(rng, 60, 6.0, 2.0);
    auto cfg = small_config(8, 1, 4);
    auto params = init_params<double>(cfg, 7);
    auto ctx = prepare_context(cloud, cfg);

    ForwardContext shuffled = ctx;
    auto idx = std::make_shared<std::vector<std::int64_t>>(*ctx.neighbor_index);
    const std::int64_t n = static_cast<std::int64_t>(cloud.size()), k = cfg.neighbors;
    for (std::int64_t pt = 0; pt < n; ++pt) {
        std::vector<std::int64_t> slots(static_cast<std::size_t>(k));
        for (std::int64_t kk = 0; kk < k; ++kk)
            slots[static_cast<std::size_t>(kk)] = (*ctx.neighbor_index)[static_cast<std::size_t>(kk * n + pt)];
        for (std::size_t i = slots.size(); i > 1; --i)
            std::swap(slots[i - 1], slots[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
        for (std::int64_t kk = 0; kk < k; ++kk)
            (*idx)[static_cast<std::size_t>(kk * n + pt)] = slots[static_cast<std::size_t>(kk)];
    }
    shuffled.neighbor_index = idx;

    auto x0 = make_var<double>(raw_features<double>(cloud));
    // eval mode: the normalization is per element, so slot order cannot leak
    // through summation order.
    auto a = embed<double>(nullptr, x0, ctx, params.embed, cfg, Mode::eval);
    auto b = embed<double>(nullptr, x0, shuffled, params.embed, cfg, Mode::eval);
    CHECK(a.neighbor_embedding->value.v == b.neighbor_embedding->value.v);
}

TEST_CASE("spatial mix: zero conv parameters make it the exact identity", "[model]") {
    Rng rng(204);
    auto cloud = testutil::random_cloud(rng, 50, 6.0, 2.0);
    auto cfg = small_config(8, 1, 4);
    auto params = init_params<double>(cfg, 8);
    zero_backbone(params);
    auto ctx = prepare_context(cloud, cfg);

    auto x = make_var<double>(random_tensor<double>(rng, {8, 50}));
    for (Mode mode : {Mode::train, Mode::eval}) {
        auto y = spatial_mix<double>(nullptr, x, ctx.assign_for(ProjectionView::xy), cfg.grid_xy,
                                     params.layers[0], cfg, mode);
        REQUIRE(y->value.v == x->value.v);
        auto z = channel_mix<double>(nullptr, x, params.layers[0], mode);
        REQUIRE(z->value.v == x->value.v);
    }
}

TEST_CASE("channel mix: N=1 in eval mode is a plain MLP of that point", "[model]") {
    Rng rng(205);
    const int f = 8;
    auto cfg = small_config(f, 1, 1);
    auto params = init_params<double>(cfg, 9);
    auto& lp = params.layers[0];
    lp.cmix_bn.state.running_mean = random_tensor<double>(rng, {f});
    lp.cmix_bn.state.running_var = random_tensor<double>(rng, {f}, 0.5, 2.0);

    auto x = make_var<double>(random_tensor<double>(rng, {f, 1}));
    auto y = channel_mix<double>(nullptr, x, lp, Mode::eval);

    for (int o = 0; o < f; ++o) {
        std::vector<double> bn(f);
        for (int c = 0; c < f; ++c)
            bn[static_cast<std::size_t>(c)] =
                lp.cmix_bn.gamma->value.at(c) *
                    (x->value.at(c, 0) - lp.cmix_bn.state.running_mean.at(c)) /
                    std::sqrt(lp.cmix_bn.state.running_var.at(c) + kBnEpsilon) +
                lp.cmix_bn.beta->value.at(c);
        double acc = lp.cmix_pw_b->value.at(o);
        for (int c = 0; c < f; ++c) acc += lp.cmix_pw_w->value.at(o, c) * bn[static_cast<std::size_t>(c)];
        acc = acc > 0 ? acc : 0;
        acc = lp.cmix_dw_w->value.at(o) * acc + lp.cmix_dw_b->value.at(o);
        REQUIRE(y->value.at(o, 0) == Catch::Approx(x->value.at(o, 0) + acc).margin(1e-12));
    }
}

TEST_CASE("forward: zeroed backbone collapses to head(Pe + P2)", "[model]") {
    Rng rng(206);
    auto cloud = testutil::random_cloud(rng, 80, 6.0, 2.0);
    auto cfg = small_config(8, 1, 4);
    auto params = init_params<double>(cfg, 10);
    zero_backbone(params);
    auto ctx = prepare_context(cloud, cfg);

    auto logits = forward<double>(nullptr, cloud, ctx, params, cfg, Mode::eval);

    auto x0 = make_var<double>(raw_features<double>(cloud));
    auto emb = embed<double>(nullptr, x0, ctx, params.embed, cfg, Mode::eval);
    auto expected = conv1d_pointwise<double>(nullptr,
                                             add<double>(nullptr, emb.features, emb.neighbor_embedding),
                                             params.head_w, params.head_b);
    REQUIRE(logits->value.v == expected->value.v);
}

TEST_CASE("forward: disabling the head skip changes the logits", "[model]") {
    Rng rng(207);
    auto cloud = testutil::random_cloud(rng, 60, 6.0, 2.0);
    auto cfg = small_config(8, 2, 4);
    auto params = init_params<double>(cfg, 11);
    auto ctx = prepare_context(cloud, cfg);

    auto with_skip = forward<double>(nullptr, cloud, ctx, params, cfg, Mode::eval);
    ModelConfig no_skip = cfg;
    no_skip.head_skip = false;
    auto without = forward<double>(nullptr, cloud, ctx, params, no_skip, Mode::eval);
    CHECK(max_abs_diff(with_skip->value, without->value) > 1e-8);
}

TEST_CASE("forward: argmax predictions are permutation equivariant", "[model]") {
    Rng rng(208);
    auto cloud = testutil::random_cloud(rng, 200, 8.0, 2.0);
    auto cfg = small_config(8, 4, 4);
    auto params = init_params<double>(cfg, 12);

    std::vector<std::size_t> perm(cloud.size());
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size(); i > 1; --i)
        std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    PointCloud permuted;
    for (std::size_t i = 0; i < perm.size(); ++i) permuted.points.push_back(cloud.points[perm[i]]);

    auto ctx_a = prepare_context(cloud, cfg);
    auto logits_a = forward<double>(nullptr, cloud, ctx_a, params, cfg, Mode::eval);
    auto pred_a = predict_labels(logits_a->value, cfg.ignore_class);

    auto ctx_b = prepare_context(permuted, cfg);
    auto logits_b = forward<double>(nullptr, permuted, ctx_b, params, cfg, Mode::eval);
    auto pred_b = predict_labels(logits_b->value, cfg.ignore_class);

    for (std::size_t i = 0; i < perm.size(); ++i) {
        REQUIRE(pred_b[i] == pred_a[perm[i]]);
        for (int c = 0; c < cfg.class_count; ++c)
            REQUIRE(std::abs(logits_b->value.at(c, static_cast<std::int64_t>(i)) -
                             logits_a->value.at(c, static_cast<std::int64_t>(perm[i]))) < 1e-10);
    }
}

TEST_CASE("init: seeded determinism and divergence", "[model]") {
    auto cfg = small_config(8, 2, 4);
    auto a = init_params<double>(cfg, 42);
    auto b = init_params<double>(cfg, 42);
    auto c = init_params<double>(cfg, 43);
    bool same = true, differs = false;
    a.visit_trainable([&](const char* name, Var<double>& va) {
        b.visit_trainable([&](const char* name_b, Var<double>& vb) {
            if (std::string(name) == name_b) same = same && (va->value.v == vb->value.v);
        });
        c.visit_trainable([&](const char* name_c, Var<double>& vc) {
            if (std::string(name) == name_c) differs = differs || (va->value.v != vc->value.v);
        });
    });
    CHECK(same);
    CHECK(differs);
}

TEST_CASE("init: parameter count matches the closed-form shape sum", "[model]") {
    ModelConfig cfg;
    cfg.feature_width = 32;
    cfg.layer_count = 2;
    cfg.class_count = 4;
    cfg.neighbors = 4;
    cfg.grid_xy = GridSpec::planar(0, 1, 0.5, -12, 12, -12, 12);
    cfg.grid_xz = GridSpec::planar(0, 2, 0.5, -12, 12, -1, 6);
    cfg.grid_yz = GridSpec::planar(1, 2, 0.5, -12, 12, -1, 6);
    cfg.grid_range = GridSpec::spherical(16, 64, 45, -45);
    auto params = init_params<double>(cfg, 1);

    // stem + neighbor bn + two neighbor convs + fuse
    const std::int64_t embed_count = (32 * 5 + 32) + (5 + 5) + (64 * 5 + 64) + (32 * 64 + 32) +
                                     (32 * 64 + 32);
    // per layer: bn, two 3x3 depthwise, 1d conv, bn, pointwise, 1d depthwise
    const std::int64_t layer_count = (32 + 32) + 2 * (32 * 9 + 32) + (32 * 32 + 32) + (32 + 32) +
                                     (32 * 32 + 32) + (32 + 32);
    const std::int64_t head_count = 4 * 32 + 4;
    const std::int64_t want = embed_count + 2 * layer_count + head_count;
    CHECK(params.param_count() == want);
    CHECK(expected_param_count(cfg) == want);

    // K never enters the shapes.
    ModelConfig k16 = cfg;
    k16.neighbors = 16;
    CHECK(expected_param_count(k16) == want);
    CHECK(init_params<double>(k16, 1).param_count() == want);
}

TEST_CASE("config: published configuration is constructible and shape-audited", "[model]") {
    ModelConfig cfg;  // F=256, L=48, 0.4 m grids, 64x2048 range image
    cfg.validate();
    CHECK(cfg.feature_width == 256);
    CHECK(cfg.layer_count == 48);
    CHECK(cfg.grid_xy.resolution == 0.4);
    auto params = init_params<float>(cfg, 3);
    CHECK(params.param_count() == expected_param_count(cfg));

    ModelConfig reduced = cfg;  // the L=12 variant
    reduced.layer_count = 12;
    reduced.validate();
    auto params12 = init_params<float>(reduced, 3);
    CHECK(params12.param_count() == expected_param_count(reduced));
}

TEST_CASE("forward: neighbor dropout keeps the self slot and stays deterministic", "[model]") {
    Rng rng(209);
    auto cloud = testutil::random_cloud(rng, 60, 6.0, 2.0);
    auto cfg = small_config(8, 1, 4);
    cfg.neighbor_dropout_p = 0.5;
    auto params = init_params<double>(cfg, 13);
    auto ctx = prepare_context(cloud, cfg);

    Rng d1(99), d2(99), d3(100);
    auto a = forward<double>(nullptr, cloud, ctx, params, cfg, Mode::train, &d1);
    auto b = forward<double>(nullptr, cloud, ctx, params, cfg, Mode::train, &d2);
    auto c = forward<double>(nullptr, cloud, ctx, params, cfg, Mode::train, &d3);
    CHECK(a->value.v == b->value.v);
    CHECK(a->value.v != c->value.v);
    CHECK_THROWS(forward<double>(nullptr, cloud, ctx, params, cfg, Mode::train, nullptr));
    // eval mode ignores dropout entirely
    auto e = forward<double>(nullptr, cloud, ctx, params, cfg, Mode::eval);
    for (auto v : e->value.v) REQUIRE(std::isfinite(v));
}

TEST_CASE("prepare_context: K larger than the cloud is an error", "[model]") {
    Rng rng(210);
    auto cloud = testutil::random_cloud(rng, 3);
    auto cfg = small_config(8, 1, 4);
    CHECK_THROWS(prepare_context(cloud, cfg));
}

TEST_CASE("relative-neighbor variant changes the embedding", "[model]") {
    Rng rng(211);
    auto cloud = testutil::random_cloud(rng, 50, 6.0, 2.0);
    auto cfg = small_config(8, 1, 4);
    auto params = init_params<double>(cfg, 14);
    auto ctx = prepare_context(cloud, cfg);
    auto x0 = make_var<double>(raw_features<double>(cloud));
    auto base = embed<double>(nullptr, x0, ctx, params.embed, cfg, Mode::eval);
    ModelConfig rel = cfg;
    rel.relative_neighbors = true;
    auto relative = embed<double>(nullptr, x0, ctx, params.embed, rel, Mode::eval);
    CHECK(max_abs_diff(base.neighbor_embedding->value, relative.neighbor_embedding->value) > 1e-8);
}
