#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "pcseg/autodiff.hpp"
#include "testutil.hpp"

using namespace pcseg;
using testutil::random_tensor;

namespace {

using TD = TensorData<double>;
using VD = Var<double>;

VD var(TD t) { return make_var<double>(std::move(t)); }

}  // namespace

TEST_CASE("conv1d_pointwise: identity weights pass the input through", "[tensor]") {
    Rng rng(1);
    auto x = random_tensor<double>(rng, {3, 6});
    TD w({3, 3});
    for (int i = 0; i < 3; ++i) w.at(i, i) = 1.0;
    TD b({3});
    auto out = conv1d_pointwise<double>(nullptr, var(x), var(w), var(b));
    CHECK(max_abs_diff(out->value, x) == 0.0);
}

TEST_CASE("conv1d_pointwise: zero input broadcasts the bias", "[tensor]") {
    TD x({4, 7});
    Rng rng(2);
    auto w = random_tensor<double>(rng, {3, 4});
    auto b = random_tensor<double>(rng, {3});
    auto out = conv1d_pointwise<double>(nullptr, var(x), var(w), var(b));
    for (int o = 0; o < 3; ++o)
        for (int n = 0; n < 7; ++n) CHECK(out->value.at(o, n) == b.at(o));
}

TEST_CASE("conv1d_pointwise: random case matches the triple-loop oracle", "[tensor]") {
    Rng rng(3);
    auto x = random_tensor<double>(rng, {4, 7});
    auto w = random_tensor<double>(rng, {3, 4});
    auto b = random_tensor<double>(rng, {3});
    auto out = conv1d_pointwise<double>(nullptr, var(x), var(w), var(b));
    for (int o = 0; o < 3; ++o)
        for (int n = 0; n < 7; ++n) {
            double acc = b.at(o);
            for (int i = 0; i < 4; ++i) acc += w.at(o, i) * x.at(i, n);
            CHECK(std::abs(out->value.at(o, n) - acc) < 1e-12);
        }
}

TEST_CASE("conv1d_pointwise: shape mismatch names the dimensions", "[tensor]") {
    Rng rng(4);
    auto x = random_tensor<double>(rng, {4, 7});
    auto w = random_tensor<double>(rng, {3, 5});
    auto b = random_tensor<double>(rng, {3});
    try {
        conv1d_pointwise<double>(nullptr, var(x), var(w), var(b));
        FAIL("expected an error");
    } catch (const std::runtime_error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("5") != std::string::npos);
        CHECK(msg.find("4") != std::string::npos);
    }
}

TEST_CASE("conv1d_grouped: matches the loop oracle within groups", "[tensor]") {
    Rng rng(5);
    const int groups = 2, cin = 6, cout = 4, n = 9;
    auto x = random_tensor<double>(rng, {cin, n});
    auto w = random_tensor<double>(rng, {cout, cin / groups});
    auto b = random_tensor<double>(rng, {cout});
    auto out = conv1d_grouped<double>(nullptr, var(x), var(w), var(b), groups);
    const int gi = cin / groups, go = cout / groups;
    for (int o = 0; o < cout; ++o)
        for (int j = 0; j < n; ++j) {
            double acc = b.at(o);
            for (int i = 0; i < gi; ++i) acc += w.at(o, i) * x.at((o / go) * gi + i, j);
            CHECK(std::abs(out->value.at(o, j) - acc) < 1e-12);
        }
    CHECK_THROWS(conv1d_grouped<double>(nullptr, var(x), var(w), var(b), 4));
}

TEST_CASE("conv1d_depthwise: scalar per-channel map", "[tensor]") {
    TD x({1, 1});
    x.at(0, 0) = 3.0;
    TD w({1});
    w.at(0) = 2.0;
    TD b({1});
    b.at(0) = 1.0;
    auto out = conv1d_depthwise<double>(nullptr, var(x), var(w), var(b));
    CHECK(out->value.at(0, 0) == 7.0);

    Rng rng(6);
    auto xr = random_tensor<double>(rng, {3, 8});
    auto wr = random_tensor<double>(rng, {3});
    auto br = random_tensor<double>(rng, {3});
    auto o2 = conv1d_depthwise<double>(nullptr, var(xr), var(wr), var(br));
    for (int c = 0; c < 3; ++c)
        for (int j = 0; j < 8; ++j)
            CHECK(std::abs(o2->value.at(c, j) - (wr.at(c) * xr.at(c, j) + br.at(c))) < 1e-12);

    TD w1 = TD::full({3}, 1.0);
    TD b0({3});
    auto ident = conv1d_depthwise<double>(nullptr, var(xr), var(w1), var(b0));
    CHECK(max_abs_diff(ident->value, xr) == 0.0);
}

TEST_CASE("conv2d_depthwise: delta kernel is the identity", "[tensor]") {
    Rng rng(7);
    auto x = random_tensor<double>(rng, {2, 5, 4});
    TD w({2, 3, 3});
    w.at(0, 1, 1) = 1.0;
    w.at(1, 1, 1) = 1.0;
    TD b({2});
    auto out = conv2d_depthwise<double>(nullptr, var(x), var(w), var(b));
    CHECK(max_abs_diff(out->value, x) == 0.0);
}

TEST_CASE("conv2d_depthwise: all-ones kernel saturates interior cells", "[tensor]") {
    const double cval = 0.75, bval = 0.25;
    TD x = TD::full({1, 5, 5}, cval);
    TD w = TD::full({1, 3, 3}, 1.0);
    TD b = TD::full({1}, bval);
    auto out = conv2d_depthwise<double>(nullptr, var(x), var(w), var(b));
    for (int y = 1; y < 4; ++y)
        for (int xx = 1; xx < 4; ++xx)
            CHECK(out->value.at(0, y, xx) == Catch::Approx(9 * cval + bval));
    CHECK(out->value.at(0, 0, 0) == Catch::Approx(4 * cval + bval));  // corner sees 2x2
}

TEST_CASE("conv2d_depthwise: random case matches the naive loop oracle", "[tensor]") {
    Rng rng(8);
    auto x = random_tensor<double>(rng, {2, 5, 5});
    auto w = random_tensor<double>(rng, {2, 3, 3});
    auto b = random_tensor<double>(rng, {2});
    auto out = conv2d_depthwise<double>(nullptr, var(x), var(w), var(b));
    for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 5; ++y)
            for (int xx = 0; xx < 5; ++xx) {
                double acc = b.at(c);
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int sy = y + dy, sx = xx + dx;
                        if (sy < 0 || sy >= 5 || sx < 0 || sx >= 5) continue;
                        acc += w.at(c, dy + 1, dx + 1) * x.at(c, sy, sx);
                    }
                CHECK(std::abs(out->value.at(c, y, xx) - acc) < 1e-12);
            }
}

TEST_CASE("conv2d_depthwise: even kernels are rejected", "[tensor]") {
    Rng rng(9);
    auto x = random_tensor<double>(rng, {1, 4, 4});
    auto w = random_tensor<double>(rng, {1, 2, 2});
    auto b = random_tensor<double>(rng, {1});
    CHECK_THROWS(conv2d_depthwise<double>(nullptr, var(x), var(w), var(b)));
}

TEST_CASE("batchnorm: standardized input passes through near-identically", "[tensor]") {
    // Two channels, each already mean 0 / biased variance 1. The epsilon in the
    // denominator bounds the deviation by ~eps/2 * |x|.
    TD x({2, 4});
    const double vals[4] = {-1.0, 1.0, -1.0, 1.0};
    for (int c = 0; c < 2; ++c)
        for (int j = 0; j < 4; ++j) x.at(c, j) = vals[j];
    auto gamma = var(TD::full({2}, 1.0));
    auto beta = var(TD({2}));
    auto state = BnState<double>::make(2);
    auto out = batchnorm<double>(nullptr, var(x), gamma, beta, state, Mode::train);
    CHECK(max_abs_diff(out->value, x) < 1e-5);
}

TEST_CASE("batchnorm: constant channel collapses to beta", "[tensor]") {
    TD x = TD::full({1, 6}, 3.25);
    auto gamma = var(TD::full({1}, 2.0));
    auto beta = var(TD::full({1}, -0.5));
    auto state = BnState<double>::make(1);
    auto out = batchnorm<double>(nullptr, var(x), gamma, beta, state, Mode::train);
    for (int j = 0; j < 6; ++j) CHECK(out->value.at(0, j) == -0.5);
}

TEST_CASE("batchnorm: random case matches the formula oracle, stats update", "[tensor]") {
    Rng rng(10);
    auto x = random_tensor<double>(rng, {3, 50});
    auto gamma = random_tensor<double>(rng, {3}, 0.5, 1.5);
    auto beta = random_tensor<double>(rng, {3});
    auto state = BnState<double>::make(3);
    auto out = batchnorm<double>(nullptr, var(x), var(gamma), var(beta), state, Mode::train);
    for (int c = 0; c < 3; ++c) {
        double mean = 0;
        for (int j = 0; j < 50; ++j) mean += x.at(c, j);
        mean /= 50;
        double variance = 0;
        for (int j = 0; j < 50; ++j) variance += (x.at(c, j) - mean) * (x.at(c, j) - mean);
        variance /= 50;
        for (int j = 0; j < 50; ++j) {
            const double want =
                gamma.at(c) * (x.at(c, j) - mean) / std::sqrt(variance + kBnEpsilon) + beta.at(c);
            REQUIRE(std::abs(out->value.at(c, j) - want) < 1e-10);
        }
        CHECK(state.running_mean.at(c) == Catch::Approx(0.01 * mean).margin(1e-12));
        CHECK(state.running_var.at(c) == Catch::Approx(0.99 + 0.01 * variance).margin(1e-12));
    }
}

TEST_CASE("batchnorm: eval mode standardizes with the stored statistics", "[tensor]") {
    Rng rng(11);
    auto x = random_tensor<double>(rng, {2, 5});
    auto gamma = random_tensor<double>(rng, {2}, 0.5, 1.5);
    auto beta = random_tensor<double>(rng, {2});
    auto state = BnState<double>::make(2);
    state.running_mean.at(0) = 0.3;
    state.running_mean.at(1) = -0.7;
    state.running_var.at(0) = 2.0;
    state.running_var.at(1) = 0.5;
    auto out = batchnorm<double>(nullptr, var(x), var(gamma), var(beta), state, Mode::eval);
    for (int c = 0; c < 2; ++c)
        for (int j = 0; j < 5; ++j) {
            const double want = gamma.at(c) * (x.at(c, j) - state.running_mean.at(c)) /
                                    std::sqrt(state.running_var.at(c) + kBnEpsilon) +
                                beta.at(c);
            REQUIRE(std::abs(out->value.at(c, j) - want) < 1e-12);
        }
}

TEST_CASE("batchnorm: empty batch axis is an error", "[tensor]") {
    TD x({2, 0});
    auto gamma = var(TD::full({2}, 1.0));
    auto beta = var(TD({2}));
    auto state = BnState<double>::make(2);
    CHECK_THROWS(batchnorm<double>(nullptr, var(x), gamma, beta, state, Mode::train));
}

TEST_CASE("max_over_k: K=1 is the identity", "[tensor]") {
    Rng rng(12);
    auto x = random_tensor<double>(rng, {3, 7});
    auto out = max_over_k<double>(nullptr, var(x), 1);
    CHECK(max_abs_diff(out->value, x) == 0.0);
}

TEST_CASE("max_over_k: a dominant slice wins everywhere", "[tensor]") {
    // K=3 slices of [C=2, N=4]; slice 1 dominates.
    const int k = 3, n = 4, c = 2;
    TD x({c, k * n});
    Rng rng(13);
    for (auto& v : x.v) v = rng.uniform(-1, 1);
    for (int ch = 0; ch < c; ++ch)
        for (int j = 0; j < n; ++j) x.at(ch, 1 * n + j) = 5.0 + j + ch;
    auto out = max_over_k<double>(nullptr, var(x), k);
    for (int ch = 0; ch < c; ++ch)
        for (int j = 0; j < n; ++j) CHECK(out->value.at(ch, j) == 5.0 + j + ch);
}

TEST_CASE("max_over_k: random case matches the loop oracle", "[tensor]") {
    const int k = 5, n = 4, c = 3;
    Rng rng(14);
    auto x = random_tensor<double>(rng, {c, k * n});
    auto out = max_over_k<double>(nullptr, var(x), k);
    for (int ch = 0; ch < c; ++ch)
        for (int j = 0; j < n; ++j) {
            double best = -1e300;
            for (int kk = 0; kk < k; ++kk) best = std::max(best, x.at(ch, kk * n + j));
            CHECK(out->value.at(ch, j) == best);
        }
}

TEST_CASE("max_over_k: tie routes gradient to the first slot only", "[tensor]") {
    const int k = 3, n = 2, c = 1;
    TD x({c, k * n});
    for (auto& v : x.v) v = 2.0;  // all slots tie
    auto xv = make_var<double>(x, /*requires_grad=*/true);
    Tape<double> tape;
    auto out = max_over_k<double>(&tape, xv, k);
    auto wref = std::make_shared<const TD>(TD::full({c, n}, 1.0));
    auto loss = weighted_sum<double>(&tape, out, wref);
    tape.backward(loss);
    for (int j = 0; j < n; ++j) {
        CHECK(xv->grad.at(0, 0 * n + j) == 1.0);
        CHECK(xv->grad.at(0, 1 * n + j) == 0.0);
        CHECK(xv->grad.at(0, 2 * n + j) == 0.0);
    }
}

TEST_CASE("softmax_crossentropy: uniform logits cost ln C", "[tensor]") {
    TD logits = TD::full({4, 6}, 0.37);
    auto targets = std::make_shared<const std::vector<std::int32_t>>(std::vector<std::int32_t>{0, 1, 2, 3, 0, 1});
    auto loss = softmax_crossentropy<double>(nullptr, var(logits), targets, -1);
    CHECK(loss->value.v[0] == Catch::Approx(std::log(4.0)).margin(1e-12));
}

TEST_CASE("softmax_crossentropy: loss shrinks as the true-class margin grows", "[tensor]") {
    auto loss_at = [&](double margin) {
        TD logits({3, 1});
        logits.at(0, 0) = margin;
        auto targets = std::make_shared<const std::vector<std::int32_t>>(std::vector<std::int32_t>{0});
        return softmax_crossentropy<double>(nullptr, var(logits), targets, -1)->value.v[0];
    };
    const double l1 = loss_at(1.0), l10 = loss_at(10.0);
    CHECK(l10 < l1);
    CHECK(l10 < 1e-3);
}

TEST_CASE("softmax_crossentropy: random case matches the formula oracle", "[tensor]") {
    Rng rng(15);
    auto logits = random_tensor<double>(rng, {5, 20}, -3.0, 3.0);
    std::vector<std::int32_t> t(20);
    for (auto& v : t) v = static_cast<std::int32_t>(rng.uniform_int(0, 4));
    t[3] = 2;  // make sure the ignore class appears
    const std::int32_t ignore = 2;
    auto targets = std::make_shared<const std::vector<std::int32_t>>(t);
    auto loss = softmax_crossentropy<double>(nullptr, var(logits), targets, ignore);

    double want = 0;
    int counted = 0;
    for (int j = 0; j < 20; ++j) {
        if (t[static_cast<std::size_t>(j)] == ignore) continue;
        double mx = -1e300;
        for (int c = 0; c < 5; ++c) mx = std::max(mx, logits.at(c, j));
        double lse = 0;
        for (int c = 0; c < 5; ++c) lse += std::exp(logits.at(c, j) - mx);
        lse = mx + std::log(lse);
        want += lse - logits.at(t[static_cast<std::size_t>(j)], j);
        ++counted;
    }
    want /= counted;
    CHECK(loss->value.v[0] == Catch::Approx(want).margin(1e-10));
}

TEST_CASE("softmax_crossentropy: all-ignored batch is an error", "[tensor]") {
    TD logits({3, 2});
    auto targets = std::make_shared<const std::vector<std::int32_t>>(std::vector<std::int32_t>{1, 1});
    CHECK_THROWS(softmax_crossentropy<double>(nullptr, var(logits), targets, 1));
}

TEST_CASE("softmax columns sum to one", "[tensor]") {
    Rng rng(16);
    auto logits = random_tensor<double>(rng, {7, 40}, -5.0, 5.0);
    auto probs = softmax_columns(logits);
    for (int j = 0; j < 40; ++j) {
        double s = 0;
        for (int c = 0; c < 7; ++c) s += probs.at(c, j);
        REQUIRE(std::abs(s - 1.0) < 1e-12);
    }
}

TEST_CASE("layout ops: transpose, chw round trip, concat, gather", "[tensor]") {
    Rng rng(17);
    auto x = random_tensor<double>(rng, {3, 5});
    auto xt = transpose2d<double>(nullptr, var(x));
    REQUIRE(xt->value.shape == Shape{5, 3});
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 5; ++j) CHECK(xt->value.at(j, i) == x.at(i, j));

    auto grid = random_tensor<double>(rng, {6, 4});  // HW=6 (2x3), C=4
    auto chw = to_chw<double>(nullptr, var(grid), 2, 3);
    REQUIRE(chw->value.shape == Shape{4, 2, 3});
    auto back = from_chw<double>(nullptr, chw);
    CHECK(max_abs_diff(back->value, grid) == 0.0);

    auto a = random_tensor<double>(rng, {2, 4});
    auto b = random_tensor<double>(rng, {3, 4});
    auto cat = concat_rows<double>(nullptr, var(a), var(b));
    REQUIRE(cat->value.shape == Shape{5, 4});
    CHECK(cat->value.at(0, 0) == a.at(0, 0));
    CHECK(cat->value.at(2, 1) == b.at(0, 1));

    auto idx = std::make_shared<const std::vector<std::int64_t>>(std::vector<std::int64_t>{3, 0, 3});
    auto picked = gather_columns<double>(nullptr, var(a), idx);
    REQUIRE(picked->value.shape == Shape{2, 3});
    CHECK(picked->value.at(0, 0) == a.at(0, 3));
    CHECK(picked->value.at(1, 1) == a.at(1, 0));
    CHECK(picked->value.at(0, 2) == a.at(0, 3));

    auto bad = std::make_shared<const std::vector<std::int64_t>>(std::vector<std::int64_t>{4});
    CHECK_THROWS(gather_columns<double>(nullptr, var(a), bad));
}

TEST_CASE("mask_slots: masked entries lose to any real value in a following max", "[tensor]") {
    TD x = TD::full({1, 4}, -100.0);  // K=2, N=2
    auto keep = std::make_shared<const std::vector<std::uint8_t>>(std::vector<std::uint8_t>{1, 1, 0, 0});
    auto masked = mask_slots<double>(nullptr, var(x), keep);
    auto pooled = max_over_k<double>(nullptr, masked, 2);
    CHECK(pooled->value.at(0, 0) == -100.0);
    CHECK(pooled->value.at(0, 1) == -100.0);
}
