#include <catch2/catch_amalgamated.hpp>

#include "pcseg/pcseg.hpp"

// Instantiates both numeric profiles so template errors surface early.
TEST_CASE("library compiles and runs a tiny forward in both profiles", "[smoke]") {
    auto scenes = pcseg::make_toy_dataset(/*seed=*/3, /*n_scenes=*/1, 120, 150);
    auto cfg = pcseg::make_toy_model_config(8, 2);
    cfg.neighbors = 4;

    auto run = [&]<class S>() {
        auto params = pcseg::init_params<S>(cfg, 1);
        auto ctx = pcseg::prepare_context(scenes[0], cfg);
        auto logits = pcseg::forward<S>(nullptr, scenes[0], ctx, params, cfg, pcseg::Mode::eval);
        REQUIRE(logits->value.dim(0) == cfg.class_count);
        REQUIRE(logits->value.dim(1) == static_cast<std::int64_t>(scenes[0].size()));
    };
    run.template operator()<double>();
    run.template operator()<float>();
}
