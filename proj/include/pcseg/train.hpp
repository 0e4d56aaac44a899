#pragma once

#include <cmath>
#include <cstdint>
#include <thread>
#include <vector>

#include "pcseg/metrics.hpp"
#include "pcseg/model.hpp"
#include "pcseg/preprocess.hpp"

namespace pcseg {

// Adaptive moments with decoupled weight decay and an optional cosine decay
// of the learning rate over `cosine_steps`.
struct OptimConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    std::int64_t cosine_steps = 0;  // 0 disables the schedule

    double lr_at(std::int64_t step) const {
        if (cosine_steps <= 0) return lr;
        const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(cosine_steps));
        return lr * 0.5 * (1.0 + std::cos(M_PI * t));
    }
};

// First/second moment buffers in parameter visitation order.
template <class S>
struct OptimState {
    std::int64_t step = 0;
    std::vector<TensorData<double>> m, v;

    template <class ParamsT>
    static OptimState init(ParamsT& params) {
        OptimState s;
        params.visit_trainable([&](const char*, Var<S>& p) {
            s.m.emplace_back(p->value.shape);
            s.v.emplace_back(p->value.shape);
        });
        return s;
    }
};

template <class S>
void adamw_step(ModelParams<S>& params, OptimState<S>& state, const OptimConfig& oc) {
    const double lr = oc.lr_at(state.step);
    ++state.step;
    const double bc1 = 1.0 - std::pow(oc.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(oc.beta2, static_cast<double>(state.step));
    std::size_t slot = 0;
    params.visit_trainable([&](const char* name, Var<S>& p) {
        PCSEG_CHECK(slot < state.m.size(), "optimizer state out of sync at " << name);
        auto& m = state.m[slot];
        auto& v = state.v[slot];
        PCSEG_CHECK(m.numel() == p->value.numel(), "optimizer buffer shape drifted at " << name);
        ++slot;
        if (!p->requires_grad) return;
        for (std::int64_t i = 0; i < p->value.numel(); ++i) {
            const double g = static_cast<double>(p->grad.v[static_cast<std::size_t>(i)]);
            double& mi = m.v[static_cast<std::size_t>(i)];
            double& vi = v.v[static_cast<std::size_t>(i)];
            mi = oc.beta1 * mi + (1.0 - oc.beta1) * g;
            vi = oc.beta2 * vi + (1.0 - oc.beta2) * g * g;
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            const double pv = static_cast<double>(p->value.v[static_cast<std::size_t>(i)]);
            p->value.v[static_cast<std::size_t>(i)] =
                static_cast<S>(pv - lr * (mhat / (std::sqrt(vhat) + oc.eps) + oc.weight_decay * pv));
        }
    });
}

// One forward/backward/update on a labeled cloud. A non-finite loss halts the
// run; the step index and seed pin the dropout stream.
template <class S>
double train_step(ModelParams<S>& params, OptimState<S>& state, const PointCloud& cloud,
                  const ForwardContext& ctx, const ModelConfig& cfg, const OptimConfig& oc,
                  std::uint64_t seed) {
    PCSEG_CHECK(cloud.has_labels(), "train_step needs a labeled cloud");
    params.zero_grad();
    Tape<S> tape;
    Rng dropout_rng(seed ^ (0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(state.step + 1)));
    auto logits = forward<S>(&tape, cloud, ctx, params, cfg, Mode::train, &dropout_rng);
    auto targets = std::make_shared<const std::vector<std::int32_t>>(cloud.labels);
    auto loss = softmax_crossentropy(&tape, logits, targets, cfg.ignore_class);
    const double loss_v = static_cast<double>(loss->value.v[0]);
    PCSEG_CHECK(std::isfinite(loss_v), "non-finite loss " << loss_v << " at step " << state.step
                                                          << "; halting");
    tape.backward(loss);
    adamw_step(params, state, oc);
    return loss_v;
}

struct EvalResult {
    ConfusionMatrix cm;
    IouReport report;
};

// Full-resolution evaluation: each cloud is voxel-downsampled for the forward
// pass and the predictions are broadcast back through the voxel map before
// scoring. Clouds are scored in parallel and merged in index order.
template <class S>
EvalResult evaluate(ModelParams<S>& params, const ModelConfig& cfg,
                    const std::vector<PointCloud>& clouds, double voxel_size) {
    PCSEG_CHECK(!clouds.empty(), "evaluate: no clouds");
    std::vector<ConfusionMatrix> partial(clouds.size(), ConfusionMatrix(cfg.class_count, cfg.ignore_class));
    parallel_for(
        static_cast<std::int64_t>(clouds.size()),
        [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t i = lo; i < hi; ++i) {
                const PointCloud& full = clouds[static_cast<std::size_t>(i)];
                PCSEG_CHECK(full.has_labels(), "evaluate: cloud " << i << " is unlabeled");
                VoxelResult vr = voxel_downsample(full, voxel_size);
                ForwardContext ctx = prepare_context(vr.cloud, cfg);
                auto logits = forward<S>(nullptr, vr.cloud, ctx, params, cfg, Mode::eval);
                auto reduced_pred = predict_labels(logits->value, cfg.ignore_class);
                for (std::size_t p = 0; p < full.size(); ++p)
                    partial[static_cast<std::size_t>(i)].add(
                        full.labels[p], reduced_pred[static_cast<std::size_t>(vr.backmap[p])]);
            }
        },
        1);
    ConfusionMatrix cm(cfg.class_count, cfg.ignore_class);
    for (const auto& p : partial) cm.merge(p);
    IouReport report = iou_per_class(cm);
    return {cm, report};
}

// Accuracy over non-ignored points of one labeled cloud (overfit probes).
template <class S>
double point_accuracy(ModelParams<S>& params, const ModelConfig& cfg, const PointCloud& cloud) {
    ForwardContext ctx = prepare_context(cloud, cfg);
    auto logits = forward<S>(nullptr, cloud, ctx, params, cfg, Mode::eval);
    auto pred = predict_labels(logits->value, cfg.ignore_class);
    std::int64_t hit = 0, counted = 0;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        if (cloud.labels[i] == cfg.ignore_class) continue;
        ++counted;
        if (pred[i] == cloud.labels[i]) ++hit;
    }
    PCSEG_CHECK(counted > 0, "point_accuracy: every point is ignored");
    return static_cast<double>(hit) / static_cast<double>(counted);
}

}  // namespace pcseg
